pub mod ablation;
pub mod ebm;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod exec;
pub mod generator;
pub mod model;
pub mod numkit;
pub mod probmodel;
pub mod synthdata;
pub mod trainer;
pub mod uvos;

pub use error::{Error, Result};
pub use exec::Execution;
