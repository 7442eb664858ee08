//! Dense numeric core: matrices, seeded randomness, a reverse-mode tape,
//! small tanh networks, gradient checking and the optimizer.

mod gradcheck;
mod matrix;
mod mlp;
mod optim;
mod params;
mod reduce;
mod rng;
mod tape;

pub use gradcheck::{
    analytic_gradients, compare_gradients, finite_diff_check, GradReport, REL_FLOOR,
};
pub use matrix::DenseMatrix;
pub use mlp::{mlp_forward, Mlp};
pub use optim::AdamW;
pub use params::{Param, ParamStore};
pub use reduce::{argmax, logsumexp, softmax};
pub use rng::{Rng, Stream};
pub use tape::{Gradients, Tape, Var, BCE_CLAMP, LOG_FLOOR};
