//! Print the ablation table on the default synthetic set.
//!
//! `cargo run --release -p osr-ebm --example ablation_run -- [n_seeds]`

use osr_ebm::ablation::ablation_table;
use osr_ebm::synthdata::SynthConfig;
use osr_ebm::trainer::TrainConfig;
use osr_ebm::Execution;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let n: u64 = std::env::args()
        .nth(1)
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(5);
    let seeds: Vec<u64> = (0..n).collect();
    let table = ablation_table(
        &TrainConfig::default(),
        &SynthConfig::default(),
        &seeds,
        Execution::Parallel,
    )?;
    print!("{}", table.to_text());
    Ok(())
}
