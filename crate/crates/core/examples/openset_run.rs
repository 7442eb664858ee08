//! Train on the default synthetic set and print open-set metrics.
//!
//! `cargo run --release -p osr-ebm --example openset_run -- [seed] [epochs]`

use std::time::Instant;

use osr_ebm::eval::{evaluate_report, ScoreKind, ScoreReport};
use osr_ebm::synthdata::{build_openset_data, Difficulty, SynthConfig};
use osr_ebm::trainer::{train, TrainConfig, TrainData};
use osr_ebm::Execution;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(0);
    let data = build_openset_data(&SynthConfig {
        seed,
        ..Default::default()
    })?;
    let mut cfg = TrainConfig {
        seed,
        ..Default::default()
    };
    if let Some(e) = args.get(2) {
        cfg.epochs = e.parse()?;
    }
    let train_data = TrainData::from_samples(&data.train, data.known_count())?;
    let started = Instant::now();
    let run = train(&cfg, &train_data, Execution::Parallel)?;
    let report = ScoreReport::from_model(
        &run.checkpoint.model,
        &data.known_test,
        &data.unknown,
        |l| data.difficulty_of_label(l),
    )?;
    let metrics = evaluate_report(&report, Execution::Parallel)?;
    print!("{}", metrics.to_text());
    for d in Difficulty::ALL {
        let m = metrics.get(d, ScoreKind::MaxJointEnergy).unwrap();
        println!("{d}: {:.4}", m.auroc);
    }
    if let Some(last) = run.log.records.last() {
        println!(
            "last epoch: cls {:.4} recon {:?} ebm {:?}",
            last.cls, last.recon, last.ebm
        );
    }
    println!("elapsed {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}
