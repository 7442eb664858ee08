//! Full model against variants with one component removed.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::{evaluate_report, MetricsBundle, ScoreKind, ScoreReport};
use crate::exec::Execution;
use crate::synthdata::{build_openset_data, Difficulty, SynthConfig};
use crate::trainer::{train, TrainConfig, TrainData, TrainError, TrainRun};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// Posterior computed from the global feature alone; no attribute loss.
    NoRafa,
    /// Entropy-contrast weight set to zero.
    NoAib,
    /// No density tracking and no outlier loss.
    NoUvos,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoRafa,
        Variant::NoAib,
        Variant::NoUvos,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoRafa => "wo_rafa",
            Variant::NoAib => "wo_aib",
            Variant::NoUvos => "wo_uvos",
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoRafa => cfg.use_rafa = false,
            Variant::NoAib => cfg.lambda2 = 0.0,
            Variant::NoUvos => {
                cfg.use_uvos = false;
                cfg.lambda1 = 0.0;
            }
        }
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Metrics of one training run.
#[derive(Debug, Clone)]
pub struct SeedResult {
    pub variant: Variant,
    pub seed: u64,
    pub metrics: MetricsBundle,
}

/// Train and evaluate `variant` on the synthetic set generated with `seed`.
pub fn run_variant(
    variant: Variant,
    base: &TrainConfig,
    synth: &SynthConfig,
    seed: u64,
    exec: Execution,
) -> std::result::Result<(TrainRun, SeedResult), TrainError> {
    let data = build_openset_data(&SynthConfig {
        seed,
        ..synth.clone()
    })?;
    let cfg = TrainConfig {
        seed,
        ..variant.apply(base)
    };
    let td = TrainData::from_samples(&data.train, data.known_count())?;
    let run = train(&cfg, &td, exec)?;
    let report = ScoreReport::from_model(
        &run.checkpoint.model,
        &data.known_test,
        &data.unknown,
        |l| data.difficulty_of_label(l),
    )?;
    let metrics = evaluate_report(&report, exec)?;
    Ok((
        run,
        SeedResult {
            variant,
            seed,
            metrics,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, sd }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub split: Difficulty,
    pub auroc: MeanSd,
    pub aupr: MeanSd,
    pub oscr: MeanSd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub kind: ScoreKind,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn get(&self, variant: Variant, split: Difficulty) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.split == split)
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("variant,split,auroc_mean,auroc_sd,aupr_mean,aupr_sd,oscr_mean,oscr_sd\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.variant,
                r.split,
                r.auroc.mean,
                r.auroc.sd,
                r.aupr.mean,
                r.aupr.sd,
                r.oscr.mean,
                r.oscr.sd
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("score: {}  seeds: {:?}\n", self.kind, self.seeds);
        let _ = writeln!(
            out,
            "{:<8} {:<7} {:>16} {:>16} {:>16}",
            "variant", "split", "AUROC", "AUPR", "OSCR"
        );
        for r in &self.rows {
            let f = |m: MeanSd| format!("{:.2}±{:.2}", 100.0 * m.mean, 100.0 * m.sd);
            let _ = writeln!(
                out,
                "{:<8} {:<7} {:>16} {:>16} {:>16}",
                r.variant.as_str(),
                r.split.as_str(),
                f(r.auroc),
                f(r.aupr),
                f(r.oscr)
            );
        }
        out
    }
}

/// Aggregate per-seed results into mean ± sd rows for every variant and split.
pub fn tabulate(results: &[SeedResult], kind: ScoreKind) -> AblationTable {
    let mut seeds: Vec<u64> = results.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut rows = Vec::new();
    for v in Variant::ALL {
        for d in Difficulty::ALL {
            let ms: Vec<_> = results
                .iter()
                .filter(|r| r.variant == v)
                .filter_map(|r| r.metrics.get(d, kind).copied())
                .collect();
            if ms.is_empty() {
                continue;
            }
            let col = |f: fn(&crate::eval::SplitMetrics) -> f64| {
                MeanSd::of(&ms.iter().map(f).collect::<Vec<_>>())
            };
            rows.push(AblationRow {
                variant: v,
                split: d,
                auroc: col(|m| m.auroc),
                aupr: col(|m| m.aupr),
                oscr: col(|m| m.oscr),
            });
        }
    }
    AblationTable { kind, seeds, rows }
}

/// Every variant on every seed; runs are independent work items.
pub fn run_ablation(
    base: &TrainConfig,
    synth: &SynthConfig,
    seeds: &[u64],
    exec: Execution,
) -> std::result::Result<Vec<SeedResult>, TrainError> {
    let jobs: Vec<(Variant, u64)> = Variant::ALL
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    exec.map_items(&jobs, |&(v, s)| {
        run_variant(v, base, synth, s, exec).map(|(_, r)| r)
    })
    .into_iter()
    .collect()
}

pub fn ablation_table(
    base: &TrainConfig,
    synth: &SynthConfig,
    seeds: &[u64],
    exec: Execution,
) -> Result<AblationTable> {
    let results = run_ablation(base, synth, seeds, exec).map_err(|e| match e {
        TrainError::Other(e) => e,
        TrainError::Diverged { message, .. } => crate::Error::Divergence(message),
    })?;
    Ok(tabulate(&results, ScoreKind::MaxJointEnergy))
}
