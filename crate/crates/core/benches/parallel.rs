use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use osr_ebm::ablation::run_ablation;
use osr_ebm::ebm::{sgld_sample, EnergyHead, SgldConfig};
use osr_ebm::eval::{evaluate_report, ScoreReport, ScoreRow, SplitTag};
use osr_ebm::numkit::{ParamStore, Rng};
use osr_ebm::synthdata::{Difficulty, SynthConfig};
use osr_ebm::trainer::TrainConfig;
use osr_ebm::Execution;

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn sgld(c: &mut Criterion) {
    let (latent, classes) = (32, 10);
    let head = EnergyHead::new(latent, classes).unwrap();
    let mut alpha = ParamStore::new("alpha");
    let mut rng = Rng::new(1);
    head.init(&mut alpha, &mut rng);
    let z0 = rng.normal_matrix(4096, latent);
    let cfg = SgldConfig {
        steps: 20,
        ..Default::default()
    };
    let mut g = c.benchmark_group("sgld_4096_chains");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| sgld_sample(&head, &alpha, &z0, &cfg, &mut Rng::new(2), exec).unwrap())
        });
    }
    g.finish();
}

fn metric_sweep(c: &mut Criterion) {
    let classes = 10;
    let mut rng = Rng::new(3);
    let mut rows = Vec::new();
    let splits = [
        SplitTag::KnownTest,
        SplitTag::Unknown(Difficulty::Easy),
        SplitTag::Unknown(Difficulty::Medium),
        SplitTag::Unknown(Difficulty::Hard),
    ];
    for i in 0..40_000 {
        let split = splits[i % 4];
        let label = i % classes;
        let mut logits: Vec<f64> = (0..classes).map(|_| rng.normal()).collect();
        if split == SplitTag::KnownTest {
            logits[label] += 2.0;
        }
        rows.push(ScoreRow::new(logits, label, split).unwrap());
    }
    let report = ScoreReport { classes, rows };
    let mut g = c.benchmark_group("metric_sweep_40k");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate_report(&report, exec).unwrap())
        });
    }
    g.finish();
}

fn multi_seed_training(c: &mut Criterion) {
    let synth = SynthConfig {
        classes: 8,
        known: 4,
        attrs: 8,
        dim: 12,
        per_class: 30,
        groups: 2,
        ..Default::default()
    };
    let mut cfg = TrainConfig {
        epochs: 3,
        t_gen: 1,
        t_uvos: 1,
        warmup_epochs: 1,
        restart_epochs: [1, 2],
        latent: 8,
        feat: 16,
        hidden: 16,
        ..Default::default()
    };
    cfg.sgld.steps = 10;
    let seeds = [0, 1];
    let mut g = c.benchmark_group("ablation_2_seeds");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run_ablation(&cfg, &synth, &seeds, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, sgld, metric_sweep, multi_seed_training);
criterion_main!(benches);
