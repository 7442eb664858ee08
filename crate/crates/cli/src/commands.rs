use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use osr_ebm::ablation::{run_ablation, tabulate};
use osr_ebm::eval::{
    accuracy, evaluate_report, frechet_feature_distance, generate, sample_latents,
    score_histogram_svg, SampleMode, ScoreKind, ScoreReport,
};
use osr_ebm::numkit::{DenseMatrix, Rng};
use osr_ebm::synthdata::{
    build_openset_data, load_csv, write_csv, DataManifest, LabeledSample, SynthConfig,
};
use osr_ebm::trainer::{
    init_checkpoint, load_checkpoint, resume, save_checkpoint, TrainConfig, TrainData, TrainError,
};
use osr_ebm::Execution;

use crate::args::{AblateArgs, EvalArgs, SampleArgs, SynthArgs, TrainArgs};
use crate::error::{io_err, CliError, CliResult};
use crate::manifest::ManifestBuilder;

pub struct Ctx {
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub quiet: bool,
    pub exec: Execution,
}

impl Ctx {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn out_dir(&self) -> CliResult<&Path> {
        fs::create_dir_all(&self.out).map_err(io_err(&self.out))?;
        Ok(&self.out)
    }

    fn manifest(&self, command: &str) -> CliResult<ManifestBuilder> {
        let mut m = ManifestBuilder::new(command, self.out_dir()?);
        if let Some(c) = &self.config {
            m.config(c)?;
        }
        Ok(m)
    }

    /// Config file (or defaults) with the global seed applied.
    fn train_config(&self) -> CliResult<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(io_err(path))?;
                TrainConfig::from_toml(&text)?
            }
            None => TrainConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

/// `explicit`, else `<data>/<name>`; the file has to exist.
fn input_path(
    explicit: &Option<PathBuf>,
    data: &Option<PathBuf>,
    name: &str,
    flag: &str,
) -> CliResult<PathBuf> {
    let path = match (explicit, data) {
        (Some(p), _) => p.clone(),
        (None, Some(d)) => d.join(name),
        (None, None) => return Err(CliError::usage(format!("need --{flag} or --data"))),
    };
    if !path.is_file() {
        return Err(CliError::usage(format!(
            "input file {} does not exist",
            path.display()
        )));
    }
    Ok(path)
}

fn existing(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::usage(format!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}

fn load_data_manifest(path: &Path) -> CliResult<DataManifest> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(DataManifest::from_toml(&text)?)
}

fn features(samples: &[LabeledSample], width: usize, what: &str) -> CliResult<DenseMatrix> {
    if samples.is_empty() {
        return Err(CliError::usage(format!("{what} has no rows")));
    }
    if let Some(s) = samples.iter().find(|s| s.x.len() != width) {
        return Err(CliError::usage(format!(
            "{what} rows have {} features, expected {width}",
            s.x.len()
        )));
    }
    Ok(DenseMatrix::from_rows(
        &samples.iter().map(|s| s.x.as_slice()).collect::<Vec<_>>(),
    )?)
}

fn features_csv(m: &DenseMatrix) -> String {
    let mut out = (0..m.cols())
        .map(|i| format!("f{i}"))
        .collect::<Vec<_>>()
        .join(",");
    out.push('\n');
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn gen_data(ctx: &Ctx, args: &SynthArgs) -> CliResult<()> {
    let cfg = args.apply(SynthConfig {
        seed: ctx.seed(),
        ..Default::default()
    });
    if cfg.known > cfg.classes {
        return Err(CliError::usage(format!(
            "--known {} exceeds --classes {}",
            cfg.known, cfg.classes
        )));
    }
    let data = build_openset_data(&cfg)?;
    let mut m = ctx.manifest("gen-data")?;
    let out = ctx.out_dir()?.to_path_buf();
    for (name, set) in [
        ("train.csv", &data.train),
        ("known_test.csv", &data.known_test),
        ("unknown.csv", &data.unknown),
    ] {
        let path = out.join(name);
        write_csv(set, &path)?;
        m.output(&path);
    }
    let dm = data.manifest();
    let mut classes = String::from("label,class,role,difficulty,attributes\n");
    for (label, &c) in data.split.known.iter().enumerate() {
        let _ = writeln!(
            classes,
            "{label},{c},known,,{}",
            attr_bits(&data.bank.attrs[c])
        );
    }
    for (j, &c) in data.unknown_classes.iter().enumerate() {
        let label = data.known_count() + j;
        let d = dm.difficulty_of_label(label).map_or("", |d| d.as_str());
        let _ = writeln!(
            classes,
            "{label},{c},unknown,{d},{}",
            attr_bits(&data.bank.attrs[c])
        );
    }
    m.write("classes.csv", classes)?;
    m.write("dataset.toml", dm.to_toml()?)?;
    m.note("train_rows", data.train.len());
    m.note("known_test_rows", data.known_test.len());
    m.note("unknown_rows", data.unknown.len());
    m.finish(cfg.seed)?;
    ctx.say(format!(
        "wrote {} train, {} known-test and {} unknown samples to {}",
        data.train.len(),
        data.known_test.len(),
        data.unknown.len(),
        out.display()
    ));
    Ok(())
}

fn attr_bits(a: &[u8]) -> String {
    a.iter().map(|b| if *b == 1 { '1' } else { '0' }).collect()
}

pub fn train(ctx: &Ctx, args: &TrainArgs) -> CliResult<()> {
    let train_path = input_path(&args.train, &args.data, "train.csv", "train")?;
    let samples = load_csv(&train_path)?;
    let classes = match args
        .data
        .as_ref()
        .map(|d| d.join("dataset.toml"))
        .filter(|p| p.is_file())
    {
        Some(p) => load_data_manifest(&p)?.config.known,
        None => samples.iter().map(|s| s.y + 1).max().unwrap_or(0),
    };
    let data = TrainData::from_samples(&samples, classes)?;
    let mut m = ctx.manifest("train")?;
    m.input(&train_path)?;

    let ckpt = match &args.resume {
        Some(path) => {
            existing(path, "checkpoint")?;
            if args.overrides.changes_model() || ctx.config.is_some() {
                return Err(CliError::usage(
                    "a resumed run keeps its configuration; only --epochs may be given",
                ));
            }
            m.input(path)?;
            let mut ckpt = load_checkpoint(path)?;
            if let Some(e) = args.overrides.epochs {
                ckpt.config.epochs = e;
            }
            ckpt
        }
        None => {
            let cfg = args.overrides.apply(ctx.train_config()?);
            cfg.validate()?;
            init_checkpoint(&cfg, &data)?
        }
    };
    let seed = ckpt.config.seed;
    let out = ctx.out_dir()?.to_path_buf();
    match resume(ckpt, &data, args.stop_at, ctx.exec) {
        Ok(run) => {
            let path = out.join("checkpoint.bin");
            save_checkpoint(&run.checkpoint, &path)?;
            m.output(&path);
            m.write("train_log.csv", run.log.to_csv())?;
            m.write("config.toml", run.checkpoint.config.to_toml()?)?;
            let report = ScoreReport::from_model(&run.checkpoint.model, &samples, &[], |_| None)?;
            let acc = accuracy(&report)?;
            m.note("epochs_completed", run.checkpoint.epoch);
            m.note("train_acc", acc);
            m.finish(seed)?;
            for r in &run.log.records {
                ctx.say(format!(
                    "epoch {:>3}  cls {:.4}  recon {}",
                    r.epoch,
                    r.cls,
                    r.recon.map_or("-".into(), |v| format!("{v:.4}"))
                ));
            }
            ctx.say(format!(
                "train accuracy {acc:.4}; checkpoint {}",
                path.display()
            ));
            Ok(())
        }
        Err(TrainError::Diverged { message, partial }) => {
            let path = out.join("partial.ckpt");
            save_checkpoint(&partial, &path)?;
            m.output(&path);
            m.note("diverged", &message);
            m.finish(seed)?;
            Err(CliError::Diverged {
                message,
                partial: path,
            })
        }
        Err(TrainError::Other(e)) => Err(e.into()),
    }
}

pub fn eval(ctx: &Ctx, args: &EvalArgs) -> CliResult<()> {
    existing(&args.checkpoint, "checkpoint")?;
    let known_path = input_path(&args.known_test, &args.data, "known_test.csv", "known-test")?;
    let unknown_path = input_path(&args.unknown, &args.data, "unknown.csv", "unknown")?;
    let dataset_path = input_path(&args.dataset, &args.data, "dataset.toml", "dataset")?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let dm = load_data_manifest(&dataset_path)?;
    let known = load_csv(&known_path)?;
    let unknown = load_csv(&unknown_path)?;
    let dims = ckpt.model.dims;
    features(&known, dims.input, "known-test set")?;
    features(&unknown, dims.input, "unknown set")?;
    if let Some(s) = known.iter().find(|s| s.y >= dims.classes) {
        return Err(CliError::usage(format!(
            "known-test label {} but the model has {} classes",
            s.y, dims.classes
        )));
    }
    if let Some(s) = unknown
        .iter()
        .find(|s| dm.difficulty_of_label(s.y).is_none())
    {
        return Err(CliError::usage(format!(
            "unknown label {} has no difficulty group in {}",
            s.y,
            dataset_path.display()
        )));
    }

    let mut m = ctx.manifest("eval")?;
    for p in [&args.checkpoint, &known_path, &unknown_path, &dataset_path] {
        m.input(p)?;
    }
    let report =
        ScoreReport::from_model(&ckpt.model, &known, &unknown, |l| dm.difficulty_of_label(l))?;
    let metrics = evaluate_report(&report, ctx.exec)?;
    m.write("scores.csv", report.to_csv())?;
    m.write("metrics.txt", metrics.to_text())?;
    m.write("metrics.toml", metrics.to_toml()?)?;
    for kind in ScoreKind::ALL {
        m.write(
            &format!("hist_{}.svg", kind.as_str()),
            score_histogram_svg(&report, kind),
        )?;
    }
    m.note("acc", metrics.acc);
    m.finish(ctx.seed())?;
    ctx.say(metrics.to_text());
    Ok(())
}

pub fn sample(ctx: &Ctx, args: &SampleArgs) -> CliResult<()> {
    existing(&args.checkpoint, "checkpoint")?;
    let mode: SampleMode = args.mode.into();
    match (mode, &args.input) {
        (SampleMode::Posterior, None) => {
            return Err(CliError::usage("--mode posterior needs --input"))
        }
        (SampleMode::Random | SampleMode::Prior, Some(_)) => {
            return Err(CliError::usage(format!(
                "--input only applies to --mode posterior, not {}",
                mode.as_str()
            )))
        }
        _ => {}
    }
    if args.n == 0 {
        return Err(CliError::usage("--n must be positive"));
    }
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let model = &ckpt.model;
    let mut m = ctx.manifest("sample")?;
    m.input(&args.checkpoint)?;
    let x = match &args.input {
        Some(p) => {
            existing(p, "input")?;
            m.input(p)?;
            Some(features(&load_csv(p)?, model.dims.input, "input set")?)
        }
        None => None,
    };
    let reference = match &args.reference {
        Some(p) => {
            existing(p, "reference")?;
            m.input(p)?;
            Some(features(&load_csv(p)?, model.dims.input, "reference set")?)
        }
        None => None,
    };
    let mut rng = Rng::new(ctx.seed());
    let z = sample_latents(
        model,
        mode,
        args.n,
        &mut rng,
        x.as_ref(),
        &ckpt.config.sgld,
        ctx.exec,
    )?;
    let generated = generate(model, &z)?;
    m.write("samples.csv", features_csv(&generated))?;
    if let Some(r) = reference {
        let ffd = frechet_feature_distance(&r, &generated)?;
        m.write(
            "ffd.toml",
            format!(
                "mode = \"{}\"\nn = {}\nffd = {ffd:e}\n",
                mode.as_str(),
                args.n
            ),
        )?;
        m.note("ffd", ffd);
        ctx.say(format!("FFD ({} vs reference): {ffd:.6}", mode.as_str()));
    }
    m.finish(ctx.seed())?;
    ctx.say(format!("wrote {} samples", generated.rows()));
    Ok(())
}

pub fn ablate(ctx: &Ctx, args: &AblateArgs) -> CliResult<()> {
    if args.seeds == 0 {
        return Err(CliError::usage("--seeds must be positive"));
    }
    let base = args.overrides.apply(ctx.train_config()?);
    base.validate()?;
    let synth = args.synth.apply(SynthConfig::default());
    let first = ctx.seed();
    let seeds: Vec<u64> = (first..first + args.seeds).collect();
    let mut m = ctx.manifest("ablate")?;
    let results = run_ablation(&base, &synth, &seeds, ctx.exec).map_err(|e| match e {
        TrainError::Diverged { message, .. } => CliError::Core(osr_ebm::Error::Divergence(message)),
        TrainError::Other(e) => e.into(),
    })?;
    let table = tabulate(&results, ScoreKind::MaxJointEnergy);
    let mut per_seed = String::from("variant,seed,acc,split,auroc,aupr,oscr\n");
    for r in &results {
        for s in r
            .metrics
            .splits
            .iter()
            .filter(|s| s.kind == ScoreKind::MaxJointEnergy)
        {
            let _ = writeln!(
                per_seed,
                "{},{},{:.6},{},{:.6},{:.6},{:.6}",
                r.variant, r.seed, r.metrics.acc, s.split, s.auroc, s.aupr, s.oscr
            );
        }
    }
    m.write("ablation.csv", table.to_csv())?;
    m.write("ablation.txt", table.to_text())?;
    m.write("ablation_seeds.csv", per_seed)?;
    m.write("config.toml", base.to_toml()?)?;
    m.note("seeds", format!("{seeds:?}"));
    m.finish(first)?;
    ctx.say(table.to_text());
    Ok(())
}
