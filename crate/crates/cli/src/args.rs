use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use osr_ebm::eval::SampleMode;
use osr_ebm::synthdata::SynthConfig;
use osr_ebm::trainer::TrainConfig;

#[derive(Debug, Parser)]
#[command(
    name = "osr-ebm",
    version,
    about = "Latent energy-based open-set recognition on synthetic attribute data"
)]
pub struct Cli {
    /// Random seed (data generation, training, sampling).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,

    /// Training config file (TOML, keys as in TrainConfig).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Only print errors.
    #[arg(long, global = true)]
    pub quiet: bool,

    /// Run on one thread.
    #[arg(long, global = true)]
    pub sequential: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic open-set dataset.
    GenData(SynthArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Score known and unknown test sets and compute open-set metrics.
    Eval(EvalArgs),
    /// Decode latent samples into feature space.
    Sample(SampleArgs),
    /// Train the full model and its ablations over several seeds.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Args, Default)]
pub struct SynthArgs {
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub known: Option<usize>,
    #[arg(long)]
    pub attrs: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub groups: Option<usize>,
}

impl SynthArgs {
    pub fn apply(&self, mut cfg: SynthConfig) -> SynthConfig {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { cfg.$f = v; })* };
        }
        set!(classes, known, attrs, dim, per_class, noise, groups);
        cfg
    }
}

/// Command-line overrides of config-file values.
#[derive(Debug, Clone, Args, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub t_gen: Option<usize>,
    #[arg(long)]
    pub t_uvos: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub eta0: Option<f64>,
    #[arg(long)]
    pub eta1: Option<f64>,
    #[arg(long)]
    pub eta2: Option<f64>,
    #[arg(long)]
    pub eta3: Option<f64>,
    #[arg(long)]
    pub lambda0: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub uvos_samples: Option<usize>,
    #[arg(long)]
    pub latent: Option<usize>,
    #[arg(long)]
    pub feat: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub sgld_steps: Option<usize>,
    #[arg(long)]
    pub sgld_step_size: Option<f64>,
    /// Posterior from the global feature only.
    #[arg(long)]
    pub no_rafa: bool,
    /// No density tracking and no outlier loss.
    #[arg(long)]
    pub no_uvos: bool,
}

impl TrainOverrides {
    pub fn apply(&self, mut cfg: TrainConfig) -> TrainConfig {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { cfg.$f = v; })* };
        }
        set!(
            epochs,
            t_gen,
            t_uvos,
            batch_size,
            eta0,
            eta1,
            eta2,
            eta3,
            lambda0,
            lambda1,
            lambda2,
            uvos_samples,
            latent,
            feat,
            hidden
        );
        if let Some(v) = self.sgld_steps {
            cfg.sgld.steps = v;
        }
        if let Some(v) = self.sgld_step_size {
            cfg.sgld.step_size = v;
        }
        if self.no_rafa {
            cfg.use_rafa = false;
        }
        if self.no_uvos {
            cfg.use_uvos = false;
        }
        // a shortened run keeps its stage starts inside the run
        if self.epochs.is_some() {
            if self.t_gen.is_none() {
                cfg.t_gen = cfg.t_gen.min(cfg.epochs);
            }
            if self.t_uvos.is_none() {
                cfg.t_uvos = cfg.t_uvos.min(cfg.epochs);
            }
        }
        cfg
    }

    /// Whether anything besides `--epochs` was given.
    pub fn changes_model(&self) -> bool {
        let Self {
            epochs: _,
            t_gen,
            t_uvos,
            batch_size,
            eta0,
            eta1,
            eta2,
            eta3,
            lambda0,
            lambda1,
            lambda2,
            uvos_samples,
            latent,
            feat,
            hidden,
            sgld_steps,
            sgld_step_size,
            no_rafa,
            no_uvos,
        } = self;
        let counts = [
            t_gen,
            t_uvos,
            batch_size,
            uvos_samples,
            latent,
            feat,
            hidden,
            sgld_steps,
        ];
        let rates = [
            eta0,
            eta1,
            eta2,
            eta3,
            lambda0,
            lambda1,
            lambda2,
            sgld_step_size,
        ];
        *no_rafa
            || *no_uvos
            || counts.iter().any(|v| v.is_some())
            || rates.iter().any(|v| v.is_some())
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Training CSV (overrides <data>/train.csv).
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many completed epochs (the checkpoint keeps the full schedule).
    #[arg(long)]
    pub stop_at: Option<usize>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Known-class test CSV (overrides <data>/known_test.csv).
    #[arg(long)]
    pub known_test: Option<PathBuf>,
    /// Unknown-class CSV (overrides <data>/unknown.csv).
    #[arg(long)]
    pub unknown: Option<PathBuf>,
    /// Dataset description with the difficulty groups (overrides <data>/dataset.toml).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Random,
    Posterior,
    Prior,
}

impl From<ModeArg> for SampleMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Random => SampleMode::Random,
            ModeArg::Posterior => SampleMode::Posterior,
            ModeArg::Prior => SampleMode::Prior,
        }
    }
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    /// Inputs whose posteriors are sampled (posterior mode).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Reference CSV; the Fréchet feature distance to it is reported.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Number of seeds, starting at --seed.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[command(flatten)]
    pub synth: SynthArgs,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}
