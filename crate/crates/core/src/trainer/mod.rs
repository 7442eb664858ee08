//! Staged training: discriminative updates every batch, class density
//! tracking early on, the outlier regularizer later, and prior/generative
//! updates once the generative phase starts.

mod checkpoint;
mod config;
mod log;

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, Optimizers, FORMAT_VERSION, MAGIC,
};
pub use config::{lr_at, TrainConfig};
pub use log::{EpochRecord, TrainLog, LOG_HEADER};

use crate::ebm::{sgld_sample, PriorSampleBatch};
use crate::encoder::{build_adjacency, VariationalPosterior};
use crate::error::{ensure, Error, Result};
use crate::exec::Execution;
use crate::generator::evae_loss_var;
use crate::model::{Model, ModelDims, STORE_TAGS};
use crate::numkit::{AdamW, DenseMatrix, Rng, Stream, Tape, Var};
use crate::synthdata::LabeledSample;
use crate::uvos::{
    normalize_known_var, sample_all_outliers, update_density, uvos_loss_var, ClassDensity,
};

/// Independent random streams consumed during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRngs {
    pub shuffle: Rng,
    pub reparam: Rng,
    pub sgld: Rng,
    pub uvos: Rng,
}

impl TrainRngs {
    pub fn from_seed(seed: u64) -> Self {
        let root = Rng::new(seed);
        Self {
            shuffle: root.child(Stream::Shuffle),
            reparam: root.child(Stream::Reparam),
            sgld: root.child(Stream::Sgld),
            uvos: root.child(Stream::Uvos),
        }
    }
}

/// Training set in matrix form.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub x: DenseMatrix,
    pub labels: Vec<usize>,
    pub attrs: DenseMatrix,
    pub attr_rows: Vec<Vec<u8>>,
    pub classes: usize,
}

impl TrainData {
    pub fn from_samples(samples: &[LabeledSample], classes: usize) -> Result<Self> {
        ensure!(!samples.is_empty(), "training set is empty");
        ensure!(classes >= 2, "need at least two known classes");
        let d = samples[0].x.len();
        let m = samples[0].a.len();
        ensure!(m >= 1, "training samples carry no attributes");
        for (i, s) in samples.iter().enumerate() {
            ensure!(
                s.x.len() == d && s.a.len() == m,
                "sample {i} has inconsistent width"
            );
            ensure!(
                s.y < classes,
                "sample {i} has label {} outside the {classes} known classes",
                s.y
            );
        }
        let x =
            DenseMatrix::from_rows(&samples.iter().map(|s| s.x.as_slice()).collect::<Vec<_>>())?;
        let attr_rows: Vec<Vec<u8>> = samples.iter().map(|s| s.a.clone()).collect();
        let attrs = DenseMatrix::from_rows(
            &attr_rows
                .iter()
                .map(|r| r.iter().map(|&v| v as f64).collect::<Vec<_>>())
                .collect::<Vec<_>>(),
        )?;
        Ok(Self {
            x,
            labels: samples.iter().map(|s| s.y).collect(),
            attrs,
            attr_rows,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `idx` as one batch.
    pub fn batch(&self, idx: &[usize]) -> Batch {
        Batch {
            x: self.x.select_rows(idx),
            attrs: self.attrs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: DenseMatrix,
    pub attrs: DenseMatrix,
    pub labels: Vec<usize>,
}

/// Per-group learning rates for one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rates {
    pub eta: [f64; 4],
}

impl Rates {
    pub fn at(epoch: usize, cfg: &TrainConfig) -> Result<Self> {
        Ok(Self {
            eta: [
                lr_at(epoch, cfg.eta0, cfg)?,
                lr_at(epoch, cfg.eta1, cfg)?,
                lr_at(epoch, cfg.eta2, cfg)?,
                lr_at(epoch, cfg.eta3, cfg)?,
            ],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscLosses {
    pub cls: f64,
    pub attr: Option<f64>,
    pub uvos: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenLosses {
    /// `mean E(z_post) − mean E(z_prior)`.
    pub ebm: f64,
    pub recon: f64,
    pub kl: f64,
    pub energy: f64,
    pub ci: f64,
    /// Loss driving the prior update.
    pub prior_total: f64,
    /// Loss driving the encoder/decoder update.
    pub gen_total: f64,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged: {message}")]
    Diverged {
        message: String,
        partial: Box<Checkpoint>,
    },
    #[error(transparent)]
    Other(#[from] Error),
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

fn optimizers_for(model: &Model, weight_decay: f64) -> Optimizers {
    model
        .stores
        .all()
        .into_iter()
        .map(|s| (s.tag().to_string(), AdamW::new(s, weight_decay)))
        .collect()
}

/// Fresh model and optimizer state for `data`.
pub fn init_checkpoint(cfg: &TrainConfig, data: &TrainData) -> Result<Checkpoint> {
    cfg.validate()?;
    let adjacency = build_adjacency(&data.attr_rows, cfg.adjacency_tau, cfg.adjacency_p)?;
    let dims = ModelDims {
        input: data.x.cols(),
        feat: cfg.feat,
        latent: cfg.latent,
        attrs: data.attrs.cols(),
        hidden: cfg.hidden,
        classes: data.classes,
    };
    let model = Model::new(
        dims,
        cfg.use_rafa,
        adjacency.normalized,
        &mut Rng::new(cfg.seed).child(Stream::Init),
    )?;
    let optimizers = optimizers_for(&model, cfg.weight_decay);
    let densities = if cfg.use_uvos {
        (0..data.classes)
            .map(|k| ClassDensity::new(k, cfg.latent))
            .collect()
    } else {
        Vec::new()
    };
    Ok(Checkpoint {
        config: cfg.clone(),
        epoch: 0,
        model,
        optimizers,
        densities,
        rngs: TrainRngs::from_seed(cfg.seed),
    })
}

fn finite_or(value: f64, what: &str, ctx: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Divergence(format!("{what} is not finite ({ctx})")))
    }
}

fn step_store(ckpt: &mut Checkpoint, tag: &str, lr: f64) {
    let store = ckpt.model.stores.by_tag_mut(tag).expect("known store tag");
    ckpt.optimizers
        .get_mut(tag)
        .expect("optimizer per store")
        .step(store, lr);
}

fn accumulate(
    ckpt: &mut Checkpoint,
    tags: &[&str],
    tape: &Tape,
    grads: &crate::numkit::Gradients,
) -> Result<()> {
    for tag in tags {
        let store = ckpt.model.stores.by_tag_mut(tag).expect("known store tag");
        store.zero_grad();
        store.accumulate(tape, grads)?;
    }
    Ok(())
}

/// Fold the batch posteriors into the class densities.
pub fn track_densities(model: &Model, batch: &Batch, densities: &mut [ClassDensity]) -> Result<()> {
    let posts = model.posteriors(&batch.x)?;
    for d in densities.iter_mut() {
        let mine: Vec<VariationalPosterior> = posts
            .iter()
            .zip(&batch.labels)
            .filter(|(_, &y)| y == d.class)
            .map(|(p, _)| p.clone())
            .collect();
        update_density(d, &mine)?;
    }
    Ok(())
}

fn uvos_active(ckpt: &Checkpoint, epoch: usize) -> bool {
    let cfg = &ckpt.config;
    cfg.use_uvos
        && epoch >= cfg.t_uvos
        && !ckpt.densities.is_empty()
        && ckpt.densities.iter().all(|d| d.n_seen > 0)
}

/// Classification at the posterior mean, attribute prediction and (when
/// active) the outlier regularizer; one update of φ (η0), α and θ (η1)
/// and ω (η2).
pub fn discriminative_step(
    ckpt: &mut Checkpoint,
    batch: &Batch,
    epoch: usize,
    rates: &Rates,
    exec: Execution,
) -> Result<DiscLosses> {
    ensure!(!batch.labels.is_empty(), "empty batch");
    let cfg = ckpt.config.clone();
    let with_uvos = uvos_active(ckpt, epoch);
    let model = &ckpt.model;
    let mut tape = Tape::new();
    let xv = tape.input(batch.x.clone());
    let out = model
        .encoder
        .forward(&mut tape, model.stores.encoder(), &model.adjacency, xv)?;
    let logits = model
        .head
        .logits_var(&mut tape, &model.stores.alpha, out.mu)?;
    let ce = tape.cross_entropy(logits, &batch.labels)?;
    let cls = tape.mean(ce)?;
    let mut total = cls;
    let mut attr = None;
    if let Some(a_hat) = out.a_hat {
        let bce = tape.bce(a_hat, &batch.attrs)?;
        let a = tape.mean(bce)?;
        let w = tape.scale(a, cfg.lambda0)?;
        total = tape.add(total, w)?;
        attr = Some(a);
    }
    let mut uvos = None;
    if with_uvos {
        let v_minus = normalize_known_var(&mut tape, out.mu, &batch.labels, &ckpt.densities)?;
        let v_plus =
            sample_all_outliers(&ckpt.densities, &cfg.outliers(), &mut ckpt.rngs.uvos, exec)?;
        let u = uvos_loss_var(
            &mut tape,
            &model.detector,
            &model.stores.theta,
            &v_plus,
            v_minus,
        )?;
        let w = tape.scale(u, cfg.lambda1)?;
        total = tape.add(total, w)?;
        uvos = Some(u);
    }
    let ctx = format!("epoch {epoch}, discriminative step");
    let losses = DiscLosses {
        cls: finite_or(tape.scalar(cls), "classification loss", &ctx)?,
        attr: attr.map(|v| tape.scalar(v)),
        uvos: uvos.map(|v| tape.scalar(v)),
        total: finite_or(tape.scalar(total), "discriminative loss", &ctx)?,
    };
    let grads = tape.backward(total)?;
    let mut tags = vec!["phi1", "phi2", "alpha"];
    if model.use_rafa() {
        tags.push("omega");
    }
    if with_uvos {
        tags.push("theta");
    }
    accumulate(ckpt, &tags, &tape, &grads)?;
    let [e0, e1, e2, _] = rates.eta;
    step_store(ckpt, "phi1", e0);
    step_store(ckpt, "phi2", e0);
    step_store(ckpt, "alpha", e1);
    if with_uvos {
        step_store(ckpt, "theta", e1);
    }
    if ckpt.model.use_rafa() {
        step_store(ckpt, "omega", e2);
    }
    Ok(losses)
}

/// Prior sampling, posterior sampling, the prior update (α at η0) and the
/// encoder/decoder update (φ at η0, ω at η2, β at η3). Both losses are
/// evaluated with the prior parameters from before this step.
pub fn generative_step(
    ckpt: &mut Checkpoint,
    batch: &Batch,
    epoch: usize,
    rates: &Rates,
    exec: Execution,
) -> Result<GenLosses> {
    ensure!(!batch.labels.is_empty(), "empty batch");
    let cfg = ckpt.config.clone();
    ensure!(
        epoch >= cfg.t_gen,
        "generative step requested at epoch {epoch}, before t_gen = {}",
        cfg.t_gen
    );
    let b = batch.labels.len();
    let d = ckpt.model.dims.latent;
    let z0 = ckpt.rngs.sgld.normal_matrix(b, d);
    let prior: PriorSampleBatch = sgld_sample(
        &ckpt.model.head,
        &ckpt.model.stores.alpha,
        &z0,
        &cfg.sgld,
        &mut ckpt.rngs.sgld,
        exec,
    )
    .map_err(|e| match e {
        Error::Divergence(m) => Error::Divergence(format!("epoch {epoch}: {m}")),
        other => other,
    })?;
    let noise = ckpt.rngs.reparam.normal_matrix(b, d);

    let model = &ckpt.model;
    let s = &model.stores;
    let mut tape = Tape::new();
    let xv = tape.input(batch.x.clone());
    let out = model
        .encoder
        .forward(&mut tape, s.encoder(), &model.adjacency, xv)?;
    let (terms, z_g) = evae_loss_var(
        &mut tape,
        &model.decoder,
        &s.beta,
        &model.head,
        &s.alpha,
        out.mu,
        out.log_sigma,
        &batch.x,
        &noise,
    )?;
    let zp = tape.input(prior.z.clone());
    let ep = model.head.energy_var(&mut tape, &s.alpha, zp)?;
    let ep = tape.mean(ep)?;
    let ebm = tape.sub(terms.energy, ep)?;
    let logits = model.head.logits_var(&mut tape, &s.alpha, z_g)?;
    let probs = tape.softmax_rows(logits)?;
    let ci = tape.class_entropy_contrast(probs, &batch.labels)?;
    let ci_w = tape.scale(ci, cfg.lambda2)?;
    let prior_total: Var = tape.sub(ebm, ci_w)?;
    let rk = tape.add(terms.recon, terms.kl)?;
    let rke = tape.add(rk, terms.energy)?;
    let gen_total = tape.sub(rke, ci_w)?;

    let ctx = format!("epoch {epoch}, generative step");
    let losses = GenLosses {
        ebm: tape.scalar(ebm),
        recon: tape.scalar(terms.recon),
        kl: tape.scalar(terms.kl),
        energy: tape.scalar(terms.energy),
        ci: tape.scalar(ci),
        prior_total: finite_or(tape.scalar(prior_total), "prior loss", &ctx)?,
        gen_total: finite_or(tape.scalar(gen_total), "generative loss", &ctx)?,
    };
    let g_prior = tape.backward(prior_total)?;
    let g_gen = tape.backward(gen_total)?;
    accumulate(ckpt, &["alpha"], &tape, &g_prior)?;
    let mut tags = vec!["phi1", "phi2", "beta"];
    if ckpt.model.use_rafa() {
        tags.push("omega");
    }
    accumulate(ckpt, &tags, &tape, &g_gen)?;
    let [e0, _, e2, e3] = rates.eta;
    step_store(ckpt, "alpha", e0);
    step_store(ckpt, "phi1", e0);
    step_store(ckpt, "phi2", e0);
    if ckpt.model.use_rafa() {
        step_store(ckpt, "omega", e2);
    }
    step_store(ckpt, "beta", e3);
    Ok(losses)
}

fn params_finite(ckpt: &Checkpoint) -> bool {
    ckpt.model
        .stores
        .all()
        .iter()
        .all(|s| s.iter().all(|(_, p)| p.value.is_finite()))
}

#[derive(Default)]
struct Sums {
    n: usize,
    cls: f64,
    attr: Option<f64>,
    uvos: Option<f64>,
    gen_n: usize,
    ebm: f64,
    recon: f64,
    kl: f64,
    energy: f64,
    ci: f64,
}

fn add_opt(acc: &mut Option<f64>, v: Option<f64>) {
    if let Some(v) = v {
        *acc = Some(acc.unwrap_or(0.0) + v);
    }
}

/// One epoch over shuffled batches.
fn run_epoch(ckpt: &mut Checkpoint, data: &TrainData, exec: Execution) -> Result<EpochRecord> {
    let started = Instant::now();
    let epoch = ckpt.epoch;
    let cfg = ckpt.config.clone();
    let rates = Rates::at(epoch, &cfg)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    ckpt.rngs.shuffle.shuffle(&mut order);
    let track = cfg.use_uvos && epoch < cfg.t_uvos;
    let generative = epoch >= cfg.t_gen;
    let mut sums = Sums::default();
    for idx in order.chunks(cfg.batch_size) {
        let batch = data.batch(idx);
        if track {
            track_densities(&ckpt.model, &batch, &mut ckpt.densities)?;
        }
        let dl = discriminative_step(ckpt, &batch, epoch, &rates, exec)?;
        sums.n += 1;
        sums.cls += dl.cls;
        add_opt(&mut sums.attr, dl.attr);
        add_opt(&mut sums.uvos, dl.uvos);
        if generative {
            let gl = generative_step(ckpt, &batch, epoch, &rates, exec)?;
            sums.gen_n += 1;
            sums.ebm += gl.ebm;
            sums.recon += gl.recon;
            sums.kl += gl.kl;
            sums.energy += gl.energy;
            sums.ci += gl.ci;
        }
        if !params_finite(ckpt) {
            return Err(Error::Divergence(format!(
                "parameters became non-finite in epoch {epoch}"
            )));
        }
    }
    ckpt.epoch += 1;
    let n = sums.n.max(1) as f64;
    let g = sums.gen_n as f64;
    let gen = |v: f64| (sums.gen_n > 0).then_some(v / g);
    Ok(EpochRecord {
        epoch,
        lr: rates.eta,
        cls: sums.cls / n,
        attr: sums.attr.map(|v| v / n),
        uvos: sums.uvos.map(|v| v / n),
        ebm: gen(sums.ebm),
        recon: gen(sums.recon),
        kl: gen(sums.kl),
        energy: gen(sums.energy),
        ci: gen(sums.ci),
        wall_ms: started.elapsed().as_millis() as u64,
    })
}

/// Continue `ckpt` until `stop_at` completed epochs (or the configured
/// total). On divergence the error carries the state at the start of the
/// failing epoch.
pub fn resume(
    mut ckpt: Checkpoint,
    data: &TrainData,
    stop_at: Option<usize>,
    exec: Execution,
) -> std::result::Result<TrainRun, TrainError> {
    ckpt.config.validate()?;
    let dims = ckpt.model.dims;
    if data.x.cols() != dims.input
        || data.attrs.cols() != dims.attrs
        || data.classes != dims.classes
    {
        return Err(
            Error::invalid("training data does not match the checkpoint dimensions").into(),
        );
    }
    let end = stop_at
        .unwrap_or(ckpt.config.epochs)
        .min(ckpt.config.epochs);
    let mut log = TrainLog::default();
    while ckpt.epoch < end {
        let before = ckpt.clone();
        match run_epoch(&mut ckpt, data, exec) {
            Ok(rec) => log.records.push(rec),
            Err(Error::Divergence(message)) => {
                return Err(TrainError::Diverged {
                    message,
                    partial: Box::new(before),
                })
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(TrainRun {
        checkpoint: ckpt,
        log,
    })
}

pub fn train(
    cfg: &TrainConfig,
    data: &TrainData,
    exec: Execution,
) -> std::result::Result<TrainRun, TrainError> {
    let ckpt = init_checkpoint(cfg, data)?;
    resume(ckpt, data, None, exec)
}

/// Hash of the density statistics, for immutability checks.
pub fn density_fingerprint(densities: &[ClassDensity]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for d in densities {
        for v in d.accum_pmu.iter().chain(&d.accum_p) {
            h = (h ^ v.to_bits()).wrapping_mul(0x100_0000_01b3);
        }
        h = (h ^ d.n_seen).wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Store tags in checkpoint order.
pub fn store_tags() -> [&'static str; 6] {
    STORE_TAGS
}
