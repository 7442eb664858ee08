use serde::{Deserialize, Serialize};

use crate::ebm::SgldConfig;
use crate::error::{ensure, Error, Result};
use crate::uvos::{EpsilonMode, OutlierConfig};

/// Training hyperparameters. Field names are the config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Total epochs T.
    pub epochs: usize,
    /// Generative updates run from this epoch on (0-based).
    pub t_gen: usize,
    /// Density tracking covers epochs before this one; the outlier loss the
    /// epochs from it on.
    pub t_uvos: usize,
    pub eta0: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub eta3: f64,
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub batch_size: usize,
    /// Retained virtual outliers per class (H).
    pub uvos_samples: usize,
    /// Candidates drawn per class (S).
    pub uvos_candidates: usize,
    pub epsilon_mode: EpsilonMode,
    pub epsilon: f64,
    pub seed: u64,
    pub sgld: SgldConfig,
    pub warmup_epochs: usize,
    pub restart_epochs: [usize; 2],
    pub weight_decay: f64,
    /// Attribute feature aggregation in the encoder.
    pub use_rafa: bool,
    /// Class-wise density tracking and the outlier loss.
    pub use_uvos: bool,
    pub latent: usize,
    pub feat: usize,
    pub hidden: usize,
    /// Co-occurrence binarization threshold.
    pub adjacency_tau: f64,
    /// Off-diagonal adjacency mass.
    pub adjacency_p: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            t_gen: 20,
            t_uvos: 20,
            eta0: 1e-3,
            eta1: 1e-3,
            eta2: 1e-3,
            eta3: 1e-3,
            lambda0: 1.0,
            lambda1: 0.1,
            lambda2: 1.0,
            batch_size: 64,
            uvos_samples: 20,
            uvos_candidates: 200,
            epsilon_mode: EpsilonMode::Quantile,
            epsilon: 1e-3,
            seed: 0,
            sgld: SgldConfig::default(),
            warmup_epochs: 2,
            restart_epochs: [20, 40],
            weight_decay: 1e-4,
            use_rafa: true,
            use_uvos: true,
            latent: 8,
            feat: 16,
            hidden: 32,
            adjacency_tau: 0.4,
            adjacency_p: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.t_uvos <= self.epochs,
            "t_uvos {} exceeds epochs {}",
            self.t_uvos,
            self.epochs
        );
        ensure!(
            self.t_gen <= self.epochs,
            "t_gen {} exceeds epochs {}",
            self.t_gen,
            self.epochs
        );
        for (name, v) in [
            ("eta0", self.eta0),
            ("eta1", self.eta1),
            ("eta2", self.eta2),
            ("eta3", self.eta3),
        ] {
            ensure!(
                v >= 0.0 && v.is_finite(),
                "{name} must be a non-negative finite rate, got {v}"
            );
        }
        for (name, v) in [
            ("lambda0", self.lambda0),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
        ] {
            ensure!(
                v >= 0.0 && v.is_finite(),
                "{name} must be non-negative, got {v}"
            );
        }
        ensure!(self.batch_size >= 1, "batch size must be positive");
        ensure!(
            self.latent >= 1 && self.feat >= 1 && self.hidden >= 1,
            "network widths must be positive"
        );
        ensure!(
            self.weight_decay >= 0.0,
            "weight decay must be non-negative"
        );
        self.sgld.validate()?;
        self.outliers().validate()?;
        check_restarts(self)?;
        Ok(())
    }

    pub fn outliers(&self) -> OutlierConfig {
        OutlierConfig {
            candidates: self.uvos_candidates,
            retained: self.uvos_samples,
            epsilon_mode: self.epsilon_mode,
            epsilon: self.epsilon,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(e.to_string()))
    }
}

fn check_restarts(cfg: &TrainConfig) -> Result<()> {
    let [r1, r2] = cfg.restart_epochs;
    ensure!(
        cfg.warmup_epochs <= r1 && r1 < r2,
        "restart epochs must be increasing and after warmup, got {:?} with warmup {}",
        cfg.restart_epochs,
        cfg.warmup_epochs
    );
    Ok(())
}

/// Learning rate for a 0-based epoch: linear warmup to `base`, then cosine
/// decay to `0.01·base` inside each of the segments `[warmup, r1)`,
/// `[r1, r2)`, `[r2, T)`.
pub fn lr_at(epoch: usize, base: f64, cfg: &TrainConfig) -> Result<f64> {
    check_restarts(cfg)?;
    ensure!(
        epoch < cfg.epochs.max(1),
        "epoch {epoch} outside [0, {})",
        cfg.epochs
    );
    let w = cfg.warmup_epochs;
    if epoch < w {
        return Ok(base * (epoch + 1) as f64 / w as f64);
    }
    let [r1, r2] = cfg.restart_epochs;
    let end = cfg.epochs.max(r2 + 1);
    let (start, stop) = if epoch < r1 {
        (w, r1)
    } else if epoch < r2 {
        (r1, r2)
    } else {
        (r2, end)
    };
    let len = stop - start;
    if len <= 1 {
        return Ok(base);
    }
    let frac = (epoch - start) as f64 / (len - 1) as f64;
    let floor = 0.01 * base;
    Ok(floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * frac).cos()))
}
