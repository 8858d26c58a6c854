//! Run configuration file: TOML with `[train]`, `[model]`, `[kalman]` and
//! optional `[architecture]` tables. Unknown keys are rejected by name.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::WtaSchedule;
use crate::model::{Architecture, ModelConfig, Variant};
use crate::preprocess::KalmanConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning-rate factor applied after `plateau_patience` epochs without
    /// validation improvement.
    pub lr_decay: f64,
    pub plateau_patience: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub lambda_full: f64,
    pub lambda_social: f64,
    pub lambda_map: f64,
    /// Joint training with the social-only and map-only sub-networks.
    pub explicit: bool,
    /// Random rigid transform per scene and epoch.
    pub augment: bool,
    /// Soft winner-take-all reweighting with annealing.
    pub wta: bool,
    pub wta_m: f64,
    pub wta_d_ref: f64,
    pub seed: u64,
    pub variant: Variant,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = WtaSchedule::default();
        Self {
            epochs: 50,
            batch_size: 16,
            learning_rate: 1e-3,
            lr_decay: 0.5,
            plateau_patience: 3,
            grad_clip: 5.0,
            lambda_full: 1.0,
            lambda_social: 1.0,
            lambda_map: 1.0,
            explicit: true,
            augment: true,
            wta: true,
            wta_m: w.m,
            wta_d_ref: w.d_ref,
            seed: 0,
            variant: Variant::Full,
            eval_batch_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("epochs and batch sizes must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("learning_rate must be positive and lr_decay in (0, 1]");
        }
        if self.grad_clip < 0.0 || self.wta_m <= 0.0 {
            return bad("grad_clip must be non-negative and wta_m positive");
        }
        if [self.lambda_full, self.lambda_social, self.lambda_map].iter().any(|l| *l < 0.0) {
            return bad("loss weights must be non-negative");
        }
        Ok(())
    }

    pub fn wta_schedule(&self) -> WtaSchedule {
        WtaSchedule {
            m: self.wta_m,
            d_ref: self.wta_d_ref,
            alpha: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub kalman: KalmanConfig,
    /// Overrides the architecture implied by `train.variant`.
    pub architecture: Option<Architecture>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()?;
        if !(self.kalman.measurement_sigma > 0.0 && self.kalman.jerk_sigma > 0.0) {
            return Err(Error::Config("kalman noise levels must be positive".into()));
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture.unwrap_or_else(|| self.train.variant.architecture())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}
