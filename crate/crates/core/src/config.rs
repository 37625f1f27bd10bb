//! Run configuration: one TOML document describing model, data, loss,
//! optimizer, training loop and evaluation.
//!
//! ```toml
//! seed = 0
//! out_dir = "runs/nano"
//!
//! [model]
//! variant = "nano"          # built-in name or path to a variant file
//! # unify_dim = 64          # optional overrides
//! # aux_channels = 0        # 0 disables the auxiliary head
//!
//! [data]
//! root = "data"
//! train_split = "train"
//! val_split = "val"
//!
//! [augment]
//! crop = [512, 512]
//!
//! [loss]
//! class_balance = "effective"   # none | effective | inverse
//!
//! [optim]
//! lr0 = 1e-5
//! total_iters = 20000
//!
//! [train]
//! batch_size = 2
//!
//! [eval]
//! scales = [0.5, 0.75, 1.0, 1.25, 1.5, 1.75]
//! flip = true
//! ```
//!
//! Every section except `[model]` and `[data]` may be omitted; missing keys
//! take the defaults listed on each field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::AugSpec;
use crate::decoder::ModelConfig;
use crate::error::{Error, Result};
use crate::loss::{LossConfig, OhemConfig, IGNORE_INDEX};
use crate::optim::{AdamWHyper, PolySchedule};
use crate::variants::load_variant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub variant: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unify_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fuse_norm_act: Option<bool>,
    /// `0` removes the auxiliary head.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux_channels: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub root: PathBuf,
    #[serde(default = "default_train")]
    pub train_split: String,
    #[serde(default = "default_val")]
    pub val_split: String,
}

fn default_train() -> String {
    "train".into()
}

fn default_val() -> String {
    "val".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ClassBalance {
    #[default]
    None,
    /// Effective-number weights with `beta`.
    Effective,
    Inverse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OhemSection {
    pub enabled: bool,
    pub thresh: f64,
    pub min_kept: usize,
}

impl Default for OhemSection {
    fn default() -> Self {
        let o = OhemConfig::default();
        Self { enabled: true, thresh: o.thresh, min_kept: o.min_kept }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub main_weight: f64,
    pub aux_weight: f64,
    pub class_balance: ClassBalance,
    pub beta: f64,
    pub ohem: OhemSection,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            main_weight: 1.0,
            aux_weight: 0.4,
            class_balance: ClassBalance::None,
            beta: 0.9999,
            ohem: OhemSection::default(),
        }
    }
}

impl LossSection {
    /// Loss configuration without class weights; those depend on the data.
    pub fn base(&self) -> LossConfig {
        LossConfig {
            main_weight: self.main_weight,
            aux_weight: self.aux_weight,
            ignore_index: IGNORE_INDEX,
            class_weights: None,
            ohem: self.ohem.enabled.then_some(OhemConfig {
                thresh: self.ohem.thresh,
                min_kept: self.ohem.min_kept,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub strict_algorithm: bool,
    pub lr0: f64,
    pub power: f64,
    pub total_iters: u64,
    pub warmup_iters: u64,
    pub warmup_start_factor: f64,
    /// Reserved for periodic restarts; must stay unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub restart_period: Option<u64>,
}

impl Default for OptimSection {
    fn default() -> Self {
        let h = AdamWHyper::default();
        let s = PolySchedule::default();
        Self {
            alpha: h.alpha,
            beta1: h.beta1,
            beta2: h.beta2,
            eps: h.eps,
            weight_decay: 0.01,
            strict_algorithm: false,
            lr0: s.lr0,
            power: s.power,
            total_iters: s.total_iters,
            warmup_iters: s.warmup_iters,
            warmup_start_factor: s.warmup_start_factor,
            restart_period: None,
        }
    }
}

impl OptimSection {
    pub fn hyper(&self) -> AdamWHyper {
        AdamWHyper {
            alpha: self.alpha,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            strict_algorithm: self.strict_algorithm,
        }
    }

    pub fn schedule(&self) -> PolySchedule {
        PolySchedule {
            lr0: self.lr0,
            power: self.power,
            total_iters: self.total_iters,
            warmup_iters: self.warmup_iters,
            warmup_start_factor: self.warmup_start_factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    /// Save a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: u64,
    /// Log every this many iterations.
    pub log_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { batch_size: 2, checkpoint_every: 1000, log_every: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub scales: Vec<f64>,
    pub flip: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { scales: vec![1.0], flip: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    pub model: ModelSection,
    pub data: DataSection,
    #[serde(default)]
    pub augment: AugSpec,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub optim: OptimSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    /// Resolve the variant and apply overrides.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = load_variant(&self.model.variant)?;
        if let Some(d) = self.model.unify_dim {
            cfg.decoder.unify_dim = d;
        }
        if let Some(f) = self.model.fuse_norm_act {
            cfg.decoder.fuse_norm_act = f;
        }
        match self.model.aux_channels {
            Some(0) => cfg.decoder.aux_channels = None,
            Some(c) => cfg.decoder.aux_channels = Some(c),
            None => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Check every section; nothing is touched on disk.
    pub fn validate(&self) -> Result<()> {
        let model = self.model_config()?;
        if model.decoder.num_classes != crate::NUM_CLASSES {
            return Err(Error::Config(format!(
                "variant has {} classes; the label policy fixes {}",
                model.decoder.num_classes,
                crate::NUM_CLASSES
            )));
        }
        self.augment.validate()?;
        if !self.augment.pad_divisor.is_multiple_of(model.encoder.total_stride()) {
            return Err(Error::Config(format!(
                "pad_divisor {} is not a multiple of the encoder stride {}",
                self.augment.pad_divisor,
                model.encoder.total_stride()
            )));
        }
        self.loss.base().validate()?;
        if self.loss.class_balance == ClassBalance::Effective && !(0.0..1.0).contains(&self.loss.beta) {
            return Err(Error::Config(format!("loss beta must lie in [0, 1), got {}", self.loss.beta)));
        }
        self.optim.hyper().validate()?;
        self.optim.schedule().validate()?;
        if self.optim.restart_period.is_some() {
            return Err(Error::Config("optim.restart_period is reserved and not supported yet".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if self.train.log_every == 0 {
            return Err(Error::Config("train.log_every must be positive".into()));
        }
        if self.eval.scales.is_empty() || self.eval.scales.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("eval.scales must be a non-empty list of positive numbers".into()));
        }
        if self.data.train_split.is_empty() || self.data.val_split.is_empty() {
            return Err(Error::Config("split names must be non-empty".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[model]\nvariant = \"nano\"\n[data]\nroot = \"d\"\n";

    #[test]
    fn defaults_fill_in() {
        let c = RunConfig::parse(MINIMAL).unwrap();
        c.validate().unwrap();
        assert_eq!(c.loss.aux_weight, 0.4);
        assert_eq!(c.loss.ohem.thresh, 0.5);
        assert_eq!(c.loss.ohem.min_kept, 10_000);
        assert_eq!(c.optim.total_iters, 20_000);
        assert_eq!(c.optim.lr0, 1e-5);
        assert_eq!(c.optim.power, 1.0);
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_sections() {
        let bad_crop = format!("{MINIMAL}[augment]\ncrop = [100, 96]\n");
        assert!(RunConfig::parse(&bad_crop).unwrap().validate().is_err());
        let restart = format!("{MINIMAL}[optim]\nrestart_period = 10\n");
        assert!(RunConfig::parse(&restart).unwrap().validate().is_err());
        assert!(RunConfig::parse(&format!("{MINIMAL}bogus = 1\n")).is_err());
        let variant = MINIMAL.replace("nano", "no-such-variant");
        assert!(RunConfig::parse(&variant).unwrap().validate().is_err());
    }

    #[test]
    fn aux_override() {
        let c = RunConfig::parse(&MINIMAL.replace("\"nano\"", "\"nano\"\naux_channels = 0")).unwrap();
        assert_eq!(c.model_config().unwrap().decoder.aux_channels, None);
    }
}
