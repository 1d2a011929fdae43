//! Run configuration shared by every command.
//!
//! The file is JSON. Every section is optional and falls back to validated
//! defaults; unknown keys anywhere are rejected with the offending name.

use crate::detector::{DecodeConfig, DetectorConfig};
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, SynthConfig};
use crate::ssta::{BackboneConfig, SstaConfig};
use crate::tensor::DType;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// The detector consumes pre-extracted features.
    #[default]
    FeatureInput,
    /// Raw frames pass through the frozen toy backbone with adapters.
    E2e,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Linear warmup length; `null` means 5% of all steps.
    pub warmup_steps: Option<usize>,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Frames per training crop.
    pub crop_len: usize,
    /// Steps between periodic checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub dtype: DType,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 4e-3,
            weight_decay: 0.05,
            epochs: 30,
            batch_size: 4,
            warmup_steps: None,
            grad_clip: 1.0,
            seed: 0,
            crop_len: 256,
            checkpoint_every: 500,
            dtype: DType::F32,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train.{m}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be nonnegative");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be nonnegative");
        }
        if self.crop_len == 0 {
            return bad("crop_len must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("beta1, beta2 must lie in [0, 1) and adam_eps must be positive");
        }
        Ok(())
    }

    /// Warmup length for a run of `total` steps.
    pub fn warmup_for(&self, total: usize) -> usize {
        self.warmup_steps
            .unwrap_or_else(|| (total as f64 * 0.05).ceil() as usize)
            .min(total)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub tiou_thresholds: Vec<f64>,
    pub multi_label: bool,
    pub decode: DecodeConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        let m = EvalConfig::default();
        Self {
            tiou_thresholds: m.tiou_thresholds,
            multi_label: m.multi_label,
            decode: DecodeConfig::default(),
        }
    }
}

impl EvalSection {
    pub fn metric(&self) -> EvalConfig {
        EvalConfig {
            tiou_thresholds: self.tiou_thresholds.clone(),
            multi_label: self.multi_label,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory holding `annotations.json` and `features/`.
    pub dataset: PathBuf,
    pub train_prefix: String,
    pub test_prefix: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data/synth"),
            train_prefix: "train_".into(),
            test_prefix: "test_".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub model: DetectorConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub ssta: SstaConfig,
    pub backbone: BackboneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::FeatureInput,
            model: DetectorConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            ssta: SstaConfig::default(),
            backbone: BackboneConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.eval.metric().validate()?;
        self.eval.decode.validate()?;
        self.synth.validate()?;
        if self.mode == Mode::E2e {
            self.backbone.validate()?;
            self.ssta.validate(self.backbone.d)?;
            if self.model.in_channels != self.backbone.d {
                return Err(Error::Config(format!(
                    "model.in_channels ({}) must equal backbone.d ({}) in e2e mode",
                    self.model.in_channels, self.backbone.d
                )));
            }
        }
        Ok(())
    }

    /// Input width of the raw per-frame data the model consumes.
    pub fn input_channels(&self) -> usize {
        match self.mode {
            Mode::FeatureInput => self.model.in_channels,
            Mode::E2e => self.backbone.in_channels,
        }
    }

    /// Parses and validates a config document.
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Self::from_json(&s).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
