use serde::{Deserialize, Serialize};

use crate::distillation::EmaSchedule;
use crate::encoders::{ModelConfig, TextConfig, VisionConfig};
use crate::error::{Error, Result};
use crate::masking::check_ratio;
use crate::objectives::{LossSettings, Objective};

/// Every knob of a pretraining run. Serialized verbatim into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub model: ModelConfig,
    pub epochs: u64,
    /// Optional hard cap on optimizer steps; the schedules span the capped run.
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    pub base_lr: f64,
    pub final_lr: f64,
    pub warmup_epochs: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub mask_ratio: f64,
    pub beta: f64,
    pub lambda: f64,
    pub ema: EmaSchedule,
    /// When false the teacher is the current student at every step.
    pub use_ema: bool,
    pub normalize_targets: bool,
    pub seed: u64,
    pub precision: String,
    pub corpus: Option<String>,
    /// Write a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::MaskClip,
            model: ModelConfig::default(),
            epochs: 50,
            max_steps: None,
            batch_size: 32,
            base_lr: 3e-3,
            final_lr: 1e-5,
            warmup_epochs: 10.0,
            weight_decay: 0.05,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-8,
            grad_clip: Some(1.0),
            mask_ratio: 0.75,
            beta: 2.0,
            lambda: 1.0,
            ema: EmaSchedule::default(),
            use_ema: true,
            normalize_targets: false,
            seed: 0,
            precision: "f64".into(),
            corpus: None,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    /// The published ViT-B/16 recipe, kept for reference.
    pub fn paper() -> Self {
        Self {
            model: ModelConfig {
                vision: VisionConfig::paper(),
                text: TextConfig::paper(),
                embed_dim: 512,
                decoder_depth: 1,
            },
            epochs: 25,
            batch_size: 4096,
            base_lr: 5e-4,
            final_lr: 1e-5,
            warmup_epochs: 1.0,
            weight_decay: 0.5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be positive when set".into());
        }
        for (k, v) in [
            ("base_lr", self.base_lr),
            ("final_lr", self.final_lr),
            ("warmup_epochs", self.warmup_epochs),
            ("weight_decay", self.weight_decay),
            ("lambda", self.lambda),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{k} must be a finite non-negative number, got {v}"));
            }
        }
        for (k, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{k} must lie in [0, 1), got {v}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        check_ratio(self.mask_ratio)?;
        self.ema.validate()?;
        if self.precision != "f64" {
            return bad(format!("only f64 precision is supported, got {:?}", self.precision));
        }
        Ok(())
    }

    pub fn loss_settings(&self) -> LossSettings {
        LossSettings {
            objective: self.objective,
            lambda: self.lambda,
            beta: self.beta,
            normalize_targets: self.normalize_targets,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
        TrainConfig::paper().validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = serde_json::from_str::<TrainConfig>(r#"{"epochz": 3}"#);
        assert!(e.is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "model": {"embed_dim": 16}}"#).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.model.embed_dim, 16);
        assert_eq!(c.model.vision.width, 64);
    }

    #[test]
    fn bad_values_rejected() {
        let mut c = TrainConfig::default();
        c.mask_ratio = 1.5;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.precision = "f32".into();
        assert!(c.validate().is_err());
    }
}
