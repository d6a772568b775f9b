//! Experiment configuration: one JSON document validated against every
//! module's invariants before a run starts.

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::he::EncryptionParams;
use crate::kernels::KernelConfig;
use crate::model::{DistillConfig, ModelConfig};
use crate::protocol::FederationConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub kernels: KernelConfig,
    pub distill: DistillConfig,
    pub federation: FederationConfig,
    pub he: EncryptionParams,
    pub data: SyntheticSpec,
    /// Auxiliary samples per class for teacher training and distillation.
    pub aux_per_class: usize,
    /// Teacher training schedule on the auxiliary data.
    pub teacher_epochs: usize,
    pub teacher_lr: f64,
    /// Weight-initialization scale of the teacher.
    pub init_scale: f64,
    pub seed: u64,
    pub out_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            kernels: KernelConfig::default(),
            distill: DistillConfig::default(),
            federation: FederationConfig::default(),
            he: EncryptionParams::default(),
            data: SyntheticSpec::default(),
            aux_per_class: 24,
            teacher_epochs: 10,
            teacher_lr: 3e-3,
            init_scale: 0.25,
            seed: 7,
            out_dir: "runs/default".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.kernels.validate()?;
        self.distill.validate()?;
        self.federation.validate()?;
        self.he.validate()?;
        if self.data.num_classes != self.model.num_classes {
            return Err(Error::Config(format!(
                "data classes {} != model classes {}",
                self.data.num_classes, self.model.num_classes
            )));
        }
        if self.data.seq_len != self.model.seq_len || self.data.patch_dim != self.model.patch_dim {
            return Err(Error::Config("data shape != model input shape".into()));
        }
        if self.federation.adapter_rank >= self.model.model_dim {
            return Err(Error::Config("adapter rank must be < model_dim".into()));
        }
        if self.aux_per_class == 0 {
            return Err(Error::Config("aux_per_class must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_identity() {
        let cfg = ExperimentConfig::default();
        let json = cfg.to_json().unwrap();
        let parsed: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed, cfg);
        let json2 = parsed.to_json().unwrap();
        assert_eq!(json, json2);
    }

    #[test]
    fn validation_catches_mismatches() {
        let mut cfg = ExperimentConfig::default();
        cfg.data.num_classes = cfg.model.num_classes + 1;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.federation.adapter_rank = cfg.model.model_dim;
        assert!(cfg.validate().is_err());
    }
}
