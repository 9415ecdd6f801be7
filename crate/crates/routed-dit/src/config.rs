//! Run configuration: TOML file + flag overrides, serialized into every
//! checkpoint and stamped (hashed) into every emitted report.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::GeneratorKind;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    /// Linear ramp of the ratio-loss coefficient from 0 to its full value
    /// over the run. Off by default.
    pub lambda_schedule: bool,
    pub out_dir: String,
    pub dataset_kind: GeneratorKind,
    pub model: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            steps: 2000,
            batch_size: 32,
            lambda_schedule: false,
            out_dir: "run".into(),
            dataset_kind: GeneratorKind::Shapes,
            model: ModelConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.out_dir.is_empty() {
            return Err(Error::Config("out_dir must not be empty".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    /// Short hex digest of the serialized config, stamped into output files.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_toml().as_bytes());
        let digest = h.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Ratio-loss coefficient at a 1-based step.
    pub fn effective_lambda(&self, step: u64) -> f64 {
        let lambda = self.model.ratio_loss_coeff;
        if !self.lambda_schedule || self.steps == 0 {
            return lambda;
        }
        lambda * (step.min(self.steps) as f64 / self.steps as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_preserves_config() {
        let mut cfg = RunConfig::default();
        cfg.seed = 9;
        cfg.model.layers = 4;
        cfg.dataset_kind = GeneratorKind::Constant;
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg = RunConfig::from_toml("seed = 5\n[model]\nlayers = 2\n").unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.model.layers, 2);
        assert_eq!(cfg.batch_size, 32);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("sede = 5\n").is_err());
    }

    #[test]
    fn lambda_schedule_ramps_linearly() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.effective_lambda(1), 0.3);
        cfg.lambda_schedule = true;
        cfg.steps = 100;
        assert!((cfg.effective_lambda(50) - 0.15).abs() < 1e-12);
        assert!((cfg.effective_lambda(100) - 0.3).abs() < 1e-12);
        assert!((cfg.effective_lambda(500) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn invalid_model_rejected() {
        assert!(RunConfig::from_toml("[model]\nheads = 5\n").is_err());
    }
}
