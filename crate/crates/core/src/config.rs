//! One JSON document describing a whole experiment.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::SensitivityConfig;
use crate::error::{Error, Result};
use crate::neuralnet::Architecture;
use crate::observation::DatasetConfig;
use crate::training::TrainConfig;
use crate::variational::AssimilationOptions;

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub training: TrainConfig,
    /// Output channels of the conv layers.
    pub channels: Vec<usize>,
    pub assimilation: AssimilationOptions,
    /// Weight of the background term for the regularised variant.
    pub lambda_b: f64,
    pub sensitivity: SensitivityConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            training: TrainConfig::default(),
            channels: vec![32, 32, 32, 32, 4],
            assimilation: AssimilationOptions::default(),
            lambda_b: 0.1,
            sensitivity: SensitivityConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.training.validate()?;
        self.architecture()?;
        if !(self.lambda_b >= 0.0 && self.lambda_b.is_finite()) {
            return Err(Error::invalid("lambda_b must be finite and non-negative"));
        }
        let lb = &self.assimilation.lbfgs;
        if lb.memory == 0 || lb.max_iter == 0 || lb.max_evals == 0 {
            return Err(Error::invalid("L-BFGS memory and budgets must be positive"));
        }
        Ok(())
    }

    pub fn architecture(&self) -> Result<Architecture> {
        Architecture::new(self.dataset.window + 1, self.dataset.dynamics.n_space, self.channels.clone())
    }

    /// Reads a config; missing fields take their defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
        serde_json::from_slice(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }

    /// Writes the resolved config into `dir`.
    pub fn save_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(dir.join(RESOLVED_CONFIG_FILE), text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&text).unwrap(), cfg);
        assert_eq!(cfg.architecture().unwrap(), Architecture::standard(11, 40));
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"training": {"epochs": 3}, "dataset": {"seed": 7}}"#).unwrap();
        assert_eq!(cfg.training.epochs, 3);
        assert_eq!(cfg.training.batch_size, 16);
        assert_eq!(cfg.dataset.seed, 7);
        assert_eq!(cfg.dataset.n_samples, 550);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"epochs": 3}"#).is_err());
    }

    #[test]
    fn inconsistent_splits_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.dataset.n_samples = 500;
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }
}
