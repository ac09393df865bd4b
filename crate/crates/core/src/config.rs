//! Full experiment description as stored on disk.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DatasetDescriptor;
use crate::denoiser::DenoiserSpec;
use crate::diffusion::SamplerConfig;
use crate::error::{Error, Result};
use crate::schedule::ScheduleConfig;
use crate::trainer::{TimestepSampling, TrainConfig};
use crate::weighting::WeightingConfig;

/// Optimizer and loop settings of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerSection {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub ema_rate: f64,
    pub t_sampling: TimestepSampling,
    pub log_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainerSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            steps: d.steps,
            batch_size: d.batch_size,
            lr: d.lr,
            weight_decay: d.weight_decay,
            adam_beta1: d.adam_beta1,
            adam_beta2: d.adam_beta2,
            adam_eps: d.adam_eps,
            ema_rate: d.ema_rate,
            t_sampling: d.t_sampling,
            log_every: d.log_every,
            checkpoint_every: d.checkpoint_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub weighting: WeightingConfig,
    pub model: DenoiserSpec,
    pub trainer: TrainerSection,
    pub data: DatasetDescriptor,
    pub sampler: SamplerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = DatasetDescriptor::default();
        Self {
            seed: 0,
            schedule: ScheduleConfig::default(),
            weighting: WeightingConfig::default(),
            model: DenoiserSpec::new(data.dim()),
            trainer: TrainerSection::default(),
            data,
            sampler: SamplerConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Reads a config file. A missing or unreadable file is a configuration
    /// error that names the path.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::InvalidConfig(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_json(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.trainer;
        TrainConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            weight_decay: t.weight_decay,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            ema_rate: t.ema_rate,
            seed: self.seed,
            weighting: self.weighting,
            schedule: self.schedule.clone(),
            t_sampling: t.t_sampling,
            log_every: t.log_every,
            checkpoint_every: t.checkpoint_every,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        self.model.validate()?;
        self.data.validate()?;
        self.sampler.validate()?;
        self.train_config().validate()?;
        if self.model.input_dim != self.data.dim() {
            return Err(Error::InvalidConfig(format!(
                "model input_dim {} does not match data dimension {}",
                self.model.input_dim,
                self.data.dim()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip() {
        let mut c = RunConfig::default();
        c.weighting = WeightingConfig::p2(1.0, 1.0);
        c.trainer.lr = 0.1 + 0.2;
        c.sampler = SamplerConfig::ddim(0.0, Some(50));
        let back = RunConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(RunConfig::from_json(r#"{"sed": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"trainer": {"learning_rate": 1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"seed": 3}"#).unwrap().seed == 3);
    }

    #[test]
    fn missing_file_names_path() {
        let err = RunConfig::load(Path::new("/nonexistent/cfg.json")).unwrap_err();
        assert!(err.is_config_error());
        assert!(err.to_string().contains("/nonexistent/cfg.json"));
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let mut c = RunConfig::default();
        c.data = DatasetDescriptor::tiny_bars(0.05);
        assert!(c.validate().unwrap_err().is_config_error());
    }
}
