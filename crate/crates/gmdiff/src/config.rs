//! Experiment configuration: one TOML file describing the dataset, schedule,
//! models, sampler, training, and metrics. Parsing is strict (unknown keys
//! are errors) and parse errors carry line/column positions.

use serde::{Deserialize, Serialize};

use crate::classifiers::ClassifierSpec;
use crate::error::{Error, Result};
use crate::metrics::MetricsConfig;
use crate::mixture::GaussianMixture;
use crate::models::DenoiserSpec;
use crate::samplers::SamplerConfig;
use crate::schedules::ScheduleSpec;
use crate::training::TrainConfig;

/// Seeded generator spec: the mixture plus the draw seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub seed: u64,
    pub mixture: GaussianMixture,
}

/// Which models a `train` run produces.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub diffusion: Option<TrainConfig>,
    pub classifier: Option<TrainConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub schedule: ScheduleSpec,
    /// Denoiser architecture.
    #[serde(default)]
    pub model: DenoiserSpec,
    /// Classifier architecture.
    #[serde(default)]
    pub classifier_model: ClassifierSpec,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub metrics: MetricsConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schedule.steps == 0 {
            return Err(Error::Config("schedule.steps must be >= 1".into()));
        }
        self.schedule.build().map_err(|e| Error::Config(e.to_string()))?;
        self.sampler.validate().map_err(|e| Error::Config(e.to_string()))?;
        if let Some(t) = &self.train.diffusion {
            t.validate().map_err(|e| Error::Config(format!("train.diffusion: {e}")))?;
            if t.lambda_vlb > 0.0 && !self.model.learned_variance {
                return Err(Error::Config(
                    "train.diffusion.lambda_vlb > 0 needs model.learned_variance".into(),
                ));
            }
        }
        if let Some(t) = &self.train.classifier {
            t.validate().map_err(|e| Error::Config(format!("train.classifier: {e}")))?;
        }
        if self.metrics.k == 0 {
            return Err(Error::Config("metrics.k must be >= 1".into()));
        }
        if self.metrics.ref_count <= self.metrics.k {
            return Err(Error::Config("metrics.ref_count must exceed metrics.k".into()));
        }
        Ok(())
    }

    /// The benchmark experiment shipped in-repo (see `configs/benchmark.toml`).
    pub fn benchmark() -> Self {
        Self {
            dataset: DatasetSpec { seed: 7, mixture: GaussianMixture::benchmark() },
            schedule: ScheduleSpec { family: crate::schedules::ScheduleFamily::Linear, steps: 1000 },
            model: DenoiserSpec::default(),
            classifier_model: ClassifierSpec::default(),
            sampler: SamplerConfig::default(),
            train: TrainSection::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[dataset]
seed = 7

[[dataset.mixture.component]]
weight = 0.5
mean = [-1.0]
variance = [0.25]

[[dataset.mixture.component]]
weight = 0.5
mean = [1.0]
variance = [0.25]

[schedule]
family = "linear"
steps = 100
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.dataset.mixture.num_classes(), 2);
        assert_eq!(cfg.schedule.steps, 100);
        assert_eq!(cfg.model.hidden, vec![128, 128, 128]);
        assert!(cfg.train.diffusion.is_none());
    }

    #[test]
    fn missing_field_error_names_it_with_position() {
        let broken = "[dataset]\nseed = 7\n";
        let err = ExperimentConfig::from_toml_str(broken).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("mixture"), "message should name the field: {msg}");
        assert!(msg.contains("line"), "message should carry a position: {msg}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let extra = format!("{MINIMAL}\n[sampler]\nbogus_knob = 3\n");
        let err = ExperimentConfig::from_toml_str(&extra).unwrap_err();
        assert!(err.to_string().contains("bogus_knob"));
    }

    #[test]
    fn invalid_weights_fail_validation() {
        let bad = MINIMAL.replace("weight = 0.5", "weight = 0.4");
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
    }

    #[test]
    fn cross_field_validation() {
        let mut cfg = ExperimentConfig::benchmark();
        cfg.model.learned_variance = false;
        cfg.train.diffusion = Some(TrainConfig { lambda_vlb: 0.001, ..Default::default() });
        assert!(cfg.validate().is_err());
        cfg.train.diffusion = Some(TrainConfig { lambda_vlb: 0.0, ..Default::default() });
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn benchmark_round_trips() {
        let cfg = ExperimentConfig::benchmark();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
    }
}
