//! Experiment configuration: one JSON document per run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::symreg::SymregConfig;
use crate::sysgen::DatasetConfig;
use crate::trainer::TrainConfig;

fn default_k() -> usize {
    10
}
fn default_d_max() -> usize {
    16
}
fn default_max_points() -> usize {
    2000
}

/// Intrinsic-dimension step settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_d_max")]
    pub d_max: usize,
    /// Latent means are subsampled to at most this many points.
    #[serde(default = "default_max_points")]
    pub max_points: usize,
    /// Rescale each latent dimension to unit variance first.
    #[serde(default)]
    pub standardize: bool,
    /// Use this stage-two latent size instead of the rounded estimate.
    #[serde(default)]
    pub latent_override: Option<usize>,
}

impl Default for IdConfig {
    fn default() -> Self {
        Self {
            k: default_k(),
            d_max: default_d_max(),
            max_points: default_max_points(),
            standardize: false,
            latent_override: None,
        }
    }
}

fn default_split() -> String {
    "test".into()
}
fn default_order() -> usize {
    4
}
fn default_omega() -> f64 {
    5.0
}
fn default_holdout() -> f64 {
    0.25
}
fn default_fit_samples() -> usize {
    600
}

/// Evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    #[serde(default = "default_split")]
    pub split: String,
    #[serde(default = "default_order")]
    pub order: usize,
    #[serde(default = "default_omega")]
    pub omega: f64,
    /// Fraction of the evaluated videos held out from expression fitting.
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
    /// Human variables offered to symbolic regression (default: sine and
    /// cosine of every angle plus the remaining state components).
    #[serde(default)]
    pub symreg_inputs: Option<Vec<String>>,
    /// Training rows per fit are subsampled to at most this many.
    #[serde(default = "default_fit_samples")]
    pub max_fit_samples: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            split: default_split(),
            order: default_order(),
            omega: default_omega(),
            holdout_fraction: default_holdout(),
            symreg_inputs: None,
            max_fit_samples: default_fit_samples(),
        }
    }
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/experiment")
}

/// Every setting of one pipeline run.
///
/// The top-level `seed` replaces the seeds of the individual blocks (see
/// [`ExperimentConfig::resolved`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub stage1: TrainConfig,
    #[serde(default)]
    pub stage2: TrainConfig,
    #[serde(default)]
    pub id: IdConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub symreg: SymregConfig,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Copy with every block seed derived from the global seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.dataset.seed = self.seed;
        c.stage1.seed = self.seed;
        c.stage2.seed = self.seed.wrapping_add(1);
        c.symreg.seed = self.seed;
        c
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.symreg.validate()?;
        if self.id.k < 2 || self.id.d_max == 0 || self.id.max_points <= self.id.k + 1 {
            return Err(Error::Config("id block needs k >= 2, d_max >= 1 and max_points > k + 1".into()));
        }
        if self.id.latent_override == Some(0) {
            return Err(Error::Config("latent_override must be at least 1".into()));
        }
        if !["train", "val", "test"].contains(&self.metrics.split.as_str()) {
            return Err(Error::Config(format!("unknown split `{}`", self.metrics.split)));
        }
        if !(self.metrics.holdout_fraction > 0.0 && self.metrics.holdout_fraction < 1.0) {
            return Err(Error::Config("holdout_fraction must lie in (0, 1)".into()));
        }
        if self.metrics.order == 0 || self.metrics.omega <= 0.0 {
            return Err(Error::Config("metrics order must be >= 1 and omega > 0".into()));
        }
        if self.metrics.max_fit_samples < 50 {
            return Err(Error::Config("max_fit_samples must be at least 50".into()));
        }
        if self.name.trim().is_empty() {
            return Err(Error::Config("experiment name must not be empty".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "name": "demo",
        "seed": 3,
        "dataset": { "system": { "kind": "single_pendulum" }, "mode": "embed" }
    }"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let c: ExperimentConfig = serde_json::from_str(MINIMAL).unwrap();
        c.validate().unwrap();
        assert_eq!(c.id.k, 10);
        assert_eq!(c.metrics.split, "test");
        assert_eq!(c.stage1.hidden, vec![512, 256]);
        let r = c.resolved();
        assert_eq!((r.dataset.seed, r.stage1.seed, r.stage2.seed, r.symreg.seed), (3, 3, 4, 3));
    }

    #[test]
    fn unknown_fields_and_bad_values_are_rejected() {
        let extra = MINIMAL.replace("\"seed\": 3,", "\"seed\": 3, \"colour\": 1,");
        assert!(serde_json::from_str::<ExperimentConfig>(&extra).is_err());
        let mut c: ExperimentConfig = serde_json::from_str(MINIMAL).unwrap();
        c.metrics.split = "holdout".into();
        assert!(c.validate().is_err());
    }
}
