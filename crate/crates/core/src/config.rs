//! Run configuration.
//!
//! A config file is a single flat TOML table; every key belongs either to
//! [`SttrConfig`] (the adaptation loop) or [`BenchmarkConfig`] (synthetic
//! data and source training). Unknown keys are rejected. Missing keys take
//! their defaults, and the fully resolved table is what reports echo.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::datagen::CorruptionFamily;
use crate::error::{Error, Result};
use crate::filter::FilterThresholds;
use crate::gauss::{AlignmentForm, KlForm, ObjectiveSettings};
use crate::stats::Clip;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Each sample is predicted once, on arrival.
    OnePass,
    /// The stream is traversed `passes` times before a final prediction sweep.
    MultiPass,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterUpdate {
    /// Only rows passing both filters update their pseudo-class cluster.
    Filtered,
    /// Every row updates its pseudo-class cluster.
    NoFilter,
    /// Every row updates every cluster, weighted by its posterior.
    SoftAssignment,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    /// Per-class source feature statistics computed offline.
    SourceStats,
    /// Classifier weight vectors rescaled to the target cluster-center norms.
    ClassifierPrototypes,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RidgeMode {
    /// `ε = ridge`.
    Absolute,
    /// `ε = ridge · max |Σ_s|`, the largest entry of the global anchor covariance.
    SourceMax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountPer {
    /// Running counts advance on every inner minibatch visit.
    Inner,
    /// Running counts advance once per streamed batch.
    Outer,
}

/// Settings of the streaming adaptation loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SttrConfig {
    /// `false` runs the unadapted source model (the TEST baseline).
    pub adapt: bool,
    pub batch_size: usize,
    pub queue_capacity: usize,
    pub inner_epochs: usize,
    pub xi: f64,
    pub tau_tc: f64,
    pub tau_pp: f64,
    pub clip_global: Clip,
    pub clip_cluster: Clip,
    pub lambda: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub protocol: Protocol,
    pub passes: usize,
    pub final_sweep: bool,
    pub cluster_update: ClusterUpdate,
    pub anchor_mode: AnchorMode,
    pub prototype_cov_scale: f64,
    pub kl_form: KlForm,
    pub ga_form: AlignmentForm,
    pub freeze_head: bool,
    pub count_per: CountPer,
    pub ridge: f64,
    pub ridge_mode: RidgeMode,
    pub prior_count: f64,
    pub prior_count_global: f64,
}

impl Default for SttrConfig {
    fn default() -> Self {
        Self {
            adapt: true,
            batch_size: 64,
            queue_capacity: 4096,
            inner_epochs: 4,
            xi: 0.9,
            tau_tc: -0.001,
            tau_pp: 0.9,
            clip_global: Clip::At(1280),
            clip_cluster: Clip::At(128),
            lambda: 1.0,
            learning_rate: 0.0025,
            momentum: 0.9,
            seed: 0,
            protocol: Protocol::OnePass,
            passes: 4,
            final_sweep: true,
            cluster_update: ClusterUpdate::Filtered,
            anchor_mode: AnchorMode::SourceStats,
            prototype_cov_scale: 1.0,
            kl_form: KlForm::Standard,
            ga_form: AlignmentForm::Kld,
            freeze_head: false,
            count_per: CountPer::Inner,
            ridge: 1.0 / 30.0,
            ridge_mode: RidgeMode::SourceMax,
            prior_count: 128.0,
            prior_count_global: 1280.0,
        }
    }
}

impl SttrConfig {
    pub fn thresholds(&self) -> FilterThresholds {
        FilterThresholds {
            xi: self.xi,
            tau_tc: self.tau_tc,
            tau_pp: self.tau_pp,
        }
    }

    pub fn objective(&self) -> ObjectiveSettings {
        ObjectiveSettings {
            lambda: self.lambda,
            ridge: self.ridge,
            kl_form: self.kl_form,
            alignment: self.ga_form,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.queue_capacity < self.batch_size || !self.queue_capacity.is_multiple_of(self.batch_size) {
            return Err(Error::Config(format!(
                "queue_capacity {} must be a positive multiple of batch_size {}",
                self.queue_capacity, self.batch_size
            )));
        }
        self.thresholds().validate()?;
        // Below the batch size a batch can move an estimate by more than its
        // own weight and the covariance recurrence loses positive semi-definiteness.
        for (name, clip) in [("clip_cluster", self.clip_cluster), ("clip_global", self.clip_global)] {
            if let Clip::At(n) = clip {
                if (n as usize) < self.batch_size {
                    return Err(Error::Config(format!(
                        "{name} {n} is smaller than batch_size {}",
                        self.batch_size
                    )));
                }
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::Config(format!("ridge must be non-negative, got {}", self.ridge)));
        }
        if !(self.prototype_cov_scale > 0.0) {
            return Err(Error::Config("prototype_cov_scale must be positive".into()));
        }
        if self.protocol == Protocol::MultiPass && self.passes == 0 {
            return Err(Error::Config("multi_pass needs at least one pass".into()));
        }
        crate::nn::SgdState::new(self.learning_rate, self.momentum)?;
        Ok(())
    }
}

/// Synthetic benchmark and source-training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub classes: usize,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub source_samples: usize,
    pub target_samples: usize,
    /// Standard deviation of the class-mean layout.
    pub separation: f64,
    /// Within-class standard deviation.
    pub spread: f64,
    pub layout_seed: u64,
    pub corruption: CorruptionFamily,
    pub severity: u8,
    pub pretrain_epochs: usize,
    pub pretrain_learning_rate: f64,
    pub pretrain_batch_size: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            input_dim: 32,
            hidden: vec![64, 64],
            feature_dim: 32,
            source_samples: 5000,
            target_samples: 2000,
            separation: 1.0,
            spread: 1.0,
            layout_seed: 7,
            corruption: CorruptionFamily::RotationMix,
            severity: 3,
            pretrain_epochs: 20,
            pretrain_learning_rate: 0.02,
            pretrain_batch_size: 64,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.source_samples < self.classes || self.target_samples == 0 {
            return Err(Error::Config("too few samples for the class count".into()));
        }
        if self.severity > 5 {
            return Err(Error::Config(format!("severity {} outside 0..=5", self.severity)));
        }
        Ok(())
    }
}

/// Everything a run needs, resolved from defaults, file and overrides.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ExperimentConfig {
    pub bench: BenchmarkConfig,
    pub ttac: SttrConfig,
}

fn to_table<T: Serialize>(value: &T) -> toml::Table {
    toml::Table::try_from(value).expect("config structs serialize to a table")
}

fn from_table<T: DeserializeOwned>(table: toml::Table) -> Result<T> {
    table
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::default().overlay(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Replaces the given keys; every key must already exist.
    pub fn overlay(&self, table: toml::Table) -> Result<Self> {
        let mut bench = to_table(&self.bench);
        let mut ttac = to_table(&self.ttac);
        for (key, value) in table {
            if let Some(slot) = ttac.get_mut(&key) {
                *slot = value;
            } else if let Some(slot) = bench.get_mut(&key) {
                *slot = value;
            } else {
                return Err(Error::Config(format!("unknown configuration key {key:?}")));
            }
        }
        let out = Self {
            bench: from_table(bench)?,
            ttac: from_table(ttac)?,
        };
        out.validate()?;
        Ok(out)
    }

    /// Applies one `key=value` override. The value is read as a TOML value,
    /// falling back to a bare string.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        let parsed: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {value}")) {
            Ok(mut t) => t.remove("v").expect("key present"),
            Err(_) => toml::Value::String(value.to_string()),
        };
        let mut t = toml::Table::new();
        t.insert(key.to_string(), parsed);
        self.overlay(t)
    }

    pub fn validate(&self) -> Result<()> {
        self.bench.validate()?;
        self.ttac.validate()
    }

    /// The flat resolved table, keys sorted.
    pub fn resolved(&self) -> toml::Table {
        let mut t = to_table(&self.bench);
        t.extend(to_table(&self.ttac));
        t
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&self.resolved()).expect("table serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn file_values_and_overrides() {
        let cfg = ExperimentConfig::parse(
            "tau_pp = 0.8\nclip_cluster = \"unbounded\"\ncorruption = \"impulse\"\nhidden = [16]\n",
        )
        .unwrap();
        assert_eq!(cfg.ttac.tau_pp, 0.8);
        assert_eq!(cfg.ttac.clip_cluster, Clip::Unbounded);
        assert_eq!(cfg.bench.corruption, CorruptionFamily::Impulse);
        assert_eq!(cfg.bench.hidden, vec![16]);
        let cfg = cfg.with_override("cluster_update", "no_filter").unwrap();
        assert_eq!(cfg.ttac.cluster_update, ClusterUpdate::NoFilter);
        let cfg = cfg.with_override("inner_epochs", "2").unwrap();
        assert_eq!(cfg.ttac.inner_epochs, 2);
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        assert!(ExperimentConfig::parse("nonsense = 1").is_err());
        assert!(ExperimentConfig::parse("tau_pp = \"high\"").is_err());
        assert!(ExperimentConfig::parse("queue_capacity = 100").is_err());
        assert!(ExperimentConfig::parse("clip_cluster = 32").is_err());
        assert!(ExperimentConfig::parse("clip_global = 64").is_ok());
        assert!(ExperimentConfig::parse("xi = 0.0").is_err());
    }

    #[test]
    fn resolved_round_trip() {
        let cfg = ExperimentConfig::default().with_override("lambda", "0.5").unwrap();
        let again = ExperimentConfig::parse(&cfg.to_toml_string()).unwrap();
        assert_eq!(again, cfg);
    }
}
