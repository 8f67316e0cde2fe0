//! Experiment configuration: one TOML file, every field defaulted, unknown
//! keys rejected. Environment variables never override it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregators::AggregatorConfig;
use crate::augmentation::{AugmentMode, SamplingConfig};
use crate::model::{ModelConfig, TrainConfig};
use crate::privacy::PrivacySpec;
use crate::synth::SynthConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config key `{key}`: {reason}")]
    Invalid { key: String, reason: String },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

fn invalid(key: &str, reason: impl std::fmt::Display) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        reason: reason.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DatasetConfig {
    Synthetic(SynthConfig),
    /// Segment files written by `preprocess`/`synth`: `client_*.flsc`,
    /// `test.flsc`, and `volunteer.flsc` as the pool source.
    Files {
        dir: PathBuf,
    },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self::Synthetic(SynthConfig::default())
    }
}

/// Client self-selection and server round policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub rtc_requires_charging: bool,
    pub rtc_requires_connected: bool,
    pub adft_allowlist: Option<Vec<u32>>,
    pub adft_max_accepted: Option<usize>,
    /// Slack a client must have left after its estimated training time.
    pub sttp_min_remaining_ms: u64,
    pub sfap_min_updates: usize,
    pub max_rounds: u64,
    pub target_accuracy: Option<f64>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            rtc_requires_charging: true,
            rtc_requires_connected: true,
            adft_allowlist: None,
            adft_max_accepted: None,
            sttp_min_remaining_ms: 10_000,
            sfap_min_updates: 2,
            max_rounds: 100,
            target_accuracy: None,
        }
    }
}

/// Simulated timings. All durations are virtual milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub deadline_ms: u64,
    pub poll_interval_ms: u64,
    pub rtcm_latency_ms: u64,
    pub response_latency_ms: u64,
    pub train_base_ms: u64,
    /// Per sample per epoch.
    pub train_ms_per_sample: f64,
    pub agg_base_ms: u64,
    pub agg_per_update_ms: u64,
    /// Push a notification to clients when a new round opens.
    pub notify: bool,
    pub policy: PolicyConfig,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            deadline_ms: 360_000,
            poll_interval_ms: 60_000,
            rtcm_latency_ms: 200,
            response_latency_ms: 200,
            train_base_ms: 5_000,
            train_ms_per_sample: 50.0,
            agg_base_ms: 2_000,
            agg_per_update_ms: 50,
            notify: true,
            policy: PolicyConfig::default(),
        }
    }
}

/// Device charging/connectivity timelines: flags are redrawn independently
/// for each client every `period_ms`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviceConfig {
    pub p_charging: f64,
    pub p_connected: f64,
    pub period_ms: u64,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        Self {
            p_charging: 0.5,
            p_connected: 0.9,
            period_ms: 600_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub enabled: bool,
    pub pool_per_class: usize,
    pub local_range: [usize; 2],
    pub aug_range: [usize; 2],
    pub mode: AugmentMode,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        let s = SamplingConfig::default();
        Self {
            enabled: true,
            pool_per_class: 640,
            local_range: s.local_range,
            aug_range: s.aug_range,
            mode: s.mode,
        }
    }
}

impl AugmentationConfig {
    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig {
            local_range: self.local_range,
            aug_range: if self.enabled { self.aug_range } else { [0, 0] },
            mode: self.mode,
        }
    }
}

/// Injected faults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaultPlan {
    /// Probability that an accepted client trains but never uploads.
    pub p_drop: f64,
    /// Inclusive bounds of the uniform upload delay.
    pub upload_delay_ms: [u64; 2],
    /// Probability that the server denies an otherwise admissible RTCm.
    pub p_deny_registration: f64,
    /// Probability that a new-round notification is lost for a client.
    pub p_notify_loss: f64,
}

impl Default for FaultPlan {
    fn default() -> Self {
        Self {
            p_drop: 0.0,
            upload_delay_ms: [500, 2_000],
            p_deny_registration: 0.0,
            p_notify_loss: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutionConfig {
    /// Train clients on a thread pool. Results are identical to serial mode.
    pub parallel: bool,
    /// Report measured rather than simulated aggregation time.
    pub wall_clock: bool,
    /// Worker threads in parallel mode; the pool's default when unset.
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub protocol: ProtocolConfig,
    pub devices: DeviceConfig,
    pub aggregator: AggregatorConfig,
    pub augmentation: AugmentationConfig,
    pub privacy: PrivacySpec,
    pub faults: FaultPlan,
    pub execution: ExecutionConfig,
}

fn prob(key: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(invalid(key, format!("must lie in [0, 1], got {p}")))
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialization is infallible")
    }

    pub fn validate(&self) -> Result<()> {
        if let DatasetConfig::Synthetic(s) = &self.dataset {
            s.validate().map_err(|e| invalid("dataset", e))?;
            if s.classes != self.model.num_classes {
                return Err(invalid(
                    "model.num_classes",
                    format!("{} differs from dataset classes {}", self.model.num_classes, s.classes),
                ));
            }
        }
        self.model.validate().map_err(|e| invalid("model", e))?;
        self.train.validate().map_err(|e| invalid("train", e))?;
        self.aggregator.validate().map_err(|e| invalid("aggregator", e))?;
        self.augmentation
            .sampling()
            .validate()
            .map_err(|e| invalid("augmentation", e))?;
        if self.augmentation.enabled && self.augmentation.pool_per_class == 0 {
            return Err(invalid("augmentation.pool_per_class", "must be positive"));
        }
        self.privacy.validate().map_err(|e| invalid("privacy", e))?;
        let p = &self.protocol;
        if p.deadline_ms == 0 {
            return Err(invalid("protocol.deadline_ms", "must be positive"));
        }
        if p.poll_interval_ms == 0 {
            return Err(invalid("protocol.poll_interval_ms", "must be positive"));
        }
        if !(p.train_ms_per_sample >= 0.0 && p.train_ms_per_sample.is_finite()) {
            return Err(invalid(
                "protocol.train_ms_per_sample",
                "must be finite and non-negative",
            ));
        }
        if p.policy.sfap_min_updates == 0 {
            return Err(invalid("protocol.policy.sfap_min_updates", "must be at least 1"));
        }
        if let Some(a) = p.policy.target_accuracy {
            prob("protocol.policy.target_accuracy", a)?;
        }
        prob("devices.p_charging", self.devices.p_charging)?;
        prob("devices.p_connected", self.devices.p_connected)?;
        if self.devices.period_ms == 0 {
            return Err(invalid("devices.period_ms", "must be positive"));
        }
        prob("faults.p_drop", self.faults.p_drop)?;
        prob("faults.p_deny_registration", self.faults.p_deny_registration)?;
        prob("faults.p_notify_loss", self.faults.p_notify_loss)?;
        let [lo, hi] = self.faults.upload_delay_ms;
        if lo > hi {
            return Err(invalid("faults.upload_delay_ms", "min must not exceed max"));
        }
        if self.execution.threads == Some(0) {
            return Err(invalid("execution.threads", "must be positive"));
        }
        Ok(())
    }
}
