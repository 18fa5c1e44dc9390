//! TOML run configuration.
//!
//! ```toml
//! [run]
//! variant = "unified"        # unified | shared_no_batch | isolated_sequential | isolated_parallel
//! backend = "cost_model"     # cost_model | toy
//! k = 4                      # decode steps per frame
//! f_min = 20.0               # minimum action frequency, Hz
//! period_us = 50000          # optional: fixed frame period; omit for back-to-back frames
//!
//! [workload]
//! pattern = "one_per_frame"  # one_per_frame | uniform | poisson | mixed_length
//! n = 12                     # decode budget per request
//! obs_len = 420              # prefill tokens per observation
//! frames = 100
//! seed = 1
//! rate = 1.0                 # uniform only
//! lambda = 0.5               # poisson only
//! short_n = 10               # mixed_length only
//! long_n = 50
//! p_long = 0.3
//!
//! [backend]                  # every field optional
//! layers = 2
//! d_model = 32
//! n_heads = 2
//! vocab = 64
//! eos_token = 63
//! action_dim = 4
//! horizon = 10
//! denoise_steps = 10
//! seed = 24301
//!
//! [cost]                     # every field optional, microseconds
//! prefill_per_token_us = 50
//! denoise_per_step_us = 3000
//! decode_base_us = 5440
//! decode_per_request_us = 160
//! contention = 1.6
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendConfig, CostModelParams};
use crate::scheduler::{Pacing, SchedulerVariant};
use crate::sim::{BackendKind, SimConfig, SimError};
use crate::workload::{ArrivalPattern, WorkloadSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("invalid value for `{field}`: {msg}")]
    Field { field: String, msg: String },
}

impl From<SimError> for ConfigError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config { field, msg } => ConfigError::Field {
                field: field.to_string(),
                msg,
            },
            other => ConfigError::Parse(other.to_string()),
        }
    }
}

fn field(field: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field: field.to_string(),
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub variant: String,
    #[serde(default = "default_backend")]
    pub backend: String,
    pub k: u32,
    #[serde(default = "default_f_min")]
    pub f_min: f64,
    #[serde(default)]
    pub period_us: Option<u64>,
}

fn default_backend() -> String {
    "cost_model".into()
}

fn default_f_min() -> f64 {
    1.0
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSection {
    #[serde(default = "default_pattern")]
    pub pattern: String,
    pub n: usize,
    pub obs_len: usize,
    pub frames: u64,
    #[serde(default)]
    pub seed: u64,
    pub rate: Option<f64>,
    pub lambda: Option<f64>,
    pub short_n: Option<usize>,
    pub long_n: Option<usize>,
    pub p_long: Option<f64>,
}

fn default_pattern() -> String {
    "one_per_frame".into()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFile {
    pub run: RunSection,
    pub workload: WorkloadSection,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub cost: CostModelParams,
}

impl WorkloadSection {
    pub fn to_spec(&self) -> Result<WorkloadSpec, ConfigError> {
        let need = |v: Option<f64>, name: &str| {
            v.ok_or_else(|| field(&format!("workload.{name}"), format!("required by pattern {:?}", self.pattern)))
        };
        let pattern = match self.pattern.as_str() {
            "one_per_frame" => ArrivalPattern::OnePerFrame,
            "uniform" => ArrivalPattern::Uniform {
                rate: need(self.rate, "rate")?,
            },
            "poisson" => ArrivalPattern::Poisson {
                lambda: need(self.lambda, "lambda")?,
            },
            "mixed_length" => ArrivalPattern::MixedLength {
                short_n: self.short_n.ok_or_else(|| field("workload.short_n", "required by pattern \"mixed_length\""))?,
                long_n: self.long_n.ok_or_else(|| field("workload.long_n", "required by pattern \"mixed_length\""))?,
                p_long: need(self.p_long, "p_long")?,
            },
            other => {
                return Err(field(
                    "workload.pattern",
                    format!("unknown pattern {other:?}, expected one_per_frame, uniform, poisson or mixed_length"),
                ))
            }
        };
        Ok(WorkloadSpec {
            pattern,
            default_n: self.n,
            obs_len: self.obs_len,
            num_frames: self.frames,
            seed: self.seed,
        })
    }
}

impl RunFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text).map_err(|e| match e {
            ConfigError::Parse(msg) => ConfigError::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_sim_config(&self) -> Result<SimConfig, ConfigError> {
        let variant = self
            .run
            .variant
            .parse::<SchedulerVariant>()
            .map_err(|msg| field("run.variant", msg))?;
        let backend_kind = match self.run.backend.as_str() {
            "toy" => BackendKind::Toy,
            "cost_model" => BackendKind::CostModel,
            other => {
                return Err(field(
                    "run.backend",
                    format!("unknown backend {other:?}, expected toy or cost_model"),
                ))
            }
        };
        let config = SimConfig {
            variant,
            backend_kind,
            backend: self.backend.clone(),
            costs: self.cost.clone(),
            workload: self.workload.to_spec()?,
            k: self.run.k,
            f_min: self.run.f_min,
            pacing: self.run.period_us.map_or(Pacing::LatencyBound, Pacing::FixedPeriod),
        };
        config.validate()?;
        Ok(config)
    }
}
