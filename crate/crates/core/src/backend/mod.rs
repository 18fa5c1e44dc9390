//! Model backends: prefill, action denoising, and batched language decode.
//!
//! [`ToyBackend`] is a small seeded transformer whose outputs are exact and
//! reproducible; it exists to prove that sharing, resumption, and batching
//! never change results. [`CostBackend`] only counts positions and reports
//! latencies from [`CostModelParams`].

mod cost;
mod toy;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kv_manager::{BackendTag, BatchedState, KvCache, RequestId};

pub use cost::CostBackend;
pub use toy::{Fault, ToyBackend};

/// Virtual time, in microseconds.
pub type Micros = u64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub frame: u64,
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk {
    pub rows: Vec<Vec<f32>>,
}

impl ActionChunk {
    pub fn horizon(&self) -> usize {
        self.rows.len()
    }

    pub fn is_finite(&self) -> bool {
        self.rows.iter().flatten().all(|x| x.is_finite())
    }
}

/// A backend result together with its modeled latency.
#[derive(Debug, Clone, PartialEq)]
pub struct Timed<T> {
    pub value: T,
    pub micros: Micros,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab: u32,
    pub eos_token: u32,
    pub action_dim: usize,
    pub horizon: usize,
    pub denoise_steps: u32,
    pub seed: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d_model: 32,
            n_heads: 2,
            vocab: 64,
            eos_token: 63,
            action_dim: 4,
            horizon: 10,
            denoise_steps: 10,
            seed: 0x5EED,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.layers == 0 {
            return Err("layers must be at least 1".into());
        }
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab < 2 {
            return Err("vocab must be at least 2".into());
        }
        if self.eos_token >= self.vocab {
            return Err(format!(
                "eos_token ({}) must be below vocab ({})",
                self.eos_token, self.vocab
            ));
        }
        if self.horizon == 0 || self.action_dim == 0 {
            return Err("horizon and action_dim must be at least 1".into());
        }
        if self.denoise_steps == 0 {
            return Err("denoise_steps must be at least 1".into());
        }
        Ok(())
    }
}

/// Latency constants of the analytical cost model, in microseconds.
///
/// Decode cost is affine in batch size with a small per-request slope, which
/// models the memory-bound regime where batching is nearly free.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModelParams {
    pub prefill_per_token_us: u64,
    pub denoise_per_step_us: u64,
    pub decode_base_us: u64,
    pub decode_per_request_us: u64,
    pub contention: f64,
}

impl Default for CostModelParams {
    /// Calibrated so that, at 420 observation tokens, H=10, S=10 and N=k=5,
    /// the isolated baseline frame splits roughly 42% prefill, 30% denoise
    /// and 28% decode.
    fn default() -> Self {
        Self {
            prefill_per_token_us: 50,
            denoise_per_step_us: 3_000,
            decode_base_us: 5_440,
            decode_per_request_us: 160,
            contention: 1.6,
        }
    }
}

impl CostModelParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.contention.is_finite() && self.contention >= 1.0) {
            return Err(format!("contention ({}) must be >= 1", self.contention));
        }
        Ok(())
    }

    pub fn prefill(&self, obs_len: usize) -> Micros {
        self.prefill_per_token_us * obs_len as u64
    }

    pub fn denoise(&self, steps: u32) -> Micros {
        self.denoise_per_step_us * steps as u64
    }

    /// `k` batched decode steps over `m` requests.
    pub fn decode(&self, k: u32, m: usize) -> Micros {
        k as u64 * (self.decode_base_us + self.decode_per_request_us * m as u64)
    }

    /// Applies the contention slowdown, rounding to the nearest microsecond.
    pub fn contend(&self, t: Micros) -> Micros {
        (t as f64 * self.contention).round() as Micros
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BackendError {
    #[error("observation is empty")]
    EmptyObservation,
    #[error("token {token} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: u32 },
    #[error("cache produced by {found:?} cannot be consumed by {expected:?}")]
    TagMismatch {
        expected: BackendTag,
        found: BackendTag,
    },
    #[error("step count must be at least 1")]
    ZeroSteps,
    #[error("batched decode needs at least one request")]
    EmptyBatch,
    #[error("request {0} is already terminated")]
    TerminatedEntry(RequestId),
    #[error("batched state has inconsistent internal lengths")]
    MalformedBatch,
}

pub trait Backend: Send + Sync {
    fn tag(&self) -> BackendTag;

    fn config(&self) -> &BackendConfig;

    fn costs(&self) -> &CostModelParams;

    /// Runs the shared prefill over an observation.
    fn prefill(&self, obs: &Observation) -> Result<Timed<KvCache>, BackendError>;

    /// Generates an action chunk from a cache without modifying it.
    fn action_denoise(&self, kv: &KvCache, steps: u32) -> Result<Timed<ActionChunk>, BackendError>;

    /// Advances every request by up to `k` tokens.
    fn batched_language_decode(
        &self,
        batched: BatchedState,
        k: u32,
    ) -> Result<Timed<BatchedState>, BackendError>;

    fn is_functional(&self) -> bool {
        matches!(self.tag(), BackendTag::Toy(_))
    }
}

pub(crate) fn check_observation(obs: &Observation, vocab: u32) -> Result<(), BackendError> {
    if obs.tokens.is_empty() {
        return Err(BackendError::EmptyObservation);
    }
    if let Some(&token) = obs.tokens.iter().find(|&&t| t >= vocab) {
        return Err(BackendError::TokenOutOfRange { token, vocab });
    }
    Ok(())
}

pub(crate) fn check_batch(batched: &BatchedState, k: u32) -> Result<(), BackendError> {
    if k == 0 {
        return Err(BackendError::ZeroSteps);
    }
    if batched.is_empty() {
        return Err(BackendError::EmptyBatch);
    }
    if !batched.is_well_formed() {
        return Err(BackendError::MalformedBatch);
    }
    if let Some(i) = batched.flags.iter().position(|&f| f) {
        return Err(BackendError::TerminatedEntry(batched.request_ids[i]));
    }
    Ok(())
}

pub(crate) fn check_tag(expected: BackendTag, kv: &KvCache) -> Result<(), BackendError> {
    if kv.tag != expected {
        return Err(BackendError::TagMismatch {
            expected,
            found: kv.tag,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        BackendConfig::default().validate().unwrap();
        CostModelParams::default().validate().unwrap();
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let cfg = BackendConfig {
            d_model: 30,
            n_heads: 4,
            ..BackendConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn cost_arithmetic() {
        let p = CostModelParams {
            prefill_per_token_us: 50,
            denoise_per_step_us: 1_500,
            decode_base_us: 1_000,
            decode_per_request_us: 10,
            contention: 1.0,
        };
        assert_eq!(p.prefill(800), 40_000);
        assert_eq!(p.denoise(10), 15_000);
        assert_eq!(p.decode(4, 3), 4 * 1_030);
    }
}
