//! Frame-indexed arrival streams.

use serde::{Deserialize, Serialize};

use crate::backend::Observation;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ArrivalPattern {
    OnePerFrame,
    /// Deterministic rate: frame `t` receives `floor((t+1)r) - floor(tr)` arrivals.
    Uniform { rate: f64 },
    Poisson { lambda: f64 },
    /// One arrival per frame whose budget is `long_n` with probability `p_long`.
    MixedLength { short_n: usize, long_n: usize, p_long: f64 },
}

impl ArrivalPattern {
    pub fn name(&self) -> &'static str {
        match self {
            ArrivalPattern::OnePerFrame => "one_per_frame",
            ArrivalPattern::Uniform { .. } => "uniform",
            ArrivalPattern::Poisson { .. } => "poisson",
            ArrivalPattern::MixedLength { .. } => "mixed_length",
        }
    }

    /// Mean arrivals per frame.
    pub fn rate(&self) -> f64 {
        match *self {
            ArrivalPattern::Uniform { rate } => rate,
            ArrivalPattern::Poisson { lambda } => lambda,
            ArrivalPattern::OnePerFrame | ArrivalPattern::MixedLength { .. } => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub pattern: ArrivalPattern,
    pub default_n: usize,
    pub obs_len: usize,
    pub num_frames: u64,
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), String> {
        match self.pattern {
            ArrivalPattern::Uniform { rate } if !(rate.is_finite() && rate >= 0.0) => {
                return Err(format!("rate ({rate}) must be finite and >= 0"))
            }
            ArrivalPattern::Poisson { lambda } if !(lambda.is_finite() && lambda >= 0.0) => {
                return Err(format!("lambda ({lambda}) must be finite and >= 0"))
            }
            ArrivalPattern::MixedLength {
                short_n,
                long_n,
                p_long,
            } => {
                if !(0.0..=1.0).contains(&p_long) {
                    return Err(format!("p_long ({p_long}) must lie in [0, 1]"));
                }
                if short_n == 0 || long_n == 0 {
                    return Err("short_n and long_n must be at least 1".into());
                }
            }
            _ => {}
        }
        if self.default_n == 0 {
            return Err("default_n must be at least 1".into());
        }
        if self.obs_len == 0 {
            return Err("obs_len must be at least 1".into());
        }
        Ok(())
    }

    /// Largest decode budget any request can receive.
    pub fn max_n(&self) -> usize {
        match self.pattern {
            ArrivalPattern::MixedLength { short_n, long_n, .. } => short_n.max(long_n),
            _ => self.default_n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arrival {
    pub frame: u64,
    pub observation: Observation,
    pub n_tokens: usize,
}

/// Lazily yields each frame's arrivals so long horizons stay in bounded memory.
///
/// Arrival counts and budgets come from one stream and observation tokens from
/// another, so changing `obs_len` or `vocab` never perturbs the arrival times.
#[derive(Debug, Clone)]
pub struct ArrivalStream {
    spec: WorkloadSpec,
    vocab: u32,
    frame: u64,
    arrivals_rng: SplitMix64,
    tokens_rng: SplitMix64,
}

impl ArrivalStream {
    pub fn new(spec: &WorkloadSpec, vocab: u32) -> Self {
        Self {
            spec: spec.clone(),
            vocab: vocab.max(1),
            frame: 0,
            arrivals_rng: SplitMix64::fork(spec.seed, 1),
            tokens_rng: SplitMix64::fork(spec.seed, 2),
        }
    }

    fn count(&mut self, t: u64) -> u64 {
        match self.spec.pattern {
            ArrivalPattern::OnePerFrame | ArrivalPattern::MixedLength { .. } => 1,
            ArrivalPattern::Uniform { rate } => {
                ((t + 1) as f64 * rate).floor() as u64 - (t as f64 * rate).floor() as u64
            }
            ArrivalPattern::Poisson { lambda } => poisson_knuth(&mut self.arrivals_rng, lambda),
        }
    }

    fn budget(&mut self) -> usize {
        match self.spec.pattern {
            ArrivalPattern::MixedLength {
                short_n,
                long_n,
                p_long,
            } => {
                if self.arrivals_rng.next_f64() < p_long {
                    long_n
                } else {
                    short_n
                }
            }
            _ => self.spec.default_n,
        }
    }

    fn observation(&mut self, frame: u64) -> Observation {
        let vocab = self.vocab as u64;
        let tokens = (0..self.spec.obs_len)
            .map(|_| self.tokens_rng.next_below(vocab) as u32)
            .collect();
        Observation { frame, tokens }
    }
}

impl Iterator for ArrivalStream {
    type Item = Vec<Arrival>;

    fn next(&mut self) -> Option<Vec<Arrival>> {
        if self.frame >= self.spec.num_frames {
            return None;
        }
        let t = self.frame;
        self.frame += 1;
        let n = self.count(t);
        Some(
            (0..n)
                .map(|_| {
                    let n_tokens = self.budget();
                    Arrival {
                        frame: t,
                        observation: self.observation(t),
                        n_tokens,
                    }
                })
                .collect(),
        )
    }
}

/// Knuth's product method: exact for the small rates used here.
pub fn poisson_knuth(rng: &mut SplitMix64, lambda: f64) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    let limit = (-lambda).exp();
    let mut k = 0;
    let mut p = rng.next_f64();
    while p > limit {
        k += 1;
        p *= rng.next_f64();
    }
    k
}

/// Materializes the whole arrival list.
pub fn generate(spec: &WorkloadSpec, vocab: u32) -> Vec<Arrival> {
    ArrivalStream::new(spec, vocab).flatten().collect()
}
