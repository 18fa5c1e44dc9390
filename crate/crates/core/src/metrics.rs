//! Reduction of frame traces to action frequency, token throughput and
//! average batch size.
//!
//! Average batch size is the plain per-frame mean of `m` over every frame in
//! the window, idle frames included. With that definition `tau = B * k / T`
//! holds exactly whenever every active request advances `k` tokens, and under
//! random arrivals `B` converges to `lambda * N / k`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scheduler::FrameTrace;
use crate::sim::{SimConfig, SimResult};

pub const BATCH_SIZE_DEFINITION: &str = "frame-weighted";

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no frames to summarize")]
    EmptyResult,
    #[error("baseline action frequency is zero")]
    ZeroBaseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowMetrics {
    pub first_frame: u64,
    pub frames: usize,
    pub total_time_us: u64,
    pub total_tokens: usize,
    pub total_actions: usize,
    pub action_frames: usize,
    /// `H / mean(T)` over frames that emitted actions.
    pub action_freq_hz: f64,
    /// Actions emitted per second of action-bearing frames.
    pub aggregate_action_freq_hz: f64,
    /// Mean over requests of `H / T` of the frame that served them.
    pub per_request_action_freq_hz: f64,
    pub token_throughput: f64,
    pub avg_batch_size: f64,
    pub deadline_miss_rate: f64,
}

impl WindowMetrics {
    pub fn from_traces(traces: &[FrameTrace], horizon: usize) -> Self {
        let h = horizon as f64;
        let mut m = WindowMetrics {
            first_frame: traces.first().map_or(0, |t| t.frame),
            frames: traces.len(),
            total_time_us: 0,
            total_tokens: 0,
            total_actions: 0,
            action_frames: 0,
            action_freq_hz: 0.0,
            aggregate_action_freq_hz: 0.0,
            per_request_action_freq_hz: 0.0,
            token_throughput: 0.0,
            avg_batch_size: 0.0,
            deadline_miss_rate: 0.0,
        };
        let mut action_time = 0u64;
        let mut requests = 0usize;
        let mut per_request_sum = 0.0;
        let mut misses = 0usize;
        let mut batch_sum = 0usize;
        for t in traces {
            m.total_time_us += t.duration_us;
            m.total_tokens += t.tokens_emitted;
            batch_sum += t.batch_size_m;
            if t.actions_emitted > 0 {
                m.action_frames += 1;
                m.total_actions += t.actions_emitted;
                action_time += t.duration_us;
                if t.duration_us > 0 {
                    requests += t.arrivals;
                    per_request_sum += t.arrivals as f64 * h * 1e6 / t.duration_us as f64;
                }
                if !t.deadline_met {
                    misses += 1;
                }
            }
        }
        if m.action_frames > 0 && action_time > 0 {
            let mean_t = action_time as f64 / m.action_frames as f64;
            m.action_freq_hz = h * 1e6 / mean_t;
            m.aggregate_action_freq_hz = m.total_actions as f64 * 1e6 / action_time as f64;
            m.deadline_miss_rate = misses as f64 / m.action_frames as f64;
        }
        if requests > 0 {
            m.per_request_action_freq_hz = per_request_sum / requests as f64;
        }
        if m.total_time_us > 0 {
            m.token_throughput = m.total_tokens as f64 * 1e6 / m.total_time_us as f64;
        }
        if m.frames > 0 {
            m.avg_batch_size = batch_sum as f64 / m.frames as f64;
        }
        m
    }

    /// Mean frame duration in microseconds.
    pub fn mean_frame_us(&self) -> f64 {
        if self.frames == 0 {
            0.0
        } else {
            self.total_time_us as f64 / self.frames as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Frames dropped from the front of the steady-state window.
    pub warmup_frames: u64,
    /// Warmup and the post-arrival drain tail excluded. Falls back to the
    /// full horizon when that leaves nothing.
    pub steady: WindowMetrics,
    pub full: WindowMetrics,
    pub batch_size_definition: String,
}

impl MetricsReport {
    pub fn action_freq_hz(&self) -> f64 {
        self.steady.action_freq_hz
    }
}

/// `ceil(max N / k)`: frames until the active set can first reach equilibrium.
pub fn warmup_frames(config: &SimConfig) -> u64 {
    let k = config.k.max(1) as u64;
    (config.workload.max_n() as u64).div_ceil(k)
}

pub fn summarize(result: &SimResult, config: &SimConfig) -> Result<MetricsReport, MetricsError> {
    if result.traces.is_empty() {
        return Err(MetricsError::EmptyResult);
    }
    let horizon = config.backend.horizon;
    let warmup = warmup_frames(config);
    let end = config.workload.num_frames;
    let window: Vec<FrameTrace> = result
        .traces
        .iter()
        .filter(|t| t.frame >= warmup && t.frame < end)
        .cloned()
        .collect();
    let full = WindowMetrics::from_traces(&result.traces, horizon);
    let steady = if window.is_empty() {
        full.clone()
    } else {
        WindowMetrics::from_traces(&window, horizon)
    };
    Ok(MetricsReport {
        warmup_frames: warmup,
        steady,
        full,
        batch_size_definition: BATCH_SIZE_DEFINITION.to_string(),
    })
}

/// Steady-state action-frequency ratio of `ours` over `baseline`.
pub fn speedup(ours: &MetricsReport, baseline: &MetricsReport) -> Result<f64, MetricsError> {
    let base = baseline.action_freq_hz();
    if base <= 0.0 {
        return Err(MetricsError::ZeroBaseline);
    }
    Ok(ours.action_freq_hz() / base)
}
