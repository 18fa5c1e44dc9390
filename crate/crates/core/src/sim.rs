//! Virtual-clock simulation driver.
//!
//! Feeds each frame's arrivals to the scheduler, then keeps running empty
//! frames until every language request has finished (drain mode), so that
//! token and latency accounting covers every request exactly once.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    ActionChunk, Backend, BackendConfig, CostBackend, CostModelParams, ToyBackend,
};
use crate::kv_manager::RequestId;
use crate::scheduler::{FrameTrace, Pacing, Scheduler, SchedulerError, SchedulerVariant};
use crate::workload::{ArrivalStream, WorkloadSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Toy,
    CostModel,
}

impl BackendKind {
    pub fn name(self) -> &'static str {
        match self {
            BackendKind::Toy => "toy",
            BackendKind::CostModel => "cost_model",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub variant: SchedulerVariant,
    pub backend_kind: BackendKind,
    pub backend: BackendConfig,
    pub costs: CostModelParams,
    pub workload: WorkloadSpec,
    pub k: u32,
    pub f_min: f64,
    pub pacing: Pacing,
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |field: &'static str, msg: String| Err(SimError::Config { field, msg });
        if self.k == 0 {
            return bad("run.k", "must be at least 1".into());
        }
        if !(self.f_min.is_finite() && self.f_min > 0.0) {
            return bad("run.f_min", format!("must be positive, got {}", self.f_min));
        }
        if let Pacing::FixedPeriod(0) = self.pacing {
            return bad("run.period_us", "must be positive".into());
        }
        if self.backend_kind == BackendKind::Toy
            && self.variant == SchedulerVariant::IsolatedParallel
        {
            return bad(
                "run.variant",
                "isolated_parallel is only available with the cost_model backend".into(),
            );
        }
        self.backend
            .validate()
            .or_else(|msg| bad("backend", msg))?;
        self.costs.validate().or_else(|msg| bad("cost", msg))?;
        self.workload.validate().or_else(|msg| bad("workload", msg))?;
        Ok(())
    }

    pub fn build_backend(&self) -> Box<dyn Backend> {
        match self.backend_kind {
            BackendKind::Toy => Box::new(ToyBackend::new(self.backend.clone(), self.costs.clone())),
            BackendKind::CostModel => {
                Box::new(CostBackend::new(self.backend.clone(), self.costs.clone()))
            }
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid configuration field `{field}`: {msg}")]
    Config { field: &'static str, msg: String },
    #[error("frame {frame}: {source}")]
    Frame {
        frame: u64,
        #[source]
        source: SchedulerError,
    },
}

/// Lifecycle of one request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub id: RequestId,
    pub arrival_frame: u64,
    pub completion_frame: u64,
    pub n_tokens: usize,
    pub emitted: usize,
}

/// Functional outputs of one request (toy backend only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub id: RequestId,
    pub tokens: Vec<u32>,
    pub actions: ActionChunk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub traces: Vec<FrameTrace>,
    pub completions: Vec<Completion>,
    pub transcript: Vec<TranscriptEntry>,
    /// Largest live KV footprint (layer-positions) seen at a frame boundary.
    pub peak_live_positions: u64,
}

impl SimResult {
    pub fn total_tokens(&self) -> usize {
        self.traces.iter().map(|t| t.tokens_emitted).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("sim results always serialize")
    }
}

pub fn run(config: &SimConfig) -> Result<SimResult, SimError> {
    config.validate()?;
    let backend = config.build_backend();
    run_with_backend(config, backend.as_ref())
}

/// Runs `config` against a caller-supplied backend.
pub fn run_with_backend(config: &SimConfig, backend: &dyn Backend) -> Result<SimResult, SimError> {
    let mut scheduler = Scheduler::new(
        config.variant,
        config.k,
        config.backend.denoise_steps,
        config.backend.horizon,
        config.f_min,
        config.pacing,
    );
    let functional = backend.is_functional();
    let mut traces = Vec::new();
    let mut pending: BTreeMap<RequestId, (u64, usize, Option<ActionChunk>)> = BTreeMap::new();
    let mut completions = Vec::new();
    let mut transcript = Vec::new();
    let mut peak = 0;

    let mut step = |t: u64, arrivals: &[_], scheduler: &mut Scheduler| -> Result<(), SimError> {
        let out = scheduler
            .run_frame(t, arrivals, backend)
            .map_err(|source| SimError::Frame { frame: t, source })?;
        let budgets = arrivals.iter().map(|a: &crate::workload::Arrival| a.n_tokens);
        for ((id, chunk), n) in out.actions.into_iter().zip(budgets) {
            pending.insert(id, (t, n, functional.then_some(chunk)));
        }
        for (id, state) in out.finished {
            let (arrival_frame, n_tokens, actions) =
                pending.remove(&id).expect("finished request was admitted");
            completions.push(Completion {
                id,
                arrival_frame,
                completion_frame: t,
                n_tokens,
                emitted: state.tokens.len(),
            });
            if let Some(actions) = actions {
                transcript.push(TranscriptEntry {
                    id,
                    tokens: state.tokens,
                    actions,
                });
            }
        }
        peak = peak.max(scheduler.manager.live_positions());
        traces.push(out.trace);
        Ok(())
    };

    let mut t = 0;
    for arrivals in ArrivalStream::new(&config.workload, config.backend.vocab) {
        step(t, &arrivals, &mut scheduler)?;
        t += 1;
    }
    while scheduler.has_backlog() {
        step(t, &[], &mut scheduler)?;
        t += 1;
    }

    completions.sort_by_key(|c| c.id);
    transcript.sort_by_key(|e| e.id);
    Ok(SimResult {
        traces,
        completions,
        transcript,
        peak_live_positions: peak,
    })
}
