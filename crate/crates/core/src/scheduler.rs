//! Per-frame execution flow and the comparison variants.
//!
//! `Unified` runs one prefill per new observation, hands the cache to the
//! action expert and to a new language request, then advances every active
//! request by `k` tokens in a single batched decode. The other variants
//! remove batching (`SharedNoBatch`) or sharing as well (`Isolated*`).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{ActionChunk, Backend, BackendError, Micros};
use crate::kv_manager::{batch, unbatch, GenerationState, KvManager, ManagerError, RequestId};
use crate::workload::Arrival;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerVariant {
    Unified,
    SharedNoBatch,
    IsolatedSequential,
    IsolatedParallel,
}

impl SchedulerVariant {
    pub const ALL: [SchedulerVariant; 4] = [
        SchedulerVariant::Unified,
        SchedulerVariant::SharedNoBatch,
        SchedulerVariant::IsolatedSequential,
        SchedulerVariant::IsolatedParallel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchedulerVariant::Unified => "unified",
            SchedulerVariant::SharedNoBatch => "shared_no_batch",
            SchedulerVariant::IsolatedSequential => "isolated_sequential",
            SchedulerVariant::IsolatedParallel => "isolated_parallel",
        }
    }
}

impl fmt::Display for SchedulerVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchedulerVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                format!(
                    "unknown variant {s:?}, expected one of unified, shared_no_batch, \
                     isolated_sequential, isolated_parallel"
                )
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Pacing {
    /// Frames run back to back; a frame lasts exactly as long as its work.
    LatencyBound,
    /// Frames start every `period` microseconds, idling when work finishes early.
    FixedPeriod(Micros),
}

/// Work performed in a frame, by phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub prefill: Micros,
    pub denoise: Micros,
    pub decode: Micros,
    pub overhead: Micros,
}

impl LatencyBreakdown {
    pub fn sum(&self) -> Micros {
        self.prefill + self.denoise + self.decode + self.overhead
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTrace {
    pub frame: u64,
    pub arrivals: usize,
    pub prefill_count: usize,
    pub components: LatencyBreakdown,
    /// End-to-end inference latency T of the frame.
    pub latency_us: Micros,
    /// Wall duration of the frame after pacing.
    pub duration_us: Micros,
    pub batch_size_m: usize,
    /// Sequential decode steps executed in the frame.
    pub decode_steps: u64,
    pub tokens_emitted: usize,
    pub actions_emitted: usize,
    pub completed_ids: Vec<RequestId>,
    pub deadline_met: bool,
}

impl FrameTrace {
    fn new(frame: u64, arrivals: usize) -> Self {
        Self {
            frame,
            arrivals,
            prefill_count: 0,
            components: LatencyBreakdown::default(),
            latency_us: 0,
            duration_us: 0,
            batch_size_m: 0,
            decode_steps: 0,
            tokens_emitted: 0,
            actions_emitted: 0,
            completed_ids: Vec::new(),
            deadline_met: true,
        }
    }
}

/// Everything a frame produced.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutcome {
    pub trace: FrameTrace,
    pub actions: Vec<(RequestId, ActionChunk)>,
    /// Requests that terminated this frame, with their final state.
    pub finished: Vec<(RequestId, GenerationState)>,
}

impl FrameOutcome {
    fn new(frame: u64, arrivals: usize) -> Self {
        Self {
            trace: FrameTrace::new(frame, arrivals),
            actions: Vec::new(),
            finished: Vec::new(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SchedulerError {
    #[error(transparent)]
    Manager(#[from] ManagerError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("variant {0} is not supported by a functional backend")]
    Unsupported(SchedulerVariant),
}

/// Sequential ids for variants that do not persist state in a manager.
#[derive(Debug, Clone, Default)]
pub struct IdSequence(u64);

impl IdSequence {
    pub fn next_id(&mut self) -> RequestId {
        let id = RequestId(self.0);
        self.0 += 1;
        id
    }
}

/// One frame of the unified flow.
pub fn run_frame_unified(
    t: u64,
    arrivals: &[Arrival],
    manager: &mut KvManager,
    backend: &dyn Backend,
    k: u32,
    steps: u32,
) -> Result<FrameOutcome, SchedulerError> {
    let mut out = FrameOutcome::new(t, arrivals.len());
    let trace = &mut out.trace;

    for arrival in arrivals {
        let kv = backend.prefill(&arrival.observation)?;
        trace.components.prefill += kv.micros;
        trace.prefill_count += 1;
        // The action expert reads the cache in place; the same cache then
        // seeds the language request.
        let chunk = backend.action_denoise(&kv.value, steps)?;
        trace.components.denoise += chunk.micros;
        trace.actions_emitted += chunk.value.horizon();
        let id = manager.store(GenerationState::init(kv.value, t, arrival.n_tokens))?;
        out.actions.push((id, chunk.value));
    }

    let ids = manager.active_ids();
    if !ids.is_empty() {
        let states = ids
            .iter()
            .map(|&id| manager.retrieve(id))
            .collect::<Result<Vec<_>, _>>()?;
        let before: usize = states.iter().map(|s| s.tokens.len()).sum();
        let decoded = backend.batched_language_decode(batch(states, ids)?, k)?;
        trace.components.decode += decoded.micros;
        trace.batch_size_m = decoded.value.len();
        trace.decode_steps = k as u64;

        let mut after = 0;
        for (id, state) in unbatch(decoded.value)? {
            after += state.tokens.len();
            if state.terminated {
                manager.remove(id)?;
                trace.completed_ids.push(id);
                out.finished.push((id, state));
            } else {
                manager.update(id, state)?;
            }
        }
        trace.tokens_emitted = after - before;
    }
    trace.latency_us = trace.components.sum();
    Ok(out)
}

/// Decodes a single fresh state to completion at batch size one.
fn decode_alone(
    backend: &dyn Backend,
    id: RequestId,
    state: GenerationState,
    trace: &mut FrameTrace,
) -> Result<GenerationState, SchedulerError> {
    let budget = state.max_len as u32;
    let decoded = backend.batched_language_decode(batch(vec![state], vec![id])?, budget)?;
    trace.components.decode += decoded.micros;
    trace.decode_steps += budget as u64;
    trace.batch_size_m = 1;
    let (_, state) = unbatch(decoded.value)?.remove(0);
    trace.tokens_emitted += state.tokens.len();
    trace.completed_ids.push(id);
    Ok(state)
}

/// Shared prefill, but language decodes to completion inside the frame.
pub fn run_frame_shared_no_batch(
    t: u64,
    arrivals: &[Arrival],
    ids: &mut IdSequence,
    backend: &dyn Backend,
    steps: u32,
) -> Result<FrameOutcome, SchedulerError> {
    let mut out = FrameOutcome::new(t, arrivals.len());
    for arrival in arrivals {
        let id = ids.next_id();
        let kv = backend.prefill(&arrival.observation)?;
        out.trace.components.prefill += kv.micros;
        out.trace.prefill_count += 1;
        let chunk = backend.action_denoise(&kv.value, steps)?;
        out.trace.components.denoise += chunk.micros;
        out.trace.actions_emitted += chunk.value.horizon();
        out.actions.push((id, chunk.value));

        let state = GenerationState::init(kv.value, t, arrival.n_tokens);
        let state = decode_alone(backend, id, state, &mut out.trace)?;
        out.finished.push((id, state));
    }
    out.trace.latency_us = out.trace.components.sum();
    Ok(out)
}

/// Action and language each prefill the observation on their own, one after
/// the other.
pub fn run_frame_isolated_sequential(
    t: u64,
    arrivals: &[Arrival],
    ids: &mut IdSequence,
    backend: &dyn Backend,
    steps: u32,
) -> Result<FrameOutcome, SchedulerError> {
    let mut out = FrameOutcome::new(t, arrivals.len());
    for arrival in arrivals {
        let id = ids.next_id();
        let action_kv = backend.prefill(&arrival.observation)?;
        let chunk = backend.action_denoise(&action_kv.value, steps)?;
        let language_kv = backend.prefill(&arrival.observation)?;
        let trace = &mut out.trace;
        trace.components.prefill += action_kv.micros + language_kv.micros;
        trace.prefill_count += 2;
        trace.components.denoise += chunk.micros;
        trace.actions_emitted += chunk.value.horizon();
        out.actions.push((id, chunk.value));

        let state = GenerationState::init(language_kv.value, t, arrival.n_tokens);
        let state = decode_alone(backend, id, state, &mut out.trace)?;
        out.finished.push((id, state));
    }
    out.trace.latency_us = out.trace.components.sum();
    Ok(out)
}

/// Action and language run as concurrent isolated processes sharing one
/// device. Modeled only: the frame takes the longer path, slowed by the
/// contention factor.
pub fn run_frame_isolated_parallel(
    t: u64,
    arrivals: &[Arrival],
    ids: &mut IdSequence,
    backend: &dyn Backend,
    steps: u32,
) -> Result<FrameOutcome, SchedulerError> {
    if backend.is_functional() {
        return Err(SchedulerError::Unsupported(SchedulerVariant::IsolatedParallel));
    }
    let costs = backend.costs();
    let mut out = FrameOutcome::new(t, arrivals.len());
    let mut latency = 0;
    for arrival in arrivals {
        let id = ids.next_id();
        let action_kv = backend.prefill(&arrival.observation)?;
        let chunk = backend.action_denoise(&action_kv.value, steps)?;
        let language_kv = backend.prefill(&arrival.observation)?;
        let action_path = action_kv.micros + chunk.micros;
        let mut lane = FrameTrace::new(t, 1);
        let state = GenerationState::init(language_kv.value, t, arrival.n_tokens);
        let state = decode_alone(backend, id, state, &mut lane)?;
        let language_path = language_kv.micros + lane.components.decode;
        latency += costs.contend(action_path.max(language_path));

        let trace = &mut out.trace;
        trace.components.prefill += action_kv.micros + language_kv.micros;
        trace.components.denoise += chunk.micros;
        trace.components.decode += lane.components.decode;
        trace.prefill_count += 2;
        trace.decode_steps += lane.decode_steps;
        trace.batch_size_m = 1;
        trace.tokens_emitted += lane.tokens_emitted;
        trace.completed_ids.push(id);
        trace.actions_emitted += chunk.value.horizon();
        out.actions.push((id, chunk.value));
        out.finished.push((id, state));
    }
    out.trace.latency_us = latency;
    Ok(out)
}

/// Drives one variant frame by frame, applying pacing and deadline checks.
#[derive(Debug, Clone)]
pub struct Scheduler {
    pub variant: SchedulerVariant,
    pub manager: KvManager,
    ids: IdSequence,
    pub k: u32,
    pub steps: u32,
    pub horizon: usize,
    pub f_min: f64,
    pub pacing: Pacing,
}

impl Scheduler {
    pub fn new(
        variant: SchedulerVariant,
        k: u32,
        steps: u32,
        horizon: usize,
        f_min: f64,
        pacing: Pacing,
    ) -> Self {
        Self {
            variant,
            manager: KvManager::new(),
            ids: IdSequence::default(),
            k,
            steps,
            horizon,
            f_min,
            pacing,
        }
    }

    /// True while language requests are still in flight.
    pub fn has_backlog(&self) -> bool {
        !self.manager.is_empty()
    }

    pub fn run_frame(
        &mut self,
        t: u64,
        arrivals: &[Arrival],
        backend: &dyn Backend,
    ) -> Result<FrameOutcome, SchedulerError> {
        let mut out = match self.variant {
            SchedulerVariant::Unified => {
                run_frame_unified(t, arrivals, &mut self.manager, backend, self.k, self.steps)?
            }
            SchedulerVariant::SharedNoBatch => {
                run_frame_shared_no_batch(t, arrivals, &mut self.ids, backend, self.steps)?
            }
            SchedulerVariant::IsolatedSequential => {
                run_frame_isolated_sequential(t, arrivals, &mut self.ids, backend, self.steps)?
            }
            SchedulerVariant::IsolatedParallel => {
                run_frame_isolated_parallel(t, arrivals, &mut self.ids, backend, self.steps)?
            }
        };
        let trace = &mut out.trace;
        trace.duration_us = match self.pacing {
            Pacing::LatencyBound => trace.latency_us,
            Pacing::FixedPeriod(period) => trace.latency_us.max(period),
        };
        trace.deadline_met = trace.actions_emitted == 0
            || trace.latency_us == 0
            || self.horizon as f64 * 1e6 / trace.latency_us as f64 >= self.f_min;
        Ok(out)
    }
}
