//! Resumable generation state and the unified KV cache manager.
//!
//! The manager owns every in-flight language request. A request is created
//! from a prefill cache, advanced by batched decoding, and evicted once its
//! termination flag is set. Batching is purely structural: a [`BatchedState`]
//! keeps each request's cache separate and [`unbatch`] is its exact inverse.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifies which backend produced a cache. Caches may only be consumed by
/// a backend with the same tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BackendTag {
    /// Toy transformer, keyed by its weight seed.
    Toy(u64),
    /// Analytical cost model; caches carry position counts only.
    CostModel,
}

/// Keys and values of one layer, stored row-major as `len` rows of `width`.
///
/// A `width` of zero means the block only counts positions (cost backend).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerKv {
    pub width: usize,
    pub len: usize,
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
}

impl LayerKv {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            len: 0,
            keys: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, key: &[f32], value: &[f32]) {
        debug_assert_eq!(key.len(), self.width);
        debug_assert_eq!(value.len(), self.width);
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
        self.len += 1;
    }

    /// Appends a payload-free position.
    pub fn push_position(&mut self) {
        debug_assert_eq!(self.width, 0);
        self.len += 1;
    }

    pub fn key(&self, pos: usize) -> &[f32] {
        &self.keys[pos * self.width..(pos + 1) * self.width]
    }

    pub fn value(&self, pos: usize) -> &[f32] {
        &self.values[pos * self.width..(pos + 1) * self.width]
    }
}

/// Per-request KV cache: one [`LayerKv`] per layer plus the final hidden
/// state of the last cached position, from which the next token is read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvCache {
    pub layers: Vec<LayerKv>,
    pub readout: Vec<f32>,
    pub tag: BackendTag,
}

impl KvCache {
    pub fn new(tag: BackendTag, num_layers: usize, width: usize) -> Self {
        Self {
            layers: (0..num_layers).map(|_| LayerKv::new(width)).collect(),
            readout: Vec::new(),
            tag,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.len)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Layer-positions held by this cache, the unit of the manager's gauge.
    pub fn footprint(&self) -> u64 {
        (self.seq_len() * self.num_layers()) as u64
    }

    pub fn is_consistent(&self) -> bool {
        let n = self.seq_len();
        self.layers.iter().all(|l| {
            l.len == n && l.keys.len() == n * l.width && l.values.len() == n * l.width
        })
    }

    /// True if `self` is `earlier` with zero or more positions appended.
    pub fn extends(&self, earlier: &KvCache) -> bool {
        self.tag == earlier.tag
            && self.layers.len() == earlier.layers.len()
            && self.layers.iter().zip(&earlier.layers).all(|(now, then)| {
                now.width == then.width
                    && now.len >= then.len
                    && now.keys[..then.keys.len()] == then.keys[..]
                    && now.values[..then.values.len()] == then.values[..]
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RequestId(pub u64);

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Resumable decode state of one language request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationState {
    pub kv: KvCache,
    pub tokens: Vec<u32>,
    pub terminated: bool,
    pub created_frame: u64,
    pub max_len: usize,
    pub prefill_len: usize,
}

impl GenerationState {
    /// Wraps a fresh prefill cache with an empty token buffer.
    pub fn init(kv: KvCache, created_frame: u64, max_len: usize) -> Self {
        let prefill_len = kv.seq_len();
        Self {
            kv,
            tokens: Vec::new(),
            terminated: max_len == 0,
            created_frame,
            max_len,
            prefill_len,
        }
    }

    pub fn remaining(&self) -> usize {
        self.max_len.saturating_sub(self.tokens.len())
    }

    /// Checks the structural invariants of a state against `eos`.
    pub fn check(&self, eos: u32) -> Result<(), String> {
        if !self.kv.is_consistent() {
            return Err("layers disagree on sequence length".into());
        }
        if self.tokens.len() > self.max_len {
            return Err(format!(
                "{} tokens exceed budget {}",
                self.tokens.len(),
                self.max_len
            ));
        }
        if self.kv.seq_len() != self.prefill_len + self.tokens.len() {
            return Err(format!(
                "kv holds {} positions, expected {} prefill + {} decoded",
                self.kv.seq_len(),
                self.prefill_len,
                self.tokens.len()
            ));
        }
        let should_stop =
            self.tokens.last() == Some(&eos) || self.tokens.len() == self.max_len;
        if self.terminated != should_stop {
            return Err(format!(
                "termination flag {} disagrees with token buffer",
                self.terminated
            ));
        }
        Ok(())
    }
}

/// Per-request bookkeeping carried through a batch unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateMeta {
    pub created_frame: u64,
    pub max_len: usize,
    pub prefill_len: usize,
}

/// Several generation states stacked along a batch dimension. Caches stay
/// per-request so ragged sequence lengths coexist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchedState {
    pub kv_batch: Vec<KvCache>,
    pub token_buffers: Vec<Vec<u32>>,
    pub flags: Vec<bool>,
    pub request_ids: Vec<RequestId>,
    pub meta: Vec<StateMeta>,
}

impl BatchedState {
    pub fn len(&self) -> usize {
        self.request_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.request_ids.is_empty()
    }

    pub fn is_well_formed(&self) -> bool {
        let m = self.request_ids.len();
        m >= 1
            && self.kv_batch.len() == m
            && self.token_buffers.len() == m
            && self.flags.len() == m
            && self.meta.len() == m
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ManagerError {
    #[error("request {0} is not active")]
    UnknownId(RequestId),
    #[error("refusing to store a terminated state")]
    StoreTerminated,
    #[error("update of {0} does not extend the stored state: {1}")]
    NonExtendingUpdate(RequestId, &'static str),
    #[error("KV capacity exceeded: {needed} layer-positions requested, {available} available")]
    CapacityExceeded { needed: u64, available: u64 },
    #[error("cannot batch an empty set of states")]
    EmptyBatch,
    #[error("states and ids differ in length ({states} vs {ids})")]
    LengthMismatch { states: usize, ids: usize },
    #[error("request {0} is terminated and cannot be batched")]
    TerminatedInBatch(RequestId),
    #[error("batched state has inconsistent internal lengths")]
    MalformedBatch,
}

/// Owns all in-flight generation states.
///
/// Ids are handed out sequentially and never reused; the id of a new request
/// equals the number of requests stored before it.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct KvManager {
    states: BTreeMap<RequestId, GenerationState>,
    next_id: u64,
    live: u64,
    capacity: Option<u64>,
}

impl KvManager {
    pub fn new() -> Self {
        Self::default()
    }

    /// A manager that refuses stores or updates beyond `capacity` layer-positions.
    pub fn with_capacity(capacity: u64) -> Self {
        Self {
            capacity: Some(capacity),
            ..Self::default()
        }
    }

    fn reserve(&self, extra: u64) -> Result<(), ManagerError> {
        if let Some(cap) = self.capacity {
            if self.live + extra > cap {
                return Err(ManagerError::CapacityExceeded {
                    needed: extra,
                    available: cap.saturating_sub(self.live),
                });
            }
        }
        Ok(())
    }

    pub fn store(&mut self, state: GenerationState) -> Result<RequestId, ManagerError> {
        if state.terminated {
            return Err(ManagerError::StoreTerminated);
        }
        let footprint = state.kv.footprint();
        self.reserve(footprint)?;
        let id = RequestId(self.next_id);
        self.next_id += 1;
        self.live += footprint;
        self.states.insert(id, state);
        Ok(id)
    }

    pub fn retrieve(&self, id: RequestId) -> Result<GenerationState, ManagerError> {
        self.get(id).cloned().ok_or(ManagerError::UnknownId(id))
    }

    pub fn get(&self, id: RequestId) -> Option<&GenerationState> {
        self.states.get(&id)
    }

    pub fn update(&mut self, id: RequestId, state: GenerationState) -> Result<(), ManagerError> {
        let old = self.states.get(&id).ok_or(ManagerError::UnknownId(id))?;
        if state.prefill_len != old.prefill_len || state.max_len != old.max_len {
            return Err(ManagerError::NonExtendingUpdate(id, "request metadata changed"));
        }
        if !state.tokens.starts_with(&old.tokens) {
            return Err(ManagerError::NonExtendingUpdate(
                id,
                "token buffer is not an extension",
            ));
        }
        if !state.kv.extends(&old.kv) {
            return Err(ManagerError::NonExtendingUpdate(id, "kv cache is not an extension"));
        }
        let (old_fp, new_fp) = (old.kv.footprint(), state.kv.footprint());
        self.reserve(new_fp - old_fp)?;
        self.live += new_fp - old_fp;
        self.states.insert(id, state);
        Ok(())
    }

    /// Evicts a request, returning its final state.
    pub fn remove(&mut self, id: RequestId) -> Result<GenerationState, ManagerError> {
        let state = self.states.remove(&id).ok_or(ManagerError::UnknownId(id))?;
        self.live -= state.kv.footprint();
        Ok(state)
    }

    /// Active request ids in ascending order.
    pub fn active_ids(&self) -> Vec<RequestId> {
        self.states.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Total requests ever stored.
    pub fn created(&self) -> u64 {
        self.next_id
    }

    /// Live layer-positions across all active states.
    pub fn live_positions(&self) -> u64 {
        self.live
    }

    /// Recomputes the gauge from scratch.
    pub fn audit_positions(&self) -> u64 {
        self.states.values().map(|s| s.kv.footprint()).sum()
    }
}

/// Concatenates states into one batched state, preserving order.
pub fn batch(
    states: Vec<GenerationState>,
    ids: Vec<RequestId>,
) -> Result<BatchedState, ManagerError> {
    if states.len() != ids.len() {
        return Err(ManagerError::LengthMismatch {
            states: states.len(),
            ids: ids.len(),
        });
    }
    if states.is_empty() {
        return Err(ManagerError::EmptyBatch);
    }
    if let Some((_, id)) = states.iter().zip(&ids).find(|(s, _)| s.terminated) {
        return Err(ManagerError::TerminatedInBatch(*id));
    }
    let m = states.len();
    let mut out = BatchedState {
        kv_batch: Vec::with_capacity(m),
        token_buffers: Vec::with_capacity(m),
        flags: Vec::with_capacity(m),
        request_ids: ids,
        meta: Vec::with_capacity(m),
    };
    for s in states {
        out.meta.push(StateMeta {
            created_frame: s.created_frame,
            max_len: s.max_len,
            prefill_len: s.prefill_len,
        });
        out.kv_batch.push(s.kv);
        out.token_buffers.push(s.tokens);
        out.flags.push(s.terminated);
    }
    Ok(out)
}

/// Splits a batched state back into `(id, state)` pairs in batch order.
pub fn unbatch(batched: BatchedState) -> Result<Vec<(RequestId, GenerationState)>, ManagerError> {
    if !batched.is_well_formed() {
        return Err(ManagerError::MalformedBatch);
    }
    let BatchedState {
        kv_batch,
        token_buffers,
        flags,
        request_ids,
        meta,
    } = batched;
    Ok(request_ids
        .into_iter()
        .zip(kv_batch)
        .zip(token_buffers)
        .zip(flags)
        .zip(meta)
        .map(|((((id, kv), tokens), terminated), meta)| {
            (
                id,
                GenerationState {
                    kv,
                    tokens,
                    terminated,
                    created_frame: meta.created_frame,
                    max_len: meta.max_len,
                    prefill_len: meta.prefill_len,
                },
            )
        })
        .collect())
}
