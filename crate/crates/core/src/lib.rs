//! Unified KV cache management for multi-task vision-language-action
//! inference.
//!
//! One prefill per observation feeds both the action expert and a resumable
//! language request; in-flight language requests from earlier frames are
//! advanced together by a batched decode each frame. The crate provides the
//! KV manager, a functionally exact toy backend, an analytical cost backend,
//! the per-frame scheduler with its baselines, a frame-level simulator, and
//! metric reduction.

pub mod backend;
pub mod config;
pub mod kv_manager;
pub mod metrics;
pub mod par;
pub mod report;
pub mod rng;
pub mod scheduler;
pub mod sim;
pub mod sweep;
pub mod verify;
pub mod workload;

pub use backend::{
    ActionChunk, Backend, BackendConfig, BackendError, CostBackend, CostModelParams, Micros,
    Observation, ToyBackend,
};
pub use kv_manager::{
    batch, unbatch, BatchedState, GenerationState, KvCache, KvManager, ManagerError, RequestId,
};
pub use metrics::{speedup, summarize, MetricsReport};
pub use scheduler::{FrameTrace, Pacing, Scheduler, SchedulerVariant};
pub use sim::{run, BackendKind, SimConfig, SimResult};
pub use workload::{generate, Arrival, ArrivalPattern, WorkloadSpec};
