//! Self-check suites run by `kvweaver verify`.
//!
//! Toy-backend suites compare batched, resumed and shared execution against
//! a request decoded alone from a fresh prefill. Cost-model suites compare
//! simulated traces against closed-form latencies.

use std::fmt;

use crate::backend::{
    Backend, BackendConfig, CostModelParams, Fault, Observation, ToyBackend,
};
use crate::kv_manager::{batch, unbatch, GenerationState, KvManager, RequestId};
use crate::metrics;
use crate::par::{self, Parallelism};
use crate::rng::SplitMix64;
use crate::scheduler::{Pacing, SchedulerVariant};
use crate::sim::{self, BackendKind, SimConfig};
use crate::workload::{ArrivalPattern, WorkloadSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub case: u64,
    pub request: Option<RequestId>,
    pub detail: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "case {}", self.case)?;
        if let Some(id) = self.request {
            write!(f, " request {id}")?;
        }
        write!(f, ": {}", self.detail)
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: &'static str,
    pub cases: usize,
    pub failures: Vec<Failure>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub cases: usize,
    pub fault: Option<Fault>,
    pub mode: Parallelism,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            cases: 200,
            fault: None,
            mode: Parallelism::Parallel,
        }
    }
}

fn toy(fault: Option<Fault>) -> ToyBackend {
    let b = ToyBackend::new(BackendConfig::default(), CostModelParams::default());
    match fault {
        Some(f) => b.with_fault(f),
        None => b,
    }
}

fn random_obs(rng: &mut SplitMix64, vocab: u32, max_len: u64) -> Observation {
    let len = 1 + rng.next_below(max_len) as usize;
    Observation {
        frame: 0,
        tokens: (0..len).map(|_| rng.next_below(vocab as u64) as u32).collect(),
    }
}

fn decode(
    backend: &dyn Backend,
    states: Vec<GenerationState>,
    ids: Vec<RequestId>,
    k: u32,
) -> Result<Vec<(RequestId, GenerationState)>, String> {
    let b = batch(states, ids).map_err(|e| e.to_string())?;
    let out = backend
        .batched_language_decode(b, k)
        .map_err(|e| e.to_string())?;
    unbatch(out.value).map_err(|e| e.to_string())
}

fn fail(case: u64, request: Option<RequestId>, detail: impl Into<String>) -> Failure {
    Failure {
        case,
        request,
        detail: detail.into(),
    }
}

/// A live request with a random decoded history, or `None` if it hit EOS.
fn ragged_state(
    backend: &dyn Backend,
    rng: &mut SplitMix64,
    id: RequestId,
) -> Result<Option<GenerationState>, String> {
    let vocab = backend.config().vocab;
    let kv = backend
        .prefill(&random_obs(rng, vocab, 8))
        .map_err(|e| e.to_string())?
        .value;
    let history = rng.next_below(10) as usize;
    let max_len = history + 1 + rng.next_below(12) as usize;
    let mut state = GenerationState::init(kv, 0, max_len);
    if history > 0 {
        state = decode(backend, vec![state], vec![id], history as u32)?.remove(0).1;
    }
    Ok((!state.terminated).then_some(state))
}

fn batching_case(backend: &dyn Backend, case: u64) -> Vec<Failure> {
    let mut rng = SplitMix64::fork(case, 0xBA7C);
    let m = 1 + rng.next_below(8);
    let k = 1 + rng.next_below(8) as u32;
    let eos = backend.config().eos_token;
    let mut states = Vec::new();
    let mut ids = Vec::new();
    let mut id = 0;
    while states.len() < m as usize {
        match ragged_state(backend, &mut rng, RequestId(id)) {
            Ok(Some(s)) => {
                states.push(s);
                ids.push(RequestId(id));
            }
            Ok(None) => {}
            Err(e) => return vec![fail(case, Some(RequestId(id)), e)],
        }
        id += 1;
    }
    let batched = match decode(backend, states.clone(), ids.clone(), k) {
        Ok(b) => b,
        Err(e) => return vec![fail(case, None, e)],
    };
    let mut failures = Vec::new();
    for ((state, id), (got_id, got)) in states.into_iter().zip(ids).zip(batched) {
        if got_id != id {
            failures.push(fail(case, Some(id), format!("batch order changed: got {got_id}")));
            continue;
        }
        if let Err(e) = got.check(eos) {
            failures.push(fail(case, Some(id), e));
            continue;
        }
        match decode(backend, vec![state], vec![id], k) {
            Ok(alone) if alone[0].1 == got => {}
            Ok(alone) => failures.push(fail(
                case,
                Some(id),
                format!(
                    "m={m} k={k}: batched tokens {:?} differ from alone {:?}",
                    got.tokens, alone[0].1.tokens
                ),
            )),
            Err(e) => failures.push(fail(case, Some(id), e)),
        }
    }
    failures
}

fn resumption_case(backend: &dyn Backend, case: u64) -> Vec<Failure> {
    let mut rng = SplitMix64::fork(case, 0x2E5);
    let id = RequestId(case);
    let eos = backend.config().eos_token;
    let kv = match backend.prefill(&random_obs(&mut rng, backend.config().vocab, 8)) {
        Ok(kv) => kv.value,
        Err(e) => return vec![fail(case, Some(id), e.to_string())],
    };
    let total = 2 + rng.next_below(15) as u32;
    let first = 1 + rng.next_below(total as u64 - 1) as u32;
    let max_len = 1 + rng.next_below(24) as usize;
    let fresh = GenerationState::init(kv, 0, max_len);

    let run = || -> Result<(GenerationState, GenerationState), String> {
        let whole = decode(backend, vec![fresh.clone()], vec![id], total)?.remove(0).1;
        let mut split = decode(backend, vec![fresh.clone()], vec![id], first)?.remove(0).1;
        if !split.terminated {
            split = decode(backend, vec![split], vec![id], total - first)?.remove(0).1;
        }
        Ok((whole, split))
    };
    match run() {
        Ok((whole, split)) => {
            let mut failures = Vec::new();
            for state in [&whole, &split] {
                if let Err(e) = state.check(eos) {
                    failures.push(fail(case, Some(id), e));
                }
            }
            if whole != split {
                failures.push(fail(
                    case,
                    Some(id),
                    format!(
                        "decode({first})+decode({}) gave {:?}, decode({total}) gave {:?}",
                        total - first,
                        split.tokens,
                        whole.tokens
                    ),
                ));
            }
            failures
        }
        Err(e) => vec![fail(case, Some(id), e)],
    }
}

fn sharing_case(backend: &dyn Backend, case: u64) -> Vec<Failure> {
    let mut rng = SplitMix64::fork(case, 0x5A4E);
    let id = RequestId(case);
    let obs = random_obs(&mut rng, backend.config().vocab, 8);
    let n = 1 + rng.next_below(16) as usize;
    let run = || -> Result<Vec<Failure>, String> {
        let shared = backend.prefill(&obs).map_err(|e| e.to_string())?.value;
        let before = shared.clone();
        backend
            .action_denoise(&shared, backend.config().denoise_steps)
            .map_err(|e| e.to_string())?;
        let mut failures = Vec::new();
        if shared != before {
            failures.push(fail(case, Some(id), "action denoise mutated the shared cache"));
        }
        let fresh = backend.prefill(&obs).map_err(|e| e.to_string())?.value;
        let a = decode(backend, vec![GenerationState::init(shared, 0, n)], vec![id], n as u32)?;
        let b = decode(backend, vec![GenerationState::init(fresh, 0, n)], vec![id], n as u32)?;
        if a != b {
            failures.push(fail(case, Some(id), "decode from the shared cache differs from a fresh prefill"));
        }
        if let Err(e) = a[0].1.check(backend.config().eos_token) {
            failures.push(fail(case, Some(id), e));
        }
        Ok(failures)
    };
    run().unwrap_or_else(|e| vec![fail(case, Some(id), e)])
}

fn manager_case(case: u64) -> Vec<Failure> {
    use crate::kv_manager::{BackendTag, KvCache};
    let mut rng = SplitMix64::fork(case, 0x3A6);
    let mut manager = KvManager::new();
    let mut mirror = std::collections::BTreeMap::new();
    let mut failures = Vec::new();
    let new_state = |rng: &mut SplitMix64| {
        let mut kv = KvCache::new(BackendTag::CostModel, 2, 0);
        let len = 1 + rng.next_below(10) as usize;
        kv.layers.iter_mut().for_each(|l| l.len = len);
        GenerationState::init(kv, 0, 64)
    };
    for _ in 0..40 {
        match rng.next_below(3) {
            0 => {
                let s = new_state(&mut rng);
                let expected = RequestId(manager.created());
                match manager.store(s.clone()) {
                    Ok(id) if id == expected => {
                        mirror.insert(id, s);
                    }
                    Ok(id) => failures.push(fail(case, Some(id), format!("expected id {expected}"))),
                    Err(e) => failures.push(fail(case, None, e.to_string())),
                }
            }
            1 if !mirror.is_empty() => {
                let pick = rng.next_below(mirror.len() as u64) as usize;
                let id = *mirror.keys().nth(pick).unwrap();
                let mut s: GenerationState = mirror[&id].clone();
                let add = rng.next_below(5) as usize;
                for _ in 0..add {
                    s.tokens.push(1);
                    s.kv.layers.iter_mut().for_each(|l| l.len += 1);
                }
                if let Err(e) = manager.update(id, s.clone()) {
                    failures.push(fail(case, Some(id), e.to_string()));
                }
                mirror.insert(id, s);
            }
            2 if !mirror.is_empty() => {
                let pick = rng.next_below(mirror.len() as u64) as usize;
                let id = *mirror.keys().nth(pick).unwrap();
                mirror.remove(&id);
                if let Err(e) = manager.remove(id) {
                    failures.push(fail(case, Some(id), e.to_string()));
                }
            }
            _ => {}
        }
        for (id, s) in &mirror {
            if manager.get(*id) != Some(s) {
                failures.push(fail(case, Some(*id), "retrieve disagrees with last write"));
            }
        }
        let expected: u64 = mirror.values().map(|s| s.kv.footprint()).sum();
        if manager.live_positions() != expected {
            failures.push(fail(
                case,
                None,
                format!("gauge {} != {expected}", manager.live_positions()),
            ));
        }
        if manager.active_ids() != mirror.keys().copied().collect::<Vec<_>>() {
            failures.push(fail(case, None, "active ids disagree"));
        }
    }

    let m = 1 + rng.next_below(16) as usize;
    let states: Vec<_> = (0..m)
        .map(|_| {
            let mut s = new_state(&mut rng);
            let extra = rng.next_below(12) as usize;
            s.tokens = vec![3; extra];
            s
        })
        .collect();
    let ids: Vec<_> = (0..m as u64).map(|i| RequestId(i * 3)).collect();
    match batch(states.clone(), ids.clone()).and_then(unbatch) {
        Ok(back) if back == ids.into_iter().zip(states).collect::<Vec<_>>() => {}
        Ok(_) => failures.push(fail(case, None, "unbatch(batch(S)) != S")),
        Err(e) => failures.push(fail(case, None, e.to_string())),
    }
    failures.truncate(4);
    failures
}

fn cross_variant_case(fault: Option<Fault>, case: u64) -> Vec<Failure> {
    let mut rng = SplitMix64::fork(case, 0xC405);
    let config = SimConfig {
        variant: SchedulerVariant::Unified,
        backend_kind: BackendKind::Toy,
        backend: BackendConfig::default(),
        costs: CostModelParams::default(),
        workload: WorkloadSpec {
            pattern: if rng.next_below(2) == 0 {
                ArrivalPattern::OnePerFrame
            } else {
                ArrivalPattern::Poisson { lambda: 0.8 }
            },
            default_n: 1 + rng.next_below(12) as usize,
            obs_len: 1 + rng.next_below(6) as usize,
            num_frames: 1 + rng.next_below(8),
            seed: rng.next_u64(),
        },
        k: 1 + rng.next_below(5) as u32,
        f_min: 1.0,
        pacing: Pacing::LatencyBound,
    };
    let backend = toy(fault);
    let mut transcripts = Vec::new();
    for variant in [
        SchedulerVariant::Unified,
        SchedulerVariant::SharedNoBatch,
        SchedulerVariant::IsolatedSequential,
    ] {
        let cfg = SimConfig {
            variant,
            ..config.clone()
        };
        match sim::run_with_backend(&cfg, &backend) {
            Ok(r) => transcripts.push((variant, r.transcript)),
            Err(e) => return vec![fail(case, None, e.to_string())],
        }
    }
    let reference = &transcripts[0].1;
    let mut failures = Vec::new();
    for (variant, t) in &transcripts[1..] {
        if t.len() != reference.len() {
            failures.push(fail(case, None, format!("{variant} served {} requests", t.len())));
            continue;
        }
        if let Some((a, _)) = reference.iter().zip(t).find(|(a, b)| a != b) {
            failures.push(fail(case, Some(a.id), format!("{variant} transcript differs from unified")));
        }
    }
    failures
}

fn cost_identity_case(case: u64) -> Vec<Failure> {
    let mut rng = SplitMix64::fork(case, 0xC057);
    let k = 1 + rng.next_below(6) as u32;
    let n = k as usize * (1 + rng.next_below(6) as usize);
    let costs = CostModelParams {
        prefill_per_token_us: 1 + rng.next_below(100),
        denoise_per_step_us: 1 + rng.next_below(5_000),
        decode_base_us: 1_000 + rng.next_below(9_000),
        decode_per_request_us: rng.next_below(200),
        contention: 1.6,
    };
    let config = SimConfig {
        variant: SchedulerVariant::Unified,
        backend_kind: BackendKind::CostModel,
        backend: BackendConfig::default(),
        costs: costs.clone(),
        workload: WorkloadSpec {
            pattern: ArrivalPattern::OnePerFrame,
            default_n: n,
            obs_len: 1 + rng.next_below(800) as usize,
            num_frames: 3 * (n as u64 / k as u64) + 5,
            seed: case,
        },
        k,
        f_min: 1.0,
        pacing: Pacing::LatencyBound,
    };
    let run = |variant| {
        let cfg = SimConfig {
            variant,
            ..config.clone()
        };
        let result = sim::run(&cfg).map_err(|e| e.to_string())?;
        let report = metrics::summarize(&result, &cfg).map_err(|e| e.to_string())?;
        Ok::<_, String>((result, report))
    };
    let (ours, base) = match (run(SchedulerVariant::Unified), run(SchedulerVariant::IsolatedSequential)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return vec![fail(case, None, e)],
    };
    let mut failures = Vec::new();
    let b = (n / k as usize) as u64;
    let p = costs.prefill(config.workload.obs_len);
    let d = costs.denoise(config.backend.denoise_steps);
    let t_unified = p + d + costs.decode(k, b as usize);
    let t_base = 2 * p + d + n as u64 * (costs.decode_base_us + costs.decode_per_request_us);
    for t in ours.0.traces.iter().filter(|t| t.frame >= b && t.frame < config.workload.num_frames) {
        if t.batch_size_m as u64 != b || t.latency_us != t_unified || t.completed_ids.len() != 1 {
            failures.push(fail(case, None, format!("frame {} off steady state: {t:?}", t.frame)));
            break;
        }
    }
    let expected = t_base as f64 / t_unified as f64;
    match metrics::speedup(&ours.1, &base.1) {
        Ok(s) if ((s - expected) / expected).abs() <= 1e-9 => {}
        Ok(s) => failures.push(fail(case, None, format!("speedup {s} != {expected}"))),
        Err(e) => failures.push(fail(case, None, e.to_string())),
    }
    let tokens: usize = ours.0.completions.iter().map(|c| c.n_tokens).sum();
    if ours.0.total_tokens() != tokens {
        failures.push(fail(case, None, "token conservation violated"));
    }
    failures
}

fn little_case(case: u64) -> Vec<Failure> {
    let lambda = [0.25, 0.5, 1.0][case as usize % 3];
    let config = SimConfig {
        variant: SchedulerVariant::Unified,
        backend_kind: BackendKind::CostModel,
        backend: BackendConfig::default(),
        costs: CostModelParams::default(),
        workload: WorkloadSpec {
            pattern: ArrivalPattern::Poisson { lambda },
            default_n: 20,
            obs_len: 1,
            num_frames: 20_000,
            seed: case,
        },
        k: 5,
        f_min: 1.0,
        pacing: Pacing::LatencyBound,
    };
    let result = match sim::run(&config) {
        Ok(r) => r,
        Err(e) => return vec![fail(case, None, e.to_string())],
    };
    let report = metrics::summarize(&result, &config).expect("nonempty");
    let expected = lambda * 20.0 / 5.0;
    let got = report.steady.avg_batch_size;
    if (got - expected).abs() / expected > 0.05 {
        vec![fail(case, None, format!("lambda {lambda}: avg batch {got}, expected {expected}"))]
    } else {
        vec![]
    }
}

fn suite(
    name: &'static str,
    cases: usize,
    mode: Parallelism,
    check: impl Fn(u64) -> Vec<Failure> + Sync + Send,
) -> SuiteReport {
    let ids: Vec<u64> = (0..cases as u64).collect();
    let failures = par::map(&ids, mode, |&c| check(c)).into_iter().flatten().collect();
    SuiteReport {
        name,
        cases,
        failures,
    }
}

pub fn run_all(opts: VerifyOptions) -> Vec<SuiteReport> {
    let backend = toy(opts.fault);
    let n = opts.cases;
    vec![
        suite("batching transparency", n, opts.mode, |c| batching_case(&backend, c)),
        suite("resumption transparency", n, opts.mode, |c| resumption_case(&backend, c)),
        suite("sharing transparency", n, opts.mode, |c| sharing_case(&backend, c)),
        suite("manager round-trips", n, opts.mode, manager_case),
        suite("cross-variant invariance", (n / 4).max(1), opts.mode, |c| {
            cross_variant_case(opts.fault, c)
        }),
        suite("cost-model identities", (n / 4).max(1), opts.mode, cost_identity_case),
        suite("little's law", 3, opts.mode, little_case),
    ]
}
