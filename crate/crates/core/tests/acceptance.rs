//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Run with `cargo test -p kvweaver --test acceptance --release`.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestCaseError, TestRunner};

use kvweaver::backend::{Backend, BackendConfig, CostModelParams, Observation, ToyBackend};
use kvweaver::kv_manager::{batch, unbatch, BackendTag, GenerationState, KvCache, KvManager, RequestId};
use kvweaver::metrics::{self, MetricsReport};
use kvweaver::report;
use kvweaver::rng::SplitMix64;
use kvweaver::scheduler::{Pacing, SchedulerVariant};
use kvweaver::sim::{self, BackendKind, SimConfig, SimResult};
use kvweaver::sweep;
use kvweaver::workload::{ArrivalPattern, WorkloadSpec};

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- helpers

fn toy_backend(seed: u64) -> ToyBackend {
    ToyBackend::new(
        BackendConfig {
            seed,
            ..BackendConfig::default()
        },
        CostModelParams::default(),
    )
}

/// Picks as EOS a token the model emits early, so stopping paths get exercised.
fn eos_prone_backend(seed: u64) -> ToyBackend {
    let probe = toy_backend(seed);
    let kv = probe
        .prefill(&Observation {
            frame: 0,
            tokens: vec![1, 2, 3],
        })
        .unwrap()
        .value;
    let state = decode_alone(&probe, GenerationState::init(kv, 0, 8), RequestId(0), 2);
    ToyBackend::new(
        BackendConfig {
            seed,
            eos_token: state.tokens[1],
            ..BackendConfig::default()
        },
        CostModelParams::default(),
    )
}

fn random_obs(rng: &mut SplitMix64, vocab: u32) -> Observation {
    let len = 1 + rng.next_below(10) as usize;
    Observation {
        frame: 0,
        tokens: (0..len).map(|_| rng.next_below(vocab as u64) as u32).collect(),
    }
}

/// Decodes one request alone (batch of one).
fn decode_alone(backend: &dyn Backend, state: GenerationState, id: RequestId, k: u32) -> GenerationState {
    let out = backend
        .batched_language_decode(batch(vec![state], vec![id]).unwrap(), k)
        .unwrap();
    unbatch(out.value).unwrap().remove(0).1
}

fn cost_config(variant: SchedulerVariant, n: usize, k: u32, frames: u64, costs: &CostModelParams) -> SimConfig {
    SimConfig {
        variant,
        backend_kind: BackendKind::CostModel,
        backend: BackendConfig::default(),
        costs: costs.clone(),
        workload: WorkloadSpec {
            pattern: ArrivalPattern::OnePerFrame,
            default_n: n,
            obs_len: 420,
            num_frames: frames,
            seed: 11,
        },
        k,
        f_min: 1.0,
        pacing: Pacing::LatencyBound,
    }
}

fn simulate(config: &SimConfig) -> (SimResult, MetricsReport) {
    let result = sim::run(config).unwrap();
    let report = metrics::summarize(&result, config).unwrap();
    (result, report)
}

fn sim_speedup(n: usize, k: u32, costs: &CostModelParams) -> f64 {
    let frames = 3 * (n as u64).div_ceil(k as u64) + 10;
    let (_, ours) = simulate(&cost_config(SchedulerVariant::Unified, n, k, frames, costs));
    let (_, base) = simulate(&cost_config(SchedulerVariant::IsolatedSequential, n, k, frames, costs));
    metrics::speedup(&ours, &base).unwrap()
}

/// Closed-form steady-state frame latencies (one arrival per frame, k | N).
struct ClosedForm {
    prefill: u64,
    denoise: u64,
    per_step_alone: u64,
}

impl ClosedForm {
    fn new(costs: &CostModelParams, obs_len: u64, steps: u64) -> Self {
        Self {
            prefill: costs.prefill_per_token_us * obs_len,
            denoise: costs.denoise_per_step_us * steps,
            per_step_alone: costs.decode_base_us + costs.decode_per_request_us,
        }
    }

    fn unified(&self, costs: &CostModelParams, n: u64, k: u64) -> u64 {
        let m = n / k;
        self.prefill + self.denoise + k * (costs.decode_base_us + costs.decode_per_request_us * m)
    }

    fn isolated(&self, n: u64) -> u64 {
        2 * self.prefill + self.denoise + n * self.per_step_alone
    }
}

// ------------------------------------------------------------- criteria

fn batching_transparency() -> Outcome {
    let start = Instant::now();
    let mut backends: Vec<ToyBackend> = (0..4).map(|s| toy_backend(0xA11CE + s)).collect();
    backends.extend((0..4).map(|s| eos_prone_backend(0xA11CE + s)));
    let mut scenarios = 0;
    let mut requests = 0;
    let mut mismatches = Vec::new();
    let mut eos_stops = 0;
    for case in 0..256u64 {
        let backend = &backends[case as usize % backends.len()];
        let eos = backend.config().eos_token;
        let mut rng = SplitMix64::new(0xB000 + case);
        let m = 1 + rng.next_below(8) as usize;
        let k = 1 + rng.next_below(8) as u32;
        let mut states = Vec::new();
        while states.len() < m {
            let kv = backend.prefill(&random_obs(&mut rng, 64)).unwrap().value;
            let history = rng.next_below(13) as usize;
            let mut s = GenerationState::init(kv, 0, history + 1 + rng.next_below(16) as usize);
            // Ragged history built one token at a time.
            for _ in 0..history {
                if s.terminated {
                    break;
                }
                s = decode_alone(backend, s, RequestId(0), 1);
            }
            if !s.terminated {
                states.push(s);
            }
        }
        let ids: Vec<RequestId> = (0..m as u64).map(RequestId).collect();
        let out = backend
            .batched_language_decode(batch(states.clone(), ids.clone()).unwrap(), k)
            .unwrap();
        for ((id, got), (state, want_id)) in unbatch(out.value).unwrap().into_iter().zip(states.into_iter().zip(ids)) {
            requests += 1;
            let want = decode_alone(backend, state, want_id, k);
            if got.tokens.last() == Some(&eos) {
                eos_stops += 1;
            }
            if id != want_id || got != want || got.check(eos).is_err() {
                mismatches.push((case, id));
            }
        }
        scenarios += 1;
    }
    let elapsed = start.elapsed();
    outcome(
        mismatches.is_empty() && scenarios >= 200 && elapsed < Duration::from_secs(30),
        format!(
            "{scenarios} scenarios, {requests} requests ({eos_stops} stopped on EOS), {} mismatches, {:.2?}",
            mismatches.len(),
            elapsed
        ),
    )
}

fn resumption_transparency() -> Outcome {
    let start = Instant::now();
    let backend = toy_backend(0xBEEF);
    let eos = backend.config().eos_token;
    let mut mismatches = 0;
    let cases = 256;
    for case in 0..cases {
        let mut rng = SplitMix64::new(0xC000 + case);
        let kv = backend.prefill(&random_obs(&mut rng, 64)).unwrap().value;
        let total = 2 + rng.next_below(20) as u32;
        let k1 = 1 + rng.next_below(total as u64 - 1) as u32;
        let k2 = total - k1;
        let max_len = 1 + rng.next_below(24) as usize;
        let fresh = GenerationState::init(kv, 0, max_len);
        let id = RequestId(case);

        let whole = decode_alone(&backend, fresh.clone(), id, k1 + k2);
        let mut split = decode_alone(&backend, fresh, id, k1);
        if !split.terminated {
            split = decode_alone(&backend, split, id, k2);
        }
        let same_tokens = whole.tokens == split.tokens;
        let same_kv = whole.kv == split.kv && whole.kv.seq_len() == split.kv.seq_len();
        if !(same_tokens && same_kv && whole.check(eos).is_ok() && split.check(eos).is_ok()) {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        mismatches == 0 && elapsed < Duration::from_secs(30),
        format!("{cases} split points, {mismatches} mismatches, {elapsed:.2?}"),
    )
}

fn cross_variant_invariance() -> Outcome {
    let mut differing = Vec::new();
    let mut requests = 0;
    for case in 0..50u64 {
        let mut rng = SplitMix64::new(0xD000 + case);
        let pattern = match rng.next_below(3) {
            0 => ArrivalPattern::OnePerFrame,
            1 => ArrivalPattern::Poisson { lambda: 1.2 },
            _ => ArrivalPattern::MixedLength {
                short_n: 2,
                long_n: 14,
                p_long: 0.4,
            },
        };
        let base = SimConfig {
            variant: SchedulerVariant::Unified,
            backend_kind: BackendKind::Toy,
            backend: BackendConfig {
                seed: case,
                ..BackendConfig::default()
            },
            costs: CostModelParams::default(),
            workload: WorkloadSpec {
                pattern,
                default_n: 1 + rng.next_below(16) as usize,
                obs_len: 1 + rng.next_below(8) as usize,
                num_frames: 1 + rng.next_below(10),
                seed: rng.next_u64(),
            },
            k: 1 + rng.next_below(6) as u32,
            f_min: 1.0,
            pacing: Pacing::LatencyBound,
        };
        let transcripts: Vec<_> = [
            SchedulerVariant::Unified,
            SchedulerVariant::SharedNoBatch,
            SchedulerVariant::IsolatedSequential,
        ]
        .into_iter()
        .map(|variant| sim::run(&SimConfig { variant, ..base.clone() }).unwrap().transcript)
        .collect();
        requests += transcripts[0].len();
        if transcripts.iter().any(|t| t != &transcripts[0]) {
            differing.push(case);
        }
    }
    outcome(
        differing.is_empty(),
        format!("50 workloads, {requests} requests, {} differing", differing.len()),
    )
}

fn steady_state_n12_k4() -> Outcome {
    let costs = CostModelParams::default();
    let frames = 20;
    let unified_cfg = cost_config(SchedulerVariant::Unified, 12, 4, frames, &costs);
    let (unified, ours) = simulate(&unified_cfg);
    let (_, base) = simulate(&cost_config(SchedulerVariant::IsolatedSequential, 12, 4, frames, &costs));

    let warmup_sizes: Vec<_> = unified.traces[..2].iter().map(|t| t.batch_size_m).collect();
    let steady_ok = unified.traces[2..frames as usize]
        .iter()
        .all(|t| t.batch_size_m == 3 && t.tokens_emitted == 12 && t.completed_ids.len() == 1);

    let cf = ClosedForm::new(&costs, 420, 10);
    let t_unified = cf.unified(&costs, 12, 4);
    let t_base = cf.isolated(12);
    let delta = t_base - t_unified;
    let closed = 1.0 + delta as f64 / t_unified as f64;
    let from_traces = metrics::speedup(&ours, &base).unwrap();
    let ratio_t = base.steady.mean_frame_us() / ours.steady.mean_frame_us();
    let rel = |a: f64, b: f64| ((a - b) / b).abs();
    let identity_ok = rel(from_traces, ratio_t) <= 1e-9 && rel(from_traces, closed) <= 1e-9;
    let tau_identity = ours.steady.avg_batch_size * 4.0 / (ours.steady.mean_frame_us() / 1e6);
    let tau_ok = rel(ours.steady.token_throughput, tau_identity) <= 1e-9;

    outcome(
        warmup_sizes == [1, 2] && steady_ok && identity_ok && tau_ok,
        format!(
            "warmup m={warmup_sizes:?}, steady m=3/12 tok/1 completion: {steady_ok}, \
             speedup {from_traces:.6} vs T_base/T_ours {ratio_t:.6} vs 1+dT/T {closed:.6}"
        ),
    )
}

fn strictly(values: &[f64], increasing: bool) -> bool {
    values
        .windows(2)
        .all(|w| if increasing { w[1] > w[0] } else { w[1] < w[0] })
}

fn trend_reproduction() -> Outcome {
    let ns = [5usize, 10, 20, 30, 40];
    let ks = [1u32, 2, 5, 10, 15, 30];
    let mut rng = SplitMix64::new(0xE000);
    let mut constant_sets = vec![CostModelParams::default()];
    for _ in 0..8 {
        let base = 1_000 + rng.next_below(20_000);
        constant_sets.push(CostModelParams {
            prefill_per_token_us: 1 + rng.next_below(100),
            denoise_per_step_us: 100 + rng.next_below(5_000),
            decode_base_us: base,
            decode_per_request_us: rng.next_below(base / 20 + 1),
            contention: 1.6,
        });
    }
    let mut monotone_ok = true;
    for costs in &constant_sets {
        let over_n: Vec<f64> = ns.iter().map(|&n| sim_speedup(n, 5, costs)).collect();
        let over_k: Vec<f64> = ks.iter().map(|&k| sim_speedup(30, k, costs)).collect();
        monotone_ok &= strictly(&over_n, true) && strictly(&over_k, false);
    }

    // Calibrated constants: phase shares of the isolated N=5 frame.
    let costs = CostModelParams::default();
    let cf = ClosedForm::new(&costs, 420, 10);
    let short = cf.isolated(5) as f64;
    let shares = [
        2.0 * cf.prefill as f64 / short,
        cf.denoise as f64 / short,
        5.0 * cf.per_step_alone as f64 / short,
    ];
    let shares_ok = (shares[0] - 0.40).abs() <= 0.05
        && (shares[1] - 0.30).abs() <= 0.05
        && (shares[2] - 0.30).abs() <= 0.05;
    let calibrated: Vec<f64> = ns.iter().map(|&n| sim_speedup(n, 5, &costs)).collect();
    let lo = calibrated.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = calibrated.iter().copied().fold(0.0, f64::max);
    let range_ok = lo >= 1.2 && hi <= 4.0;
    let over_k: Vec<f64> = ks.iter().map(|&k| sim_speedup(30, k, &costs)).collect();

    outcome(
        monotone_ok && shares_ok && range_ok,
        format!(
            "monotone over {} constant sets: {monotone_ok}; shares prefill/denoise/decode = \
             {:.2}/{:.2}/{:.2}; N-sweep speedup {:?} in [{lo:.2}, {hi:.2}]; k-sweep at N=30 {:?}",
            constant_sets.len(),
            shares[0],
            shares[1],
            shares[2],
            calibrated.iter().map(|s| format!("{s:.2}")).collect::<Vec<_>>(),
            over_k.iter().map(|s| format!("{s:.2}")).collect::<Vec<_>>(),
        ),
    )
}

fn ablation_shape() -> Outcome {
    let costs = CostModelParams::default();
    let k = 5;
    let mut table = BTreeMap::new();
    for n in (5..=60).step_by(5) {
        let frames = 3 * (n as u64).div_ceil(k as u64) + 10;
        let f = |variant| {
            let (_, r) = simulate(&cost_config(variant, n, k, frames, &costs));
            r.steady.per_request_action_freq_hz
        };
        table.insert(
            n,
            [
                f(SchedulerVariant::Unified),
                f(SchedulerVariant::SharedNoBatch),
                f(SchedulerVariant::IsolatedSequential),
            ],
        );
    }
    let unified: Vec<f64> = table.values().map(|r| r[0]).collect();
    let umax = unified.iter().copied().fold(0.0, f64::max);
    let umin = unified.iter().copied().fold(f64::INFINITY, f64::min);
    let variation = umax / umin - 1.0;
    let iso_ratio = table[&60][2] / table[&5][2];
    let ordering = table.values().all(|r| r[0] >= r[1] && r[1] >= r[2]);
    outcome(
        variation < 0.15 && iso_ratio <= 0.45 && ordering,
        format!(
            "unified f {:.1}..{:.1} Hz (variation {:.1}%), isolated f(60)/f(5) = {:.3} \
             ({:.1} -> {:.1} Hz), ordering holds: {ordering}",
            umin,
            umax,
            variation * 100.0,
            iso_ratio,
            table[&5][2],
            table[&60][2]
        ),
    )
}

fn littles_law() -> Outcome {
    let start = Instant::now();
    let mut all_ok = true;
    let mut parts = Vec::new();
    for lambda in [0.25, 0.5, 1.0] {
        let config = SimConfig {
            variant: SchedulerVariant::Unified,
            backend_kind: BackendKind::CostModel,
            backend: BackendConfig::default(),
            costs: CostModelParams::default(),
            workload: WorkloadSpec {
                pattern: ArrivalPattern::Poisson { lambda },
                default_n: 20,
                obs_len: 420,
                num_frames: 100_000,
                seed: 2024,
            },
            k: 5,
            f_min: 1.0,
            pacing: Pacing::LatencyBound,
        };
        let (_, report) = simulate(&config);
        let expected = lambda * 20.0 / 5.0;
        let got = report.steady.avg_batch_size;
        let err = (got - expected).abs() / expected;
        all_ok &= err <= 0.05;
        parts.push(format!("lambda={lambda}: B={got:.4} (expected {expected}, err {:.2}%)", err * 100.0));
    }
    let elapsed = start.elapsed();
    outcome(
        all_ok && elapsed < Duration::from_secs(60),
        format!("{}; {elapsed:.2?}", parts.join(", ")),
    )
}

#[derive(Debug, Clone)]
enum Op {
    Store { prefill: usize },
    Update { pick: usize, extra: usize },
    Remove { pick: usize },
}

fn op_strategy() -> impl Strategy<Value = Op> {
    prop_oneof![
        (1usize..12).prop_map(|prefill| Op::Store { prefill }),
        (any::<usize>(), 0usize..6).prop_map(|(pick, extra)| Op::Update { pick, extra }),
        any::<usize>().prop_map(|pick| Op::Remove { pick }),
    ]
}

fn counted_state(prefill: usize, max_len: usize) -> GenerationState {
    let mut kv = KvCache::new(BackendTag::CostModel, 3, 0);
    kv.layers.iter_mut().for_each(|l| l.len = prefill);
    GenerationState::init(kv, 0, max_len)
}

fn check_manager_case(ops: &[Op], ragged: &[usize]) -> Result<(), TestCaseError> {
    let mut manager = KvManager::new();
    let mut model: BTreeMap<RequestId, GenerationState> = BTreeMap::new();
    let mut stores = 0u64;
    for op in ops {
        match *op {
            Op::Store { prefill } => {
                let state = counted_state(prefill, 64);
                let id = manager.store(state.clone()).unwrap();
                prop_assert_eq!(id, RequestId(stores), "ids must increase by one");
                stores += 1;
                prop_assert_eq!(manager.retrieve(id).unwrap(), state.clone());
                model.insert(id, state);
            }
            Op::Update { pick, extra } if !model.is_empty() => {
                let id = *model.keys().nth(pick % model.len()).unwrap();
                let mut next = model[&id].clone();
                for _ in 0..extra {
                    next.tokens.push(7);
                    next.kv.layers.iter_mut().for_each(|l| l.len += 1);
                }
                manager.update(id, next.clone()).unwrap();
                prop_assert_eq!(manager.retrieve(id).unwrap(), next.clone());
                if let Some(&first) = next.tokens.first() {
                    let mut bad = next.clone();
                    bad.tokens[0] = first + 1;
                    prop_assert!(manager.update(id, bad).is_err(), "prefix violation accepted");
                }
                model.insert(id, next);
            }
            Op::Remove { pick } if !model.is_empty() => {
                let id = *model.keys().nth(pick % model.len()).unwrap();
                let before = manager.live_positions();
                let gone = manager.remove(id).unwrap();
                prop_assert_eq!(before - manager.live_positions(), gone.kv.footprint());
                prop_assert!(manager.retrieve(id).is_err());
                prop_assert!(manager.remove(id).is_err());
                model.remove(&id);
            }
            _ => {}
        }
        let gauge: u64 = model.values().map(|s| (s.kv.seq_len() * s.kv.num_layers()) as u64).sum();
        prop_assert_eq!(manager.live_positions(), gauge);
        prop_assert_eq!(manager.active_ids(), model.keys().copied().collect::<Vec<_>>());
    }

    let states: Vec<GenerationState> = ragged
        .iter()
        .map(|&len| {
            let mut s = counted_state(3, 64);
            s.tokens = (0..len as u32).collect();
            s.kv.layers.iter_mut().for_each(|l| l.len += len);
            s
        })
        .collect();
    let ids: Vec<RequestId> = (0..states.len() as u64).map(|i| RequestId(100 + i)).collect();
    let back = unbatch(batch(states.clone(), ids.clone()).unwrap()).unwrap();
    prop_assert_eq!(back, ids.into_iter().zip(states).collect::<Vec<_>>());
    Ok(())
}

fn manager_properties() -> Outcome {
    let mut runner = TestRunner::new(PropConfig {
        cases: 1000,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = (
        proptest::collection::vec(op_strategy(), 0..60),
        proptest::collection::vec(0usize..20, 1..=16),
    );
    match runner.run(&strategy, |(ops, ragged)| check_manager_case(&ops, &ragged)) {
        Ok(()) => outcome(true, "1000 randomized cases, 0 failures"),
        Err(e) => outcome(false, format!("{e}")),
    }
}

fn determinism() -> Outcome {
    let mut configs = Vec::new();
    for variant in SchedulerVariant::ALL {
        let mut c = cost_config(variant, 20, 5, 60, &CostModelParams::default());
        c.workload.pattern = ArrivalPattern::Poisson { lambda: 0.7 };
        configs.push(c);
    }
    for variant in [
        SchedulerVariant::Unified,
        SchedulerVariant::SharedNoBatch,
        SchedulerVariant::IsolatedSequential,
    ] {
        let mut c = cost_config(variant, 9, 3, 12, &CostModelParams::default());
        c.backend_kind = BackendKind::Toy;
        c.workload.obs_len = 6;
        configs.push(c);
    }
    let render = |c: &SimConfig| {
        let result = sim::run(c).unwrap();
        let row = sweep::evaluate(0, c).unwrap().row;
        (report::csv_string(&[row]), serde_json::to_string(&result.transcript).unwrap(), result.to_json())
    };
    let identical = configs.iter().filter(|c| render(c) == render(c)).count();
    outcome(
        identical == configs.len(),
        format!("{identical}/{} configs byte-identical across runs", configs.len()),
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("1 batching transparency", batching_transparency),
        ("2 resumption transparency", resumption_transparency),
        ("3 cross-variant output invariance", cross_variant_invariance),
        ("4 steady state N=12 k=4", steady_state_n12_k4),
        ("5 speedup trends over N and k", trend_reproduction),
        ("6 ablation shape", ablation_shape),
        ("7 little's law under poisson arrivals", littles_law),
        ("8 manager property suite", manager_properties),
        ("9 determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let result = check();
        let tag = if result.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] criterion {name}: {}", result.detail);
        if !result.pass {
            failed += 1;
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
