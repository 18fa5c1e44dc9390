//! Sequential versus rayon execution of the same sweep and oracle workloads.
//! Build with `--no-default-features` to see the fallback path alone.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use kvweaver::par::Parallelism;
use kvweaver::sweep::{self, SweepSpec};
use kvweaver::verify::{self, VerifyOptions};

const SWEEP: &str = r#"
[run]
variant = "unified"
backend = "cost_model"
k = 5

[workload]
pattern = "poisson"
lambda = 0.5
n = 20
obs_len = 420
frames = 2000
seed = 1

[sweep.axes]
n = [5, 10, 20, 30, 40]
variant = ["unified", "shared_no_batch", "isolated_sequential"]
seed = [1, 2]
"#;

const MODES: [(&str, Parallelism); 2] = [
    ("sequential", Parallelism::Sequential),
    ("parallel", Parallelism::Parallel),
];

fn bench_sweep(c: &mut Criterion) {
    let points = SweepSpec::parse(SWEEP).unwrap().expand().unwrap();
    let mut group = c.benchmark_group("cost_model_sweep");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| sweep::run_points(&points, mode).unwrap())
        });
    }
    group.finish();
}

fn bench_verify(c: &mut Criterion) {
    let mut group = c.benchmark_group("oracle_suites");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| {
                verify::run_all(VerifyOptions {
                    cases: 100,
                    fault: None,
                    mode,
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_sweep, bench_verify);
criterion_main!(benches);
