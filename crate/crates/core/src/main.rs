use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use kvweaver::backend::Fault;
use kvweaver::config::RunFile;
use kvweaver::par::{self, Parallelism};
use kvweaver::report;
use kvweaver::sim::SimConfig;
use kvweaver::sweep::{self, SweepSpec};
use kvweaver::verify::{self, VerifyOptions};

const EXIT_VERIFY_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "kvweaver", version, about = "Deadline-aware multi-task VLA inference simulator")]
struct Cli {
    /// Worker threads for sweeps and verification.
    #[arg(long, global = true, env = "KVWEAVER_JOBS")]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one configuration and print its metrics.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the workload seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for metrics.csv and trace.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the cross product of a sweep file and write one CSV row per run.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `sweep.output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        no_svg: bool,
    },
    /// Run the built-in oracle suites.
    Verify {
        /// Randomized cases per suite.
        #[arg(long, default_value_t = 200)]
        cases: usize,
        /// Inject a defect to confirm the suites catch it.
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    SkipKvAppend,
}

fn config_error(e: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(EXIT_CONFIG)
}

fn print_summary(config: &SimConfig, frames: usize, m: &kvweaver::MetricsReport, speedup: f64) {
    let s = &m.steady;
    println!(
        "variant={} backend={} N={} k={} H={} S={} pattern={}",
        config.variant,
        config.backend_kind.name(),
        config.workload.default_n,
        config.k,
        config.backend.horizon,
        config.backend.denoise_steps,
        config.workload.pattern.name()
    );
    println!(
        "frames={frames} warmup={} steady_frames={} completions/frame={:.3}",
        m.warmup_frames,
        s.frames,
        if s.frames > 0 { s.action_frames as f64 / s.frames as f64 } else { 0.0 }
    );
    println!(
        "T={:.1}us f={:.2}Hz f_per_request={:.2}Hz tau={:.2}tok/s B={:.3} deadline_miss_rate={:.3}",
        s.mean_frame_us(),
        s.action_freq_hz,
        s.per_request_action_freq_hz,
        s.token_throughput,
        s.avg_batch_size,
        s.deadline_miss_rate
    );
    println!("speedup_vs_isolated={speedup:.4}");
    if s.action_freq_hz < config.f_min {
        println!(
            "infeasible: action frequency {:.2}Hz is below f_min {:.2}Hz",
            s.action_freq_hz, config.f_min
        );
    }
}

fn cmd_run(config: PathBuf, seed: Option<u64>, out: Option<PathBuf>) -> ExitCode {
    let mut config = match RunFile::load(&config).and_then(|f| f.to_sim_config()) {
        Ok(c) => c,
        Err(e) => return config_error(e),
    };
    if let Some(seed) = seed {
        config.workload.seed = seed;
    }
    let result = match kvweaver::sim::run(&config) {
        Ok(r) => r,
        Err(e) => return config_error(e),
    };
    let outcome = match sweep::evaluate(0, &config) {
        Ok(o) => o,
        Err(e) => return config_error(e),
    };
    print_summary(&config, result.traces.len(), &outcome.report, outcome.row.speedup_vs_isolated);
    if let Some(dir) = out {
        let written = std::fs::create_dir_all(&dir)
            .and_then(|_| {
                report::write_csv(std::fs::File::create(dir.join("metrics.csv"))?, &[outcome.row])
            })
            .and_then(|_| std::fs::write(dir.join("trace.json"), result.to_json()));
        if let Err(e) = written {
            return config_error(format!("writing {}: {e}", dir.display()));
        }
        println!("wrote {}", dir.display());
    }
    ExitCode::SUCCESS
}

fn cmd_sweep(config: PathBuf, seed: Option<u64>, out: Option<PathBuf>, no_svg: bool) -> ExitCode {
    let mut spec = match SweepSpec::load(&config) {
        Ok(s) => s,
        Err(e) => return config_error(e),
    };
    if let Some(seed) = seed {
        spec.base.workload.seed = seed;
    }
    let points = match spec.expand() {
        Ok(p) => p,
        Err(e) => return config_error(e),
    };
    let outcomes = match sweep::run_points(&points, Parallelism::Parallel) {
        Ok(o) => o,
        Err(e) => return config_error(e),
    };
    print!("{}", report::csv_string(&outcomes.iter().map(|o| o.row.clone()).collect::<Vec<_>>()));
    if let Some(dir) = out.or_else(|| spec.output_dir.clone()) {
        match sweep::write_outputs(&dir, &spec, &points, &outcomes, !no_svg) {
            Ok(files) => {
                for f in files {
                    eprintln!("wrote {}", f.display());
                }
            }
            Err(e) => return config_error(format!("writing {}: {e}", dir.display())),
        }
    }
    ExitCode::SUCCESS
}

fn cmd_verify(cases: usize, fault: Option<FaultArg>) -> ExitCode {
    let opts = VerifyOptions {
        cases: cases.max(1),
        fault: fault.map(|FaultArg::SkipKvAppend| Fault::SkipKvAppend),
        mode: Parallelism::Parallel,
    };
    let reports = verify::run_all(opts);
    let mut ok = true;
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{status:4} {:<26} cases={:<5} failures={}", r.name, r.cases, r.failures.len());
        if let Some(first) = r.failures.first() {
            ok = false;
            println!("     first failure: {first}");
        }
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_VERIFY_FAILED)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    par::with_jobs(cli.jobs, move || match cli.command {
        Command::Run { config, seed, out } => cmd_run(config, seed, out),
        Command::Sweep {
            config,
            seed,
            out,
            no_svg,
        } => cmd_sweep(config, seed, out, no_svg),
        Command::Verify {
            cases,
            inject_fault,
        } => cmd_verify(cases, inject_fault),
    })
}
