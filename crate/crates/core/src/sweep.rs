//! Cross-product parameter sweeps.
//!
//! A sweep file is a run file plus a `[sweep]` table:
//!
//! ```toml
//! [sweep]
//! output_dir = "out/n_sweep"
//! max_runs = 10000
//! [sweep.axes]
//! variant = ["unified", "shared_no_batch", "isolated_sequential"]
//! n = [5, 10, 20, 40]
//! ```
//!
//! Axes are expanded in alphabetical order with the last axis varying
//! fastest. Supported axes: backend, contention, denoise_steps, frames, k,
//! lambda, n, obs_len, p_long, rate, seed, variant.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::backend::{BackendConfig, CostModelParams};
use crate::config::{ConfigError, RunFile, RunSection, WorkloadSection};
use crate::metrics::{self, MetricsReport};
use crate::par::{self, Parallelism};
use crate::report::{self, MetricsRow, Series};
use crate::scheduler::SchedulerVariant;
use crate::sim::{self, SimConfig};

pub const DEFAULT_MAX_RUNS: usize = 10_000;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub output_dir: Option<PathBuf>,
    pub max_runs: Option<usize>,
    #[serde(default)]
    pub axes: BTreeMap<String, Vec<toml::Value>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepFile {
    pub run: RunSection,
    pub workload: WorkloadSection,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub cost: CostModelParams,
    #[serde(default)]
    pub sweep: SweepSection,
}

/// One expanded point of a sweep.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub assignments: Vec<(String, toml::Value)>,
    pub config: SimConfig,
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub base: RunFile,
    pub axes: Vec<(String, Vec<toml::Value>)>,
    pub output_dir: Option<PathBuf>,
    pub max_runs: usize,
}

impl SweepSpec {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let file: SweepFile = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        Ok(Self {
            base: RunFile {
                run: file.run,
                workload: file.workload,
                backend: file.backend,
                cost: file.cost,
            },
            axes: file.sweep.axes.into_iter().collect(),
            output_dir: file.sweep.output_dir,
            max_runs: file.sweep.max_runs.unwrap_or(DEFAULT_MAX_RUNS),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text).map_err(|e| match e {
            ConfigError::Parse(msg) => ConfigError::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn size(&self) -> usize {
        self.axes.iter().map(|(_, v)| v.len()).product()
    }

    /// Expands the cross product, validating every point.
    pub fn expand(&self) -> Result<Vec<SweepPoint>, ConfigError> {
        let size = self.size();
        if size > self.max_runs {
            return Err(ConfigError::Field {
                field: "sweep.axes".into(),
                msg: format!("{size} runs exceed the cap of {}", self.max_runs),
            });
        }
        let mut points = Vec::with_capacity(size);
        for index in 0..size {
            let mut file = self.base.clone();
            let mut assignments = Vec::new();
            let mut rest = index;
            for (name, values) in self.axes.iter().rev() {
                let value = &values[rest % values.len()];
                rest /= values.len();
                apply_axis(&mut file, name, value)?;
                assignments.push((name.clone(), value.clone()));
            }
            assignments.reverse();
            points.push(SweepPoint {
                assignments,
                config: file.to_sim_config()?,
            });
        }
        Ok(points)
    }
}

fn axis_error(name: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field: format!("sweep.axes.{name}"),
        msg: msg.into(),
    }
}

fn as_u64(name: &str, v: &toml::Value) -> Result<u64, ConfigError> {
    v.as_integer()
        .and_then(|i| u64::try_from(i).ok())
        .ok_or_else(|| axis_error(name, format!("expected a nonnegative integer, got {v}")))
}

fn as_f64(name: &str, v: &toml::Value) -> Result<f64, ConfigError> {
    v.as_float()
        .or_else(|| v.as_integer().map(|i| i as f64))
        .ok_or_else(|| axis_error(name, format!("expected a number, got {v}")))
}

fn as_str<'a>(name: &str, v: &'a toml::Value) -> Result<&'a str, ConfigError> {
    v.as_str()
        .ok_or_else(|| axis_error(name, format!("expected a string, got {v}")))
}

fn apply_axis(file: &mut RunFile, name: &str, v: &toml::Value) -> Result<(), ConfigError> {
    match name {
        "variant" => file.run.variant = as_str(name, v)?.to_string(),
        "backend" => file.run.backend = as_str(name, v)?.to_string(),
        "k" => file.run.k = as_u64(name, v)? as u32,
        "n" => file.workload.n = as_u64(name, v)? as usize,
        "obs_len" => file.workload.obs_len = as_u64(name, v)? as usize,
        "frames" => file.workload.frames = as_u64(name, v)?,
        "seed" => file.workload.seed = as_u64(name, v)?,
        "lambda" => file.workload.lambda = Some(as_f64(name, v)?),
        "rate" => file.workload.rate = Some(as_f64(name, v)?),
        "p_long" => file.workload.p_long = Some(as_f64(name, v)?),
        "denoise_steps" => file.backend.denoise_steps = as_u64(name, v)? as u32,
        "contention" => file.cost.contention = as_f64(name, v)?,
        _ => return Err(axis_error(name, "unknown axis")),
    }
    Ok(())
}

/// Outcome of one sweep point.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub row: MetricsRow,
    pub report: MetricsReport,
}

/// Runs one config and its isolated-sequential twin, returning the CSV row.
pub fn evaluate(run_id: usize, config: &SimConfig) -> Result<RunOutcome, anyhow::Error> {
    let result = sim::run(config)?;
    let report = metrics::summarize(&result, config)?;
    let speedup = if config.variant == SchedulerVariant::IsolatedSequential {
        1.0
    } else {
        let baseline = SimConfig {
            variant: SchedulerVariant::IsolatedSequential,
            ..config.clone()
        };
        let base_result = sim::run(&baseline)?;
        let base_report = metrics::summarize(&base_result, &baseline)?;
        metrics::speedup(&report, &base_report)?
    };
    Ok(RunOutcome {
        row: MetricsRow::new(run_id, config, result.traces.len(), &report, speedup),
        report,
    })
}

pub fn run_points(points: &[SweepPoint], mode: Parallelism) -> Result<Vec<RunOutcome>, anyhow::Error> {
    let indexed: Vec<(usize, &SweepPoint)> = points.iter().enumerate().collect();
    par::map(&indexed, mode, |(i, p)| evaluate(*i, &p.config))
        .into_iter()
        .collect()
}

/// Picks the x axis for charts: the first numeric axis with several values.
pub fn chart_axis(spec: &SweepSpec) -> Option<&str> {
    spec.axes
        .iter()
        .find(|(name, values)| values.len() > 1 && values.iter().all(|v| as_f64(name, v).is_ok()))
        .map(|(name, _)| name.as_str())
}

type Points = Vec<(f64, f64)>;

/// Builds `(f, tau)` chart series grouped by every non-x assignment.
pub fn chart_series(
    points: &[SweepPoint],
    outcomes: &[RunOutcome],
    x_axis: &str,
) -> (Vec<Series>, Vec<Series>) {
    let mut groups: BTreeMap<String, (Points, Points)> = BTreeMap::new();
    for (point, outcome) in points.iter().zip(outcomes) {
        let mut label = Vec::new();
        let mut x = 0.0;
        for (name, value) in &point.assignments {
            if name == x_axis {
                x = as_f64(name, value).unwrap_or(0.0);
            } else {
                label.push(match value.as_str() {
                    Some(s) => s.to_string(),
                    None => format!("{name}={value}"),
                });
            }
        }
        let label = if label.is_empty() {
            point.config.variant.name().to_string()
        } else {
            label.join(" ")
        };
        let entry = groups.entry(label).or_default();
        entry.0.push((x, outcome.row.f_per_request_hz));
        entry.1.push((x, outcome.row.tau_tok_per_s));
    }
    let mut f = Vec::new();
    let mut tau = Vec::new();
    for (label, (mut fp, mut tp)) in groups {
        fp.sort_by(|a, b| a.0.total_cmp(&b.0));
        tp.sort_by(|a, b| a.0.total_cmp(&b.0));
        f.push(Series {
            label: label.clone(),
            points: fp,
        });
        tau.push(Series { label, points: tp });
    }
    (f, tau)
}

/// Writes `sweep.csv` and, unless disabled, the two SVG charts.
pub fn write_outputs(
    dir: &Path,
    spec: &SweepSpec,
    points: &[SweepPoint],
    outcomes: &[RunOutcome],
    svg: bool,
) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let rows: Vec<MetricsRow> = outcomes.iter().map(|o| o.row.clone()).collect();
    let csv_path = dir.join("sweep.csv");
    report::write_csv(std::fs::File::create(&csv_path)?, &rows)?;
    let mut written = vec![csv_path];
    if let (true, Some(x)) = (svg, chart_axis(spec)) {
        let (f, tau) = chart_series(points, outcomes, x);
        let f_path = dir.join(format!("f_vs_{x}.svg"));
        std::fs::write(
            &f_path,
            report::line_chart_svg(&format!("Action frequency vs {x}"), x, "Hz per request", &f),
        )?;
        let tau_path = dir.join(format!("tau_vs_{x}.svg"));
        std::fs::write(
            &tau_path,
            report::line_chart_svg(&format!("Token throughput vs {x}"), x, "tokens/s", &tau),
        )?;
        written.push(f_path);
        written.push(tau_path);
    }
    Ok(written)
}
