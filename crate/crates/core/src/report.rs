//! CSV rows and SVG charts.

use std::io::Write;

use serde::Serialize;

use crate::metrics::{MetricsReport, BATCH_SIZE_DEFINITION};
use crate::sim::SimConfig;

pub const SCHEMA_VERSION: u32 = 1;

pub const COLUMNS: [&str; 18] = [
    "run_id",
    "variant",
    "backend",
    "N",
    "k",
    "H",
    "S",
    "lambda",
    "pattern",
    "seed",
    "frames",
    "f_per_request_hz",
    "f_aggregate_hz",
    "tau_tok_per_s",
    "avg_batch",
    "deadline_miss_rate",
    "warmup_frames",
    "speedup_vs_isolated",
];

/// One CSV row. Field order is the column order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub run_id: usize,
    pub variant: String,
    pub backend: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub k: u32,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "S")]
    pub s: u32,
    pub lambda: f64,
    pub pattern: String,
    pub seed: u64,
    pub frames: usize,
    pub f_per_request_hz: f64,
    pub f_aggregate_hz: f64,
    pub tau_tok_per_s: f64,
    pub avg_batch: f64,
    pub deadline_miss_rate: f64,
    pub warmup_frames: u64,
    pub speedup_vs_isolated: f64,
}

impl MetricsRow {
    pub fn new(
        run_id: usize,
        config: &SimConfig,
        frames: usize,
        report: &MetricsReport,
        speedup_vs_isolated: f64,
    ) -> Self {
        let m = &report.steady;
        Self {
            run_id,
            variant: config.variant.name().to_string(),
            backend: config.backend_kind.name().to_string(),
            n: config.workload.default_n,
            k: config.k,
            h: config.backend.horizon,
            s: config.backend.denoise_steps,
            lambda: config.workload.pattern.rate(),
            pattern: config.workload.pattern.name().to_string(),
            seed: config.workload.seed,
            frames,
            f_per_request_hz: m.per_request_action_freq_hz,
            f_aggregate_hz: m.aggregate_action_freq_hz,
            tau_tok_per_s: m.token_throughput,
            avg_batch: m.avg_batch_size,
            deadline_miss_rate: m.deadline_miss_rate,
            warmup_frames: report.warmup_frames,
            speedup_vs_isolated,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.lambda,
            self.f_per_request_hz,
            self.f_aggregate_hz,
            self.tau_tok_per_s,
            self.avg_batch,
            self.deadline_miss_rate,
            self.speedup_vs_isolated,
        ]
        .iter()
        .all(|x| x.is_finite())
    }
}

/// Writes the schema comment, the header and every row.
pub fn write_csv<W: Write>(mut out: W, rows: &[MetricsRow]) -> std::io::Result<()> {
    writeln!(
        out,
        "# kvweaver metrics schema_version={SCHEMA_VERSION} avg_batch={BATCH_SIZE_DEFINITION} window=steady_state"
    )?;
    let mut writer = csv::Writer::from_writer(out);
    for row in rows {
        writer.serialize(row).map_err(std::io::Error::other)?;
    }
    if rows.is_empty() {
        writer.write_record(COLUMNS).map_err(std::io::Error::other)?;
    }
    writer.flush()
}

pub fn csv_string(rows: &[MetricsRow]) -> String {
    let mut buf = Vec::new();
    write_csv(&mut buf, rows).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("csv output is utf-8")
}

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Self-contained line chart.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 160.0, 40.0, 50.0);
    let points = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= 0.0 {
        y1 = 1.0;
    }
    y1 *= 1.1;
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * plot_w;
    let sy = |y: f64| top + plot_h - y / y1 * plot_h;

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        left + plot_w / 2.0,
        escape(title)
    );
    svg += &format!(
        "<line x1=\"{left}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{}\" stroke=\"black\"/>\n",
        top + plot_h,
        left + plot_w,
        top + plot_h,
        top + plot_h
    );
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y1 * i as f64 / 4.0;
        svg += &format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            sx(fx),
            top + plot_h + 18.0,
            tick(fx)
        );
        svg += &format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            left - 6.0,
            sy(fy) + 4.0,
            tick(fy)
        );
    }
    svg += &format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
        left + plot_w / 2.0,
        h - 10.0,
        escape(x_label)
    );
    svg += &format!(
        "<text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{}</text>\n",
        top + plot_h / 2.0,
        top + plot_h / 2.0,
        escape(y_label)
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        svg += &format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            path.join(" ")
        );
        for &(x, y) in &s.points {
            svg += &format!(
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>\n",
                sx(x),
                sy(y)
            );
        }
        let ly = top + 14.0 + 18.0 * i as f64;
        svg += &format!(
            "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
            w - right + 10.0,
            w - right + 30.0,
            w - right + 36.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    svg += "</svg>\n";
    svg
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
