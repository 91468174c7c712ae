//! Metrics files, sample grids and metric plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, EpsNetwork};
use crate::diffusion::{ddim_sample, SamplerConfig, VarianceSchedule};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Fixed column order of every metrics file.
pub const METRICS_HEADER: [&str; 10] = [
    "strategy",
    "seed",
    "task_index",
    "classes",
    "fid_proxy",
    "kld",
    "kld_reverse",
    "classifier_accuracy",
    "n_samples",
    "eval_steps",
];

/// One evaluation of one strategy after one task for one seed.
/// `classifier_accuracy` is NaN when no classifier was trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub strategy: String,
    pub seed: u64,
    pub task_index: usize,
    /// Space-separated class ids seen so far.
    pub classes: String,
    pub fid_proxy: f64,
    pub kld: f64,
    pub kld_reverse: f64,
    pub classifier_accuracy: f64,
    pub n_samples: usize,
    pub eval_steps: usize,
}

/// Append one row, writing the header first if the file is new or empty.
/// An existing file with a different header is rejected.
pub fn append_metrics(path: &Path, row: &MetricsRow) -> Result<()> {
    let fresh = match fs::metadata(path) {
        Ok(m) => m.len() == 0,
        Err(_) => true,
    };
    if !fresh {
        let mut first = String::new();
        BufReader::new(fs::File::open(path)?).read_line(&mut first)?;
        if first.trim_end() != METRICS_HEADER.join(",") {
            return Err(Error::Config(format!("{} has an unexpected header", path.display())));
        }
    }
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    w.serialize(row)?;
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(METRICS_HEADER) {
        return Err(Error::Config(format!("{} has an unexpected header", path.display())));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Metric columns that are aggregated and plotted.
pub const METRICS: [&str; 3] = ["fid_proxy", "kld", "classifier_accuracy"];

fn metric_value(row: &MetricsRow, metric: &str) -> f64 {
    match metric {
        "fid_proxy" => row.fid_proxy,
        "kld" => row.kld,
        "kld_reverse" => row.kld_reverse,
        "classifier_accuracy" => row.classifier_accuracy,
        _ => f64::NAN,
    }
}

/// Mean and standard error of one metric over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: String,
    pub task_index: usize,
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation over √n; zero for a single seed.
    pub std_error: f64,
    pub n: usize,
}

/// Mean ± standard error per (strategy, task, metric), ignoring NaN entries.
pub fn summarize(rows: &[MetricsRow], strategy_order: &[String]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(usize, usize, usize), Vec<f64>> = BTreeMap::new();
    for row in rows {
        let Some(s) = strategy_order.iter().position(|s| *s == row.strategy) else { continue };
        for (m, metric) in METRICS.iter().enumerate() {
            let v = metric_value(row, metric);
            if v.is_finite() {
                groups.entry((s, m, row.task_index)).or_default().push(v);
            }
        }
    }
    groups
        .into_iter()
        .map(|((s, m, task_index), vals)| {
            let n = vals.len();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let std_error = if n > 1 {
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
                (var / n as f64).sqrt()
            } else {
                0.0
            };
            SummaryRow { strategy: strategy_order[s].clone(), task_index, metric: METRICS[m].into(), mean, std_error, n }
        })
        .collect()
}

pub fn write_summary(path: &Path, summary: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in summary {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Strategies in order of first appearance.
pub fn strategies_in(rows: &[MetricsRow]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in rows {
        if !out.contains(&r.strategy) {
            out.push(r.strategy.clone());
        }
    }
    out
}

/// Tile `n` DDIM samples into a square grayscale image with one-pixel
/// separators. Values are clipped to [−0.5, 0.5] and mapped to 0..=255.
pub fn export_sample_grid<N: EpsNetwork>(
    den: &Denoiser<N>,
    data_shape: &[usize],
    n: usize,
    eval_steps: usize,
    schedule: &VarianceSchedule,
    path: &Path,
    rng: &mut Rng,
) -> Result<()> {
    let &[h, w] = data_shape else {
        return Err(Error::Config("sample grids need two-dimensional image data".into()));
    };
    let side = (n as f64).sqrt().round() as usize;
    if side == 0 || side * side != n {
        return Err(Error::Config(format!("grid size {n} is not a positive perfect square")));
    }
    let cfg = SamplerConfig::deterministic(eval_steps, schedule.horizon())?;
    let samples = ddim_sample(den, &cfg, n, schedule, rng)?;
    let (gw, gh) = ((side * (w + 1) + 1) as u32, (side * (h + 1) + 1) as u32);
    let mut img = GrayImage::from_pixel(gw, gh, image::Luma([128]));
    for (k, row) in samples.rows().into_iter().enumerate() {
        let (ox, oy) = ((k % side) * (w + 1) + 1, (k / side) * (h + 1) + 1);
        for (p, &v) in row.iter().enumerate() {
            let byte = ((v.clamp(-0.5, 0.5) + 0.5) * 255.0).round() as u8;
            img.put_pixel((ox + p % w) as u32, (oy + p / w) as u32, image::Luma([byte]));
        }
    }
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Render one metric as an SVG line chart: x = task index, one series per
/// strategy, error bars where more than one seed contributed. Tasks absent
/// for a strategy leave a gap in its line.
pub fn render_plot(summary: &[SummaryRow], metric: &str, strategy_order: &[String]) -> Option<String> {
    let rows: Vec<&SummaryRow> = summary.iter().filter(|r| r.metric == metric).collect();
    if rows.is_empty() {
        return None;
    }
    let max_task = rows.iter().map(|r| r.task_index).max().unwrap();
    let lo = rows.iter().map(|r| r.mean - r.std_error).fold(f64::INFINITY, f64::min).min(0.0);
    let mut hi = rows.iter().map(|r| r.mean + r.std_error).fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        hi = lo + 1.0;
    }
    let (width, height, left, right, top, bottom) = (640.0, 400.0, 70.0, 180.0, 30.0, 50.0);
    let pw = width - left - right;
    let ph = height - top - bottom;
    let x = |t: usize| left + if max_task > 1 { pw * (t - 1) as f64 / (max_task - 1) as f64 } else { pw / 2.0 };
    let y = |v: f64| top + ph * (1.0 - (v - lo) / (hi - lo));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{metric}</text>"#, left + pw / 2.0);
    let _ = writeln!(
        s,
        r#"<path d="M{left},{top} V{} H{}" fill="none" stroke="black"/>"#,
        top + ph,
        left + pw
    );
    for t in 1..=max_task {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{t}</text>"#, x(t), top + ph + 18.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">task</text>"#, left + pw / 2.0, height - 8.0);
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, left - 6.0, y(v) + 4.0);
    }
    for (k, strategy) in strategy_order.iter().enumerate() {
        let mut pts: Vec<&SummaryRow> = rows.iter().copied().filter(|r| &r.strategy == strategy).collect();
        if pts.is_empty() {
            continue;
        }
        pts.sort_by_key(|r| r.task_index);
        let color = PALETTE[k % PALETTE.len()];
        let mut d = String::new();
        let mut prev: Option<usize> = None;
        for r in &pts {
            let cmd = if prev == Some(r.task_index - 1) { 'L' } else { 'M' };
            let _ = write!(d, "{cmd}{:.1},{:.1} ", x(r.task_index), y(r.mean));
            prev = Some(r.task_index);
        }
        let _ = writeln!(s, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, d.trim_end());
        for r in &pts {
            let (px, py) = (x(r.task_index), y(r.mean));
            let _ = writeln!(s, r#"<circle cx="{px:.1}" cy="{py:.1}" r="3" fill="{color}"/>"#);
            if r.n > 1 && r.std_error > 0.0 {
                let _ = writeln!(
                    s,
                    r#"<path d="M{px:.1},{:.1} V{:.1} M{:.1},{:.1} H{:.1} M{:.1},{:.1} H{:.1}" stroke="{color}"/>"#,
                    y(r.mean - r.std_error),
                    y(r.mean + r.std_error),
                    px - 4.0,
                    y(r.mean - r.std_error),
                    px + 4.0,
                    px - 4.0,
                    y(r.mean + r.std_error),
                    px + 4.0
                );
            }
        }
        let ly = top + 10.0 + 18.0 * k as f64;
        let lx = width - right + 15.0;
        let _ = writeln!(s, r#"<rect x="{lx}" y="{}" width="14" height="4" fill="{color}"/>"#, ly - 4.0);
        let _ = writeln!(s, r#"<text x="{}" y="{ly}">{strategy}</text>"#, lx + 20.0);
    }
    s.push_str("</svg>\n");
    Some(s)
}

/// Write one SVG per metric next to `out_dir`. Returns the files written.
pub fn emit_plots(metrics_file: &Path, out_dir: &Path, strategy_order: Option<&[String]>) -> Result<Vec<PathBuf>> {
    let rows = read_metrics(metrics_file)?;
    if rows.is_empty() {
        return Err(Error::EmptyMetrics);
    }
    let order = strategy_order.map(<[String]>::to_vec).unwrap_or_else(|| strategies_in(&rows));
    let summary = summarize(&rows, &order);
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for metric in METRICS {
        if let Some(svg) = render_plot(&summary, metric, &order) {
            let path = out_dir.join(format!("{metric}.svg"));
            fs::write(&path, svg)?;
            written.push(path);
        }
    }
    Ok(written)
}
