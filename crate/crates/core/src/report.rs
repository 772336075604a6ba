//! Run artifacts: per-round CSV, summary JSON, config echo, SVG line charts,
//! and summary tables across runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::config::ExperimentConfig;
use crate::error::{FlError, Result};
use crate::orchestrator::{EpochRecord, RunResult, SUCCESS_THRESHOLD};

pub const TRACE_HEADER: &str = "round,accuracy,asr,alpha,delta,selected_id,selected_is_malicious";
pub const TRACE_FILE: &str = "trace.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputBundle {
    pub run_dir: PathBuf,
    pub trace_csv: PathBuf,
    pub summary_json: PathBuf,
    pub charts: Vec<PathBuf>,
    pub config_echo: PathBuf,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn trace_csv(trace: &[EpochRecord]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in trace {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.round,
            r.accuracy,
            r.asr,
            opt(r.alpha),
            opt(r.delta),
            opt(r.krum_selected),
            opt(r.selected_is_malicious)
        );
    }
    out
}

pub fn summary_json(result: &RunResult) -> Result<String> {
    let mut s = serde_json::to_string_pretty(result)?;
    s.push('\n');
    Ok(s)
}

/// A metric plotted against the round index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    Asr,
    Alpha,
    Delta,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Accuracy, Metric::Asr, Metric::Alpha, Metric::Delta];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Asr => "asr",
            Metric::Alpha => "alpha",
            Metric::Delta => "delta",
        }
    }

    pub fn value(self, r: &EpochRecord) -> Option<f64> {
        match self {
            Metric::Accuracy => Some(r.accuracy),
            Metric::Asr => Some(r.asr),
            Metric::Alpha => r.alpha,
            Metric::Delta => r.delta,
        }
    }
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 50.0;

/// Line chart of one metric. Rounds without a value leave a gap-free
/// polyline over the rounds that have one.
pub fn svg_chart(trace: &[EpochRecord], metric: Metric) -> String {
    let points: Vec<(f64, f64)> = trace
        .iter()
        .filter_map(|r| metric.value(r).map(|v| (r.round as f64, v)))
        .collect();
    let x_max = trace.iter().map(|r| r.round).max().unwrap_or(1).max(1) as f64;
    let (y_min, y_max) = match metric {
        Metric::Accuracy | Metric::Asr | Metric::Alpha => (0.0, 1.0),
        Metric::Delta => {
            let hi = points.iter().map(|p| p.1).fold(0.0, f64::max);
            (0.0, if hi > 0.0 { hi } else { 1.0 })
        }
    };
    let sx = |x: f64| PAD + x / x_max * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y_min) / (y_max - y_min) * (H - 2.0 * PAD);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{PAD}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/>"#,
        b = H - PAD,
        r = W - PAD
    );
    let _ = writeln!(
        s,
        r#"<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{b}" stroke="black"/>"#,
        b = H - PAD
    );
    let _ = writeln!(
        s,
        r#"<text x="{x}" y="{y}" font-size="12" text-anchor="middle">round</text>"#,
        x = W / 2.0,
        y = H - 15.0
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="10">0</text>"#, PAD, H - PAD + 14.0);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{x_max}</text>"#,
        W - PAD,
        H - PAD + 14.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{y_min}</text>"#,
        PAD - 4.0,
        H - PAD
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{y_max:.4}</text>"#,
        PAD - 4.0,
        PAD + 4.0
    );
    let _ = writeln!(
        s,
        r#"<rect x="{x}" y="12" width="12" height="4" fill="steelblue"/><text x="{t}" y="18" font-size="12">{name}</text>"#,
        x = W - PAD - 90.0,
        t = W - PAD - 72.0,
        name = metric.name()
    );
    let coords: Vec<String> = points
        .iter()
        .map(|&(x, y)| format!("{:.3},{:.3}", sx(x), sy(y)))
        .collect();
    let _ = writeln!(
        s,
        r#"<polyline data-metric="{}" fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#,
        metric.name(),
        coords.join(" ")
    );
    s.push_str("</svg>\n");
    s
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| FlError::io(path, e))
}

/// Write every artifact of one run into `dir` (created if missing).
pub fn write_outputs(result: &RunResult, cfg: &ExperimentConfig, dir: &Path) -> Result<OutputBundle> {
    fs::create_dir_all(dir).map_err(|e| FlError::io(dir, e))?;
    let trace_path = dir.join(TRACE_FILE);
    write(&trace_path, &trace_csv(&result.trace))?;
    let summary_path = dir.join(SUMMARY_FILE);
    write(&summary_path, &summary_json(result)?)?;
    let config_path = dir.join(CONFIG_FILE);
    write(&config_path, &cfg.to_toml()?)?;
    let mut charts = Vec::new();
    for metric in Metric::ALL {
        let path = dir.join(format!("{}.svg", metric.name()));
        write(&path, &svg_chart(&result.trace, metric))?;
        charts.push(path);
    }
    Ok(OutputBundle {
        run_dir: dir.to_path_buf(),
        trace_csv: trace_path,
        summary_json: summary_path,
        charts,
        config_echo: config_path,
    })
}

pub fn read_summary(path: &Path) -> Result<RunResult> {
    let text = fs::read_to_string(path).map_err(|e| FlError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| FlError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Every `summary.json` under `root`, in path order.
pub fn find_summaries(root: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    if root.is_file() {
        found.push(root.to_path_buf());
        return Ok(found);
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| FlError::io(root, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| FlError::io(root, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            found.extend(find_summaries(&p)?);
        } else if p.file_name().is_some_and(|n| n == SUMMARY_FILE) {
            found.push(p);
        }
    }
    Ok(found)
}

/// Sample mean with the half-width of its two-sided 95% Student-t interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanCi {
    pub mean: f64,
    /// `None` with fewer than two samples.
    pub half_width: Option<f64>,
    pub count: usize,
}

pub fn mean_ci95(values: &[f64]) -> Option<MeanCi> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let half_width = (n >= 2).then(|| {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
            .expect("df >= 1")
            .inverse_cdf(0.975);
        t * (var / n as f64).sqrt()
    });
    Some(MeanCi {
        mean,
        half_width,
        count: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum GroupKey {
    Defense,
    Attack,
    M,
}

impl GroupKey {
    pub const TABLE: [GroupKey; 3] = [GroupKey::Defense, GroupKey::Attack, GroupKey::M];

    fn name(self) -> &'static str {
        match self {
            GroupKey::Defense => "defense",
            GroupKey::Attack => "attack",
            GroupKey::M => "m",
        }
    }

    fn of(self, r: &RunResult) -> String {
        match self {
            GroupKey::Defense => r.defense.clone(),
            GroupKey::Attack => r.attack.clone(),
            GroupKey::M => r.m.to_string(),
        }
    }
}

/// One row of a summary table: means over the runs in a group.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub key: Vec<String>,
    pub runs: usize,
    pub train_acc: f64,
    pub train_asr: f64,
    pub ft_acc: Option<f64>,
    pub acc_diff: Option<f64>,
    pub ft_asr: Option<f64>,
}

impl SummaryRow {
    /// Fine-tuning brought the ASR under the success threshold.
    pub fn defended(&self) -> bool {
        self.ft_asr.is_some_and(|a| a < SUCCESS_THRESHOLD)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryTable {
    pub keys: Vec<GroupKey>,
    pub rows: Vec<SummaryRow>,
}

fn mean_of(it: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = it.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn mean_opt(results: &[&RunResult], f: impl Fn(&RunResult) -> Option<f64>) -> Option<f64> {
    let v: Option<Vec<f64>> = results.iter().map(|r| f(r)).collect();
    v.filter(|v| !v.is_empty()).map(|v| mean_of(v.into_iter()))
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

fn pct_opt(v: Option<f64>) -> String {
    v.map(pct).unwrap_or_else(|| "-".into())
}

impl SummaryTable {
    pub fn new(results: &[RunResult], keys: &[GroupKey]) -> Self {
        let mut groups: BTreeMap<Vec<String>, Vec<&RunResult>> = BTreeMap::new();
        for r in results {
            groups
                .entry(keys.iter().map(|k| k.of(r)).collect())
                .or_default()
                .push(r);
        }
        let rows = groups
            .into_iter()
            .map(|(key, rs)| SummaryRow {
                key,
                runs: rs.len(),
                train_acc: mean_of(rs.iter().map(|r| r.final_train_acc)),
                train_asr: mean_of(rs.iter().map(|r| r.final_train_asr)),
                ft_acc: mean_opt(&rs, |r| r.ft_acc),
                acc_diff: mean_opt(&rs, |r| r.acc_diff),
                ft_asr: mean_opt(&rs, |r| r.ft_asr),
            })
            .collect();
        Self {
            keys: keys.to_vec(),
            rows,
        }
    }

    fn header(&self) -> Vec<String> {
        self.keys
            .iter()
            .map(|k| k.name().to_string())
            .chain(
                ["runs", "train_acc", "train_asr", "ft_acc", "acc_diff", "ft_asr", "defended"]
                    .map(String::from),
            )
            .collect()
    }

    fn cells(&self, row: &SummaryRow) -> Vec<String> {
        row.key
            .iter()
            .cloned()
            .chain([
                row.runs.to_string(),
                pct(row.train_acc),
                pct(row.train_asr),
                pct_opt(row.ft_acc),
                pct_opt(row.acc_diff),
                pct_opt(row.ft_asr),
                if row.defended() { "*".into() } else { String::new() },
            ])
            .collect()
    }

    /// Aligned plain-text grid; percentages with two decimals, `*` marks a
    /// fine-tuned ASR below 50%.
    pub fn to_text(&self) -> String {
        let mut lines = vec![self.header()];
        lines.extend(self.rows.iter().map(|r| self.cells(r)));
        let cols = lines[0].len();
        let widths: Vec<usize> = (0..cols)
            .map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for line in &lines {
            let padded: Vec<String> = line
                .iter()
                .zip(&widths)
                .map(|(cell, w)| format!("{cell:>w$}"))
                .collect();
            out.push_str(padded.join("  ").trim_end());
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header().join(",");
        out.push('\n');
        for r in &self.rows {
            let mut cells = self.cells(r);
            // absent values are empty in CSV, `-` in text
            for c in cells.iter_mut() {
                if c == "-" {
                    c.clear();
                }
            }
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// Plain-text table grouped by `group_keys`.
pub fn summarize(results: &[RunResult], group_keys: &[GroupKey]) -> String {
    SummaryTable::new(results, group_keys).to_text()
}
