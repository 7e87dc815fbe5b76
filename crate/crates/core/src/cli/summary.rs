//! Final-window score tables from metrics CSVs.

use crate::error::{Error, Result};
use crate::metrics::{iqm, read_rows, MetricsRow};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Fraction of a segment's updates that form its final window.
pub const FINAL_WINDOW: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreLine {
    pub label: String,
    /// Runs contributing.
    pub n: usize,
    pub mean: f64,
    pub stderr: f64,
    pub raw_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSummary {
    pub name: String,
    pub seeds: Vec<u64>,
    pub lines: Vec<ScoreLine>,
    pub total: ScoreLine,
    pub iqm: Option<f64>,
}

/// `(mean, standard error)` with the sample standard deviation; NaNs are
/// skipped.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64, usize) {
    let v: Vec<f64> = xs.iter().copied().filter(|x| !x.is_nan()).collect();
    let n = v.len();
    if n == 0 {
        return (f64::NAN, f64::NAN, 0);
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0, 1);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt(), n)
}

fn nanmean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.filter(|x| !x.is_nan()).fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Labelled groups of one run's rows: maximal same-task runs labelled
/// `BO`, then `BO-2` on the second visit. When tasks alternate every update
/// (round-robin), rows are grouped by task instead.
pub fn segment_rows(rows: &[MetricsRow]) -> Vec<(String, Vec<&MetricsRow>)> {
    let mut runs: Vec<Vec<&MetricsRow>> = Vec::new();
    for r in rows {
        match runs.last_mut() {
            Some(run) if run[0].task == r.task => run.push(r),
            _ => runs.push(vec![r]),
        }
    }
    let mut tasks: Vec<&str> = Vec::new();
    for r in rows {
        if !tasks.contains(&r.task.as_str()) {
            tasks.push(&r.task);
        }
    }
    let interleaved = runs.len() > tasks.len() && runs.iter().all(|r| r.len() == 1);
    if interleaved {
        return tasks
            .iter()
            .map(|t| (t.to_string(), rows.iter().filter(|r| r.task == *t).collect()))
            .collect();
    }
    let mut visits: BTreeMap<&str, usize> = BTreeMap::new();
    runs.into_iter()
        .map(|run| {
            let k = visits.entry(&run[0].task).or_insert(0);
            *k += 1;
            let label = if *k == 1 { run[0].task.clone() } else { format!("{}-{k}", run[0].task) };
            (label, run)
        })
        .collect()
}

/// `(normalized, raw)` mean return over the last 5% of a segment.
pub fn final_window(rows: &[&MetricsRow]) -> (f64, f64) {
    let w = ((rows.len() as f64 * FINAL_WINDOW).ceil() as usize).clamp(1, rows.len().max(1));
    let tail = &rows[rows.len() - w..];
    (nanmean(tail.iter().map(|r| r.return_norm)), nanmean(tail.iter().map(|r| r.return_raw)))
}

/// Strips a trailing `_<seed>` from a file stem.
fn group_name(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match stem.rsplit_once('_') {
        Some((head, tail)) if !head.is_empty() && tail.parse::<u64>().is_ok() => head.to_string(),
        _ => stem,
    }
}

pub fn summarize(paths: &[PathBuf], with_iqm: bool) -> Result<Vec<GroupSummary>> {
    if paths.is_empty() {
        return Err(Error::config("summarize needs at least one CSV"));
    }
    let mut groups: Vec<(String, Vec<Vec<MetricsRow>>)> = Vec::new();
    for p in paths {
        let rows = read_rows(p)?;
        if rows.is_empty() {
            return Err(Error::contract(format!("{}: no rows", p.display())));
        }
        let name = group_name(p);
        match groups.iter_mut().find(|(n, _)| *n == name) {
            Some((_, runs)) => runs.push(rows),
            None => groups.push((name, vec![rows])),
        }
    }
    groups.into_iter().map(|(name, runs)| summarize_group(name, &runs, with_iqm)).collect()
}

fn summarize_group(name: String, runs: &[Vec<MetricsRow>], with_iqm: bool) -> Result<GroupSummary> {
    let mut labels: Vec<String> = Vec::new();
    let mut norm: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut raw: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut totals = Vec::new();
    let mut totals_raw = Vec::new();
    let mut pooled = Vec::new();
    for rows in runs {
        let segs = segment_rows(rows);
        let mut per_run = Vec::new();
        let mut per_run_raw = Vec::new();
        for (label, seg) in &segs {
            let (n, r) = final_window(seg);
            if !labels.contains(label) {
                labels.push(label.clone());
            }
            norm.entry(label.clone()).or_default().push(n);
            raw.entry(label.clone()).or_default().push(r);
            per_run.push(n);
            per_run_raw.push(r);
            if !n.is_nan() {
                pooled.push(n);
            }
        }
        totals.push(nanmean(per_run.into_iter()));
        totals_raw.push(nanmean(per_run_raw.into_iter()));
    }
    let line = |label: String, xs: &[f64], raws: &[f64]| {
        let (mean, stderr, n) = mean_stderr(xs);
        ScoreLine {
            label,
            n,
            mean,
            stderr,
            raw_mean: nanmean(raws.iter().copied()),
        }
    };
    let lines = labels.iter().map(|l| line(l.clone(), &norm[l], &raw[l])).collect();
    let mut seeds: Vec<u64> = runs.iter().map(|r| r[0].seed).collect();
    seeds.sort_unstable();
    Ok(GroupSummary {
        name,
        seeds,
        lines,
        total: line("Total".into(), &totals, &totals_raw),
        iqm: if with_iqm && !pooled.is_empty() { Some(iqm(&pooled)?) } else { None },
    })
}

pub fn render_text(groups: &[GroupSummary]) -> String {
    let mut s = String::new();
    for g in groups {
        let _ = writeln!(s, "{} (seeds {:?})", g.name, g.seeds);
        let _ = writeln!(s, "  {:<8} {:>8} {:>8} {:>10}  n", "task", "norm", "stderr", "raw");
        for l in g.lines.iter().chain(std::iter::once(&g.total)) {
            let _ = writeln!(s, "  {:<8} {:>8.3} {:>8.3} {:>10.3}  {}", l.label, l.mean, l.stderr, l.raw_mean, l.n);
        }
        if let Some(v) = g.iqm {
            let _ = writeln!(s, "  IQM {v:.3}");
        }
    }
    s
}
