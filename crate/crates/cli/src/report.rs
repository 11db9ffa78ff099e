//! Metric tables: raw rows, mean ± std aggregates and the text summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::methods::{MetricRow, MethodName};
use crate::plots::{label_plot_svg, score_map_svg, LabelPlotRow, ScoreMapPoint};
use crate::HarnessError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: MethodName,
    pub n: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub pr_auc_mean: f64,
    pub pr_auc_std: f64,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// One aggregate per method, in method order.
pub fn aggregate(rows: &[MetricRow]) -> Vec<Aggregate> {
    let mut by: BTreeMap<MethodName, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let e = by.entry(r.method).or_default();
        e.0.push(r.accuracy);
        e.1.push(r.pr_auc);
    }
    by.into_iter()
        .map(|(method, (acc, auc))| {
            let (accuracy_mean, accuracy_std) = mean_std(&acc);
            let (pr_auc_mean, pr_auc_std) = mean_std(&auc);
            Aggregate {
                method,
                n: acc.len(),
                accuracy_mean,
                accuracy_std,
                pr_auc_mean,
                pr_auc_std,
            }
        })
        .collect()
}

pub fn find(aggs: &[Aggregate], method: MethodName) -> Option<&Aggregate> {
    aggs.iter().find(|a| a.method == method)
}

/// Rows sorted by method then seed, so the file does not depend on job order.
pub fn sort_rows(rows: &mut [MetricRow]) {
    rows.sort_by(|a, b| a.method.cmp(&b.method).then(a.seed.cmp(&b.seed)));
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, HarnessError> {
    let mut r = csv::Reader::from_path(path)?;
    let rows: Result<Vec<T>, csv::Error> = r.deserialize().collect();
    Ok(rows?)
}

/// Text table in the layout of a results table: one line per method with
/// accuracy and PR-AUC as percentages, mean ± std over seeds.
pub fn render_summary(aggs: &[Aggregate], dataset_hash: Option<&str>) -> String {
    let mut s = String::new();
    let width = aggs.iter().map(|a| a.method.label().len()).max().unwrap_or(6).max(6);
    let _ = writeln!(s, "{:<width$}  {:>15}  {:>15}  {:>5}", "Method", "Accuracy", "PR-AUC", "runs");
    let _ = writeln!(s, "{}", "-".repeat(width + 2 + 15 + 2 + 15 + 2 + 5));
    for a in aggs {
        let _ = writeln!(
            s,
            "{:<width$}  {:>15}  {:>15}  {:>5}",
            a.method.label(),
            format!("{:.1}±{:.2}", 100.0 * a.accuracy_mean, 100.0 * a.accuracy_std),
            format!("{:.1}±{:.2}", 100.0 * a.pr_auc_mean, 100.0 * a.pr_auc_std),
            a.n
        );
    }
    if let Some(h) = dataset_hash {
        let _ = writeln!(s, "\ndataset hash: {h}");
    }
    if aggs.iter().any(|a| a.method == MethodName::Mcdda) {
        let _ = writeln!(
            s,
            "note: MCDDA trains from random initialization; there is no pretrained backbone here."
        );
    }
    s
}

/// Rebuilds `summary.csv`, `summary.txt` and every plot SVG in `dir` from
/// the CSV files there. Returns the files written.
pub fn rerender(dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let mut written = Vec::new();
    let rows: Vec<MetricRow> = read_csv(&dir.join("metrics.csv"))?;
    let aggs = aggregate(&rows);
    let hash = rows.first().map(|r| r.dataset_hash.as_str());
    let p = dir.join("summary.csv");
    write_csv(&p, &aggs)?;
    written.push(p);
    let p = dir.join("summary.txt");
    std::fs::write(&p, render_summary(&aggs, hash))?;
    written.push(p);

    let plots = dir.join("plots");
    if plots.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(&plots)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        entries.sort();
        for csv_path in entries {
            let stem = csv_path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let svg = if let Some(title) = stem.strip_prefix("label_plot_") {
                label_plot_svg(&read_csv::<LabelPlotRow>(&csv_path)?, title)
            } else if let Some(title) = stem.strip_prefix("score_map_") {
                score_map_svg(&read_csv::<ScoreMapPoint>(&csv_path)?, title)
            } else {
                continue;
            };
            let p = csv_path.with_extension("svg");
            std::fs::write(&p, svg)?;
            written.push(p);
        }
    }
    Ok(written)
}
