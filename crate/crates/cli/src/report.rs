//! Table- and figure-shaped CSV outputs derived from a manifest's run
//! directories. Output depends only on files on disk.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use dts_core::EpochRecord;

use crate::error::{CliError, CliResult};
use crate::manifest::{RunEntry, RunManifest, RunStatus};
use crate::runner::{RunSummary, METRICS_FILE, SUMMARY_FILE};

#[derive(Clone, Debug, PartialEq)]
pub struct RunRow {
    pub axis_value: String,
    pub seed: u64,
    pub status: &'static str,
    pub accuracy: f64,
    pub auroc: f64,
    pub dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub axis_value: String,
    pub runs: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub auroc_mean: f64,
    pub auroc_std: f64,
}

#[derive(Clone, Debug)]
pub struct Report {
    pub runs: Vec<RunRow>,
    pub aggregate: Vec<AggregateRow>,
    pub skipped: usize,
    pub files: Vec<PathBuf>,
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Epoch records from a run's metrics stream.
pub fn read_epoch_records(path: &Path) -> CliResult<Vec<EpochRecord>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        let value: serde_json::Value = serde_json::from_str(&line)?;
        if value.get("kind").and_then(|k| k.as_str()) == Some("epoch") {
            out.push(serde_json::from_value(value)?);
        }
    }
    Ok(out)
}

fn row_for(manifest: &RunManifest, run: &RunEntry, include_incomplete: bool) -> CliResult<Option<RunRow>> {
    let dir = manifest.out_dir.join(&run.dir);
    let axis_value = run.axis_value.clone().unwrap_or_default();
    match &run.status {
        RunStatus::Completed => {
            let text = fs::read_to_string(dir.join(SUMMARY_FILE))?;
            let s: RunSummary = serde_json::from_str(&text)?;
            Ok(Some(RunRow {
                axis_value,
                seed: run.seed,
                status: "completed",
                accuracy: s.accuracy,
                auroc: s.auroc,
                dir: run.dir.clone(),
            }))
        }
        RunStatus::Failed { .. } if include_incomplete => {
            let metrics = dir.join(METRICS_FILE);
            let last = if metrics.exists() { read_epoch_records(&metrics)?.pop() } else { None };
            Ok(last.map(|r| RunRow {
                axis_value,
                seed: run.seed,
                status: "failed",
                accuracy: r.test_accuracy,
                auroc: r.auroc,
                dir: run.dir.clone(),
            }))
        }
        RunStatus::Failed { .. } => Ok(None),
    }
}

fn aggregate(rows: &[RunRow]) -> Vec<AggregateRow> {
    let mut keys: Vec<&str> = Vec::new();
    for r in rows {
        if !keys.contains(&r.axis_value.as_str()) {
            keys.push(&r.axis_value);
        }
    }
    keys.into_iter()
        .map(|k| {
            let group: Vec<&RunRow> = rows.iter().filter(|r| r.axis_value == k).collect();
            let acc: Vec<f64> = group.iter().map(|r| r.accuracy).collect();
            let auroc: Vec<f64> = group.iter().map(|r| r.auroc).collect();
            let (acc_mean, acc_std) = mean_std(&acc);
            let (auroc_mean, auroc_std) = mean_std(&auroc);
            AggregateRow {
                axis_value: k.to_string(),
                runs: group.len(),
                acc_mean,
                acc_std,
                auroc_mean,
                auroc_std,
            }
        })
        .collect()
}

/// Writes `runs.csv`, `aggregate.csv` and `auroc_vs_epoch.csv` next to the
/// manifest, plus `table.csv` (one column per axis value) for sweeps.
/// Failed runs are left out unless `include_incomplete` is set, in which case
/// their last recorded epoch stands in for the final evaluation.
pub fn emit_report(manifest: &RunManifest, include_incomplete: bool) -> CliResult<Report> {
    let mut rows = Vec::new();
    let mut skipped = 0;
    for run in &manifest.runs {
        match row_for(manifest, run, include_incomplete)? {
            Some(r) => rows.push(r),
            None => skipped += 1,
        }
    }
    if rows.is_empty() {
        return Err(CliError::Validation(
            "no runs to report; incomplete runs need --include-incomplete".into(),
        ));
    }
    let agg = aggregate(&rows);
    let axis = manifest.axis.as_deref().unwrap_or("axis");
    let out = &manifest.out_dir;
    let mut files = Vec::new();

    let path = out.join("runs.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([axis, "seed", "status", "accuracy", "auroc", "run_dir"])?;
    for r in &rows {
        w.write_record([
            r.axis_value.clone(),
            r.seed.to_string(),
            r.status.to_string(),
            r.accuracy.to_string(),
            r.auroc.to_string(),
            r.dir.display().to_string(),
        ])?;
    }
    w.flush()?;
    files.push(path);

    let path = out.join("aggregate.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([axis, "runs", "acc_mean", "acc_std", "auroc_mean", "auroc_std"])?;
    for a in &agg {
        w.write_record([
            a.axis_value.clone(),
            a.runs.to_string(),
            a.acc_mean.to_string(),
            a.acc_std.to_string(),
            a.auroc_mean.to_string(),
            a.auroc_std.to_string(),
        ])?;
    }
    w.flush()?;
    files.push(path);

    let path = out.join("auroc_vs_epoch.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([axis, "seed", "epoch", "iteration", "test_accuracy", "auroc"])?;
    for r in &rows {
        let metrics = out.join(&r.dir).join(METRICS_FILE);
        if !metrics.exists() {
            continue;
        }
        for e in read_epoch_records(&metrics)? {
            w.write_record([
                r.axis_value.clone(),
                r.seed.to_string(),
                e.epoch.to_string(),
                e.iteration.to_string(),
                e.test_accuracy.to_string(),
                e.auroc.to_string(),
            ])?;
        }
    }
    w.flush()?;
    files.push(path);

    if let Some(axis) = &manifest.axis {
        let path = out.join("table.csv");
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["metric".to_string()];
        header.extend(agg.iter().map(|a| format!("{axis}={}", a.axis_value)));
        w.write_record(&header)?;
        let cell = |m: f64, s: f64| format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s);
        let mut acc = vec!["accuracy".to_string()];
        acc.extend(agg.iter().map(|a| cell(a.acc_mean, a.acc_std)));
        w.write_record(&acc)?;
        let mut auroc = vec!["auroc".to_string()];
        auroc.extend(agg.iter().map(|a| cell(a.auroc_mean, a.auroc_std)));
        w.write_record(&auroc)?;
        w.flush()?;
        files.push(path);
    }

    Ok(Report { runs: rows, aggregate: agg, skipped, files })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_value_has_zero_std() {
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }
}
