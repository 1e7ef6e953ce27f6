//! CSV schemas. Each header is a constant so tests can pin it.
//!
//! | file                 | columns |
//! |----------------------|---------|
//! | `losses.csv`         | epoch,task,sup,uns,cl,fsr,cud,total,high_conf_count,low_conf_count |
//! | `accuracy.csv`       | t,i,acc (accuracy on task i's test set after training task t, both 1-based) |
//! | `metrics.csv`        | metric,t,value (`A_t` rows, then `A_avg` and `A_last` with empty t) |
//! | `diagnostics.csv`    | task,epoch,strategy,bin,correct_count,incorrect_count |
//! | `pseudo_accuracy.csv`| task,epoch,strategy,scored,correct,accuracy,low_conf_scored,low_conf_correct |
//! | `buffer.csv`         | class,rank,sample_id (final buffer) |
//! | `summary.csv`        | seed,a_avg,a_last,a_avg_std,a_last_std (one row per seed, then `mean`) |
//! | `comparison.csv`     | cell,seed,a_avg,a_last,a_avg_std,a_last_std |
//! | `etf.csv`            | headerless, d rows by K columns |
//!
//! Standard deviations are sample deviations (n - 1), zero for one seed.

use std::path::Path;

use sscl_core::eval::{AccuracyMatrix, IncrementalMetrics, PseudoDiagnostics};
use sscl_core::numkit::Matrix;
use sscl_core::trainer::LossRecord;

use crate::error::LabResult;
use crate::fsio::{write_atomic, write_csv};

pub const LOSS_HEADER: [&str; 10] =
    ["epoch", "task", "sup", "uns", "cl", "fsr", "cud", "total", "high_conf_count", "low_conf_count"];
pub const ACCURACY_HEADER: [&str; 3] = ["t", "i", "acc"];
pub const METRICS_HEADER: [&str; 3] = ["metric", "t", "value"];
pub const DIAGNOSTICS_HEADER: [&str; 6] = ["task", "epoch", "strategy", "bin", "correct_count", "incorrect_count"];
pub const PSEUDO_ACCURACY_HEADER: [&str; 8] =
    ["task", "epoch", "strategy", "scored", "correct", "accuracy", "low_conf_scored", "low_conf_correct"];
pub const BUFFER_HEADER: [&str; 3] = ["class", "rank", "sample_id"];
pub const SUMMARY_HEADER: [&str; 5] = ["seed", "a_avg", "a_last", "a_avg_std", "a_last_std"];
pub const COMPARISON_HEADER: [&str; 6] = ["cell", "seed", "a_avg", "a_last", "a_avg_std", "a_last_std"];

pub fn write_losses(path: &Path, records: &[LossRecord]) -> LabResult<()> {
    let rows = records.iter().map(|r| {
        let l = &r.losses;
        [
            r.epoch.to_string(),
            r.task.to_string(),
            l.sup.to_string(),
            l.uns.to_string(),
            l.cl.to_string(),
            l.fsr.to_string(),
            l.cud.to_string(),
            l.total.to_string(),
            l.high_conf.to_string(),
            l.low_conf.to_string(),
        ]
    });
    write_csv(path, &LOSS_HEADER, rows)
}

pub fn write_accuracy(path: &Path, matrix: &AccuracyMatrix) -> LabResult<()> {
    let rows = matrix.entries().map(|(t, i, acc)| [(t + 1).to_string(), (i + 1).to_string(), acc.to_string()]);
    write_csv(path, &ACCURACY_HEADER, rows)
}

pub fn write_metrics(path: &Path, m: &IncrementalMetrics) -> LabResult<()> {
    let mut rows: Vec<[String; 3]> =
        m.per_task.iter().enumerate().map(|(t, v)| ["A_t".into(), (t + 1).to_string(), v.to_string()]).collect();
    rows.push(["A_avg".into(), String::new(), m.a_avg.to_string()]);
    rows.push(["A_last".into(), String::new(), m.a_last.to_string()]);
    write_csv(path, &METRICS_HEADER, rows)
}

pub fn write_diagnostics(path: &Path, diags: &[PseudoDiagnostics]) -> LabResult<()> {
    let rows = diags.iter().flat_map(|d| {
        d.strategies.iter().flat_map(move |s| {
            s.bins.iter().enumerate().map(move |(b, (ok, bad))| {
                [d.task.to_string(), d.epoch.to_string(), s.strategy.to_string(), b.to_string(), ok.to_string(), bad.to_string()]
            })
        })
    });
    write_csv(path, &DIAGNOSTICS_HEADER, rows)
}

pub fn write_pseudo_accuracy(path: &Path, diags: &[PseudoDiagnostics]) -> LabResult<()> {
    let rows = diags.iter().flat_map(|d| {
        d.strategies.iter().map(move |s| {
            [
                d.task.to_string(),
                d.epoch.to_string(),
                s.strategy.to_string(),
                s.scored.to_string(),
                s.correct.to_string(),
                s.accuracy().map_or(String::new(), |a| a.to_string()),
                s.low_conf_scored.to_string(),
                s.low_conf_correct.to_string(),
            ]
        })
    });
    write_csv(path, &PSEUDO_ACCURACY_HEADER, rows)
}

pub fn write_buffer(path: &Path, entries: &[(usize, usize, u64)]) -> LabResult<()> {
    let rows = entries.iter().map(|(c, r, id)| [c.to_string(), r.to_string(), id.to_string()]);
    write_csv(path, &BUFFER_HEADER, rows)
}

pub fn write_etf(path: &Path, columns: &Matrix) -> LabResult<()> {
    let mut text = String::new();
    for row in columns.iter_rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Final metrics of one seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub a_avg: f64,
    pub a_last: f64,
}

fn summary_rows(results: &[SeedResult]) -> Vec<[String; 5]> {
    let mut rows: Vec<[String; 5]> = results
        .iter()
        .map(|r| [r.seed.to_string(), r.a_avg.to_string(), r.a_last.to_string(), String::new(), String::new()])
        .collect();
    let (avg, avg_sd) = mean_std(&results.iter().map(|r| r.a_avg).collect::<Vec<_>>());
    let (last, last_sd) = mean_std(&results.iter().map(|r| r.a_last).collect::<Vec<_>>());
    rows.push(["mean".into(), avg.to_string(), last.to_string(), avg_sd.to_string(), last_sd.to_string()]);
    rows
}

pub fn write_summary(path: &Path, results: &[SeedResult]) -> LabResult<()> {
    write_csv(path, &SUMMARY_HEADER, summary_rows(results))
}

pub fn write_comparison(path: &Path, cells: &[(String, Vec<SeedResult>)]) -> LabResult<()> {
    let rows = cells.iter().flat_map(|(name, results)| {
        summary_rows(results).into_iter().map(move |r| {
            let mut row = vec![name.clone()];
            row.extend(r);
            row
        })
    });
    write_csv(path, &COMPARISON_HEADER, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_small_cases() {
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn summary_has_one_aggregate_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let rs: Vec<SeedResult> = (0..5).map(|s| SeedResult { seed: s, a_avg: 0.5, a_last: 0.25 }).collect();
        write_summary(&p, &rs).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 5 + 1);
        assert_eq!(lines[6], "mean,0.5,0.25,0,0");
    }

    #[test]
    fn metrics_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let m = IncrementalMetrics { per_task: vec![1.0, 0.5], a_avg: 0.75, a_last: 0.5 };
        write_metrics(&p, &m).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "metric,t,value\nA_t,1,1\nA_t,2,0.5\nA_avg,,0.75\nA_last,,0.5\n");
    }
}
