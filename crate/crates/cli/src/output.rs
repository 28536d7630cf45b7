//! CSV outputs. Every file opens with a `#` comment carrying the schema version and the
//! config hash; readers skip it.
//!
//! Column orders:
//!
//! - `runs.csv`: algorithm, seed, lambda, step, normalized_error, sup_error,
//!   model_tv_uncorrected, model_tv_corrected
//! - `summary.csv`: algorithm, lambda, step, runs, then mean and standard error of each
//!   metric in the order above
//! - `timings.csv`: algorithm, seed, lambda, wall_time_s, rows, error
//! - `audits.csv`: bound_id, instance_id, lhs, rhs, slack, pass
//!
//! Missing values (a model error the algorithm does not have) are empty fields.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::SCHEMA_VERSION;

/// One evaluation point of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub algorithm: String,
    pub seed: u64,
    pub lambda: f64,
    /// Iteration for planners, sample count for agents.
    pub step: u64,
    pub normalized_error: f64,
    pub sup_error: f64,
    pub model_tv_uncorrected: Option<f64>,
    pub model_tv_corrected: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub algorithm: String,
    pub seed: u64,
    pub lambda: f64,
    pub wall_time_s: f64,
    pub rows: usize,
    /// Why the cell stopped early, if it did.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub bound_id: String,
    pub instance_id: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub algorithm: String,
    pub lambda: f64,
    pub step: u64,
    pub runs: usize,
    pub normalized_error_mean: f64,
    pub normalized_error_se: f64,
    pub sup_error_mean: f64,
    pub sup_error_se: f64,
    pub model_tv_uncorrected_mean: Option<f64>,
    pub model_tv_uncorrected_se: Option<f64>,
    pub model_tv_corrected_mean: Option<f64>,
    pub model_tv_corrected_se: Option<f64>,
}

/// Mean and standard error (sample standard deviation over `√n`; 0 for a single value).
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn optional_mean_se(values: &[Option<f64>]) -> (Option<f64>, Option<f64>) {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.is_empty() {
        return (None, None);
    }
    let (m, s) = mean_se(&present);
    (Some(m), Some(s))
}

/// One row per (algorithm, λ, step), over the seeds that reached that step. Algorithms
/// keep their order of first appearance; λ and step are ascending.
pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<(usize, u64, u64), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        let idx = match order.iter().position(|a| *a == r.algorithm) {
            Some(i) => i,
            None => {
                order.push(&r.algorithm);
                order.len() - 1
            }
        };
        // Non-negative floats order like their bit patterns.
        groups.entry((idx, r.lambda.to_bits(), r.step)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((idx, lambda, step), rows)| {
            let (ne, ne_se) = mean_se(&rows.iter().map(|r| r.normalized_error).collect::<Vec<_>>());
            let (se, se_se) = mean_se(&rows.iter().map(|r| r.sup_error).collect::<Vec<_>>());
            let (tu, tu_se) = optional_mean_se(&rows.iter().map(|r| r.model_tv_uncorrected).collect::<Vec<_>>());
            let (tc, tc_se) = optional_mean_se(&rows.iter().map(|r| r.model_tv_corrected).collect::<Vec<_>>());
            SummaryRow {
                algorithm: order[idx].to_string(),
                lambda: f64::from_bits(lambda),
                step,
                runs: rows.len(),
                normalized_error_mean: ne,
                normalized_error_se: ne_se,
                sup_error_mean: se,
                sup_error_se: se_se,
                model_tv_uncorrected_mean: tu,
                model_tv_uncorrected_se: tu_se,
                model_tv_corrected_mean: tc,
                model_tv_corrected_se: tc_se,
            }
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, config_hash: &str, rows: &[T]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "# schema v{SCHEMA_VERSION} config-sha256 {config_hash}")?;
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        // serde only emits the header with the first row.
        drop(w);
        return Ok(());
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<T>, _>>();
    rows.with_context(|| format!("reading {}", path.display()))
}

/// The hash recorded in a file's header comment.
pub fn read_config_hash(path: &Path) -> Result<Option<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .next()
        .and_then(|l| l.strip_prefix('#'))
        .and_then(|l| l.split_whitespace().skip_while(|w| *w != "config-sha256").nth(1))
        .map(str::to_string))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(alg: &str, seed: u64, lambda: f64, step: u64, err: f64) -> RunRecord {
        RunRecord {
            algorithm: alg.into(),
            seed,
            lambda,
            step,
            normalized_error: err,
            sup_error: 2.0 * err,
            model_tv_uncorrected: Some(err),
            model_tv_corrected: None,
        }
    }

    #[test]
    fn mean_and_standard_error() {
        let (m, s) = mean_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        // sd = sqrt(5/3), se = sd / 2
        assert!((s - (5.0f64 / 3.0).sqrt() / 2.0).abs() < 1e-15);
        assert_eq!(mean_se(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn summary_groups_by_algorithm_lambda_and_step() {
        let rows = vec![
            rec("b", 0, 0.5, 10, 1.0),
            rec("b", 1, 0.5, 10, 3.0),
            rec("a", 0, 0.5, 10, 5.0),
            rec("b", 0, 0.1, 20, 1.0),
            rec("b", 0, 0.1, 10, 1.0),
        ];
        let s = summarize(&rows);
        let keys: Vec<_> = s.iter().map(|r| (r.algorithm.as_str(), r.lambda, r.step, r.runs)).collect();
        assert_eq!(keys, vec![("b", 0.1, 10, 1), ("b", 0.1, 20, 1), ("b", 0.5, 10, 2), ("a", 0.5, 10, 1)]);
        assert_eq!(s[2].normalized_error_mean, 2.0);
        assert_eq!(s[2].normalized_error_se, 1.0);
        assert_eq!(s[2].model_tv_corrected_mean, None);
    }

    #[test]
    fn csv_round_trip_with_hash_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs.csv");
        let rows = vec![rec("a", 0, 0.1, 1, 0.25), rec("a", 1, 0.1, 1, 1e-300)];
        write_csv(&path, "abc123", &rows).unwrap();
        assert_eq!(read_csv::<RunRecord>(&path).unwrap(), rows);
        assert_eq!(read_config_hash(&path).unwrap().as_deref(), Some("abc123"));
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().nth(1).unwrap().starts_with("algorithm,seed,lambda,step,"));
    }
}
