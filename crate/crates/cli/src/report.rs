//! Alignment CSV rows and their per-model summaries.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const ALIGNMENT_CSV: &str = "alignment.csv";
pub const SUMMARY_CSV: &str = "summary.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRow {
    pub model: String,
    pub block: String,
    pub fold: usize,
    /// 1-based deflation stage.
    pub component: usize,
    pub cosine: f64,
    pub criterion: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub block: String,
    pub component: usize,
    pub count: usize,
    pub median: f64,
    pub q025: f64,
    pub q975: f64,
}

/// Nearest-rank quantile: the `⌈q N⌉`-th smallest value (the smallest for `q = 0`).
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Cosine median and 2.5% / 97.5% quantiles per (model, block, component),
/// in order of first appearance.
pub fn summarize(rows: &[AlignmentRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(&str, &str, usize)> = Vec::new();
    for r in rows {
        let key = (r.model.as_str(), r.block.as_str(), r.component);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(model, block, component)| {
            let mut v: Vec<f64> = rows
                .iter()
                .filter(|r| r.model == model && r.block == block && r.component == component)
                .map(|r| r.cosine)
                .collect();
            v.sort_by(f64::total_cmp);
            SummaryRow {
                model: model.to_string(),
                block: block.to_string(),
                component,
                count: v.len(),
                median: nearest_rank(&v, 0.5),
                q025: nearest_rank(&v, 0.025),
                q975: nearest_rank(&v, 0.975),
            }
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_alignment(path: &Path) -> Result<Vec<AlignmentRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<AlignmentRow>, _>>()?;
    Ok(rows)
}

/// Reads `alignment.csv` from `data` and writes `summary.csv` to `out`.
pub fn cmd_eval(data: &Path, out: &Path) -> Result<Vec<SummaryRow>> {
    let rows = read_alignment(&data.join(ALIGNMENT_CSV))?;
    if rows.is_empty() {
        return Err(CliError::Config(format!("{}: no alignment rows", data.display())));
    }
    let summary = summarize(&rows);
    crate::dataset::create_dir(out)?;
    write_csv(&out.join(SUMMARY_CSV), &summary)?;
    Ok(summary)
}
