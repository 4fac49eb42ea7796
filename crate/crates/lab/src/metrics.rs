//! Metrics logs, ranking dumps and summary tables.
//!
//! `metrics.jsonl`: one object per epoch with keys `epoch` followed by
//! [`METRIC_KEYS`]. Ranking dumps: one object per item with keys
//! `item_id, category, pos_sims, neg_sims, correct_single, correct_itt,
//! correct_tot, pos_pos_sim, pos_neg_sims`; the last two carry the
//! caption-caption similarities behind the text-only verdict.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use read_core::eval::{summarize, RankingResult, Summary};
use read_core::train::{EpochMetrics, METRIC_KEYS};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{LabError, Result};

pub fn metrics_line(m: &EpochMetrics) -> String {
    let mut obj = Map::new();
    obj.insert("epoch".into(), Value::from(m.epoch));
    for (k, v) in METRIC_KEYS.iter().zip(m.values()) {
        obj.insert((*k).into(), Value::from(v));
    }
    Value::Object(obj).to_string()
}

pub fn write_metrics(path: &Path, history: &[EpochMetrics]) -> Result<()> {
    let mut text = String::new();
    for m in history {
        text.push_str(&metrics_line(m));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| LabError::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let file = std::fs::File::open(path).map_err(|e| LabError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| LabError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |d: &str| LabError::format(path, format!("line {}: {d}", n + 1));
        let v: Value = serde_json::from_str(&line).map_err(|e| bad(&e.to_string()))?;
        let epoch = v["epoch"].as_u64().ok_or_else(|| bad("missing epoch"))? as usize;
        let mut vals = [0.0; 11];
        for (slot, k) in vals.iter_mut().zip(METRIC_KEYS) {
            *slot = v[k].as_f64().unwrap_or(f64::NAN);
        }
        out.push(EpochMetrics::from_values(epoch, vals));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingLine {
    pub item_id: u64,
    pub category: String,
    pub pos_sims: Vec<f64>,
    pub neg_sims: Vec<f64>,
    pub correct_single: bool,
    pub correct_itt: Option<bool>,
    pub correct_tot: Option<bool>,
    pub pos_pos_sim: Option<f64>,
    pub pos_neg_sims: Vec<Vec<f64>>,
}

impl From<&RankingResult> for RankingLine {
    fn from(r: &RankingResult) -> Self {
        Self {
            item_id: r.item_id,
            category: r.category.clone(),
            pos_sims: r.pos_sims.clone(),
            neg_sims: r.neg_sims.clone(),
            correct_single: r.correct_single,
            correct_itt: r.correct_itt,
            correct_tot: r.correct_tot,
            pos_pos_sim: r.pos_pos_sim,
            pos_neg_sims: r.pos_neg_sims.clone(),
        }
    }
}

pub fn write_rankings(path: &Path, results: &[RankingResult]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| LabError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in results {
        let s = serde_json::to_string(&RankingLine::from(r)).map_err(|e| LabError::format(path, e.to_string()))?;
        writeln!(w, "{s}").map_err(|e| LabError::io(path, e))?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

/// One row of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub epoch: usize,
    pub suite: String,
    pub category: String,
    pub items: usize,
    pub acc_single: f64,
    pub acc_itt: Option<f64>,
    pub acc_tot: Option<f64>,
}

fn row(epoch: usize, suite: &str, category: &str, s: &Summary) -> SummaryRow {
    SummaryRow {
        epoch,
        suite: suite.into(),
        category: category.into(),
        items: s.items,
        acc_single: s.single,
        acc_itt: s.itt,
        acc_tot: s.tot,
    }
}

/// An `all` row for the suite followed by one row per category.
pub fn summary_rows(epoch: usize, suite: &str, results: &[RankingResult]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    if let Some(s) = summarize(results) {
        out.push(row(epoch, suite, "all", &s));
    }
    let mut by_cat: BTreeMap<&str, Vec<RankingResult>> = BTreeMap::new();
    for r in results {
        by_cat.entry(r.category.as_str()).or_default().push(r.clone());
    }
    for (cat, rs) in by_cat {
        if let Some(s) = summarize(&rs) {
            out.push(row(epoch, suite, cat, &s));
        }
    }
    out
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| LabError::format(path, e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| LabError::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound => LabError::Missing(path.to_path_buf()),
        _ => LabError::format(path, e.to_string()),
    })?;
    r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| LabError::format(path, e.to_string()))
}
