//! Metrics and the experiment harness: exact match with frozen answer
//! normalization, discriminator precision/recall/F1, in-context stability,
//! and sweep tables with baseline deltas.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{QAInstance, RetrievedSet};

/// Normalizes an answer string for exact-match comparison.
///
/// The four frozen steps, applied in order: lowercase, strip ASCII
/// punctuation, drop standalone articles ("a", "an", "the"), collapse
/// whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let no_punct: String = lowered
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// 1 iff the normalized prediction equals the normalization of any alias.
pub fn exact_match(prediction: &str, gold_answers: &[String]) -> u8 {
    assert!(!gold_answers.is_empty(), "gold_answers must be non-empty");
    let pred = normalize_answer(prediction);
    gold_answers
        .iter()
        .any(|g| normalize_answer(g) == pred) as u8
}

/// Mean EM over (prediction, instance) pairs, as a percentage.
pub fn em_percent<'a>(
    pairs: impl IntoIterator<Item = (&'a str, &'a QAInstance)>,
) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (pred, inst) in pairs {
        hits += exact_match(pred, &inst.answers) as usize;
        total += 1;
    }
    if total == 0 {
        0.0
    } else {
        100.0 * hits as f64 / total as f64
    }
}

/// Precision, recall, and F1 (percentages) with "perturbed" as the positive
/// class. Denominator-zero cases yield 0.
pub fn discriminator_metrics(decisions: &[bool], labels: &[bool]) -> (f64, f64, f64) {
    assert_eq!(decisions.len(), labels.len(), "length mismatch");
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fn_ = 0u64;
    for (&d, &l) in decisions.iter().zip(labels) {
        match (d, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp == 0 {
        0.0
    } else {
        100.0 * tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        100.0 * tp as f64 / (tp + fn_) as f64
    };
    (precision, recall, f1_from(precision, recall))
}

/// F1 from precision and recall (both in percent); 0 when P + R = 0.
pub fn f1_from(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Rounds a percentage to two decimals, ties to even.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round_ties_even() / 100.0
}

/// Best/average/worst EM over k single-iteration runs next to the ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub best: f64,
    pub average: f64,
    pub worst: f64,
    pub ensemble_em: f64,
}

/// Summarizes per-iteration EM scores; `worst <= average <= best` holds by
/// construction.
pub fn stability(per_iteration_ems: &[f64], ensemble_em: f64) -> StabilityReport {
    assert!(!per_iteration_ems.is_empty(), "need at least one iteration");
    let best = per_iteration_ems.iter().cloned().fold(f64::MIN, f64::max);
    let worst = per_iteration_ems.iter().cloned().fold(f64::MAX, f64::min);
    // clamp shields the ordering invariant from float summation noise
    let average =
        (per_iteration_ems.iter().sum::<f64>() / per_iteration_ems.len() as f64).clamp(worst, best);
    StabilityReport {
        best,
        average,
        worst,
        ensemble_em,
    }
}

/// One evaluated cell: answer EM plus optional discriminator metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub em: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    /// EM keyed by perturbation level, in sweep order.
    #[serde(default, skip_serializing_if = "IndexMap::is_empty")]
    pub per_level: IndexMap<String, f64>,
    /// Signed gains against the sweep baseline, keyed by level.
    #[serde(default, skip_serializing_if = "IndexMap::is_empty")]
    pub deltas: IndexMap<String, f64>,
}

/// Instances plus their labeled retrieved sets, the unit a system is
/// evaluated on.
#[derive(Debug, Clone)]
pub struct LabeledSplit {
    pub instances: Vec<QAInstance>,
    pub sets: Vec<RetrievedSet>,
}

impl LabeledSplit {
    /// Pairs every set with its instance, erroring on dangling ids.
    pub fn paired(&self) -> Result<Vec<(&QAInstance, &RetrievedSet)>, EvalError> {
        let by_id: std::collections::HashMap<&str, &QAInstance> = self
            .instances
            .iter()
            .map(|i| (i.id.as_str(), i))
            .collect();
        self.sets
            .iter()
            .map(|set| {
                by_id
                    .get(set.question_id.as_str())
                    .map(|inst| (*inst, set))
                    .ok_or_else(|| EvalError::MissingInstance(set.question_id.clone()))
            })
            .collect()
    }
}

/// Raw numbers a system reports for one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEval {
    pub em: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disc: Option<(f64, f64, f64)>,
}

/// Anything that can be scored on a labeled split.
pub trait System {
    fn name(&self) -> &str;
    fn evaluate(&self, split: &LabeledSplit) -> Result<SplitEval, EvalError>;
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no instance found for question id {0}")]
    MissingInstance(String),
    #[error("system failure: {0}")]
    System(String),
}

/// One row of a sweep table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub system: String,
    /// EM per level; `None` marks a cell whose evaluation failed.
    pub cells: Vec<Option<f64>>,
    pub avg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disc: Option<Vec<Option<(f64, f64, f64)>>>,
}

/// Sweep results over systems x levels, with delta rows against the first
/// system.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepTable {
    pub levels: Vec<String>,
    pub rows: Vec<SweepRow>,
    /// (system, per-level signed gain vs the baseline row).
    pub deltas: Vec<(String, Vec<Option<f64>>)>,
}

/// Evaluates every system on every level. A failing (system, level) cell is
/// recorded as missing and the sweep continues. The first system is the
/// delta baseline.
pub fn sweep(
    systems: &[&dyn System],
    splits: &[(String, LabeledSplit)],
) -> SweepTable {
    assert!(!systems.is_empty(), "need at least one system");
    let levels: Vec<String> = splits.iter().map(|(l, _)| l.clone()).collect();
    let mut rows = Vec::with_capacity(systems.len());
    for system in systems {
        let mut cells = Vec::with_capacity(splits.len());
        let mut disc = Vec::with_capacity(splits.len());
        for (_, split) in splits {
            match system.evaluate(split) {
                Ok(eval) => {
                    cells.push(Some(eval.em));
                    disc.push(eval.disc);
                }
                Err(err) => {
                    log::warn!("system {} failed on a split: {err}", system.name());
                    cells.push(None);
                    disc.push(None);
                }
            }
        }
        let present: Vec<f64> = cells.iter().flatten().cloned().collect();
        let avg = if present.is_empty() {
            None
        } else {
            Some(present.iter().sum::<f64>() / present.len() as f64)
        };
        rows.push(SweepRow {
            system: system.name().to_string(),
            cells,
            avg,
            disc: if disc.iter().all(Option::is_none) {
                None
            } else {
                Some(disc)
            },
        });
    }

    let baseline = rows[0].cells.clone();
    let deltas = rows
        .iter()
        .skip(1)
        .map(|row| {
            let ds = row
                .cells
                .iter()
                .zip(&baseline)
                .map(|(c, b)| match (c, b) {
                    (Some(c), Some(b)) => Some(c - b),
                    _ => None,
                })
                .collect();
            (row.system.clone(), ds)
        })
        .collect();
    SweepTable {
        levels,
        rows,
        deltas,
    }
}

impl SweepTable {
    /// Renders the table as aligned text; byte-deterministic for identical
    /// inputs.
    pub fn render_text(&self) -> String {
        let mut col0 = vec!["Method".to_string()];
        for row in &self.rows {
            col0.push(row.system.clone());
        }
        for (name, _) in &self.deltas {
            col0.push(format!("  Δ {name}"));
        }
        let width0 = col0.iter().map(|s| s.chars().count()).max().unwrap_or(6);

        let fmt_cell = |v: &Option<f64>| match v {
            Some(x) => format!("{:.2}", round2(*x)),
            None => "-".to_string(),
        };
        let fmt_delta = |v: &Option<f64>| match v {
            Some(x) => format!("{:+.2}", round2(*x)),
            None => "-".to_string(),
        };

        let mut out = String::new();
        let mut header = format!("{:<width0$}", "Method");
        for level in &self.levels {
            header.push_str(&format!("  {level:>8}"));
        }
        header.push_str(&format!("  {:>8}", "Avg."));
        out.push_str(header.trim_end());
        out.push('\n');

        for row in &self.rows {
            let mut line = format!("{:<width0$}", row.system);
            for cell in &row.cells {
                line.push_str(&format!("  {:>8}", fmt_cell(cell)));
            }
            line.push_str(&format!("  {:>8}", fmt_cell(&row.avg)));
            out.push_str(line.trim_end());
            out.push('\n');
        }
        for (name, ds) in &self.deltas {
            let mut line = format!("{:<width0$}", format!("  Δ {name}"));
            for d in ds {
                line.push_str(&format!("  {:>8}", fmt_delta(d)));
            }
            let present: Vec<f64> = ds.iter().flatten().cloned().collect();
            let avg = if present.is_empty() {
                None
            } else {
                Some(present.iter().sum::<f64>() / present.len() as f64)
            };
            line.push_str(&format!("  {:>8}", fmt_delta(&avg)));
            out.push_str(line.trim_end());
            out.push('\n');
        }
        out
    }

    /// Machine-readable records: one per (system, level) plus an `avg`
    /// pseudo-level, each carrying the delta against the baseline system.
    pub fn to_report_records(&self) -> Vec<ReportRecord> {
        let baseline = &self.rows[0];
        let mut records = Vec::new();
        for row in &self.rows {
            for (i, level) in self.levels.iter().enumerate() {
                let disc = row.disc.as_ref().and_then(|d| d[i]);
                records.push(ReportRecord {
                    system: row.system.clone(),
                    level: level.clone(),
                    em: row.cells[i],
                    precision: disc.map(|d| d.0),
                    recall: disc.map(|d| d.1),
                    f1: disc.map(|d| d.2),
                    delta: match (row.cells[i], baseline.cells[i]) {
                        (Some(c), Some(b)) if row.system != baseline.system => Some(c - b),
                        _ => None,
                    },
                });
            }
        }
        records
    }
}

/// Flat JSON record of the report schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub system: String,
    pub level: String,
    pub em: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
}

/// Validates a JSON value against the report schema: a list of objects with
/// the required `system`/`level` strings, an `em` number or null, and only
/// known optional numeric fields.
pub fn validate_report_json(value: &serde_json::Value) -> Result<(), String> {
    let arr = value.as_array().ok_or("report must be a JSON array")?;
    for (i, record) in arr.iter().enumerate() {
        let obj = record
            .as_object()
            .ok_or_else(|| format!("record {i} is not an object"))?;
        for key in ["system", "level"] {
            if !obj.get(key).map(|v| v.is_string()).unwrap_or(false) {
                return Err(format!("record {i}: missing string field '{key}'"));
            }
        }
        match obj.get("em") {
            Some(v) if v.is_number() || v.is_null() => {}
            _ => return Err(format!("record {i}: 'em' must be a number or null")),
        }
        for (key, v) in obj {
            match key.as_str() {
                "system" | "level" | "em" => {}
                "precision" | "recall" | "f1" | "delta" => {
                    if !(v.is_number() || v.is_null()) {
                        return Err(format!("record {i}: '{key}' must be numeric"));
                    }
                }
                other => return Err(format!("record {i}: unknown field '{other}'")),
            }
        }
    }
    Ok(())
}
