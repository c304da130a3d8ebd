//! Accuracy, macro-F1, the aspect robustness score (ARS), and the
//! per-strategy fine-grained degradation analysis.
//!
//! ARS scores a variant group as correct only when the original and every
//! present variant are all answered correctly; groups missing some variant
//! types are scored over present members only.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Polarity, Strategy, VariantGroup};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub gold: Polarity,
    pub predicted: Polarity,
}

impl PredictionRecord {
    pub fn correct(&self) -> bool {
        self.gold == self.predicted
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Absent when the dataset carries no variants.
    pub ars: Option<f64>,
    /// Gold counts per class (negative, neutral, positive).
    pub n: [usize; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubsetRow {
    pub strategy: Strategy,
    /// Accuracy on originals restricted to groups having this variant.
    pub original_accuracy: f64,
    /// Accuracy on the variants themselves.
    pub variant_accuracy: f64,
    /// variant - original.
    pub diff: f64,
    pub n_groups: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubsetReport {
    pub rows: Vec<SubsetRow>,
    /// Strategies with zero instances, omitted from `rows`.
    pub omitted: Vec<Strategy>,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("empty record set")]
    Empty,
    #[error("missing prediction record for id {0}")]
    MissingRecord(String),
}

pub fn accuracy(records: &[PredictionRecord]) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let correct = records.iter().filter(|r| r.correct()).count();
    Ok(correct as f64 / records.len() as f64)
}

/// Unweighted mean of the three per-class F1 scores, with 0/0 -> 0.
pub fn macro_f1(records: &[PredictionRecord]) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut sum = 0.0;
    for class in Polarity::ALL {
        let tp = records.iter().filter(|r| r.gold == class && r.predicted == class).count() as f64;
        let fp = records.iter().filter(|r| r.gold != class && r.predicted == class).count() as f64;
        let fneg =
            records.iter().filter(|r| r.gold == class && r.predicted != class).count() as f64;
        let denom = 2.0 * tp + fp + fneg;
        sum += if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };
    }
    Ok(sum / 3.0)
}

fn record_index(records: &[PredictionRecord]) -> HashMap<&str, &PredictionRecord> {
    records.iter().map(|r| (r.id.as_str(), r)).collect()
}

fn lookup<'a>(
    index: &HashMap<&str, &'a PredictionRecord>,
    id: &str,
) -> Result<&'a PredictionRecord, EvalError> {
    index.get(id).copied().ok_or_else(|| EvalError::MissingRecord(id.to_string()))
}

/// Fraction of groups where the original and every present variant are
/// all correct.
pub fn ars(groups: &[VariantGroup], records: &[PredictionRecord]) -> Result<f64, EvalError> {
    if groups.is_empty() {
        return Err(EvalError::Empty);
    }
    let index = record_index(records);
    let mut all_correct = 0usize;
    for g in groups {
        let mut ok = lookup(&index, &g.original.id)?.correct();
        for v in g.variants.values() {
            ok &= lookup(&index, &v.id)?.correct();
        }
        if ok {
            all_correct += 1;
        }
    }
    Ok(all_correct as f64 / groups.len() as f64)
}

/// Per-strategy original-vs-variant accuracy, restricted to the groups
/// that carry that variant.
pub fn subset_analysis(
    groups: &[VariantGroup],
    records: &[PredictionRecord],
) -> Result<SubsetReport, EvalError> {
    let index = record_index(records);
    let mut rows = Vec::new();
    let mut omitted = Vec::new();
    for strategy in Strategy::ALL {
        let mut n = 0usize;
        let mut orig_correct = 0usize;
        let mut var_correct = 0usize;
        for g in groups {
            let Some(v) = g.variants.get(&strategy) else { continue };
            n += 1;
            if lookup(&index, &g.original.id)?.correct() {
                orig_correct += 1;
            }
            if lookup(&index, &v.id)?.correct() {
                var_correct += 1;
            }
        }
        if n == 0 {
            omitted.push(strategy);
            continue;
        }
        let original_accuracy = orig_correct as f64 / n as f64;
        let variant_accuracy = var_correct as f64 / n as f64;
        rows.push(SubsetRow {
            strategy,
            original_accuracy,
            variant_accuracy,
            diff: variant_accuracy - original_accuracy,
            n_groups: n,
        });
    }
    Ok(SubsetReport { rows, omitted })
}

/// Full metrics over records, with ARS when groups carry variants.
pub fn metrics_report(
    groups: &[VariantGroup],
    records: &[PredictionRecord],
) -> Result<MetricsReport, EvalError> {
    let original_records: Vec<PredictionRecord> = {
        let index = record_index(records);
        groups
            .iter()
            .map(|g| lookup(&index, &g.original.id).cloned())
            .collect::<Result<_, _>>()?
    };
    let mut n = [0usize; 3];
    for r in &original_records {
        n[r.gold.index()] += 1;
    }
    let has_variants = groups.iter().any(|g| !g.variants.is_empty());
    Ok(MetricsReport {
        accuracy: accuracy(&original_records)?,
        macro_f1: macro_f1(&original_records)?,
        ars: if has_variants { Some(ars(groups, records)?) } else { None },
        n,
    })
}

/// Aligned-text rendering of a subset report.
pub fn render_subset_table(report: &SubsetReport) -> String {
    let mut out = String::from(format!(
        "{:<10} {:>10} {:>10} {:>8} {:>8}\n",
        "Strategy", "Original", "Variant", "Diff", "Groups"
    ));
    for r in &report.rows {
        out.push_str(&format!(
            "{:<10} {:>9.2}% {:>9.2}% {:>+7.2}% {:>8}\n",
            r.strategy.to_string(),
            100.0 * r.original_accuracy,
            100.0 * r.variant_accuracy,
            100.0 * r.diff,
            r.n_groups
        ));
    }
    for s in &report.omitted {
        out.push_str(&format!("{:<10} (no instances)\n", s.to_string()));
    }
    out
}
