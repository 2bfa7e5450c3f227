//! Scoring between predicted and reference classifications: weighted F1,
//! accuracy, and per-level conditional agreement.
//!
//! Labels are compared exactly. A level an item never reached (because
//! classification failed or its path ended early) scores as the reserved
//! wrong label [`MISSING_LABEL`] rather than being dropped — dropping
//! would inflate the scores.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blueprint::CategoryPath;
use crate::pipeline::ClassificationRecord;

/// Reserved label standing in for a level the prediction never reached.
pub const MISSING_LABEL: &str = "⟂";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("no pairs to score")]
    Empty,
    #[error("conditional agreement is defined for levels >= 2, got {0}")]
    LevelTooShallow(usize),
    #[error("predicted and reference lists differ in length ({predicted} vs {reference})")]
    LengthMismatch { predicted: usize, reference: usize },
    #[error("entry {index}: record id {record:?} does not match reference id {reference:?}")]
    IdMismatch { index: usize, record: String, reference: String },
}

/// One prediction compared against its reference label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledPair {
    pub predicted: String,
    pub reference: String,
}

impl LabeledPair {
    pub fn new(predicted: impl Into<String>, reference: impl Into<String>) -> Self {
        Self { predicted: predicted.into(), reference: reference.into() }
    }
}

/// A reference (ground-truth) path for one item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceEntry {
    pub item_id: String,
    pub path: CategoryPath,
}

impl ReferenceEntry {
    pub fn new(item_id: impl Into<String>, path: CategoryPath) -> Self {
        Self { item_id: item_id.into(), path }
    }
}

#[derive(Default)]
struct ClassCounts {
    reference: usize,
    predicted: usize,
    hits: usize,
}

// BTreeMap keeps class iteration (and so float accumulation) in a fixed
// order: equal inputs produce bit-identical scores.
fn class_counts(pairs: &[LabeledPair]) -> BTreeMap<&str, ClassCounts> {
    let mut counts: BTreeMap<&str, ClassCounts> = BTreeMap::new();
    for pair in pairs {
        counts.entry(pair.reference.as_str()).or_default().reference += 1;
        counts.entry(pair.predicted.as_str()).or_default().predicted += 1;
        if pair.predicted == pair.reference {
            counts.entry(pair.reference.as_str()).or_default().hits += 1;
        }
    }
    counts
}

fn f1_for(counts: &ClassCounts) -> f64 {
    let precision =
        if counts.predicted == 0 { 0.0 } else { counts.hits as f64 / counts.predicted as f64 };
    let recall =
        if counts.reference == 0 { 0.0 } else { counts.hits as f64 / counts.reference as f64 };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Support-weighted F1 over the reference classes: each class's F1 is
/// weighted by its share of the reference labels.
pub fn weighted_f1(pairs: &[LabeledPair]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let counts = class_counts(pairs);
    let total = pairs.len() as f64;
    let weighted: f64 = counts
        .values()
        .filter(|c| c.reference > 0)
        .map(|c| c.reference as f64 * f1_for(c))
        .sum();
    Ok(weighted / total)
}

/// Unweighted mean of per-class F1 over the reference classes.
pub fn macro_f1(pairs: &[LabeledPair]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let counts = class_counts(pairs);
    let classes: Vec<&ClassCounts> = counts.values().filter(|c| c.reference > 0).collect();
    Ok(classes.iter().map(|c| f1_for(c)).sum::<f64>() / classes.len() as f64)
}

/// Fraction of pairs whose prediction matches the reference exactly.
pub fn accuracy(pairs: &[LabeledPair]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let hits = pairs.iter().filter(|p| p.predicted == p.reference).count();
    Ok(hits as f64 / pairs.len() as f64)
}

/// Agreement at one level, conditioned on agreement at every shallower
/// level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalAgreement {
    pub fraction: f64,
    /// Number of items agreeing with the reference at all levels above.
    pub eligible: usize,
    /// False when no item was eligible; the fraction is then a vacuous 1.0
    /// and must not be folded into aggregates.
    pub defined: bool,
}

fn agree_at(predicted: &CategoryPath, reference: &CategoryPath, level: usize) -> bool {
    match (predicted.label_at_level(level), reference.label_at_level(level)) {
        (Some(p), Some(r)) => p == r,
        // a path missing this level counts as non-matching
        _ => false,
    }
}

/// Agreement at `level` among the items that agree with the reference at
/// every level below it. Paths shorter than a level count as non-matching
/// at their missing levels.
pub fn conditional_agreement(
    predicted: &[CategoryPath],
    reference: &[CategoryPath],
    level: usize,
) -> Result<ConditionalAgreement, MetricsError> {
    if level < 2 {
        return Err(MetricsError::LevelTooShallow(level));
    }
    if predicted.len() != reference.len() {
        return Err(MetricsError::LengthMismatch {
            predicted: predicted.len(),
            reference: reference.len(),
        });
    }
    let eligible: Vec<usize> = (0..predicted.len())
        .filter(|&i| (1..level).all(|l| agree_at(&predicted[i], &reference[i], l)))
        .collect();
    if eligible.is_empty() {
        return Ok(ConditionalAgreement { fraction: 1.0, eligible: 0, defined: false });
    }
    let agreeing = eligible
        .iter()
        .filter(|&&i| agree_at(&predicted[i], &reference[i], level))
        .count();
    Ok(ConditionalAgreement {
        fraction: agreeing as f64 / eligible.len() as f64,
        eligible: eligible.len(),
        defined: true,
    })
}

/// Scores for one level of the hierarchy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub weighted_f1: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    /// Number of scored pairs at this level.
    pub support: usize,
}

/// The full evaluation report. `mean_weighted_f1` averages the per-level
/// weighted F1 values; `leaf_weighted_f1` is the deepest level alone and
/// `pooled_weighted_f1` pools every (level, item) pair into one score —
/// three aggregation conventions for the same run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_level: BTreeMap<usize, LevelMetrics>,
    pub conditional_agreement: BTreeMap<usize, ConditionalAgreement>,
    pub mean_weighted_f1: f64,
    pub leaf_weighted_f1: f64,
    pub pooled_weighted_f1: f64,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn check_alignment(
    records: &[ClassificationRecord],
    references: &[ReferenceEntry],
) -> Result<(), MetricsError> {
    if records.len() != references.len() {
        return Err(MetricsError::LengthMismatch {
            predicted: records.len(),
            reference: references.len(),
        });
    }
    for (index, (record, reference)) in records.iter().zip(references).enumerate() {
        if record.item_id != reference.item_id {
            return Err(MetricsError::IdMismatch {
                index,
                record: record.item_id.clone(),
                reference: reference.item_id.clone(),
            });
        }
    }
    Ok(())
}

/// Per-level (predicted, reference) pairs for aligned records. An item
/// contributes to level `k` when its reference path reaches that deep; a
/// prediction missing the level scores as [`MISSING_LABEL`].
pub fn per_level_pairs(
    records: &[ClassificationRecord],
    references: &[ReferenceEntry],
) -> Result<BTreeMap<usize, Vec<LabeledPair>>, MetricsError> {
    check_alignment(records, references)?;
    let max_level = references.iter().map(|r| r.path.len()).max().unwrap_or(0);
    if max_level == 0 {
        return Err(MetricsError::Empty);
    }
    let mut by_level: BTreeMap<usize, Vec<LabeledPair>> = BTreeMap::new();
    for level in 1..=max_level {
        let pairs: Vec<LabeledPair> = records
            .iter()
            .zip(references)
            .filter_map(|(record, reference)| {
                reference.path.label_at_level(level).map(|truth| {
                    let predicted =
                        record.path.label_at_level(level).unwrap_or(MISSING_LABEL);
                    LabeledPair::new(predicted, truth)
                })
            })
            .collect();
        if !pairs.is_empty() {
            by_level.insert(level, pairs);
        }
    }
    Ok(by_level)
}

/// Assembles the full report for records aligned (by item id) with their
/// reference paths.
pub fn score_records(
    records: &[ClassificationRecord],
    references: &[ReferenceEntry],
) -> Result<MetricsReport, MetricsError> {
    let by_level = per_level_pairs(records, references)?;
    let max_level = *by_level.keys().last().expect("at least one level");

    let mut per_level = BTreeMap::new();
    let mut pooled: Vec<LabeledPair> = Vec::new();
    for (&level, pairs) in &by_level {
        per_level.insert(
            level,
            LevelMetrics {
                weighted_f1: weighted_f1(pairs)?,
                macro_f1: macro_f1(pairs)?,
                accuracy: accuracy(pairs)?,
                support: pairs.len(),
            },
        );
        pooled.extend(pairs.iter().cloned());
    }

    let predicted_paths: Vec<CategoryPath> = records.iter().map(|r| r.path.clone()).collect();
    let reference_paths: Vec<CategoryPath> = references.iter().map(|r| r.path.clone()).collect();
    let mut conditional = BTreeMap::new();
    for level in 2..=max_level {
        conditional
            .insert(level, conditional_agreement(&predicted_paths, &reference_paths, level)?);
    }

    let mean_weighted_f1 =
        per_level.values().map(|m| m.weighted_f1).sum::<f64>() / per_level.len() as f64;
    let leaf_weighted_f1 = per_level[&max_level].weighted_f1;
    let pooled_weighted_f1 = weighted_f1(&pooled)?;

    Ok(MetricsReport {
        per_level,
        conditional_agreement: conditional,
        mean_weighted_f1,
        leaf_weighted_f1,
        pooled_weighted_f1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::ClassificationRecord;

    fn pairs(truth: &[&str], predicted: &[&str]) -> Vec<LabeledPair> {
        truth
            .iter()
            .zip(predicted)
            .map(|(t, p)| LabeledPair::new(*p, *t))
            .collect()
    }

    #[test]
    fn perfect_predictions_score_one() {
        let p = pairs(&["A", "B", "A"], &["A", "B", "A"]);
        assert_eq!(weighted_f1(&p).unwrap(), 1.0);
        assert_eq!(accuracy(&p).unwrap(), 1.0);
        assert_eq!(macro_f1(&p).unwrap(), 1.0);
    }

    #[test]
    fn flipped_binary_predictions_score_zero() {
        let p = pairs(&["A", "A", "B", "B"], &["B", "B", "A", "A"]);
        assert_eq!(weighted_f1(&p).unwrap(), 0.0);
        assert_eq!(accuracy(&p).unwrap(), 0.0);
    }

    #[test]
    fn hand_checked_confusion_case() {
        // truth AABB vs predicted ABBB: F1_A = 2/3, F1_B = 4/5, equal
        // weights, so weighted F1 = 11/15 and accuracy = 3/4.
        let p = pairs(&["A", "A", "B", "B"], &["A", "B", "B", "B"]);
        assert!((weighted_f1(&p).unwrap() - 11.0 / 15.0).abs() < 1e-12);
        assert_eq!(accuracy(&p).unwrap(), 0.75);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert_eq!(weighted_f1(&[]), Err(MetricsError::Empty));
        assert_eq!(accuracy(&[]), Err(MetricsError::Empty));
        assert_eq!(macro_f1(&[]), Err(MetricsError::Empty));
    }

    #[test]
    fn single_mismatched_pair_scores_zero() {
        let p = pairs(&["A"], &["B"]);
        assert_eq!(accuracy(&p).unwrap(), 0.0);
    }

    #[test]
    fn metrics_are_permutation_invariant() {
        let mut p = pairs(&["A", "A", "B", "C", "B"], &["A", "B", "B", "C", "A"]);
        let w = weighted_f1(&p).unwrap();
        let a = accuracy(&p).unwrap();
        let m = macro_f1(&p).unwrap();
        p.reverse();
        assert_eq!(weighted_f1(&p).unwrap(), w);
        assert_eq!(accuracy(&p).unwrap(), a);
        assert_eq!(macro_f1(&p).unwrap(), m);
    }

    fn path(labels: &[&str]) -> CategoryPath {
        CategoryPath::new(labels.iter().map(|s| s.to_string()).collect())
    }

    #[test]
    fn conditional_agreement_hand_count() {
        // Four items: three agree at level 1, and of those, two agree at
        // level 2 -> conditional = 2/3 with 3 eligible.
        let reference = vec![path(&["A", "X"]), path(&["A", "Y"]), path(&["A", "Z"]), path(&["B", "W"])];
        let predicted = vec![path(&["A", "X"]), path(&["A", "Y"]), path(&["A", "Q"]), path(&["C", "W"])];
        let result = conditional_agreement(&predicted, &reference, 2).unwrap();
        assert_eq!(result.eligible, 3);
        assert!((result.fraction - 2.0 / 3.0).abs() < 1e-12);
        assert!(result.defined);
    }

    #[test]
    fn conditional_agreement_identical_paths() {
        let paths = vec![path(&["A", "X", "P"]), path(&["B", "Y", "Q"])];
        for level in 2..=3 {
            let result = conditional_agreement(&paths, &paths, level).unwrap();
            assert_eq!(result.fraction, 1.0);
            assert_eq!(result.eligible, 2);
        }
    }

    #[test]
    fn conditional_agreement_with_no_eligible_items_is_flagged() {
        let reference = vec![path(&["A", "X"])];
        let predicted = vec![path(&["B", "X"])];
        let result = conditional_agreement(&predicted, &reference, 2).unwrap();
        assert!(!result.defined);
        assert_eq!(result.eligible, 0);
        assert_eq!(result.fraction, 1.0);
    }

    #[test]
    fn conditional_agreement_rejects_shallow_levels_and_mismatched_lists() {
        let a = vec![path(&["A"])];
        assert_eq!(conditional_agreement(&a, &a, 1), Err(MetricsError::LevelTooShallow(1)));
        let b = vec![path(&["A"]), path(&["B"])];
        assert!(matches!(
            conditional_agreement(&a, &b, 2),
            Err(MetricsError::LengthMismatch { .. })
        ));
    }

    fn record(id: &str, labels: &[&str]) -> ClassificationRecord {
        ClassificationRecord {
            item_id: id.to_string(),
            path: path(labels),
            decisions: Vec::new(),
            failure: None,
        }
    }

    #[test]
    fn score_records_treats_missing_levels_as_wrong() {
        let records = vec![record("1", &["A", "X", "P"]), record("2", &["B"])];
        let references = vec![
            ReferenceEntry::new("1", path(&["A", "X", "P"])),
            ReferenceEntry::new("2", path(&["B", "Y", "Q"])),
        ];
        let report = score_records(&records, &references).unwrap();
        assert_eq!(report.per_level[&1].accuracy, 1.0);
        assert_eq!(report.per_level[&2].accuracy, 0.5);
        assert_eq!(report.per_level[&3].accuracy, 0.5);
        // item 2 is eligible at level 2 (agrees at level 1) but its missing
        // level 2 counts as non-matching, so it is not eligible at level 3
        assert_eq!(report.conditional_agreement[&2].eligible, 2);
        assert_eq!(report.conditional_agreement[&2].fraction, 0.5);
        assert_eq!(report.conditional_agreement[&3].eligible, 1);
        assert_eq!(report.conditional_agreement[&3].fraction, 1.0);
    }

    #[test]
    fn score_records_rejects_misaligned_ids() {
        let records = vec![record("1", &["A"])];
        let references = vec![ReferenceEntry::new("2", path(&["A"]))];
        assert!(matches!(
            score_records(&records, &references),
            Err(MetricsError::IdMismatch { .. })
        ));
    }

    #[test]
    fn eligible_counts_never_increase_with_level() {
        let records = vec![
            record("1", &["A", "X", "P"]),
            record("2", &["A", "Y", "Q"]),
            record("3", &["B", "X", "P"]),
        ];
        let references = vec![
            ReferenceEntry::new("1", path(&["A", "X", "Q"])),
            ReferenceEntry::new("2", path(&["A", "X", "Q"])),
            ReferenceEntry::new("3", path(&["B", "X", "P"])),
        ];
        let report = score_records(&records, &references).unwrap();
        let mut previous = usize::MAX;
        for agreement in report.conditional_agreement.values() {
            assert!(agreement.eligible <= previous);
            previous = agreement.eligible;
        }
    }

    #[test]
    fn report_serializes_with_stable_field_names() {
        let records = vec![record("1", &["A", "X"])];
        let references = vec![ReferenceEntry::new("1", path(&["A", "X"]))];
        let report = score_records(&records, &references).unwrap();
        let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        assert!(json["per_level"]["1"]["weighted_f1"].is_number());
        assert!(json["per_level"]["1"]["support"].is_number());
        assert!(json["conditional_agreement"]["2"]["eligible"].is_number());
        assert!(json["mean_weighted_f1"].is_number());
        assert!(json["leaf_weighted_f1"].is_number());
        assert!(json["pooled_weighted_f1"].is_number());
    }
}
