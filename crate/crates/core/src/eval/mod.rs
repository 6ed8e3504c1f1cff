//! Scan- and study-level metrics plus significance testing.

mod report;
mod significance;

pub use report::{EvalReport, Comparison, SystemMetrics};
pub use significance::{holm_bonferroni, randomization_exact, randomization_test, SignificanceResult, Statistic};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::PhaseLabel;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("length mismatch: {what} has {got} items, expected {expected}")]
    LengthMismatch { what: &'static str, expected: usize, got: usize },
    #[error("nothing to score")]
    Empty,
    #[error("scan {series_uid} refers to unknown study {study_uid}")]
    UnknownStudy { study_uid: String, series_uid: String },
    #[error("p-value {0} outside [0, 1]")]
    PValue(f64),
    #[error("invalid argument: {0}")]
    Argument(String),
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), EvalError> {
    if expected == got {
        Ok(())
    } else {
        Err(EvalError::LengthMismatch { what, expected, got })
    }
}

/// Rows are the true phase, columns the prediction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 5]; 5],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        self.counts[k].iter().sum()
    }

    pub fn col_sum(&self, k: usize) -> u64 {
        self.counts.iter().map(|r| r[k]).sum()
    }
}

pub fn confusion(pred: &[PhaseLabel], truth: &[PhaseLabel]) -> Result<ConfusionMatrix, EvalError> {
    check_len("predictions", truth.len(), pred.len())?;
    if truth.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut cm = ConfusionMatrix::default();
    for (p, t) in pred.iter().zip(truth) {
        cm.counts[t.code()][p.code()] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ScanMetrics {
    pub precision: [f64; 5],
    pub recall: [f64; 5],
    pub f1: [f64; 5],
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn prf1(cm: &ConfusionMatrix) -> ScanMetrics {
    let mut m = ScanMetrics::default();
    for k in 0..5 {
        let tp = cm.counts[k][k];
        let p = ratio(tp, cm.col_sum(k));
        let r = ratio(tp, cm.row_sum(k));
        m.precision[k] = p;
        m.recall[k] = r;
        m.f1[k] = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    }
    let mean = |v: &[f64; 5]| v.iter().sum::<f64>() / 5.0;
    m.macro_precision = mean(&m.precision);
    m.macro_recall = mean(&m.recall);
    m.macro_f1 = mean(&m.f1);
    m
}

/// One scored scan, keyed by study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyScan {
    pub study_uid: String,
    pub series_uid: String,
    pub truth: PhaseLabel,
    pub predicted: PhaseLabel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub study_uid: String,
    pub soi_count: usize,
    pub error_count: usize,
}

pub const ERROR_BUCKETS: [&str; 3] = ["0 errs", "1 err", ">=2 errs"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub studies: Vec<StudyRecord>,
    /// `buckets[soi_count][min(errors, 2)]`.
    pub buckets: [[u64; 3]; 5],
    pub accuracy: f64,
}

impl StudyReport {
    pub fn from_buckets(buckets: [[u64; 3]; 5]) -> Self {
        let total: u64 = buckets.iter().flatten().sum();
        let zero: u64 = buckets.iter().map(|r| r[0]).sum();
        Self {
            studies: Vec::new(),
            buckets,
            accuracy: ratio(zero, total),
        }
    }

    pub fn total(&self) -> u64 {
        self.buckets.iter().flatten().sum()
    }
}

/// Bucket studies by SOI count and number of misclassified scans. Every scan
/// counts toward its study's errors, including "other" scans. Studies are
/// reported in `study_uids` order.
pub fn study_buckets(scans: &[StudyScan], study_uids: &[String]) -> Result<StudyReport, EvalError> {
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, s) in study_uids.iter().enumerate() {
        index.entry(s.as_str()).or_insert(i);
    }
    let mut phases = vec![[false; 4]; study_uids.len()];
    let mut errors = vec![0usize; study_uids.len()];
    for s in scans {
        let Some(&i) = index.get(s.study_uid.as_str()) else {
            return Err(EvalError::UnknownStudy {
                study_uid: s.study_uid.clone(),
                series_uid: s.series_uid.clone(),
            });
        };
        if s.truth.is_soi() {
            phases[i][s.truth.code()] = true;
        }
        if s.truth != s.predicted {
            errors[i] += 1;
        }
    }
    let mut buckets = [[0u64; 3]; 5];
    let mut studies = Vec::new();
    for (i, uid) in study_uids.iter().enumerate() {
        if index[uid.as_str()] != i {
            continue;
        }
        let soi = phases[i].iter().filter(|&&b| b).count();
        buckets[soi][errors[i].min(2)] += 1;
        studies.push(StudyRecord {
            study_uid: uid.clone(),
            soi_count: soi,
            error_count: errors[i],
        });
    }
    let mut report = StudyReport::from_buckets(buckets);
    report.studies = studies;
    Ok(report)
}

/// Distinct study ids in first-seen order.
pub fn studies_in_order<'a>(uids: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    uids.into_iter().filter(|u| seen.insert(*u)).map(str::to_string).collect()
}
