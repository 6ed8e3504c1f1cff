//! Combined evaluation report: JSON for machines, a table for people.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{ConfusionMatrix, ScanMetrics, SignificanceResult, StudyReport, ERROR_BUCKETS};
use crate::model::PhaseLabel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemMetrics {
    pub name: String,
    pub confusion: ConfusionMatrix,
    pub scan: ScanMetrics,
    pub study: StudyReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub statistic: String,
    pub delta: f64,
    #[serde(flatten)]
    pub result: SignificanceResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scans: usize,
    pub studies: usize,
    pub systems: Vec<SystemMetrics>,
    pub alpha: f64,
    pub n_iter: usize,
    /// First system against second, per class and for the mean.
    pub significance: Vec<Comparison>,
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} scans in {} studies", self.scans, self.studies);
        for sys in &self.systems {
            let m = &sys.scan;
            let _ = writeln!(s, "\n[{}] scan level", sys.name);
            let _ = writeln!(s, "{:<6} {:>9} {:>9} {:>9}", "class", "precision", "recall", "f1");
            for c in PhaseLabel::ALL {
                let k = c.code();
                let _ = writeln!(s, "{:<6} {:>9.4} {:>9.4} {:>9.4}", c.name(), m.precision[k], m.recall[k], m.f1[k]);
            }
            let _ = writeln!(s, "{:<6} {:>9.4} {:>9.4} {:>9.4}", "mean", m.macro_precision, m.macro_recall, m.macro_f1);
            let _ = writeln!(s, "[{}] study level (rows: SOIs present)", sys.name);
            let _ = writeln!(s, "{:<6} {:>8} {:>8} {:>8}", "sois", ERROR_BUCKETS[0], ERROR_BUCKETS[1], ERROR_BUCKETS[2]);
            for (soi, row) in sys.study.buckets.iter().enumerate() {
                let _ = writeln!(s, "{:<6} {:>8} {:>8} {:>8}", soi, row[0], row[1], row[2]);
            }
            let _ = writeln!(s, "accuracy {:.1}%", 100.0 * sys.study.accuracy);
        }
        if !self.significance.is_empty() {
            let _ = writeln!(s, "\nrandomization test ({} iterations, Holm at alpha {})", self.n_iter, self.alpha);
            for c in &self.significance {
                let _ = writeln!(
                    s,
                    "{:<10} delta {:>+8.4}  p {:.4}  adjusted {:.4}  {}",
                    c.statistic,
                    c.delta,
                    c.result.raw,
                    c.result.adjusted,
                    if c.result.reject { "significant" } else { "n.s." }
                );
            }
        }
        s
    }
}
