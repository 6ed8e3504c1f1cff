//! Paired approximate randomization and Holm's step-down correction.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{check_len, confusion, prf1, EvalError};
use crate::exec;
use crate::model::PhaseLabel;
use crate::rng;

/// Quantity compared between two systems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Statistic {
    MeanF1,
    ClassF1(PhaseLabel),
}

impl Statistic {
    fn eval(self, pred: &[PhaseLabel], truth: &[PhaseLabel]) -> f64 {
        let m = prf1(&confusion(pred, truth).expect("aligned, non-empty"));
        match self {
            Self::MeanF1 => m.macro_f1,
            Self::ClassF1(c) => m.f1[c.code()],
        }
    }

    pub fn name(self) -> String {
        match self {
            Self::MeanF1 => "mean F1".into(),
            Self::ClassF1(c) => format!("{c} F1"),
        }
    }
}

// Absolute slack when comparing |Δ*| against |Δ_obs|, so that swap patterns
// reproducing the observed difference count despite rounding.
const TIE_EPS: f64 = 1e-12;

fn validate(a: &[PhaseLabel], b: &[PhaseLabel], truth: &[PhaseLabel]) -> Result<(), EvalError> {
    check_len("system A predictions", truth.len(), a.len())?;
    check_len("system B predictions", truth.len(), b.len())?;
    if truth.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

fn swapped_delta(a: &[PhaseLabel], b: &[PhaseLabel], truth: &[PhaseLabel], swap: impl Fn(usize) -> bool, stat: Statistic) -> f64 {
    let (sa, sb): (Vec<_>, Vec<_>) = (0..a.len()).map(|i| if swap(i) { (b[i], a[i]) } else { (a[i], b[i]) }).unzip();
    stat.eval(&sa, truth) - stat.eval(&sb, truth)
}

/// Two-sided p-value from `n_iter` random swap patterns:
/// `(1 + #{|Δ*| >= |Δ_obs|}) / (1 + n_iter)`.
///
/// Iteration `i` draws its swaps from a stream derived from `(seed, i)`, so
/// the result does not depend on thread count.
pub fn randomization_test(
    a: &[PhaseLabel],
    b: &[PhaseLabel],
    truth: &[PhaseLabel],
    stat: Statistic,
    n_iter: usize,
    seed: u64,
) -> Result<f64, EvalError> {
    validate(a, b, truth)?;
    if n_iter == 0 {
        return Err(EvalError::Argument("n_iter must be positive".into()));
    }
    let observed = (stat.eval(a, truth) - stat.eval(b, truth)).abs();
    let hits = exec::map_range(n_iter, |i| {
        let mut r = rng::stream(&[seed, i as u64]);
        let coins: Vec<bool> = (0..a.len()).map(|_| r.gen::<bool>()).collect();
        swapped_delta(a, b, truth, |k| coins[k], stat).abs() >= observed - TIE_EPS
    });
    let count = hits.into_iter().filter(|&h| h).count();
    Ok((1 + count) as f64 / (1 + n_iter) as f64)
}

/// Exact p-value over all `2^n` swap patterns (the identity included), for
/// `n <= 24` scans.
pub fn randomization_exact(a: &[PhaseLabel], b: &[PhaseLabel], truth: &[PhaseLabel], stat: Statistic) -> Result<f64, EvalError> {
    validate(a, b, truth)?;
    let n = truth.len();
    if n > 24 {
        return Err(EvalError::Argument(format!("exact enumeration limited to 24 scans, got {n}")));
    }
    let observed = (stat.eval(a, truth) - stat.eval(b, truth)).abs();
    let patterns = 1usize << n;
    let hits = exec::map_range(patterns, |mask| swapped_delta(a, b, truth, |k| mask >> k & 1 == 1, stat).abs() >= observed - TIE_EPS);
    Ok(hits.into_iter().filter(|&h| h).count() as f64 / patterns as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub raw: f64,
    pub adjusted: f64,
    pub reject: bool,
}

/// Holm-Bonferroni step-down adjustment. Results are in input order.
pub fn holm_bonferroni(p: &[f64], alpha: f64) -> Result<Vec<SignificanceResult>, EvalError> {
    if let Some(&bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(EvalError::PValue(bad));
    }
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| p[i].total_cmp(&p[j]).then(i.cmp(&j)));
    let mut out = vec![SignificanceResult { raw: 0.0, adjusted: 0.0, reject: false }; m];
    let mut running = 0.0f64;
    let mut rejecting = true;
    for (rank, &i) in order.iter().enumerate() {
        running = running.max((p[i] * (m - rank) as f64).min(1.0));
        rejecting &= running <= alpha;
        out[i] = SignificanceResult {
            raw: p[i],
            adjusted: running,
            reject: rejecting,
        };
    }
    Ok(out)
}
