//! Cross entropy over exact phase labels and the coarse "contrast" label.
//!
//! A coarse target says only that the scan is one of A, V or D. Its
//! probability is the summed softmax mass of those three classes, and the
//! loss is written as a difference of log-sum-exps so that it stays finite
//! for large logits:
//!
//! ```text
//! p_C  = (e^w_A + e^w_V + e^w_D) / sum_i e^w_i
//! loss = logsumexp(w) - logsumexp(w_A, w_V, w_D) = -ln p_C
//! ```
//!
//! An exact target `k` is the degenerate case with subset `{k}`, which is the
//! ordinary softmax cross entropy.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::model::PhaseLabel;
use crate::tensor::{logsumexp_slice, Scalar, Tape, Tensor, TensorError, Var};

const ALL: [usize; 5] = [0, 1, 2, 3, 4];
const CONTRAST: [usize; 3] = [1, 2, 3];

/// Supervision for one scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PhaseTarget {
    Exact(PhaseLabel),
    /// One of A, V, D; never NC or O.
    CoarseContrast,
}

impl PhaseTarget {
    /// Class indices whose probabilities are summed for this target.
    pub fn subset(self) -> &'static [usize] {
        match self {
            Self::Exact(l) => &ALL[l.code()..l.code() + 1],
            Self::CoarseContrast => &CONTRAST,
        }
    }

    pub fn is_coarse(self) -> bool {
        self == Self::CoarseContrast
    }
}

impl fmt::Display for PhaseTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Exact(l) => l.fmt(f),
            Self::CoarseContrast => f.write_str("Contrast"),
        }
    }
}

impl FromStr for PhaseTarget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.trim().eq_ignore_ascii_case("contrast") {
            Ok(Self::CoarseContrast)
        } else {
            s.parse().map(Self::Exact)
        }
    }
}

impl Serialize for PhaseTarget {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PhaseTarget {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Error)]
pub enum LossError {
    #[error("{logits} logit rows but {targets} targets")]
    LengthMismatch { logits: usize, targets: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Summed probability of A, V and D, computed max-shifted.
pub fn contrast_probability<T: Scalar>(logits: &[T; 5]) -> T {
    (logsumexp_slice(logits, &CONTRAST) - logsumexp_slice(logits, &ALL)).exp()
}

/// Loss and its gradient with respect to the five logits.
///
/// `grad_i = p_i - 1{i in S} * softmax_S(w)_i` where `S` is the target subset.
pub fn ace_loss<T: Scalar>(logits: &[T; 5], target: PhaseTarget) -> (T, [T; 5]) {
    let subset = target.subset();
    let lse_all = logsumexp_slice(logits, &ALL);
    let lse_sub = logsumexp_slice(logits, subset);
    let mut grad = [T::zero(); 5];
    for (g, &w) in grad.iter_mut().zip(logits) {
        *g = (w - lse_all).exp();
    }
    for &i in subset {
        grad[i] = grad[i] - (logits[i] - lse_sub).exp();
    }
    ((lse_all - lse_sub).max(T::zero()), grad)
}

/// Mean loss over a batch `[N, 5]` and the matching `[N, 5]` gradient.
pub fn batch_loss<T: Scalar>(logits: &Tensor<T>, targets: &[PhaseTarget]) -> Result<(T, Tensor<T>), LossError> {
    let n = check_batch(logits, targets)?;
    let scale = T::one() / T::of(n as f64);
    let mut total = T::zero();
    let mut grad = Tensor::zeros(&[n, 5]);
    for ((row, g), &t) in logits.data().chunks(5).zip(grad.data_mut().chunks_mut(5)).zip(targets) {
        let (l, gr) = ace_loss(row.try_into().expect("five logits"), t);
        total += l;
        for (dst, v) in g.iter_mut().zip(gr) {
            *dst = v * scale;
        }
    }
    Ok((total * scale, grad))
}

fn check_batch<T: Scalar>(logits: &Tensor<T>, targets: &[PhaseTarget]) -> Result<usize, LossError> {
    if logits.rank() != 2 || logits.shape()[1] != 5 {
        return Err(TensorError::Argument {
            op: "batch_loss",
            msg: format!("logits must be [N, 5], got {:?}", logits.shape()),
        }
        .into());
    }
    let n = logits.shape()[0];
    if n != targets.len() {
        return Err(LossError::LengthMismatch { logits: n, targets: targets.len() });
    }
    if n == 0 {
        return Err(LossError::EmptyBatch);
    }
    Ok(n)
}

/// Record the mean batch loss on a tape so gradients reach the network.
///
/// Rows sharing a target subset share one log-sum-exp node; a constant 0/1
/// row mask selects which rows each node contributes.
pub fn ace_loss_on_tape<T: Scalar>(tape: &mut Tape<T>, logits: Var, targets: &[PhaseTarget]) -> Result<Var, LossError> {
    let n = check_batch(tape.value(logits)?, targets)?;
    let lse_all = tape.logsumexp(logits, &ALL)?;
    let mut subsets: Vec<&'static [usize]> = Vec::new();
    for t in targets {
        if !subsets.contains(&t.subset()) {
            subsets.push(t.subset());
        }
    }
    let mut acc = tape.sum(lse_all)?;
    for s in subsets {
        let lse = tape.logsumexp(logits, s)?;
        let mask = Tensor::from_fn(&[n], |i| if targets[i].subset() == s { T::one() } else { T::zero() });
        let mask = tape.leaf(mask, false);
        let picked = tape.mul(lse, mask)?;
        let picked = tape.sum(picked)?;
        acc = tape.sub(acc, picked)?;
    }
    Ok(tape.scale(acc, 1.0 / n as f64)?)
}
