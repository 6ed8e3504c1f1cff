//! Shared oracles for the integration suites.
#![allow(dead_code)]

pub mod cases;

use phase_curator::rng;
use phase_curator::tensor::{Int3, Tape, Tensor, Var};
use rand::Rng as _;

pub const FD_STEP: f64 = 1e-5;

pub fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut rng::Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Default)]
pub struct GradReport {
    /// Relative error `|a - n| / max(|a|, |n|)` of the whole gradient, all
    /// inputs concatenated (2-norms).
    pub max_rel: f64,
    /// The same ratio for the worst single input tensor. Tensors whose
    /// gradient is tiny make this dominated by finite-difference round-off.
    pub worst_tensor_rel: f64,
    pub checked: usize,
    /// Coordinates skipped because a perturbation crossed a ReLU or pool kink.
    pub skipped: usize,
}

/// Check `f` (inputs -> scalar) at `inputs`. Every input is a gradient leaf.
///
/// A coordinate is compared only when both perturbed forwards keep the same
/// ReLU signs and pooling winners as the unperturbed one, so the central
/// difference never straddles a kink.
pub fn grad_check<F>(inputs: &[Tensor<f64>], f: F) -> GradReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let run = |vals: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars);
        (tape, vars, out)
    };
    let (mut tape, vars, out) = run(inputs);
    let pattern = tape.activation_pattern();
    tape.backward(out).expect("scalar output");
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).unwrap().cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |vals: &[Tensor<f64>]| {
        let (tape, _, out) = run(vals);
        (tape.value(out).unwrap().item(), tape.activation_pattern())
    };
    let mut report = GradReport::default();
    let (mut total_diff2, mut total_a2, mut total_n2) = (0.0, 0.0, 0.0);
    for (k, input) in inputs.iter().enumerate() {
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for i in 0..input.len() {
            let mut vals = inputs.to_vec();
            let x = input.data()[i];
            vals[k].data_mut()[i] = x + FD_STEP;
            let (fp, pp) = eval(&vals);
            vals[k].data_mut()[i] = x - FD_STEP;
            let (fm, pm) = eval(&vals);
            if pp != pattern || pm != pattern {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let a = analytic[k].data()[i];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            report.checked += 1;
        }
        let scale = a2.sqrt().max(n2.sqrt());
        if scale > 0.0 {
            report.worst_tensor_rel = report.worst_tensor_rel.max(diff2.sqrt() / scale);
        }
        total_diff2 += diff2;
        total_a2 += a2;
        total_n2 += n2;
    }
    let scale = total_a2.sqrt().max(total_n2.sqrt());
    if scale > 0.0 {
        report.max_rel = total_diff2.sqrt() / scale;
    }
    report
}

/// Reduce a tensor-valued op to a scalar with fixed random weights, so every
/// output coordinate carries a distinct upstream gradient.
pub fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let shape = tape.value(y).unwrap().shape().to_vec();
    let mut r = rng::stream(&[0xFEED, seed]);
    let w = tape.leaf(uniform(&shape, -1.0, 1.0, &mut r), false);
    let p = tape.mul(y, w).unwrap();
    tape.sum(p).unwrap()
}

/// Direct 7-nested-loop convolution.
pub fn conv3d_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: Int3, pad: Int3) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let (n, c, d, h, wd) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let (k, kd, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
    let od = (d + 2 * pad[0] - kd) / stride[0] + 1;
    let oh = (h + 2 * pad[1] - kh) / stride[1] + 1;
    let ow = (wd + 2 * pad[2] - kw) / stride[2] + 1;
    let xi = |ni: usize, ci: usize, z: usize, y: usize, xx: usize| x.data()[(((ni * c + ci) * d + z) * h + y) * wd + xx];
    let wi = |ki: usize, ci: usize, z: usize, y: usize, xx: usize| w.data()[(((ki * c + ci) * kd + z) * kh + y) * kw + xx];
    let mut out = Vec::with_capacity(n * k * od * oh * ow);
    for ni in 0..n {
        for ki in 0..k {
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[ki];
                        for ci in 0..c {
                            for dz in 0..kd {
                                for dy in 0..kh {
                                    for dx in 0..kw {
                                        let z = (oz * stride[0] + dz) as isize - pad[0] as isize;
                                        let y = (oy * stride[1] + dy) as isize - pad[1] as isize;
                                        let xx = (ox * stride[2] + dx) as isize - pad[2] as isize;
                                        if z < 0 || y < 0 || xx < 0 || z >= d as isize || y >= h as isize || xx >= wd as isize {
                                            continue;
                                        }
                                        acc += xi(ni, ci, z as usize, y as usize, xx as usize) * wi(ki, ci, dz, dy, dx);
                                    }
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, k, od, oh, ow], out).unwrap()
}

/// Direct max pooling; returns values and the winning flat input indices
/// (first maximum in window scan order).
pub fn maxpool3d_oracle(x: &Tensor<f64>, win: Int3, stride: Int3) -> (Tensor<f64>, Vec<usize>) {
    let s = x.shape();
    let (n, c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let od = (d - win[0]) / stride[0] + 1;
    let oh = (h - win[1]) / stride[1] + 1;
    let ow = (w - win[2]) / stride[2] + 1;
    let (mut vals, mut idx) = (Vec::new(), Vec::new());
    for plane in 0..n * c {
        for oz in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (f64::NEG_INFINITY, usize::MAX);
                    for dz in 0..win[0] {
                        for dy in 0..win[1] {
                            for dx in 0..win[2] {
                                let flat = ((plane * d + oz * stride[0] + dz) * h + oy * stride[1] + dy) * w + ox * stride[2] + dx;
                                let v = x.data()[flat];
                                if v > best.0 || (v == best.0 && flat < best.1) {
                                    best = (v, flat);
                                }
                            }
                        }
                    }
                    vals.push(best.0);
                    idx.push(best.1);
                }
            }
        }
    }
    (Tensor::new(vec![n, c, od, oh, ow], vals).unwrap(), idx)
}

pub fn matmul_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (n, f, g) = (x.shape()[0], x.shape()[1], w.shape()[1]);
    let mut out = vec![0.0; n * g];
    for i in 0..n {
        for j in 0..g {
            let mut acc = b.data()[j];
            for k in 0..f {
                acc += x.data()[i * f + k] * w.data()[k * g + j];
            }
            out[i * g + j] = acc;
        }
    }
    Tensor::new(vec![n, g], out).unwrap()
}

pub fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
