//! Forward and backward kernels on plain tensors.
//!
//! The tape wraps these; they are public so tests can compare them against
//! independent loop oracles without going through autodiff.

use super::{dim_err, Int3, Result, Scalar, Tensor, TensorError};
use crate::exec;

const AXES: [&str; 3] = ["depth", "height", "width"];

fn spatial5(t: &Tensor<impl Scalar>, op: &'static str) -> Result<(usize, usize, Int3)> {
    t.expect_rank(op, 5)?;
    let s = t.shape();
    Ok((s[0], s[1], [s[2], s[3], s[4]]))
}

/// Output extents of a convolution or pooling window sweep.
pub fn window_output_dims(op: &'static str, input: Int3, kernel: Int3, stride: Int3, pad: Int3) -> Result<Int3> {
    let mut out = [0; 3];
    for ax in 0..3 {
        if stride[ax] == 0 {
            return Err(TensorError::Argument {
                op,
                msg: format!("stride along {} must be >= 1", AXES[ax]),
            });
        }
        if kernel[ax] == 0 {
            return Err(TensorError::Argument {
                op,
                msg: format!("kernel along {} must be >= 1", AXES[ax]),
            });
        }
        let padded = input[ax] + 2 * pad[ax];
        if kernel[ax] > padded {
            return Err(dim_err(op, AXES[ax], kernel[ax], padded));
        }
        out[ax] = (padded - kernel[ax]) / stride[ax] + 1;
    }
    Ok(out)
}

/// Output indices `o` in `[lo, hi)` whose tap `o*s + kk - p` lands inside `0..in_len`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, s: usize, p: usize, kk: usize) -> (usize, usize) {
    let lo = if p > kk { (p - kk).div_ceil(s) } else { 0 };
    let top = in_len as isize - 1 + p as isize - kk as isize;
    if top < 0 {
        return (0, 0);
    }
    let hi = out_len.min(top as usize / s + 1);
    (lo.min(hi), hi)
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    k: usize,
    inp: Int3,
    ker: Int3,
    stride: Int3,
    pad: Int3,
    out: Int3,
}

impl ConvGeom {
    fn new<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, stride: Int3, pad: Int3) -> Result<Self> {
        let (n, c, inp) = spatial5(input, "conv3d")?;
        weight.expect_rank("conv3d", 5)?;
        let ws = weight.shape();
        if ws[1] != c {
            return Err(dim_err("conv3d", "channels", ws[1], c));
        }
        let ker = [ws[2], ws[3], ws[4]];
        let out = window_output_dims("conv3d", inp, ker, stride, pad)?;
        Ok(Self {
            n,
            c,
            k: ws[0],
            inp,
            ker,
            stride,
            pad,
            out,
        })
    }

    fn in_plane(&self) -> usize {
        self.inp.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.out.iter().product()
    }

    fn ker_vol(&self) -> usize {
        self.ker.iter().product()
    }

    /// Visit every (output row, input row, width range, width tap) touched by
    /// kernel offset (a, b, e). `f(out_row_start, in_row_start, lo, hi, e_shift)`.
    #[inline]
    fn for_each_row(&self, a: usize, b: usize, e: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (od_lo, od_hi) = valid_range(self.out[0], self.inp[0], self.stride[0], self.pad[0], a);
        let (oh_lo, oh_hi) = valid_range(self.out[1], self.inp[1], self.stride[1], self.pad[1], b);
        let (ow_lo, ow_hi) = valid_range(self.out[2], self.inp[2], self.stride[2], self.pad[2], e);
        if ow_lo >= ow_hi {
            return;
        }
        for od in od_lo..od_hi {
            let id = od * self.stride[0] + a - self.pad[0];
            for oh in oh_lo..oh_hi {
                let ih = oh * self.stride[1] + b - self.pad[1];
                f(
                    (od * self.out[1] + oh) * self.out[2],
                    (id * self.inp[1] + ih) * self.inp[2],
                    ow_lo,
                    ow_hi,
                );
            }
        }
    }
}

/// 3D cross-correlation. `input [N,C,D,H,W]`, `weight [K,C,kd,kh,kw]`, `bias [K]`.
pub fn conv3d<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>, stride: Int3, pad: Int3) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input, weight, stride, pad)?;
    bias.expect_rank("conv3d", 1)?;
    if bias.len() != g.k {
        return Err(dim_err("conv3d", "bias", g.k, bias.len()));
    }
    let (in_plane, out_plane, kv) = (g.in_plane(), g.out_plane(), g.ker_vol());
    let (x, w, bv) = (input.data(), weight.data(), bias.data());
    let mut out = vec![T::zero(); g.n * g.k * out_plane];
    let (sw, pw) = (g.stride[2], g.pad[2]);
    exec::for_each_chunk_mut(&mut out, out_plane, |idx, plane| {
        let (n, k) = (idx / g.k, idx % g.k);
        plane.iter_mut().for_each(|v| *v = bv[k]);
        for c in 0..g.c {
            let xin = &x[(n * g.c + c) * in_plane..][..in_plane];
            let wk = &w[(k * g.c + c) * kv..][..kv];
            for a in 0..g.ker[0] {
                for b in 0..g.ker[1] {
                    for e in 0..g.ker[2] {
                        let wv = wk[(a * g.ker[1] + b) * g.ker[2] + e];
                        g.for_each_row(a, b, e, |orow, irow, lo, hi| {
                            let o = &mut plane[orow..orow + g.out[2]];
                            let i = &xin[irow..irow + g.inp[2]];
                            if sw == 1 {
                                let i = &i[lo + e - pw..hi + e - pw];
                                o[lo..hi].iter_mut().zip(i).for_each(|(o, &i)| *o += wv * i);
                            } else {
                                for ow in lo..hi {
                                    o[ow] += wv * i[ow * sw + e - pw];
                                }
                            }
                        });
                    }
                }
            }
        }
    });
    Ok(Tensor::from_parts(vec![g.n, g.k, g.out[0], g.out[1], g.out[2]], out))
}

/// Dot product with four independent accumulators so the loop vectorises.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail = ac.remainder().iter().zip(bc.remainder()).fold(T::zero(), |s, (&x, &y)| s + x * y);
    for (x, y) in ac.zip(bc) {
        for j in 0..4 {
            acc[j] += x[j] * y[j];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Gradients of [`conv3d`] with respect to input, weight and bias.
/// The input gradient is skipped (returned as `None`) unless `need_input`.
pub fn conv3d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: Int3,
    pad: Int3,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let g = ConvGeom::new(input, weight, stride, pad)?;
    let expected = [g.n, g.k, g.out[0], g.out[1], g.out[2]];
    if grad_out.shape() != expected {
        return Err(TensorError::Argument {
            op: "conv3d_backward",
            msg: format!("grad shape {:?} != output shape {:?}", grad_out.shape(), expected),
        });
    }
    let (in_plane, out_plane, kv) = (g.in_plane(), g.out_plane(), g.ker_vol());
    let (x, w, go) = (input.data(), weight.data(), grad_out.data());
    let (sw, pw) = (g.stride[2], g.pad[2]);

    let mut gin = vec![T::zero(); if need_input { input.len() } else { 0 }];
    exec::for_each_chunk_mut(&mut gin, in_plane, |idx, plane| {
        let (n, c) = (idx / g.c, idx % g.c);
        for k in 0..g.k {
            let gplane = &go[(n * g.k + k) * out_plane..][..out_plane];
            let wk = &w[(k * g.c + c) * kv..][..kv];
            for a in 0..g.ker[0] {
                for b in 0..g.ker[1] {
                    for e in 0..g.ker[2] {
                        let wv = wk[(a * g.ker[1] + b) * g.ker[2] + e];
                        g.for_each_row(a, b, e, |orow, irow, lo, hi| {
                            let o = &gplane[orow..orow + g.out[2]];
                            let i = &mut plane[irow..irow + g.inp[2]];
                            if sw == 1 {
                                let i = &mut i[lo + e - pw..hi + e - pw];
                                i.iter_mut().zip(&o[lo..hi]).for_each(|(i, &o)| *i += wv * o);
                            } else {
                                for ow in lo..hi {
                                    i[ow * sw + e - pw] += wv * o[ow];
                                }
                            }
                        });
                    }
                }
            }
        }
    });

    let mut gw = vec![T::zero(); weight.len()];
    exec::for_each_chunk_mut(&mut gw, g.c * kv, |k, wslab| {
        for c in 0..g.c {
            for a in 0..g.ker[0] {
                for b in 0..g.ker[1] {
                    for e in 0..g.ker[2] {
                        let mut acc = T::zero();
                        for n in 0..g.n {
                            let gplane = &go[(n * g.k + k) * out_plane..][..out_plane];
                            let xin = &x[(n * g.c + c) * in_plane..][..in_plane];
                            g.for_each_row(a, b, e, |orow, irow, lo, hi| {
                                let o = &gplane[orow..orow + g.out[2]];
                                let i = &xin[irow..irow + g.inp[2]];
                                if sw == 1 {
                                    acc += dot(&o[lo..hi], &i[lo + e - pw..hi + e - pw]);
                                } else {
                                    for ow in lo..hi {
                                        acc += o[ow] * i[ow * sw + e - pw];
                                    }
                                }
                            });
                        }
                        wslab[(c * g.ker[0] + a) * g.ker[1] * g.ker[2] + b * g.ker[2] + e] = acc;
                    }
                }
            }
        }
    });

    let mut gb = vec![T::zero(); g.k];
    for n in 0..g.n {
        for (k, slot) in gb.iter_mut().enumerate() {
            *slot += go[(n * g.k + k) * out_plane..][..out_plane].iter().copied().sum::<T>();
        }
    }

    Ok((
        need_input.then(|| Tensor::from_parts(input.shape().to_vec(), gin)),
        Tensor::from_parts(weight.shape().to_vec(), gw),
        Tensor::from_parts(vec![g.k], gb),
    ))
}

/// Max pooling without padding. Returns the pooled tensor and, per output
/// element, the linear input index that won (lowest index on ties).
pub fn maxpool3d<T: Scalar>(input: &Tensor<T>, window: Int3, stride: Int3) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, inp) = spatial5(input, "maxpool3d")?;
    for ax in 0..3 {
        if window[ax] > inp[ax] {
            return Err(dim_err("maxpool3d", AXES[ax], window[ax], inp[ax]));
        }
    }
    let out = window_output_dims("maxpool3d", inp, window, stride, [0; 3])?;
    let (in_plane, out_plane) = (inp.iter().product::<usize>(), out.iter().product::<usize>());
    let x = input.data();
    let mut values = vec![T::zero(); n * c * out_plane];
    let mut argmax = vec![0usize; n * c * out_plane];
    for p in 0..n * c {
        let base = p * in_plane;
        for od in 0..out[0] {
            for oh in 0..out[1] {
                for ow in 0..out[2] {
                    let mut best = usize::MAX;
                    let mut best_v = T::neg_infinity();
                    for a in 0..window[0] {
                        for b in 0..window[1] {
                            let row = base + ((od * stride[0] + a) * inp[1] + oh * stride[1] + b) * inp[2] + ow * stride[2];
                            for e in 0..window[2] {
                                let v = x[row + e];
                                if best == usize::MAX || v > best_v {
                                    best_v = v;
                                    best = row + e;
                                }
                            }
                        }
                    }
                    let o = p * out_plane + (od * out[1] + oh) * out[2] + ow;
                    values[o] = best_v;
                    argmax[o] = best;
                }
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, out[0], out[1], out[2]], values), argmax))
}

/// Scatter pooled gradients back to the winning input positions.
pub fn maxpool3d_backward<T: Scalar>(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = Tensor::zeros(input_shape);
    let gd = g.data_mut();
    for (&i, &v) in argmax.iter().zip(grad_out.data()) {
        gd[i] += v;
    }
    g
}

fn dense_dims<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>) -> Result<(usize, usize, usize)> {
    input.expect_rank("dense", 2)?;
    weight.expect_rank("dense", 2)?;
    let (n, f) = (input.shape()[0], input.shape()[1]);
    if weight.shape()[0] != f {
        return Err(dim_err("dense", "features", weight.shape()[0], f));
    }
    Ok((n, f, weight.shape()[1]))
}

/// Affine map `input [N,F] · weight [F,G] + bias [G]`.
pub fn dense<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, f, g) = dense_dims(input, weight)?;
    bias.expect_rank("dense", 1)?;
    if bias.len() != g {
        return Err(dim_err("dense", "bias", g, bias.len()));
    }
    let (x, w) = (input.data(), weight.data());
    let mut out = Vec::with_capacity(n * g);
    for r in 0..n {
        let mut row = bias.data().to_vec();
        for (fi, &xv) in x[r * f..(r + 1) * f].iter().enumerate() {
            for (o, &wv) in row.iter_mut().zip(&w[fi * g..(fi + 1) * g]) {
                *o += xv * wv;
            }
        }
        out.extend(row);
    }
    Ok(Tensor::from_parts(vec![n, g], out))
}

pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, f, g) = dense_dims(input, weight)?;
    let (x, w, go) = (input.data(), weight.data(), grad_out.data());
    let mut gx = vec![T::zero(); n * f];
    let mut gw = vec![T::zero(); f * g];
    let mut gb = vec![T::zero(); g];
    for r in 0..n {
        let grow = &go[r * g..(r + 1) * g];
        for (b, &v) in gb.iter_mut().zip(grow) {
            *b += v;
        }
        for fi in 0..f {
            let xv = x[r * f + fi];
            let wrow = &w[fi * g..(fi + 1) * g];
            let mut acc = T::zero();
            for ((gwv, &wv), &gv) in gw[fi * g..(fi + 1) * g].iter_mut().zip(wrow).zip(grow) {
                acc += wv * gv;
                *gwv += xv * gv;
            }
            gx[r * f + fi] = acc;
        }
    }
    Ok((
        Tensor::from_parts(vec![n, f], gx),
        Tensor::from_parts(vec![f, g], gw),
        Tensor::from_parts(vec![g], gb),
    ))
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn sigmoid<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| {
        if v >= T::zero() {
            T::one() / (T::one() + (-v).exp())
        } else {
            let e = v.exp();
            e / (T::one() + e)
        }
    })
}

fn nc_rest<T: Scalar>(input: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    if input.rank() < 3 {
        return Err(TensorError::Rank {
            op,
            expected: 5,
            shape: input.shape().to_vec(),
        });
    }
    let s = input.shape();
    Ok((s[0], s[1], s[2..].iter().product()))
}

/// Mean over every axis after the first two: `[N,C,...] -> [N,C]`.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, rest) = nc_rest(input, "global_avg_pool")?;
    let scale = T::one() / T::of(rest as f64);
    let data = input.data().chunks(rest).map(|p| p.iter().copied().sum::<T>() * scale).collect();
    Ok(Tensor::from_parts(vec![n, c], data))
}

pub fn global_avg_pool_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let rest: usize = input_shape[2..].iter().product();
    let scale = T::one() / T::of(rest as f64);
    let mut data = Vec::with_capacity(rest * grad_out.len());
    for &g in grad_out.data() {
        data.extend(std::iter::repeat(g * scale).take(rest));
    }
    Tensor::from_parts(input_shape.to_vec(), data)
}

fn check_gates<T: Scalar>(input: &Tensor<T>, gates: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n, c, rest) = nc_rest(input, "channel_scale")?;
    gates.expect_rank("channel_scale", 2)?;
    if gates.shape()[0] != n {
        return Err(dim_err("channel_scale", "batch", n, gates.shape()[0]));
    }
    if gates.shape()[1] != c {
        return Err(dim_err("channel_scale", "channels", c, gates.shape()[1]));
    }
    Ok((n, c, rest))
}

/// Multiply every channel plane of `input [N,C,...]` by `gates [N,C]`.
pub fn channel_scale<T: Scalar>(input: &Tensor<T>, gates: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, rest) = check_gates(input, gates)?;
    let mut out = input.clone();
    for (plane, &g) in out.data_mut().chunks_mut(rest).zip(gates.data()) {
        plane.iter_mut().for_each(|v| *v *= g);
    }
    Ok(out)
}

pub fn channel_scale_backward<T: Scalar>(
    input: &Tensor<T>,
    gates: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (_, _, rest) = check_gates(input, gates)?;
    let gx = channel_scale(grad_out, gates)?;
    let gg = input
        .data()
        .chunks(rest)
        .zip(grad_out.data().chunks(rest))
        .map(|(x, g)| x.iter().zip(g).map(|(&a, &b)| a * b).sum::<T>())
        .collect();
    Ok((gx, Tensor::from_parts(gates.shape().to_vec(), gg)))
}

fn check_subset(k: usize, subset: &[usize]) -> Result<()> {
    if subset.is_empty() {
        return Err(TensorError::Argument {
            op: "logsumexp",
            msg: "subset must be non-empty".into(),
        });
    }
    for (i, &s) in subset.iter().enumerate() {
        if s >= k {
            return Err(TensorError::Argument {
                op: "logsumexp",
                msg: format!("subset index {s} out of range for {k} logits"),
            });
        }
        if subset[..i].contains(&s) {
            return Err(TensorError::Argument {
                op: "logsumexp",
                msg: format!("subset index {s} repeated"),
            });
        }
    }
    Ok(())
}

/// Max-shifted log-sum-exp of one row over the given indices.
pub fn logsumexp_slice<T: Scalar>(row: &[T], subset: &[usize]) -> T {
    let m = subset.iter().map(|&i| row[i]).fold(T::neg_infinity(), T::max);
    m + subset.iter().map(|&i| (row[i] - m).exp()).sum::<T>().ln()
}

/// Row-wise log-sum-exp over `subset`: `[N,K] -> [N]`.
pub fn logsumexp<T: Scalar>(logits: &Tensor<T>, subset: &[usize]) -> Result<Tensor<T>> {
    logits.expect_rank("logsumexp", 2)?;
    let k = logits.shape()[1];
    check_subset(k, subset)?;
    let data = logits.data().chunks(k).map(|r| logsumexp_slice(r, subset)).collect();
    Ok(Tensor::from_parts(vec![logits.shape()[0]], data))
}

/// Gradient of [`logsumexp`]: softmax restricted to the subset, scaled per row.
pub fn logsumexp_backward<T: Scalar>(logits: &Tensor<T>, subset: &[usize], out: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let k = logits.shape()[1];
    let mut g = Tensor::zeros(logits.shape());
    for (r, (row, grow)) in logits.data().chunks(k).zip(g.data_mut().chunks_mut(k)).enumerate() {
        let (lse, go) = (out.data()[r], grad_out.data()[r]);
        for &i in subset {
            grow[i] = go * (row[i] - lse).exp();
        }
    }
    g
}

/// Row-wise softmax of `[N,K]`.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    logits.expect_rank("softmax", 2)?;
    let k = logits.shape()[1];
    let all: Vec<usize> = (0..k).collect();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let lse = logsumexp_slice(row, &all);
        row.iter_mut().for_each(|v| *v = (*v - lse).exp());
    }
    Ok(out)
}
