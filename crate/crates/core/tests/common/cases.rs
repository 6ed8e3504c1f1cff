//! Gradient-check cases shared by the proptest suite and the acceptance run.

use phase_curator::loss::{ace_loss_on_tape, PhaseTarget};
use phase_curator::model::{build, ModelConfig, Network, PhaseLabel};
use phase_curator::rng;
use phase_curator::tensor::{Tape, Var};
use rand::Rng as _;

use super::{grad_check, uniform, weighted_sum, GradReport};

/// Every differentiable tape operation, by the name [`op_check`] accepts.
pub const OPS: [&str; 11] = [
    "conv3d",
    "maxpool3d",
    "dense",
    "relu",
    "sigmoid",
    "global_avg_pool",
    "channel_scale",
    "logsumexp",
    "sub/mul/scale/reshape/mean",
    "ace loss",
    "conv-pool-dense",
];

/// Check one op on a random toy shape drawn from `seed`.
pub fn op_check(op: &str, seed: u64) -> GradReport {
    let mut r = rng::stream(&[seed]);
    match op {
        "conv3d" => {
            let (n, c, k) = (r.gen_range(1..=2), r.gen_range(1..=2), r.gen_range(1..=3));
            let kern = [0; 3].map(|_: usize| r.gen_range(1..=3usize));
            let stride = [0; 3].map(|_: usize| r.gen_range(1..=2usize));
            let pad = kern.map(|kk| r.gen_range(0..=kk / 2));
            let dims = kern.map(|kk| kk + r.gen_range(0..=2usize));
            let x = uniform(&[n, c, dims[0], dims[1], dims[2]], -1.0, 1.0, &mut r);
            let w = uniform(&[k, c, kern[0], kern[1], kern[2]], -1.0, 1.0, &mut r);
            let b = uniform(&[k], -1.0, 1.0, &mut r);
            grad_check(&[x, w, b], |t, v| {
                let y = t.conv3d(v[0], v[1], v[2], stride, pad).unwrap();
                weighted_sum(t, y, seed)
            })
        }
        "maxpool3d" => {
            let win = [0; 3].map(|_: usize| r.gen_range(1..=2usize));
            let stride = win.map(|w| r.gen_range(1..=w));
            let dims = win.map(|w| w + r.gen_range(0..=3usize));
            let x = uniform(&[r.gen_range(1..=2), r.gen_range(1..=2), dims[0], dims[1], dims[2]], -1.0, 1.0, &mut r);
            grad_check(&[x], |t, v| {
                let y = t.maxpool3d(v[0], win, stride).unwrap();
                weighted_sum(t, y, seed)
            })
        }
        "dense" => {
            let (n, f, g) = (r.gen_range(1..=3), r.gen_range(1..=6), r.gen_range(1..=5));
            let x = uniform(&[n, f], -1.0, 1.0, &mut r);
            let w = uniform(&[f, g], -1.0, 1.0, &mut r);
            let b = uniform(&[g], -1.0, 1.0, &mut r);
            grad_check(&[x, w, b], |t, v| {
                let y = t.dense(v[0], v[1], v[2]).unwrap();
                weighted_sum(t, y, seed)
            })
        }
        "relu" | "sigmoid" => {
            let x = uniform(&[r.gen_range(1..=3), r.gen_range(1..=7)], -2.0, 2.0, &mut r);
            let relu = op == "relu";
            grad_check(&[x], |t, v| {
                let y = if relu { t.relu(v[0]) } else { t.sigmoid(v[0]) }.unwrap();
                weighted_sum(t, y, seed)
            })
        }
        "global_avg_pool" | "channel_scale" => {
            let (n, c) = (r.gen_range(1..=2), r.gen_range(1..=3));
            let dims = [0; 3].map(|_: usize| r.gen_range(1..=3usize));
            let x = uniform(&[n, c, dims[0], dims[1], dims[2]], -1.0, 1.0, &mut r);
            if op == "global_avg_pool" {
                grad_check(&[x], |t, v| {
                    let y = t.global_avg_pool(v[0]).unwrap();
                    weighted_sum(t, y, seed)
                })
            } else {
                let g = uniform(&[n, c], 0.0, 1.0, &mut r);
                grad_check(&[x, g], |t, v| {
                    let y = t.channel_scale(v[0], v[1]).unwrap();
                    weighted_sum(t, y, seed)
                })
            }
        }
        "logsumexp" => {
            let mask = r.gen_range(1u8..32);
            let subset: Vec<usize> = (0..5).filter(|i| mask >> i & 1 == 1).collect();
            let x = uniform(&[r.gen_range(1..=3), 5], -3.0, 3.0, &mut r);
            grad_check(&[x], |t, v| {
                let y = t.logsumexp(v[0], &subset).unwrap();
                weighted_sum(t, y, seed)
            })
        }
        "sub/mul/scale/reshape/mean" => {
            let a = uniform(&[2, 3], -1.0, 1.0, &mut r);
            let b = uniform(&[2, 3], -1.0, 1.0, &mut r);
            grad_check(&[a, b], |t, v| {
                let d = t.sub(v[0], v[1]).unwrap();
                let m = t.mul(d, v[0]).unwrap();
                let s = t.scale(m, -1.75).unwrap();
                let s = t.reshape(s, &[3, 2]).unwrap();
                let y = weighted_sum(t, s, seed);
                let avg = t.mean(v[1]).unwrap();
                let out = t.sub(y, avg).unwrap();
                t.sum(out).unwrap()
            })
        }
        "ace loss" => {
            let n = r.gen_range(1..=6);
            let targets: Vec<PhaseTarget> = (0..n)
                .map(|_| match r.gen_range(0..6) {
                    5 => PhaseTarget::CoarseContrast,
                    k => PhaseTarget::Exact(PhaseLabel::from_code(k).unwrap()),
                })
                .collect();
            let logits = uniform(&[n, 5], -4.0, 4.0, &mut r);
            grad_check(&[logits], |t, v| ace_loss_on_tape(t, v[0], &targets).unwrap())
        }
        "conv-pool-dense" => {
            let x = uniform(&[1, 1, 4, 4, 4], -1.0, 1.0, &mut r);
            let w = uniform(&[2, 1, 3, 3, 3], -0.5, 0.5, &mut r);
            let b = uniform(&[2], -0.1, 0.1, &mut r);
            let fw = uniform(&[16, 3], -0.5, 0.5, &mut r);
            let fb = uniform(&[3], -0.1, 0.1, &mut r);
            grad_check(&[x, w, b, fw, fb], |t, v| {
                let h = t.conv3d(v[0], v[1], v[2], [1; 3], [1; 3]).unwrap();
                let h = t.relu(h).unwrap();
                let h = t.maxpool3d(h, [2; 3], [2; 3]).unwrap();
                let h = t.reshape(h, &[1, 16]).unwrap();
                let y = t.dense(h, v[3], v[4]).unwrap();
                weighted_sum(t, y, seed)
            })
        }
        other => panic!("unknown op {other}"),
    }
}

/// Full network forward plus ACE loss on the toy config, all parameters
/// and the input perturbed.
pub fn model_check(seed: u64) -> GradReport {
    let cfg = ModelConfig::toy();
    let mut net = build(&cfg, seed).unwrap().network.cast::<f64>();
    let mut r = rng::stream(&[seed, 1]);
    // non-zero biases so every bias gradient is exercised off the origin
    for (i, p) in net.params.iter_mut().enumerate() {
        if i % 2 == 1 {
            p.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-0.1..0.1));
        }
    }
    let [d, h, w] = cfg.input_dims;
    let x = uniform(&[2, 1, d, h, w], 0.0, 1.0, &mut r);
    let targets = [PhaseTarget::CoarseContrast, PhaseTarget::Exact(PhaseLabel::from_code(r.gen_range(0..5)).unwrap())];
    let mut inputs = net.params.clone();
    inputs.push(x);
    grad_check(&inputs, |t: &mut Tape<f64>, v| {
        let logits = record_with_leaves(&net, t, v);
        ace_loss_on_tape(t, logits, &targets).unwrap()
    })
}

/// Forward the network using existing tape leaves for its twelve parameters
/// followed by the input.
pub fn record_with_leaves(net: &Network<f64>, t: &mut Tape<f64>, v: &[Var]) -> Var {
    let c = &net.config;
    let (p, x) = (&v[..12], v[12]);
    let n = t.value(x).unwrap().shape()[0];
    let h = t.conv3d(x, p[0], p[1], [1; 3], c.padding(0)).unwrap();
    let h = t.relu(h).unwrap();
    let h = t.maxpool3d(h, c.pools[0], c.pools[0]).unwrap();
    let h = t.conv3d(h, p[2], p[3], [1; 3], c.padding(1)).unwrap();
    let h = t.relu(h).unwrap();
    let s = t.global_avg_pool(h).unwrap();
    let s = t.dense(s, p[4], p[5]).unwrap();
    let s = t.relu(s).unwrap();
    let s = t.dense(s, p[6], p[7]).unwrap();
    let g = t.sigmoid(s).unwrap();
    let h = t.channel_scale(h, g).unwrap();
    let h = t.maxpool3d(h, c.pools[1], c.pools[1]).unwrap();
    let h = t.reshape(h, &[n, c.flat_features()]).unwrap();
    let h = t.dense(h, p[8], p[9]).unwrap();
    let h = t.relu(h).unwrap();
    t.dense(h, p[10], p[11]).unwrap()
}
