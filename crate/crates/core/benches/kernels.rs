//! Sequential versus data-parallel execution of the hot paths.
//!
//! Each group runs the same work twice, once with `exec::force_sequential`
//! switched on. Built without the `parallel` feature, both variants take the
//! sequential path.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use phase_curator::eval::{randomization_test, Statistic};
use phase_curator::exec;
use phase_curator::loss::{ace_loss_on_tape, PhaseTarget};
use phase_curator::model::{build, GateMode, ModelConfig};
use phase_curator::phantom::{generate_sample, PhantomConfig};
use phase_curator::rng;
use phase_curator::tensor::{conv3d, Tape, Tensor};
use phase_curator::PhaseLabel;
use rand::Rng;

const MODES: [(&str, bool); 2] = [("sequential", true), ("parallel", false)];

fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut r = rng::rng(seed);
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

fn bench_conv(c: &mut Criterion) {
    let x = random(&[16, 1, 8, 32, 32], 1);
    let w = random(&[8, 1, 3, 3, 3], 2);
    let b = random(&[8], 3);
    let mut g = c.benchmark_group("conv3d 16x1x8x32x32 -> 8");
    for (name, seq) in MODES {
        exec::force_sequential(seq);
        g.bench_function(name, |bench| bench.iter(|| conv3d(black_box(&x), &w, &b, [1; 3], [1; 3]).unwrap()));
    }
    exec::force_sequential(false);
    g.finish();
}

fn bench_phantoms(c: &mut Criterion) {
    let cfg = PhantomConfig::default();
    let jobs: Vec<(PhaseLabel, u64)> = (0..8).map(|i| (PhaseLabel::ALL[i % 5], i as u64)).collect();
    let mut g = c.benchmark_group("render 8 phantoms 16x64x64");
    g.sample_size(20);
    for (name, seq) in MODES {
        exec::force_sequential(seq);
        g.bench_function(name, |bench| bench.iter(|| exec::map(&jobs, |&(p, i)| generate_sample(&cfg, p, i))));
    }
    exec::force_sequential(false);
    g.finish();
}

fn bench_training_step(c: &mut Criterion) {
    let cfg = ModelConfig::desk();
    let ckpt = build(&cfg, 0).unwrap();
    let [d, h, w] = cfg.input_dims;
    let batch: Vec<(Tensor<f32>, PhaseTarget)> = (0..16)
        .map(|i| {
            let t = if i % 5 == 4 { PhaseTarget::CoarseContrast } else { PhaseTarget::Exact(PhaseLabel::ALL[i % 5]) };
            (random(&[1, 1, d, h, w], 10 + i as u64), t)
        })
        .collect();
    let mut g = c.benchmark_group("per-sample gradients, batch of 16");
    g.sample_size(10);
    for (name, seq) in MODES {
        exec::force_sequential(seq);
        g.bench_function(name, |bench| {
            bench.iter(|| {
                exec::map(&batch, |(x, t)| {
                    let mut tape = Tape::new();
                    let rec = ckpt.network.record(&mut tape, x.clone(), true, false, GateMode::Learned).unwrap();
                    let loss = ace_loss_on_tape(&mut tape, rec.logits, &[*t]).unwrap();
                    tape.backward(loss).unwrap();
                    rec.params.iter().map(|&p| tape.take_grad(p).unwrap()).collect::<Vec<_>>()
                })
            })
        });
    }
    exec::force_sequential(false);
    g.finish();
}

fn bench_randomization(c: &mut Criterion) {
    let mut r = rng::rng(4);
    let truth: Vec<PhaseLabel> = (0..200).map(|_| PhaseLabel::ALL[r.gen_range(0..5)]).collect();
    let noisy = |flip: f64, r: &mut rng::Rng| -> Vec<PhaseLabel> {
        truth.iter().map(|&t| if r.gen::<f64>() < flip { PhaseLabel::ALL[r.gen_range(0..5)] } else { t }).collect()
    };
    let (a, b) = (noisy(0.1, &mut r), noisy(0.2, &mut r));
    let mut g = c.benchmark_group("randomization test, 200 scans");
    g.sample_size(10);
    for n_iter in [1_000usize, 10_000] {
        for (name, seq) in MODES {
            exec::force_sequential(seq);
            g.bench_with_input(BenchmarkId::new(name, n_iter), &n_iter, |bench, &n| {
                bench.iter(|| randomization_test(&a, &b, &truth, Statistic::MeanF1, n, 7).unwrap())
            });
        }
    }
    exec::force_sequential(false);
    g.finish();
}

criterion_group!(benches, bench_conv, bench_phantoms, bench_training_step, bench_randomization);
criterion_main!(benches);
