use super::{GateMode, ModelCheckpoint, ModelError, Result};
use crate::tensor::{Tape, Tensor};

/// Gradient-weighted activation map for `class`, shaped like the model input
/// grid `[D, H, W]`.
///
/// Computed over the conv1 activations `A_k` (after ReLU, before pooling),
/// which live on the input grid itself:
///
/// ```text
/// w_k = sum(dlogit_class/dA_k * A_k) / sum(A_k)      (w_k = 0 when sum(A_k) = 0)
/// map = relu(sum_k w_k * A_k)
/// ```
///
/// The conv2 maps sit on a grid twice as coarse per axis; after upsampling
/// their peak routinely lands a voxel off, outside structures only a few
/// voxels across.
pub fn saliency(ckpt: &ModelCheckpoint, volume: &Tensor<f32>, class: usize) -> Result<Tensor<f32>> {
    if class >= 5 {
        return Err(ModelError::InvalidClass(class));
    }
    let net = &ckpt.network;
    let cfg = &net.config;
    let mut shape = vec![1];
    shape.extend_from_slice(volume.shape());
    let batch = volume.clone().reshape(&shape)?;

    let mut tape = Tape::new();
    let rec = net.record(&mut tape, batch, false, true, GateMode::Learned)?;
    let mut seed = Tensor::zeros(&[1, 5]);
    seed.data_mut()[class] = 1.0;
    tape.backward_seeded(rec.logits, seed)?;

    let feats = tape.value(rec.early)?;
    let grads = tape.grad(rec.early)?.cloned().unwrap_or_else(|| Tensor::zeros(feats.shape()));
    let grid = cfg.input_dims;
    let plane: usize = grid.iter().product();
    let mut map = vec![0f64; plane];
    for (a, g) in feats.data().chunks(plane).zip(grads.data().chunks(plane)) {
        let mass: f64 = a.iter().map(|&v| v as f64).sum();
        if mass == 0.0 {
            continue;
        }
        let weight = a.iter().zip(g).map(|(&a, &g)| a as f64 * g as f64).sum::<f64>() / mass;
        for (m, &v) in map.iter_mut().zip(a) {
            *m += weight * v as f64;
        }
    }
    let map: Vec<f32> = map.into_iter().map(|v| v.max(0.0) as f32).collect();
    Ok(Tensor::new(grid.to_vec(), map)?)
}
