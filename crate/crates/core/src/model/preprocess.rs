use super::{ModelConfig, ModelError, Result};
use crate::io::Volume;
use crate::tensor::{Int3, Tensor};

/// Per-axis source taps for half-pixel-centred linear interpolation.
fn axis_taps(from: usize, to: usize) -> Vec<(usize, usize, f32)> {
    let scale = from as f64 / to as f64;
    (0..to)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (from - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(from - 1);
            (lo, hi, (src - lo as f64) as f32)
        })
        .collect()
}

/// Trilinear resampling of a row-major `[D,H,W]` grid, half-pixel centres.
pub fn resample_trilinear(data: &[f32], from: Int3, to: Int3) -> Vec<f32> {
    if from == to {
        return data.to_vec();
    }
    let [td, th, tw] = [axis_taps(from[0], to[0]), axis_taps(from[1], to[1]), axis_taps(from[2], to[2])];
    let at = |d: usize, h: usize, w: usize| data[(d * from[1] + h) * from[2] + w];
    let mut out = Vec::with_capacity(to.iter().product());
    for &(d0, d1, fd) in &td {
        for &(h0, h1, fh) in &th {
            for &(w0, w1, fw) in &tw {
                let lerp = |a: f32, b: f32, t: f32| a + (b - a) * t;
                let c00 = lerp(at(d0, h0, w0), at(d0, h0, w1), fw);
                let c01 = lerp(at(d0, h1, w0), at(d0, h1, w1), fw);
                let c10 = lerp(at(d1, h0, w0), at(d1, h0, w1), fw);
                let c11 = lerp(at(d1, h1, w0), at(d1, h1, w1), fw);
                out.push(lerp(lerp(c00, c01, fh), lerp(c10, c11, fh), fd));
            }
        }
    }
    out
}

/// Resample to the model's input grid, clip to the intensity window and
/// min-max scale to [0, 1]. A volume with no intensity range maps to zeros.
/// Returns `[1, D, H, W]`.
pub fn preprocess(volume: &Volume, config: &ModelConfig) -> Result<Tensor<f32>> {
    for (axis, &extent) in volume.dims().iter().enumerate() {
        if extent < 2 {
            return Err(ModelError::DegenerateVolume { axis, extent });
        }
    }
    let [lo, hi] = config.intensity_window;
    let mut v = resample_trilinear(volume.data.data(), volume.dims(), config.input_dims);
    v.iter_mut().for_each(|x| *x = x.clamp(lo, hi));
    let (min, max) = v.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let range = max - min;
    if range > 0.0 {
        v.iter_mut().for_each(|x| *x = (*x - min) / range);
    } else {
        v.iter_mut().for_each(|x| *x = 0.0);
    }
    let [d, h, w] = config.input_dims;
    Ok(Tensor::new(vec![1, d, h, w], v)?)
}
