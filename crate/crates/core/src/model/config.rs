use serde::{Deserialize, Serialize};

use super::{ModelError, Result};
use crate::tensor::Int3;

/// Architecture hyperparameters. Dims are ordered (depth, height, width).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_dims: Int3,
    pub in_channels: usize,
    pub conv_channels: [usize; 2],
    pub kernels: [Int3; 2],
    pub pools: [Int3; 2],
    pub se_reduction: usize,
    pub fc_hidden: usize,
    pub num_classes: usize,
    /// Intensity window applied before min-max scaling.
    pub intensity_window: [f32; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// CPU-sized default for 64x64x16 phantoms, downsampled to 32x32x8.
    pub fn desk() -> Self {
        Self {
            input_dims: [8, 32, 32],
            in_channels: 1,
            conv_channels: [8, 16],
            kernels: [[3; 3]; 2],
            pools: [[2; 3]; 2],
            se_reduction: 4,
            fc_hidden: 32,
            num_classes: 5,
            intensity_window: [0.0, 1.0],
        }
    }

    /// Full-size layout for 128x128x32 CT input with a soft-tissue window.
    pub fn paper_preset() -> Self {
        Self {
            input_dims: [32, 128, 128],
            conv_channels: [16, 32],
            fc_hidden: 16,
            intensity_window: [-200.0, 300.0],
            ..Self::desk()
        }
    }

    /// Small network for gradient checks: 8x8x4 input.
    pub fn toy() -> Self {
        Self {
            input_dims: [4, 8, 8],
            conv_channels: [2, 4],
            se_reduction: 2,
            fc_hidden: 4,
            ..Self::desk()
        }
    }

    pub fn padding(&self, stage: usize) -> Int3 {
        self.kernels[stage].map(|k| k / 2)
    }

    /// Spatial dims after pool stage 1 (also the conv2 grid).
    pub fn stage1_dims(&self) -> Int3 {
        let mut d = [0; 3];
        for ax in 0..3 {
            d[ax] = (self.input_dims[ax] - self.pools[0][ax]) / self.pools[0][ax] + 1;
        }
        d
    }

    pub fn stage2_dims(&self) -> Int3 {
        let s1 = self.stage1_dims();
        let mut d = [0; 3];
        for ax in 0..3 {
            d[ax] = (s1[ax] - self.pools[1][ax]) / self.pools[1][ax] + 1;
        }
        d
    }

    pub fn flat_features(&self) -> usize {
        self.conv_channels[1] * self.stage2_dims().iter().product::<usize>()
    }

    pub fn se_hidden(&self) -> usize {
        self.conv_channels[1] / self.se_reduction
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.num_classes != 5 {
            return bad(format!("num-classes must be 5 (NC, A, V, D, O), got {}", self.num_classes));
        }
        if self.in_channels == 0 || self.conv_channels.contains(&0) || self.fc_hidden == 0 {
            return bad("channel counts and fc-hidden must be >= 1".into());
        }
        if self.se_reduction == 0 {
            return bad("se-reduction must be >= 1".into());
        }
        if self.conv_channels[1] % self.se_reduction != 0 {
            return bad(format!(
                "conv channel count {} is not divisible by se-reduction {}",
                self.conv_channels[1], self.se_reduction
            ));
        }
        for (stage, k) in self.kernels.iter().enumerate() {
            if k.iter().any(|&v| v == 0 || v % 2 == 0) {
                return bad(format!("kernel {} must have odd extents, got {k:?}", stage + 1));
            }
        }
        if self.pools.iter().flatten().any(|&v| v == 0) {
            return bad("pool windows must be >= 1".into());
        }
        for ax in 0..3 {
            if self.input_dims[ax] < self.pools[0][ax] {
                return bad(format!("input dims {:?} do not survive pool stage 1", self.input_dims));
            }
            let s1 = (self.input_dims[ax] - self.pools[0][ax]) / self.pools[0][ax] + 1;
            if s1 < self.pools[1][ax] {
                return bad(format!("input dims {:?} do not survive pool stage 2", self.input_dims));
            }
        }
        if !(self.intensity_window[0] < self.intensity_window[1]) {
            return bad(format!("intensity window {:?} is empty", self.intensity_window));
        }
        Ok(())
    }

    /// Shapes of every parameter tensor, in [`super::PARAM_NAMES`] order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let [c1, c2] = self.conv_channels;
        let [k1, k2] = self.kernels;
        let r = self.se_hidden();
        vec![
            vec![c1, self.in_channels, k1[0], k1[1], k1[2]],
            vec![c1],
            vec![c2, c1, k2[0], k2[1], k2[2]],
            vec![c2],
            vec![c2, r],
            vec![r],
            vec![r, c2],
            vec![c2],
            vec![self.flat_features(), self.fc_hidden],
            vec![self.fc_hidden],
            vec![self.fc_hidden, self.num_classes],
            vec![self.num_classes],
        ]
    }
}
