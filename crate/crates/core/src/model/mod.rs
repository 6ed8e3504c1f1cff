//! The 3D squeeze-excitation phase classifier.
//!
//! Layer sequence:
//!
//! ```text
//! input [N,1,D,H,W]
//!   -> conv1 (same padding) -> ReLU -> maxpool1
//!   -> conv2 (same padding) -> ReLU -> squeeze-excitation rescale
//!   -> maxpool2 -> flatten -> fc1 -> ReLU -> fc2 -> logits [N,5]
//! ```
//!
//! The squeeze-excitation path computes per-channel gates
//! `sigmoid(expand(relu(reduce(global_avg_pool(features)))))` and multiplies
//! each channel of the conv2 feature maps by its gate.

mod checkpoint;
mod config;
mod preprocess;
mod saliency;

pub use checkpoint::{load, read_checkpoint, save, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use preprocess::{preprocess, resample_trilinear};
pub use saliency::saliency;

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::tensor::{softmax_rows, Scalar, Tape, Tensor, TensorError, Var};

/// Scan phase. Integer codes are stable: NC=0, A=1, V=2, D=3, O=4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PhaseLabel {
    NC = 0,
    A = 1,
    V = 2,
    D = 3,
    O = 4,
}

impl PhaseLabel {
    pub const ALL: [PhaseLabel; 5] = [Self::NC, Self::A, Self::V, Self::D, Self::O];
    /// The dynamic-CT series of interest.
    pub const SOI: [PhaseLabel; 4] = [Self::NC, Self::A, Self::V, Self::D];
    /// Phases covered by the coarse "contrast" label.
    pub const CONTRAST: [PhaseLabel; 3] = [Self::A, Self::V, Self::D];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::NC => "NC",
            Self::A => "A",
            Self::V => "V",
            Self::D => "D",
            Self::O => "O",
        }
    }

    pub fn is_soi(self) -> bool {
        self != Self::O
    }
}

impl fmt::Display for PhaseLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PhaseLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "NC" => Ok(Self::NC),
            "A" => Ok(Self::A),
            "V" => Ok(Self::V),
            "D" => Ok(Self::D),
            "O" => Ok(Self::O),
            other => Err(format!("unknown phase '{other}' (expected NC, A, V, D or O)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),
    #[error("class index {0} out of range 0..5")]
    InvalidClass(usize),
    #[error("volume axis {axis} has extent {extent}; at least 2 required")]
    DegenerateVolume { axis: usize, extent: usize },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Canonical parameter names, in storage order.
pub const PARAM_NAMES: [&str; 12] = [
    "conv1.w",
    "conv1.b",
    "conv2.w",
    "conv2.b",
    "se.reduce.w",
    "se.reduce.b",
    "se.expand.w",
    "se.expand.b",
    "fc1.w",
    "fc1.b",
    "fc2.w",
    "fc2.b",
];

pub(crate) mod p {
    pub const CONV1_W: usize = 0;
    pub const CONV1_B: usize = 1;
    pub const CONV2_W: usize = 2;
    pub const CONV2_B: usize = 3;
    pub const SE_REDUCE_W: usize = 4;
    pub const SE_REDUCE_B: usize = 5;
    pub const SE_EXPAND_W: usize = 6;
    pub const SE_EXPAND_B: usize = 7;
    pub const FC1_W: usize = 8;
    pub const FC1_B: usize = 9;
    pub const FC2_W: usize = 10;
    pub const FC2_B: usize = 11;
}

/// How the squeeze-excitation gates are obtained during a forward pass.
#[derive(Debug, Clone)]
pub enum GateMode<T> {
    /// Gates computed by the SE sub-network.
    Learned,
    /// Caller-supplied gates `[N, c2]`, bypassing the SE sub-network.
    Inject(Tensor<T>),
    /// No channel rescaling at all.
    Off,
}

/// Handles into a recorded forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Recorded {
    pub input: Var,
    /// Conv stage 1 activations before pooling, `[N, c1, D, H, W]`.
    pub early: Var,
    /// Conv stage 2 feature maps after SE rescaling, `[N, c2, D1, H1, W1]`.
    pub features: Var,
    pub gates: Option<Var>,
    pub logits: Var,
    pub params: [Var; 12],
}

/// Architecture plus parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub config: ModelConfig,
    pub params: Vec<Tensor<T>>,
}

impl<T: Scalar> Network<T> {
    pub fn new(config: ModelConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if params.len() != shapes.len() {
            return Err(ModelError::Config(format!("expected {} tensors, got {}", shapes.len(), params.len())));
        }
        for ((name, shape), t) in PARAM_NAMES.iter().zip(&shapes).zip(&params) {
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Config(format!("{name}: shape {:?} does not match config {:?}", t.shape(), shape)));
            }
        }
        Ok(Self { config, params })
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            params: self.params.iter().map(|t| t.cast()).collect(),
        }
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        PARAM_NAMES.iter().position(|n| *n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        PARAM_NAMES.iter().position(|n| *n == name).map(move |i| &mut self.params[i])
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<()> {
        let c = &self.config;
        let s = batch.shape();
        let expected = [c.in_channels, c.input_dims[0], c.input_dims[1], c.input_dims[2]];
        if s.len() != 5 || s[1..] != expected {
            return Err(ModelError::Tensor(TensorError::Argument {
                op: "forward",
                msg: format!("batch shape {s:?} does not match [N, {}, {}, {}, {}]", expected[0], expected[1], expected[2], expected[3]),
            }));
        }
        Ok(())
    }

    /// Record a forward pass of `batch [N, in_channels, D, H, W]` on `tape`.
    pub fn record(
        &self,
        tape: &mut Tape<T>,
        batch: Tensor<T>,
        params_require_grad: bool,
        input_requires_grad: bool,
        gates: GateMode<T>,
    ) -> Result<Recorded> {
        self.check_batch(&batch)?;
        let c = &self.config;
        let n = batch.shape()[0];
        let pv: Vec<Var> = self.params.iter().map(|t| tape.leaf(t.clone(), params_require_grad)).collect();
        let pv: [Var; 12] = pv.try_into().expect("twelve parameters");
        let input = tape.leaf(batch, input_requires_grad);

        let h = tape.conv3d(input, pv[p::CONV1_W], pv[p::CONV1_B], [1; 3], c.padding(0))?;
        let early = tape.relu(h)?;
        let h = tape.maxpool3d(early, c.pools[0], c.pools[0])?;
        let h = tape.conv3d(h, pv[p::CONV2_W], pv[p::CONV2_B], [1; 3], c.padding(1))?;
        let h = tape.relu(h)?;

        let (features, gate_var) = match gates {
            GateMode::Learned => {
                let s = tape.global_avg_pool(h)?;
                let s = tape.dense(s, pv[p::SE_REDUCE_W], pv[p::SE_REDUCE_B])?;
                let s = tape.relu(s)?;
                let s = tape.dense(s, pv[p::SE_EXPAND_W], pv[p::SE_EXPAND_B])?;
                let g = tape.sigmoid(s)?;
                (tape.channel_scale(h, g)?, Some(g))
            }
            GateMode::Inject(g) => {
                let g = tape.leaf(g, false);
                (tape.channel_scale(h, g)?, Some(g))
            }
            GateMode::Off => (h, None),
        };

        let h = tape.maxpool3d(features, c.pools[1], c.pools[1])?;
        let h = tape.reshape(h, &[n, c.flat_features()])?;
        let h = tape.dense(h, pv[p::FC1_W], pv[p::FC1_B])?;
        let h = tape.relu(h)?;
        let logits = tape.dense(h, pv[p::FC2_W], pv[p::FC2_B])?;
        Ok(Recorded {
            input,
            early,
            features,
            gates: gate_var,
            logits,
            params: pv,
        })
    }

    /// Logits `[N, 5]` for a batch.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_gated(batch, GateMode::Learned)
    }

    pub fn forward_gated(&self, batch: &Tensor<T>, gates: GateMode<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let r = self.record(&mut tape, batch.clone(), false, false, gates)?;
        let logits = tape.value(r.logits)?.clone();
        debug_assert!(logits.all_finite());
        Ok(logits)
    }
}

/// Seed, epoch and validation score stored alongside the weights.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: u32,
    pub val_metric: f64,
}

/// Trained (or freshly initialised) f32 model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub network: Network<f32>,
    pub meta: CheckpointMeta,
}

impl ModelCheckpoint {
    pub fn config(&self) -> &ModelConfig {
        &self.network.config
    }
}

/// He-uniform weights, zero biases; deterministic per seed.
pub fn build(config: &ModelConfig, seed: u64) -> Result<ModelCheckpoint> {
    config.validate()?;
    let mut r = rng::rng(seed);
    let params = config
        .param_shapes()
        .into_iter()
        .enumerate()
        .map(|(i, shape)| {
            if i % 2 == 1 {
                return Tensor::zeros(&shape);
            }
            let fan_in: usize = if shape.len() == 5 { shape[1..].iter().product() } else { shape[0] };
            let bound = (6.0 / fan_in as f64).sqrt();
            Tensor::from_fn(&shape, |_| ((2.0 * r.gen::<f64>() - 1.0) * bound) as f32)
        })
        .collect();
    Ok(ModelCheckpoint {
        network: Network::new(config.clone(), params)?,
        meta: CheckpointMeta {
            seed,
            ..CheckpointMeta::default()
        },
    })
}

/// Number of parameters and their size in bytes at f32.
pub fn param_count(config: &ModelConfig) -> (usize, usize) {
    let n: usize = config.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum();
    (n, 4 * n)
}

pub fn forward(ckpt: &ModelCheckpoint, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
    ckpt.network.forward(batch)
}

/// Softmax over five logits in f64, with the arg-max label (lowest code wins ties).
pub fn classify_logits(logits: &[f32]) -> (PhaseLabel, [f64; 5]) {
    let l = Tensor::<f64>::from_fn(&[1, 5], |i| logits[i] as f64);
    let p = softmax_rows(&l).expect("rank-2 logits");
    let mut probs = [0.0; 5];
    probs.copy_from_slice(p.data());
    let mut best = 0;
    for k in 1..5 {
        if logits[k] > logits[best] {
            best = k;
        }
    }
    (PhaseLabel::from_code(best).expect("code < 5"), probs)
}

/// Phase and class probabilities for one preprocessed volume `[C, D, H, W]`.
pub fn predict(ckpt: &ModelCheckpoint, volume: &Tensor<f32>) -> Result<(PhaseLabel, [f64; 5])> {
    let mut shape = vec![1];
    shape.extend_from_slice(volume.shape());
    let batch = volume.clone().reshape(&shape)?;
    let logits = forward(ckpt, &batch)?;
    Ok(classify_logits(logits.data()))
}
