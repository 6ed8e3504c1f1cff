use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::model::ModelConfig;
use crate::phantom::{DatasetSpec, PhantomConfig};

/// How coarse "contrast" training labels are used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Drop scans whose only label is the coarse one.
    DiscardCoarse,
    /// Keep them, scoring the summed A+V+D probability.
    Ace,
}

impl std::str::FromStr for LossMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "discard-coarse" => Ok(Self::DiscardCoarse),
            "ace" => Ok(Self::Ace),
            _ => Err(format!("unknown loss mode '{s}' (expected discard-coarse or ace)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub learning_rates: Vec<f64>,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rates: vec![3e-3, 1e-3],
            batch_size: 16,
            max_epochs: 12,
            patience: 4,
            seed: 0,
            loss_mode: LossMode::Ace,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct EvalConfig {
    pub alpha: f64,
    pub n_iter: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            n_iter: 10_000,
            seed: 0,
        }
    }
}

/// Optional file locations; command-line flags take precedence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct Paths {
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    /// Base for relative volume paths; defaults to each manifest's directory.
    pub volume_root: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub rules: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub evaluation: EvalConfig,
    pub phantom: PhantomConfig,
    pub dataset: DatasetSpec,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    /// Apply a seed override to every seeded component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.training.seed = seed;
        self.phantom.seed = seed;
        self.evaluation.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let t = &self.training;
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if t.learning_rates.is_empty() {
            return bad("training.learning-rates must not be empty");
        }
        if t.learning_rates.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return bad("learning rates must be positive and finite");
        }
        if t.batch_size == 0 {
            return bad("training.batch-size must be >= 1");
        }
        if t.patience == 0 {
            return bad("training.patience must be >= 1");
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || !(t.epsilon > 0.0) {
            return bad("adam betas must lie in [0, 1) and epsilon must be positive");
        }
        if !(self.evaluation.alpha > 0.0 && self.evaluation.alpha < 1.0) {
            return bad("evaluation.alpha must lie in (0, 1)");
        }
        if self.evaluation.n_iter < 1000 {
            return bad("evaluation.n-iter must be >= 1000");
        }
        self.model.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.phantom.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }
}
