//! Loading manifests and volumes into model-ready tensors.

use std::path::{Path, PathBuf};

use super::PipelineError;
use crate::exec;
use crate::io::read_rvol;
use crate::miner::{mine_manifest, LabeledScan, MiningOutput, RuleSet};
use crate::model::{preprocess, ModelConfig, PhaseLabel};
use crate::tensor::Tensor;

pub fn open_manifest(path: &Path, rules: &RuleSet) -> Result<MiningOutput, PipelineError> {
    let f = std::fs::File::open(path).map_err(|e| PipelineError::file(path, e))?;
    mine_manifest(std::io::BufReader::new(f), rules).map_err(|e| PipelineError::file(path, e))
}

/// Directory relative volume paths are resolved against.
pub fn volume_base(manifest: &Path, root: Option<&Path>) -> PathBuf {
    match root {
        Some(r) => r.to_path_buf(),
        None => manifest.parent().map(Path::to_path_buf).unwrap_or_default(),
    }
}

pub fn volume_path(base: &Path, scan: &LabeledScan) -> PathBuf {
    base.join(&scan.record.volume_path)
}

/// Read and preprocess one scan's volume to `[1, D, H, W]`.
pub fn load_input(base: &Path, scan: &LabeledScan, config: &ModelConfig) -> Result<Tensor<f32>, PipelineError> {
    let path = volume_path(base, scan);
    let vol = read_rvol(&path)?;
    preprocess(&vol, config).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))
}

/// Kept scans of a manifest with their preprocessed inputs.
#[derive(Debug, Clone)]
pub struct Split {
    pub scans: Vec<LabeledScan>,
    pub inputs: Vec<Tensor<f32>>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.scans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scans.is_empty()
    }

    /// Reference phases: the annotated truth where present, otherwise the
    /// mined label read as a prediction.
    pub fn reference(&self) -> Vec<PhaseLabel> {
        self.scans.iter().map(|s| s.record.true_phase.unwrap_or_else(|| s.mined.as_prediction())).collect()
    }
}

/// Mine, filter and preprocess a manifest. Any unreadable line or volume is
/// an error here, since training needs the whole set.
pub fn load_split(manifest: &Path, root: Option<&Path>, rules: &RuleSet, config: &ModelConfig) -> Result<Split, PipelineError> {
    let mined = open_manifest(manifest, rules)?;
    if let Some(e) = mined.errors.first() {
        return Err(PipelineError::Data(format!("{}: line {}: {}", manifest.display(), e.line, e.error)));
    }
    let base = volume_base(manifest, root);
    let inputs = exec::map(&mined.labeled, |s| load_input(&base, s, config));
    Ok(Split {
        inputs: inputs.into_iter().collect::<Result<_, _>>()?,
        scans: mined.labeled,
    })
}
