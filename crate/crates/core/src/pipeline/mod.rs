//! End-to-end orchestration: training, classification, harvesting,
//! evaluation and the command-line front end.

mod classify;
pub mod cli;
mod config;
mod data;
mod train;

pub use classify::{
    classify, curate, harvest_accuracy, text_candidates, Candidate, CuratedStudy, Harvested, Prediction, PredictionLine, ScanFailure,
    CURATED_SCHEMA, PREDICTIONS_SCHEMA,
};
pub use config::{EvalConfig, LossMode, Paths, PipelineConfig, TrainingConfig};
pub use data::{load_input, load_split, open_manifest, volume_base, Split};
pub use train::{predict_split, train, training_targets, EpochRecord, TrainOutcome, TRAIN_LOG_SCHEMA};

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::eval::{
    confusion, holm_bonferroni, prf1, randomization_test, studies_in_order, study_buckets, Comparison, EvalError, EvalReport, Statistic,
    StudyScan, SystemMetrics,
};
use crate::io::IoError;
use crate::loss::LossError;
use crate::model::{ModelError, PhaseLabel};
use crate::phantom::PhantomError;
use crate::rng;
use crate::tensor::TensorError;

pub const EVAL_SCHEMA: &str = "phase-curator/eval";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("non-finite training loss at learning rate {learning_rate}, epoch {epoch}, batch {batch}")]
    NonFinite { learning_rate: f64, epoch: u32, batch: usize },
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
}

impl PipelineError {
    pub(crate) fn file(path: &Path, source: std::io::Error) -> Self {
        Self::File {
            path: path.to_path_buf(),
            source,
        }
    }
}

fn system(name: &str, pred: &[PhaseLabel], truth: &[PhaseLabel], scans: &[Prediction], studies: &[String]) -> Result<SystemMetrics, EvalError> {
    let cm = confusion(pred, truth)?;
    let study_scans: Vec<StudyScan> = scans
        .iter()
        .zip(pred.iter().zip(truth))
        .map(|(s, (&p, &t))| StudyScan {
            study_uid: s.study_uid.clone(),
            series_uid: s.series_uid.clone(),
            truth: t,
            predicted: p,
        })
        .collect();
    Ok(SystemMetrics {
        name: name.to_string(),
        confusion: cm,
        scan: prf1(&cm),
        study: study_buckets(&study_scans, studies)?,
    })
}

/// Compare the classifier ("vision") against mined text labels ("text") on
/// predictions carrying reference phases. Significance covers each class F1
/// and the mean F1, Holm-corrected as one family.
pub fn evaluate(predictions: &[Prediction], cfg: &EvalConfig) -> Result<EvalReport, PipelineError> {
    let truth: Vec<PhaseLabel> = predictions
        .iter()
        .map(|p| p.truth.ok_or_else(|| PipelineError::Data(format!("line {}: scan {} has no reference phase", p.line, p.series_uid))))
        .collect::<Result<_, _>>()?;
    let vision: Vec<PhaseLabel> = predictions.iter().map(|p| p.predicted).collect();
    let text: Vec<PhaseLabel> = predictions.iter().map(|p| p.mined.as_prediction()).collect();
    let studies = studies_in_order(predictions.iter().map(|p| p.study_uid.as_str()));

    let systems = vec![
        system("vision", &vision, &truth, predictions, &studies)?,
        system("text", &text, &truth, predictions, &studies)?,
    ];
    let stats: Vec<Statistic> = PhaseLabel::ALL.iter().map(|&c| Statistic::ClassF1(c)).chain([Statistic::MeanF1]).collect();
    let mut raw = Vec::with_capacity(stats.len());
    for (k, &s) in stats.iter().enumerate() {
        raw.push(randomization_test(&vision, &text, &truth, s, cfg.n_iter, rng::derive_seed(&[cfg.seed, k as u64]))?);
    }
    let adjusted = holm_bonferroni(&raw, cfg.alpha)?;
    let delta = |s: Statistic| {
        let pick = |m: &SystemMetrics| match s {
            Statistic::MeanF1 => m.scan.macro_f1,
            Statistic::ClassF1(c) => m.scan.f1[c.code()],
        };
        pick(&systems[0]) - pick(&systems[1])
    };
    let significance = stats
        .iter()
        .zip(adjusted)
        .map(|(&s, result)| Comparison {
            statistic: s.name(),
            delta: delta(s),
            result,
        })
        .collect();
    Ok(EvalReport {
        scans: predictions.len(),
        studies: studies.len(),
        systems,
        alpha: cfg.alpha,
        n_iter: cfg.n_iter,
        significance,
    })
}
