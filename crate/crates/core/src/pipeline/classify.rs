//! Per-scan predictions and study harvesting.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::{load_input, volume_base};
use super::PipelineError;
use crate::exec;
use crate::miner::{LabeledScan, MinedLabel, MiningOutput};
use crate::model::{predict, ModelCheckpoint, PhaseLabel};

pub const PREDICTIONS_SCHEMA: &str = "phase-curator/predictions";
pub const CURATED_SCHEMA: &str = "phase-curator/curated";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub line: usize,
    pub study_uid: String,
    pub series_uid: String,
    pub patient_id: String,
    pub predicted: PhaseLabel,
    pub probabilities: [f64; 5],
    pub mined: MinedLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<PhaseLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanFailure {
    pub line: usize,
    pub series_uid: String,
    pub error: String,
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PredictionLine {
    Ok(Prediction),
    Failed(ScanFailure),
}

fn classify_scan(ckpt: &ModelCheckpoint, base: &Path, scan: &LabeledScan) -> PredictionLine {
    let result = load_input(base, scan, ckpt.config()).and_then(|x| Ok(predict(ckpt, &x)?));
    match result {
        Ok((predicted, probabilities)) => PredictionLine::Ok(Prediction {
            line: scan.line,
            study_uid: scan.record.meta.study_uid.clone(),
            series_uid: scan.record.meta.series_uid.clone(),
            patient_id: scan.record.meta.patient_id.clone(),
            predicted,
            probabilities,
            mined: scan.mined.clone(),
            truth: scan.record.true_phase,
        }),
        Err(e) => PredictionLine::Failed(ScanFailure {
            line: scan.line,
            series_uid: scan.record.meta.series_uid.clone(),
            error: e.to_string(),
        }),
    }
}

/// Classify every kept scan of a mined manifest, in manifest order. Scans
/// whose volume cannot be read become failure lines.
pub fn classify(ckpt: &ModelCheckpoint, mined: &MiningOutput, manifest: &Path, root: Option<&Path>) -> Vec<PredictionLine> {
    let base = volume_base(manifest, root);
    exec::map(&mined.labeled, |s| classify_scan(ckpt, &base, s))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Harvested {
    pub series_uid: String,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuratedStudy {
    pub study_uid: String,
    pub scans: BTreeMap<PhaseLabel, Harvested>,
    /// Whether each phase of interest was harvested.
    pub complete: BTreeMap<PhaseLabel, bool>,
}

/// Minimal view of a classified scan for harvesting.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate<'a> {
    pub study_uid: &'a str,
    pub series_uid: &'a str,
    pub predicted: PhaseLabel,
    pub probabilities: [f64; 5],
}

impl<'a> From<&'a Prediction> for Candidate<'a> {
    fn from(p: &'a Prediction) -> Self {
        Self {
            study_uid: &p.study_uid,
            series_uid: &p.series_uid,
            predicted: p.predicted,
            probabilities: p.probabilities,
        }
    }
}

/// Per study and phase of interest, keep the scan predicted as that phase
/// with the highest probability for it (first in input order on ties).
/// Scans predicted O are never harvested. Studies appear in first-seen order.
pub fn curate<'a>(candidates: impl IntoIterator<Item = Candidate<'a>>) -> Vec<CuratedStudy> {
    let mut order: Vec<&str> = Vec::new();
    let mut by_study: BTreeMap<&str, BTreeMap<PhaseLabel, Harvested>> = BTreeMap::new();
    for c in candidates {
        let slot = by_study.entry(c.study_uid).or_insert_with(|| {
            order.push(c.study_uid);
            BTreeMap::new()
        });
        if !c.predicted.is_soi() {
            continue;
        }
        let p = c.probabilities[c.predicted.code()];
        match slot.get(&c.predicted) {
            Some(h) if h.probability >= p => {}
            _ => {
                slot.insert(
                    c.predicted,
                    Harvested {
                        series_uid: c.series_uid.to_string(),
                        probability: p,
                    },
                );
            }
        }
    }
    order
        .into_iter()
        .map(|uid| {
            let scans = by_study.remove(uid).unwrap_or_default();
            CuratedStudy {
                study_uid: uid.to_string(),
                complete: PhaseLabel::SOI.iter().map(|&p| (p, scans.contains_key(&p))).collect(),
                scans,
            }
        })
        .collect()
}

/// Harvest from mined text labels alone: every scan mined as a phase of
/// interest is a candidate with probability one for that phase.
pub fn text_candidates(predictions: &[Prediction]) -> Vec<Candidate<'_>> {
    predictions
        .iter()
        .map(|p| {
            let predicted = p.mined.as_prediction();
            let mut probabilities = [0.0; 5];
            probabilities[predicted.code()] = 1.0;
            Candidate {
                study_uid: &p.study_uid,
                series_uid: &p.series_uid,
                predicted,
                probabilities,
            }
        })
        .collect()
}

/// Fraction of studies harvested without error: every phase of interest
/// truly present was harvested, with a scan of that true phase, and nothing
/// was harvested for an absent phase. Needs `truth` on every prediction.
pub fn harvest_accuracy(curated: &[CuratedStudy], predictions: &[Prediction]) -> Result<f64, PipelineError> {
    let mut truth: BTreeMap<&str, PhaseLabel> = BTreeMap::new();
    let mut present: BTreeMap<&str, [bool; 4]> = BTreeMap::new();
    for p in predictions {
        let t = p.truth.ok_or_else(|| PipelineError::Data(format!("scan {} has no reference phase", p.series_uid)))?;
        truth.insert(&p.series_uid, t);
        if t.is_soi() {
            present.entry(&p.study_uid).or_default()[t.code()] = true;
        }
    }
    if curated.is_empty() {
        return Ok(0.0);
    }
    let ok = curated
        .iter()
        .filter(|s| {
            let have = present.get(s.study_uid.as_str()).copied().unwrap_or_default();
            PhaseLabel::SOI.iter().all(|&ph| match s.scans.get(&ph) {
                Some(h) => truth.get(h.series_uid.as_str()) == Some(&ph),
                None => !have[ph.code()],
            })
        })
        .count();
    Ok(ok as f64 / curated.len() as f64)
}
