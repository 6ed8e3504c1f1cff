//! Rule-based labelling of DICOM descriptions and the scan admission filter.
//!
//! Matching is case-insensitive substring search over the field each rule
//! names. When several rules match, the longest pattern wins; equal lengths
//! fall back to class priority (Other, NC, A, V, D, Contrast) and then to
//! rule order. A scan nothing matches is labelled Other.

mod rules;

pub use rules::{default_rules, MinedClass, Rule, RuleError, RuleField, RuleSet, RULE_FILE_HEADER, RULE_FILE_VERSION};

use std::collections::BTreeMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::exec;
use crate::io::read_jsonl;
use crate::loss::PhaseTarget;
use crate::model::PhaseLabel;

/// Pattern recorded when no rule matched.
pub const FALLBACK_PATTERN: &str = "<fallback>";

/// DICOM-derived metadata for one scan (series).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanMeta {
    pub study_uid: String,
    pub series_uid: String,
    pub patient_id: String,
    #[serde(default)]
    pub study_description: String,
    #[serde(default)]
    pub series_description: String,
    #[serde(default)]
    pub protocol: String,
    pub slice_count: u32,
    pub slice_spacing_mm: f64,
    pub axial: bool,
    #[serde(default)]
    pub post_procedure: bool,
}

impl ScanMeta {
    pub fn validate(&self) -> Result<(), String> {
        if self.study_uid.is_empty() || self.series_uid.is_empty() {
            return Err("study_uid and series_uid must be non-empty".into());
        }
        if !(self.slice_spacing_mm > 0.0) || !self.slice_spacing_mm.is_finite() {
            return Err(format!("slice_spacing_mm must be > 0, got {}", self.slice_spacing_mm));
        }
        Ok(())
    }

    pub fn field(&self, f: RuleField) -> &str {
        match f {
            RuleField::Series => &self.series_description,
            RuleField::Study => &self.study_description,
            RuleField::Protocol => &self.protocol,
        }
    }
}

/// A manifest line: metadata plus the volume location. `true_phase` is the
/// reference annotation when one exists (validation and test sets).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    #[serde(flatten)]
    pub meta: ScanMeta,
    pub volume_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_phase: Option<PhaseLabel>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinedLabel {
    pub class: MinedClass,
    pub matched_pattern: String,
    pub matched_field: Option<RuleField>,
}

impl MinedLabel {
    pub fn is_fallback(&self) -> bool {
        self.matched_field.is_none()
    }

    /// Training target implied by the label.
    pub fn target(&self) -> PhaseTarget {
        match self.class {
            MinedClass::NC => PhaseTarget::Exact(PhaseLabel::NC),
            MinedClass::A => PhaseTarget::Exact(PhaseLabel::A),
            MinedClass::V => PhaseTarget::Exact(PhaseLabel::V),
            MinedClass::D => PhaseTarget::Exact(PhaseLabel::D),
            MinedClass::Contrast => PhaseTarget::CoarseContrast,
            MinedClass::Other => PhaseTarget::Exact(PhaseLabel::O),
        }
    }

    /// The label read as a phase prediction. A bare "contrast" label cannot
    /// be placed on a specific phase, so it scores as O.
    pub fn as_prediction(&self) -> PhaseLabel {
        match self.target() {
            PhaseTarget::Exact(l) => l,
            PhaseTarget::CoarseContrast => PhaseLabel::O,
        }
    }
}

pub fn mine_label(meta: &ScanMeta, rules: &RuleSet) -> MinedLabel {
    let fields = [RuleField::Series, RuleField::Study, RuleField::Protocol].map(|f| (f, meta.field(f).to_lowercase()));
    let mut best: Option<&Rule> = None;
    for rule in rules.rules() {
        let text = &fields.iter().find(|(f, _)| *f == rule.field).expect("all fields").1;
        if !text.contains(rule.folded.as_str()) {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) => {
                let (l, bl) = (rule.folded.chars().count(), b.folded.chars().count());
                l > bl || (l == bl && rule.class.priority() < b.class.priority())
            }
        };
        if better {
            best = Some(rule);
        }
    }
    match best {
        Some(r) => MinedLabel {
            class: r.class,
            matched_pattern: r.pattern.clone(),
            matched_field: Some(r.field),
        },
        None => MinedLabel {
            class: MinedClass::Other,
            matched_pattern: FALLBACK_PATTERN.into(),
            matched_field: None,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropReason {
    SliceCount,
    SliceSpacing,
    PostProcedure,
    NotAxial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterDecision {
    Keep,
    Drop(DropReason),
}

pub const MIN_SLICES: u32 = 10;
pub const MAX_SPACING_MM: f64 = 5.0;

/// Admission filter: at least 10 slices, spacing no coarser than 5 mm, not
/// taken during or after a procedure, axial. Checked in that order.
pub fn filter_scan(meta: &ScanMeta) -> FilterDecision {
    if meta.slice_count < MIN_SLICES {
        FilterDecision::Drop(DropReason::SliceCount)
    } else if meta.slice_spacing_mm > MAX_SPACING_MM {
        FilterDecision::Drop(DropReason::SliceSpacing)
    } else if meta.post_procedure {
        FilterDecision::Drop(DropReason::PostProcedure)
    } else if !meta.axial {
        FilterDecision::Drop(DropReason::NotAxial)
    } else {
        FilterDecision::Keep
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledScan {
    pub line: usize,
    #[serde(flatten)]
    pub record: ManifestRecord,
    pub mined: MinedLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedScan {
    pub line: usize,
    pub series_uid: String,
    pub reason: DropReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineError {
    pub line: usize,
    pub error: String,
}

/// Result of mining a manifest stream.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MiningOutput {
    pub labeled: Vec<LabeledScan>,
    pub rejected: Vec<RejectedScan>,
    pub errors: Vec<LineError>,
    /// Kept scans per mined class.
    pub counts: BTreeMap<String, usize>,
}

enum Outcome {
    Labeled(Box<LabeledScan>),
    Rejected(RejectedScan),
    Error(LineError),
}

/// Filter and label every line of a JSON-lines manifest. A leading schema
/// record is skipped; malformed lines become error records.
pub fn mine_manifest(input: impl BufRead, rules: &RuleSet) -> std::io::Result<MiningOutput> {
    let (_, lines) = read_jsonl::<ManifestRecord>(input)?;
    let outcomes = exec::map(&lines, |l| match &l.record {
        Err(e) => Outcome::Error(LineError { line: l.line, error: e.clone() }),
        Ok(rec) => {
            if let Err(e) = rec.meta.validate() {
                return Outcome::Error(LineError { line: l.line, error: e });
            }
            match filter_scan(&rec.meta) {
                FilterDecision::Drop(reason) => Outcome::Rejected(RejectedScan {
                    line: l.line,
                    series_uid: rec.meta.series_uid.clone(),
                    reason,
                }),
                FilterDecision::Keep => Outcome::Labeled(Box::new(LabeledScan {
                    line: l.line,
                    mined: mine_label(&rec.meta, rules),
                    record: rec.clone(),
                })),
            }
        }
    });
    let mut out = MiningOutput::default();
    for c in MinedClass::ALL {
        out.counts.insert(c.name().to_string(), 0);
    }
    for o in outcomes {
        match o {
            Outcome::Labeled(s) => {
                *out.counts.get_mut(s.mined.class.name()).expect("class key") += 1;
                out.labeled.push(*s);
            }
            Outcome::Rejected(r) => out.rejected.push(r),
            Outcome::Error(e) => out.errors.push(e),
        }
    }
    Ok(out)
}
