//! Curation engine for dynamic contrast-enhanced liver CT.
//!
//! The crate identifies the phase of each CT scan (non-contrast, arterial,
//! venous, delay, other) by combining DICOM-tag text mining with a compact
//! 3D squeeze-excitation classifier, then harvests complete studies and
//! reports scan- and study-level quality metrics.
//!
//! Layout:
//! - [`tensor`]: dense tensors with a reverse-mode tape and the ops the
//!   classifier needs.
//! - [`model`]: the 3D squeeze-excitation network, checkpoints, preprocessing
//!   and saliency maps.
//! - [`loss`]: cross entropy over exact and coarse "contrast" targets.
//! - [`miner`]: rule-based labelling of DICOM descriptions and scan filters.
//! - [`phantom`]: synthetic volumes standing in for real PACS data.
//! - [`eval`]: confusion matrices, P/R/F1, study buckets, randomization
//!   tests and Holm correction.
//! - [`pipeline`]: training, classification, curation and the CLI.

pub mod exec;
pub mod io;
pub mod eval;
pub mod loss;
pub mod miner;
pub mod model;
pub mod phantom;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use model::PhaseLabel;
pub use loss::PhaseTarget;
