//! Synthetic abdominal CT stand-ins.
//!
//! Each volume is an elliptic body with four enhancing structures: an aortic
//! cylinder, a branching portal tree, paired kidneys and paired ureters.
//! Phases differ by which structures light up (arterial: aorta; venous:
//! portal veins and kidneys; delay: ureters; non-contrast: none). "Other"
//! scans are chest-like instead (lungs and heart, no abdominal structures).
//!
//! Geometry is given in a 16x64x64 reference frame and scaled to the
//! configured dims. Everything is deterministic in (seed, phase, index).

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::io::{write_jsonl, write_rvol, IoError, SchemaHeader, Volume};
use crate::loss::PhaseTarget;
use crate::miner::{default_rules, ManifestRecord, MinedClass, RuleField, ScanMeta};
use crate::model::PhaseLabel;
use crate::rng;
use crate::tensor::{Int3, Tensor};

pub const MANIFEST_SCHEMA: &str = "phase-curator/manifest";
pub const MANIFEST_VERSION: u32 = 1;

const REFERENCE_DIMS: [f64; 3] = [16.0, 64.0, 64.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Region {
    Aorta,
    Portal,
    Kidney,
    Ureter,
}

impl Region {
    pub const ALL: [Region; 4] = [Self::Aorta, Self::Portal, Self::Kidney, Self::Ureter];

    /// Structures whose enhancement defines a contrast phase.
    pub fn defining(phase: PhaseLabel) -> &'static [Region] {
        match phase {
            PhaseLabel::A => &[Self::Aorta],
            PhaseLabel::V => &[Self::Portal, Self::Kidney],
            PhaseLabel::D => &[Self::Ureter],
            PhaseLabel::NC | PhaseLabel::O => &[],
        }
    }
}

/// Mean intensity of each structure for one phase, ordered
/// (aorta, portal, kidney, ureter).
pub type RegionIntensities = [f32; 4];

/// Shapes in the reference frame, coordinates (z, y, x) in voxels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct Geometry {
    pub body_center: [f64; 2],
    pub body_semi_axes: [f64; 2],
    pub aorta_center: [f64; 2],
    pub aorta_radius: f64,
    pub portal_segments: Vec<[[f64; 3]; 2]>,
    pub portal_radius: f64,
    pub kidney_centers: [[f64; 3]; 2],
    pub kidney_semi_axes: [f64; 3],
    pub ureter_centers: [[f64; 2]; 2],
    pub ureter_radius: f64,
    pub ureter_z_max: f64,
    pub lung_centers: [[f64; 3]; 2],
    pub lung_semi_axes: [f64; 3],
    pub heart_center: [f64; 3],
    pub heart_semi_axes: [f64; 3],
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            body_center: [31.5, 31.5],
            body_semi_axes: [24.0, 29.0],
            aorta_center: [38.0, 31.5],
            aorta_radius: 7.0,
            portal_segments: vec![
                [[9.0, 25.0, 38.0], [9.0, 22.0, 31.0]],
                [[9.0, 22.0, 31.0], [13.0, 17.0, 28.0]],
                [[9.0, 22.0, 31.0], [5.0, 19.0, 25.0]],
            ],
            portal_radius: 6.0,
            kidney_centers: [[12.0, 41.0, 17.0], [12.0, 41.0, 46.0]],
            kidney_semi_axes: [3.5, 6.0, 6.0],
            ureter_centers: [[43.0, 19.0], [43.0, 44.0]],
            ureter_radius: 5.5,
            ureter_z_max: 8.0,
            lung_centers: [[8.0, 30.0, 18.0], [8.0, 30.0, 45.0]],
            lung_semi_axes: [7.0, 12.0, 9.0],
            heart_center: [8.0, 24.0, 33.0],
            heart_semi_axes: [5.0, 7.0, 7.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub dims: Int3,
    pub spacing_mm: [f32; 3],
    pub noise_sigma: f64,
    pub jitter_voxels: i32,
    pub geometry: Geometry,
    pub body_intensity: f32,
    /// Fraction of each structure's depth with flat enhancement; beyond it
    /// the enhancement falls off along a cosine shoulder to the boundary.
    pub flat_core: f64,
    /// Per-phase mean structure intensities for NC, A, V, D.
    pub intensities: [RegionIntensities; 4],
    pub lung_intensity: f32,
    pub heart_intensity: f32,
    pub coarse_label_fraction: f64,
    /// Probability that a series description is drawn from a wrong class.
    pub corruption_rate: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [16, 64, 64],
            spacing_mm: [2.5, 0.8, 0.8],
            noise_sigma: 0.05,
            jitter_voxels: 2,
            geometry: Geometry::default(),
            body_intensity: 0.15,
            flat_core: 0.5,
            intensities: [
                [0.15, 0.15, 0.15, 0.15],
                [0.55, 0.20, 0.20, 0.15],
                [0.25, 0.55, 0.45, 0.15],
                [0.20, 0.20, 0.25, 0.55],
            ],
            lung_intensity: 0.02,
            heart_intensity: 0.6,
            coarse_label_fraction: 0.2,
            corruption_rate: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::Config(m));
        if self.dims.iter().any(|&d| d < 2) {
            return bad(format!("dims {:?} must all be >= 2", self.dims));
        }
        if !(0.0..1.0).contains(&self.flat_core) {
            return bad(format!("flat-core must lie in [0, 1), got {}", self.flat_core));
        }
        if !(self.noise_sigma >= 0.0) || self.jitter_voxels < 0 {
            return bad("noise-sigma and jitter-voxels must be non-negative".into());
        }
        for (name, v) in [("coarse-label-fraction", self.coarse_label_fraction), ("corruption-rate", self.corruption_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.intensities.iter().flatten().chain([&self.body_intensity]).any(|v| !(0.0..=1.0).contains(v)) {
            return bad("intensities must lie in [0, 1]".into());
        }
        let col = |r: usize| self.intensities.map(|row| row[r]);
        let argmax = |v: [f32; 4]| (0..4).fold(0, |b, i| if v[i] > v[b] { i } else { b });
        let strict_max = |v: [f32; 4], at: usize| (0..4).all(|i| i == at || v[i] < v[at]);
        if !strict_max(col(0), 1) || !strict_max(col(1), 2) || !strict_max(col(2), 2) || !strict_max(col(3), 3) {
            return bad(format!(
                "intensity table must peak aorta in A, portal and kidney in V, ureter in D (got argmax {:?})",
                [argmax(col(0)), argmax(col(1)), argmax(col(2)), argmax(col(3))]
            ));
        }
        if self.intensities[0].iter().any(|&v| v > self.body_intensity) {
            return bad("non-contrast structures must not exceed body intensity".into());
        }
        Ok(())
    }

    /// Relative enhancement at normalised depth `u` in [0, 1].
    fn profile(&self, u: f64) -> f64 {
        let core = self.flat_core;
        if u <= core {
            1.0
        } else {
            (std::f64::consts::FRAC_PI_2 * (u - core) / (1.0 - core)).cos().powi(2)
        }
    }

    fn scale(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.dims[a] as f64 / REFERENCE_DIMS[a])
    }

    /// Reference-frame coordinate of voxel `(d,h,w)` after removing `offset`.
    fn reference_coord(&self, idx: [usize; 3], offset: [i32; 3]) -> [f64; 3] {
        let s = self.scale();
        [0, 1, 2].map(|a| (idx[a] as f64 + 0.5) / s[a] - 0.5 - offset[a] as f64)
    }
}

fn in_ellipse2(p: [f64; 2], c: [f64; 2], r: [f64; 2]) -> bool {
    ((p[0] - c[0]) / r[0]).powi(2) + ((p[1] - c[1]) / r[1]).powi(2) <= 1.0
}

fn ellipsoid_norm(p: [f64; 3], c: [f64; 3], r: [f64; 3]) -> f64 {
    (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum::<f64>().sqrt()
}

fn in_ellipsoid(p: [f64; 3], c: [f64; 3], r: [f64; 3]) -> bool {
    ellipsoid_norm(p, c, r) <= 1.0
}

fn segment_distance(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2: f64 = ab.iter().map(|v| v * v).sum();
    let t = if len2 > 0.0 { (ap.iter().zip(&ab).map(|(x, y)| x * y).sum::<f64>() / len2).clamp(0.0, 1.0) } else { 0.0 };
    (0..3).map(|i| (ap[i] - t * ab[i]).powi(2)).sum::<f64>().sqrt()
}

impl Geometry {
    fn in_body(&self, p: [f64; 3]) -> bool {
        in_ellipse2([p[1], p[2]], self.body_center, self.body_semi_axes)
    }

    /// Abdominal structure containing `p`, if any.
    pub fn region_at(&self, p: [f64; 3]) -> Option<Region> {
        self.locate(p).map(|(r, _)| r)
    }

    /// Structure containing `p` and the normalised depth of `p` within it:
    /// 0 on the centre line (or centre point), 1 on the boundary.
    pub fn locate(&self, p: [f64; 3]) -> Option<(Region, f64)> {
        if !self.in_body(p) {
            return None;
        }
        let planar = |c: [f64; 2]| ((p[1] - c[0]).powi(2) + (p[2] - c[1]).powi(2)).sqrt();
        let nearest = |it: &mut dyn Iterator<Item = f64>| it.fold(f64::INFINITY, f64::min);
        let u = planar(self.aorta_center) / self.aorta_radius;
        if u <= 1.0 {
            return Some((Region::Aorta, u));
        }
        let u = nearest(&mut self.portal_segments.iter().map(|s| segment_distance(p, s[0], s[1]))) / self.portal_radius;
        if u <= 1.0 {
            return Some((Region::Portal, u));
        }
        let u = nearest(&mut self.kidney_centers.iter().map(|&c| ellipsoid_norm(p, c, self.kidney_semi_axes)));
        if u <= 1.0 {
            return Some((Region::Kidney, u));
        }
        let u = nearest(&mut self.ureter_centers.iter().map(|&c| planar(c))) / self.ureter_radius;
        if p[0] <= self.ureter_z_max && u <= 1.0 {
            return Some((Region::Ureter, u));
        }
        None
    }

    fn chest_value(&self, p: [f64; 3], cfg: &PhantomConfig) -> f32 {
        if !self.in_body(p) {
            return 0.0;
        }
        if in_ellipsoid(p, self.heart_center, self.heart_semi_axes) {
            return cfg.heart_intensity;
        }
        if self.lung_centers.iter().any(|&c| in_ellipsoid(p, c, self.lung_semi_axes)) {
            return cfg.lung_intensity;
        }
        cfg.body_intensity
    }
}

/// Voxel mask of `region` at the configured dims for a given jitter offset.
pub fn region_mask(config: &PhantomConfig, region: Region, offset: [i32; 3]) -> Vec<bool> {
    let [d, h, w] = config.dims;
    let mut mask = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = config.reference_coord([z, y, x], offset);
                mask.push(config.geometry.region_at(p) == Some(region));
            }
        }
    }
    mask
}

/// One synthetic scan.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSample {
    pub volume: Tensor<f32>,
    pub true_phase: PhaseLabel,
    pub training_target: PhaseTarget,
    /// Translation applied to the anatomy, voxels (z, y, x) in the reference frame.
    pub offset: [i32; 3],
    pub meta: ScanMeta,
}

fn class_patterns(class: MinedClass) -> Vec<String> {
    default_rules()
        .rules()
        .iter()
        .filter(|r| r.class == class && r.field == RuleField::Series)
        .map(|r| r.pattern.clone())
        .collect()
}

fn mined_class(phase: PhaseLabel) -> MinedClass {
    match phase {
        PhaseLabel::NC => MinedClass::NC,
        PhaseLabel::A => MinedClass::A,
        PhaseLabel::V => MinedClass::V,
        PhaseLabel::D => MinedClass::D,
        PhaseLabel::O => MinedClass::Other,
    }
}

fn pick(rng: &mut rng::Rng, class: MinedClass) -> String {
    class_patterns(class).choose(rng).expect("non-empty rule row").clone()
}

/// Series description for `phase`: a pattern from its own rule row, or with
/// probability `corruption_rate` one from another phase's row.
fn describe(rng: &mut rng::Rng, phase: PhaseLabel, corruption_rate: f64) -> String {
    if rng.gen::<f64>() < corruption_rate {
        let wrong: Vec<PhaseLabel> = PhaseLabel::ALL.into_iter().filter(|&p| p != phase).collect();
        let p = *wrong.choose(rng).expect("four alternatives");
        pick(rng, mined_class(p))
    } else {
        pick(rng, mined_class(phase))
    }
}

const PHASE_STREAM: u64 = 0x5048_414E; // "PHAN"

/// Deterministic sample for (config.seed, phase, index). The training target
/// is exact; [`generate_dataset`] coarsens a fraction of training labels.
pub fn generate_sample(config: &PhantomConfig, phase: PhaseLabel, index: u64) -> PhantomSample {
    let mut r = rng::stream(&[config.seed, PHASE_STREAM, phase.code() as u64, index]);
    let j = config.jitter_voxels;
    let offset = [0; 3].map(|_: i32| if j > 0 { r.gen_range(-j..=j) } else { 0 });
    let [d, h, w] = config.dims;
    let geo = &config.geometry;
    let mut located = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = config.reference_coord([z, y, x], offset);
                located.push((p, geo.in_body(p), geo.locate(p)));
            }
        }
    }
    // Scale each structure's profile so its mean over the region is one,
    // which makes the noiseless region mean equal the table entry.
    let mut mass = [(0.0f64, 0usize); 4];
    for (_, _, loc) in &located {
        if let Some((reg, u)) = loc {
            mass[*reg as usize].0 += config.profile(*u);
            mass[*reg as usize].1 += 1;
        }
    }
    let noise = Normal::new(0.0, config.noise_sigma.max(0.0)).expect("finite sigma");
    let body = config.body_intensity as f64;
    let mut data = Vec::with_capacity(d * h * w);
    for (p, in_body, loc) in located {
        let clean = match (phase, loc) {
            (PhaseLabel::O, _) => geo.chest_value(p, config) as f64,
            _ if !in_body => 0.0,
            (_, Some((reg, u))) => {
                let (sum, n) = mass[reg as usize];
                let level = config.intensities[phase.code()][reg as usize] as f64;
                body + (level - body) * config.profile(u) * n as f64 / sum
            }
            (_, None) => body,
        };
        let v = if config.noise_sigma > 0.0 { clean + noise.sample(&mut r) } else { clean };
        data.push(v.clamp(0.0, 1.0) as f32);
    }
    let description = describe(&mut r, phase, config.corruption_rate);
    PhantomSample {
        volume: Tensor::new(vec![d, h, w], data).expect("dims match"),
        true_phase: phase,
        training_target: PhaseTarget::Exact(phase),
        offset,
        meta: ScanMeta {
            study_uid: format!("PH-STUDY-{index:05}"),
            series_uid: format!("PH-SERIES-{index:05}-{}", phase.name()),
            patient_id: String::new(),
            study_description: "CT ABDOMEN DYNAMIC".into(),
            series_description: description,
            protocol: "LIVER MULTIPHASE".into(),
            slice_count: d as u32,
            slice_spacing_mm: config.spacing_mm[0] as f64,
            axial: true,
            post_procedure: false,
        },
    }
}

/// Requested dataset composition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct DatasetSpec {
    /// Scans per phase, ordered NC, A, V, D, O.
    pub counts: [usize; 5],
    /// Train, validation and test fractions (by patient).
    pub splits: [f64; 3],
}

impl Default for DatasetSpec {
    fn default() -> Self {
        // 800 scans in 160 five-scan studies: ~500 / 100 / 200.
        Self {
            counts: [160; 5],
            splits: [0.625, 0.125, 0.25],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Self::Train, Self::Val, Self::Test];

    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }

    pub fn manifest_name(self) -> String {
        format!("{}.jsonl", self.name())
    }
}

/// Planned scan before its volume is rendered.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedScan {
    pub phase: PhaseLabel,
    pub index: u64,
    pub patient: usize,
    pub split: Split,
    pub coarse: bool,
}

/// Lay out studies, patients and splits without rendering any volume.
///
/// Study `j` holds one scan of every phase whose count exceeds `j`. Patients
/// own one or two consecutive studies and are shuffled into splits, so no
/// patient crosses a split boundary.
pub fn plan_dataset(config: &PhantomConfig, spec: &DatasetSpec) -> Result<Vec<PlannedScan>, PhantomError> {
    let total_frac: f64 = spec.splits.iter().sum();
    if spec.splits.iter().any(|&f| f < 0.0) || (total_frac - 1.0).abs() > 1e-9 {
        return Err(PhantomError::Config(format!("split fractions {:?} must be non-negative and sum to 1", spec.splits)));
    }
    let mut r = rng::stream(&[config.seed, 0x504C_414E]);
    let n_studies = spec.counts.iter().copied().max().unwrap_or(0);
    let mut patients: Vec<Vec<usize>> = Vec::new();
    let mut j = 0;
    while j < n_studies {
        let take = if j + 1 < n_studies && r.gen_bool(0.3) { 2 } else { 1 };
        patients.push((j..j + take).collect());
        j += take;
    }
    let scans_in = |study: usize| spec.counts.iter().filter(|&&c| c > study).count();
    let total: usize = spec.counts.iter().sum();
    let mut order: Vec<usize> = (0..patients.len()).collect();
    order.shuffle(&mut r);

    let mut split_of = vec![Split::Test; patients.len()];
    let bounds = [spec.splits[0] * total as f64, (spec.splits[0] + spec.splits[1]) * total as f64];
    let mut assigned = 0usize;
    for &p in &order {
        let n: usize = patients[p].iter().map(|&s| scans_in(s)).sum();
        // Place the patient in the split containing the midpoint of its scan range.
        let mid = assigned as f64 + n as f64 / 2.0;
        split_of[p] = if mid < bounds[0] {
            Split::Train
        } else if mid < bounds[1] {
            Split::Val
        } else {
            Split::Test
        };
        assigned += n;
    }

    let mut plan = Vec::with_capacity(total);
    for (p, studies) in patients.iter().enumerate() {
        for &s in studies {
            for phase in PhaseLabel::ALL {
                if spec.counts[phase.code()] > s {
                    plan.push(PlannedScan {
                        phase,
                        index: s as u64,
                        patient: p,
                        split: split_of[p],
                        coarse: false,
                    });
                }
            }
        }
    }

    let mut contrast: Vec<usize> = (0..plan.len())
        .filter(|&i| plan[i].split == Split::Train && PhaseLabel::CONTRAST.contains(&plan[i].phase))
        .collect();
    contrast.shuffle(&mut r);
    let n_coarse = (config.coarse_label_fraction * contrast.len() as f64).round() as usize;
    for &i in &contrast[..n_coarse] {
        plan[i].coarse = true;
    }
    Ok(plan)
}

/// Render a planned scan, applying patient ids and coarse labelling.
pub fn render(config: &PhantomConfig, planned: &PlannedScan) -> PhantomSample {
    let mut s = generate_sample(config, planned.phase, planned.index);
    s.meta.patient_id = format!("PH-PATIENT-{:05}", planned.patient);
    if planned.coarse {
        let mut r = rng::stream(&[config.seed, 0x434F_4152, planned.phase.code() as u64, planned.index]);
        s.training_target = PhaseTarget::CoarseContrast;
        s.meta.series_description = pick(&mut r, MinedClass::Contrast);
    }
    s
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    /// Scans per split, then per phase (NC, A, V, D, O).
    pub scans: Vec<(Split, [usize; 5])>,
    pub coarse: usize,
    pub patients: usize,
    pub manifests: Vec<PathBuf>,
}

/// Render the dataset into `out_dir`: `volumes/*.rvol` plus one manifest per
/// split (`train.jsonl`, `val.jsonl`, `test.jsonl`).
pub fn generate_dataset(config: &PhantomConfig, spec: &DatasetSpec, out_dir: &Path) -> Result<DatasetSummary, PhantomError> {
    config.validate()?;
    let plan = plan_dataset(config, spec)?;
    let vol_dir = out_dir.join("volumes");
    std::fs::create_dir_all(&vol_dir).map_err(|e| IoError::file(&vol_dir, e))?;

    let written = exec::map(&plan, |p| -> Result<ManifestRecord, PhantomError> {
        let s = render(config, p);
        let rel = format!("volumes/{}.rvol", s.meta.series_uid);
        write_rvol(
            &out_dir.join(&rel),
            &Volume {
                data: s.volume,
                spacing: config.spacing_mm,
            },
        )?;
        Ok(ManifestRecord {
            meta: s.meta,
            volume_path: rel,
            true_phase: Some(s.true_phase),
        })
    });

    let mut summary = DatasetSummary {
        patients: plan.iter().map(|p| p.patient).max().map_or(0, |m| m + 1),
        coarse: plan.iter().filter(|p| p.coarse).count(),
        ..Default::default()
    };
    let mut records: Vec<(Split, ManifestRecord)> = Vec::with_capacity(plan.len());
    for (p, rec) in plan.iter().zip(written) {
        records.push((p.split, rec?));
    }
    let header = SchemaHeader::new(MANIFEST_SCHEMA, MANIFEST_VERSION);
    for split in Split::ALL {
        let recs: Vec<&ManifestRecord> = records.iter().filter(|(s, _)| *s == split).map(|(_, r)| r).collect();
        let mut per_phase = [0usize; 5];
        for r in &recs {
            per_phase[r.true_phase.expect("phantoms carry truth").code()] += 1;
        }
        summary.scans.push((split, per_phase));
        let path = out_dir.join(split.manifest_name());
        let mut f = std::io::BufWriter::new(std::fs::File::create(&path).map_err(|e| IoError::file(&path, e))?);
        write_jsonl(&mut f, &header, &recs).map_err(|e| IoError::file(&path, e))?;
        summary.manifests.push(path);
    }
    Ok(summary)
}
