//! CT/MR volumes to model-ready slice sequences.
//!
//! The pipeline is `filter_volumes` → `zstack` → `sample_equidistant` →
//! per-modality value mapping → bilinear stretch to 896×896.

mod io;
mod sampling;
mod window;

use std::collections::BTreeSet;
use std::fmt;

use image::{imageops, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{
    decode_raw, parse_sidecar, read_study, write_sequence, RawDType, SequenceManifest, Sidecar,
};
pub(crate) use io::file_component;
pub use sampling::sample_equidistant;
pub use window::{normalize_mr_volume, quantize_unit, window_ct_slice, MrNormalized, MrScale};

pub use crate::vision_token_count;
use crate::MODEL_IMAGE_SIZE;

/// Default slice cap per query.
pub const DEFAULT_SLICE_CAP: usize = 85;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VolumeError {
    #[error("non-finite voxel value at (x={x}, y={y}, z={z}) in series {series_id:?}")]
    NonFinite {
        series_id: String,
        x: usize,
        y: usize,
        z: usize,
    },
    #[error("invalid volume {series_id:?}: {reason}")]
    Invalid { series_id: String, reason: String },
    #[error("invalid window: lo ({lo}) must be below hi ({hi})")]
    InvalidWindow { lo: f64, hi: f64 },
    #[error("duplicate series_id {0:?} in one study")]
    DuplicateSeries(String),
    #[error("expected modality {expected} for series {series_id:?}, found {found}")]
    WrongModality {
        series_id: String,
        expected: Modality,
        found: Modality,
    },
    #[error("admitted volumes mix modalities ({0})")]
    MixedModalities(String),
    #[error("no admissible volumes: {}", format_rejections(.0))]
    NoAdmissibleVolumes(Vec<Rejection>),
    #[error("slice cap must be at least 2, got {0}")]
    InvalidCap(usize),
    #[error("sidecar: {0}")]
    Sidecar(String),
    #[error("raw data: {0}")]
    Raw(String),
    #[error("io: {0}")]
    Io(String),
}

fn format_rejections(rejections: &[Rejection]) -> String {
    if rejections.is_empty() {
        return "no volumes supplied".to_string();
    }
    rejections
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Modality {
    #[serde(alias = "ct")]
    Ct,
    #[serde(alias = "mr", alias = "MRI")]
    Mr,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Ct => "CT",
            Modality::Mr => "MR",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Orientation {
    Axial,
    Sagittal,
    Coronal,
    Other,
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Orientation::Axial => "AXIAL",
            Orientation::Sagittal => "SAGITTAL",
            Orientation::Coronal => "CORONAL",
            Orientation::Other => "OTHER",
        })
    }
}

/// A decoded scalar volume. Voxels are stored x-fastest, then y, then z.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelVolume {
    series_id: String,
    modality: Modality,
    width: usize,
    height: usize,
    n_slices: usize,
    spacing_mm: (f64, f64),
    slice_thickness_mm: Vec<f64>,
    orientation: Orientation,
    voxels: Vec<f32>,
}

impl VoxelVolume {
    /// Builds a volume, checking shape and finiteness.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        series_id: impl Into<String>,
        modality: Modality,
        dims: (usize, usize, usize),
        spacing_mm: (f64, f64),
        slice_thickness_mm: Vec<f64>,
        orientation: Orientation,
        voxels: Vec<f32>,
    ) -> Result<Self, VolumeError> {
        let series_id = series_id.into();
        let (width, height, n_slices) = dims;
        let invalid = |reason: String| VolumeError::Invalid {
            series_id: series_id.clone(),
            reason,
        };
        if width == 0 || height == 0 {
            return Err(invalid(format!("zero-area slices ({width}×{height})")));
        }
        if n_slices == 0 {
            return Err(invalid("volume has no slices".into()));
        }
        let expected = width
            .checked_mul(height)
            .and_then(|a| a.checked_mul(n_slices))
            .ok_or_else(|| invalid("dimensions overflow".into()))?;
        if voxels.len() != expected {
            return Err(invalid(format!(
                "expected {expected} voxels for {width}×{height}×{n_slices}, got {}",
                voxels.len()
            )));
        }
        if slice_thickness_mm.len() != n_slices {
            return Err(invalid(format!(
                "thickness list has {} entries for {n_slices} slices",
                slice_thickness_mm.len()
            )));
        }
        if let Some(t) = slice_thickness_mm
            .iter()
            .find(|t| !t.is_finite() || **t <= 0.0)
        {
            return Err(invalid(format!("slice thickness must be positive, got {t}")));
        }
        if !(spacing_mm.0.is_finite() && spacing_mm.1.is_finite())
            || spacing_mm.0 <= 0.0
            || spacing_mm.1 <= 0.0
        {
            return Err(invalid(format!("pixel spacing must be positive, got {spacing_mm:?}")));
        }
        if let Some(pos) = voxels.iter().position(|v| !v.is_finite()) {
            let plane = width * height;
            return Err(VolumeError::NonFinite {
                series_id,
                x: pos % width,
                y: (pos % plane) / width,
                z: pos / plane,
            });
        }
        Ok(Self {
            series_id,
            modality,
            width,
            height,
            n_slices,
            spacing_mm,
            slice_thickness_mm,
            orientation,
            voxels,
        })
    }

    pub fn series_id(&self) -> &str {
        &self.series_id
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    /// `(width_px, height_px, n_slices)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.n_slices)
    }

    pub fn spacing_mm(&self) -> (f64, f64) {
        self.spacing_mm
    }

    pub fn slice_thickness_mm(&self) -> &[f64] {
        &self.slice_thickness_mm
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    /// Voxels of slice `z`, row-major.
    pub fn slice(&self, z: usize) -> &[f32] {
        let plane = self.width * self.height;
        &self.voxels[z * plane..(z + 1) * plane]
    }
}

/// One HU interval mapped linearly onto 0..=255.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub lo_hu: f64,
    pub hi_hu: f64,
}

impl WindowSpec {
    pub fn new(lo_hu: f64, hi_hu: f64) -> Result<Self, VolumeError> {
        let w = Self { lo_hu, hi_hu };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), VolumeError> {
        if self.lo_hu.is_finite() && self.hi_hu.is_finite() && self.lo_hu < self.hi_hu {
            Ok(())
        } else {
            Err(VolumeError::InvalidWindow {
                lo: self.lo_hu,
                hi: self.hi_hu,
            })
        }
    }
}

/// Red, green and blue CT windows: wide, soft tissue, brain.
pub const CT_WINDOWS: [WindowSpec; 3] = [
    WindowSpec {
        lo_hu: -1024.0,
        hi_hu: 1024.0,
    },
    WindowSpec {
        lo_hu: -135.0,
        hi_hu: 215.0,
    },
    WindowSpec {
        lo_hu: 0.0,
        hi_hu: 80.0,
    },
];

/// Inclusion criteria applied to each volume of a study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StackCriteria {
    pub max_slice_px: usize,
    pub required_orientation: Orientation,
    pub uniform_thickness: bool,
    pub min_slices: usize,
}

impl Default for StackCriteria {
    fn default() -> Self {
        Self {
            max_slice_px: 512,
            required_orientation: Orientation::Axial,
            uniform_thickness: true,
            min_slices: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectReason {
    TooLarge {
        width: usize,
        height: usize,
        max: usize,
    },
    WrongOrientation {
        found: Orientation,
        required: Orientation,
    },
    NonUniformThickness,
    TooFewSlices {
        found: usize,
        min: usize,
    },
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectReason::TooLarge { width, height, max } => {
                write!(f, "slice {width}×{height} exceeds max {max}×{max}")
            }
            RejectReason::WrongOrientation { found, required } => {
                write!(f, "{found} volume, {} orientation required", required.to_string().to_lowercase())
            }
            RejectReason::NonUniformThickness => f.write_str("slice thickness is not uniform"),
            RejectReason::TooFewSlices { found, min } => {
                write!(f, "{found} slices, min {min} slices required")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub series_id: String,
    pub reasons: Vec<RejectReason>,
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: ", self.series_id)?;
        for (i, r) in self.reasons.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{r}")?;
        }
        Ok(())
    }
}

/// Reasons `volume` fails `criteria`; empty when admitted.
pub fn check_volume(volume: &VoxelVolume, criteria: &StackCriteria) -> Vec<RejectReason> {
    let mut reasons = Vec::new();
    let (w, h, n) = volume.dims();
    if w > criteria.max_slice_px || h > criteria.max_slice_px {
        reasons.push(RejectReason::TooLarge {
            width: w,
            height: h,
            max: criteria.max_slice_px,
        });
    }
    if volume.orientation() != criteria.required_orientation {
        reasons.push(RejectReason::WrongOrientation {
            found: volume.orientation(),
            required: criteria.required_orientation,
        });
    }
    if criteria.uniform_thickness {
        let t = volume.slice_thickness_mm();
        if t.iter().any(|x| *x != t[0]) {
            reasons.push(RejectReason::NonUniformThickness);
        }
    }
    if n < criteria.min_slices {
        reasons.push(RejectReason::TooFewSlices {
            found: n,
            min: criteria.min_slices,
        });
    }
    reasons
}

/// Splits `volumes` into admitted volumes and rejections, preserving input order.
pub fn filter_volumes<'a>(
    volumes: &'a [VoxelVolume],
    criteria: &StackCriteria,
) -> (Vec<&'a VoxelVolume>, Vec<Rejection>) {
    let mut admitted = Vec::new();
    let mut rejected = Vec::new();
    for v in volumes {
        let reasons = check_volume(v, criteria);
        if reasons.is_empty() {
            admitted.push(v);
        } else {
            rejected.push(Rejection {
                series_id: v.series_id().to_string(),
                reasons,
            });
        }
    }
    (admitted, rejected)
}

/// Position of one slice inside the stacked volume.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StackedSlice {
    pub series_id: String,
    pub slice_index: usize,
}

/// Orders admitted volumes by series id, then slices by z ascending.
pub fn zstack(admitted: &[&VoxelVolume]) -> Result<Vec<StackedSlice>, VolumeError> {
    let mut seen = BTreeSet::new();
    for v in admitted {
        if !seen.insert(v.series_id()) {
            return Err(VolumeError::DuplicateSeries(v.series_id().to_string()));
        }
    }
    let mut ordered: Vec<&VoxelVolume> = admitted.to_vec();
    ordered.sort_by(|a, b| a.series_id().cmp(b.series_id()));
    Ok(ordered
        .iter()
        .flat_map(|v| {
            (0..v.dims().2).map(move |z| StackedSlice {
                series_id: v.series_id().to_string(),
                slice_index: z,
            })
        })
        .collect())
}

/// One model-ready slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceEntry {
    /// Index in the stacked volume, before sampling.
    pub global_index: usize,
    pub series_id: String,
    /// Index within the source series.
    pub slice_index: usize,
    pub image: RgbImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceSequence {
    pub entries: Vec<SliceEntry>,
    pub cap: usize,
    pub source_series: Vec<String>,
    pub modality: Modality,
    pub warnings: Vec<String>,
}

impl SliceSequence {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn token_count(&self) -> usize {
        vision_token_count(self.entries.len())
    }
}

/// Knobs for [`render_sequence`]; defaults reproduce the evaluated setup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VolumeConfig {
    pub windows: [WindowSpec; 3],
    pub criteria: StackCriteria,
    pub cap: usize,
}

impl Default for VolumeConfig {
    fn default() -> Self {
        Self {
            windows: CT_WINDOWS,
            criteria: StackCriteria::default(),
            cap: DEFAULT_SLICE_CAP,
        }
    }
}

/// Full volume pipeline for one study.
pub fn render_sequence(
    volumes: &[VoxelVolume],
    criteria: &StackCriteria,
    windows: &[WindowSpec; 3],
    cap: usize,
) -> Result<SliceSequence, VolumeError> {
    for w in windows {
        w.validate()?;
    }
    if cap < 2 {
        return Err(VolumeError::InvalidCap(cap));
    }
    let (admitted, rejected) = filter_volumes(volumes, criteria);
    if admitted.is_empty() {
        return Err(VolumeError::NoAdmissibleVolumes(rejected));
    }
    for r in &rejected {
        log::info!("skipping volume {r}");
    }
    let modality = admitted[0].modality();
    if admitted.iter().any(|v| v.modality() != modality) {
        let mods: BTreeSet<String> = admitted.iter().map(|v| v.modality().to_string()).collect();
        return Err(VolumeError::MixedModalities(
            mods.into_iter().collect::<Vec<_>>().join(", "),
        ));
    }

    let stacked = zstack(&admitted)?;
    let picks = sample_equidistant(stacked.len(), cap);
    let by_id = |id: &str| {
        admitted
            .iter()
            .find(|v| v.series_id() == id)
            .copied()
            .expect("stacked slice refers to an admitted volume")
    };

    let mut warnings = Vec::new();
    let mut mr_scales = std::collections::BTreeMap::new();
    if modality == Modality::Mr {
        for v in &admitted {
            let scale = MrScale::from_volume(v);
            if scale.is_degenerate() {
                let msg = format!(
                    "MR series {:?} is constant ({}); emitting black slices",
                    v.series_id(),
                    scale.min
                );
                log::warn!("{msg}");
                warnings.push(msg);
            }
            mr_scales.insert(v.series_id().to_string(), scale);
        }
    }

    let mut entries = Vec::with_capacity(picks.len());
    for global_index in picks {
        let StackedSlice {
            series_id,
            slice_index,
        } = &stacked[global_index];
        let vol = by_id(series_id);
        let (w, h, _) = vol.dims();
        let mapped = match modality {
            Modality::Ct => window_ct_slice(vol.slice(*slice_index), w, h, windows)
                .map_err(|e| with_position(e, series_id, *slice_index))?,
            Modality::Mr => mr_scales[series_id].map_slice(vol.slice(*slice_index), w, h),
        };
        entries.push(SliceEntry {
            global_index,
            series_id: series_id.clone(),
            slice_index: *slice_index,
            image: to_model_size(&mapped),
        });
    }

    let mut source_series: Vec<String> = admitted.iter().map(|v| v.series_id().to_string()).collect();
    source_series.sort();
    Ok(SliceSequence {
        entries,
        cap,
        source_series,
        modality,
        warnings,
    })
}

fn with_position(err: VolumeError, series: &str, z: usize) -> VolumeError {
    match err {
        VolumeError::NonFinite { x, y, .. } => VolumeError::NonFinite {
            series_id: series.to_string(),
            x,
            y,
            z,
        },
        other => other,
    }
}

/// Bilinear stretch to the model input size; aspect ratio is not preserved.
pub fn to_model_size(img: &RgbImage) -> RgbImage {
    if img.width() == MODEL_IMAGE_SIZE && img.height() == MODEL_IMAGE_SIZE {
        return img.clone();
    }
    imageops::resize(
        img,
        MODEL_IMAGE_SIZE,
        MODEL_IMAGE_SIZE,
        imageops::FilterType::Triangle,
    )
}
