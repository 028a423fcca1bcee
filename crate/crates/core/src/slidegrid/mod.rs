//! Whole-slide images to ordered, capped patch sets.
//!
//! Pipeline: tissue mask at 5x → pick one magnification per slide → grid of
//! non-overlapping 896 px cells at that magnification → keep cells with
//! enough tissue → read and PNG-encode → subsample to the cap, keeping grid
//! order.

mod grid;
mod io;
mod patches;
mod tissue;

use std::fmt;
use std::sync::Arc;

use image::{imageops, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use grid::{grid_candidates, grid_shape, GridCell};
pub use io::{open_slide_dir, parse_slide_manifest, write_patchset, PatchManifest, SlideManifest};
pub use patches::{
    choose_magnification, choose_magnification_with, extract_patches, prepare_slide,
    subsample_patches, MagnificationDistribution, Patch, PatchFailure, PatchSet, SlidePrep,
};
pub use tissue::{tissue_mask, tissue_mask_stages, BinaryGrid, MaskStages, TissueMask, TissueParams};

/// Patch side length at the extraction magnification.
pub const PATCH_SIZE: u32 = crate::MODEL_IMAGE_SIZE;

/// Default per-slide patch cap.
pub const DEFAULT_PATCH_CAP: usize = 126;

/// Magnification of the tissue mask.
pub const MASK_MAGNIFICATION: f64 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SlideError {
    #[error("invalid slide: {0}")]
    Invalid(String),
    #[error("slide has zero area")]
    ZeroArea,
    #[error("region read failed at level {magnification}x ({x},{y} {w}×{h}): {reason}")]
    Read {
        magnification: f64,
        x: u32,
        y: u32,
        w: u32,
        h: u32,
        reason: String,
    },
    #[error("no candidate patches to extract")]
    NoCandidates,
    #[error("invalid magnification distribution: {0}")]
    Distribution(String),
    #[error("slide manifest: {0}")]
    Manifest(String),
    #[error("io: {0}")]
    Io(String),
}

/// Pixel access for one pyramid level.
pub trait RegionSource: Send + Sync {
    /// Reads the part of `(x, y, w, h)` that lies inside the level. The
    /// returned image may be smaller than requested at the right and bottom
    /// edges.
    fn read_region(&self, x: u32, y: u32, w: u32, h: u32) -> Result<RgbImage, String>;
}

impl RegionSource for RgbImage {
    fn read_region(&self, x: u32, y: u32, w: u32, h: u32) -> Result<RgbImage, String> {
        if x >= self.width() || y >= self.height() {
            return Ok(RgbImage::new(0, 0));
        }
        let w = w.min(self.width() - x);
        let h = h.min(self.height() - y);
        Ok(imageops::crop_imm(self, x, y, w, h).to_image())
    }
}

#[derive(Clone)]
pub struct Level {
    pub magnification: f64,
    pub width: u32,
    pub height: u32,
    source: Arc<dyn RegionSource>,
}

impl fmt::Debug for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Level")
            .field("magnification", &self.magnification)
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl Level {
    pub fn new(magnification: f64, width: u32, height: u32, source: Arc<dyn RegionSource>) -> Self {
        Self {
            magnification,
            width,
            height,
            source,
        }
    }

    pub fn from_image(magnification: f64, image: RgbImage) -> Self {
        let (w, h) = image.dimensions();
        Self::new(magnification, w, h, Arc::new(image))
    }

    pub fn read_region(&self, x: u32, y: u32, w: u32, h: u32) -> Result<RgbImage, SlideError> {
        self.source
            .read_region(x, y, w, h)
            .map_err(|reason| SlideError::Read {
                magnification: self.magnification,
                x,
                y,
                w,
                h,
                reason,
            })
    }
}

fn same_mag(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1.0)
}

/// A multi-resolution slide. Levels are kept sorted by magnification,
/// highest first.
#[derive(Debug, Clone)]
pub struct SlidePyramid {
    pub slide_id: String,
    pub caption: String,
    levels: Vec<Level>,
}

impl SlidePyramid {
    pub fn new(
        slide_id: impl Into<String>,
        caption: impl Into<String>,
        mut levels: Vec<Level>,
    ) -> Result<Self, SlideError> {
        if levels.is_empty() {
            return Err(SlideError::Invalid("slide has no levels".into()));
        }
        if let Some(l) = levels
            .iter()
            .find(|l| !l.magnification.is_finite() || l.magnification <= 0.0)
        {
            return Err(SlideError::Invalid(format!(
                "magnification must be positive, got {}",
                l.magnification
            )));
        }
        if levels.iter().any(|l| l.width == 0 || l.height == 0) {
            return Err(SlideError::ZeroArea);
        }
        levels.sort_by(|a, b| b.magnification.total_cmp(&a.magnification));
        if levels
            .windows(2)
            .any(|w| same_mag(w[0].magnification, w[1].magnification))
        {
            return Err(SlideError::Invalid("duplicate magnification level".into()));
        }
        let base = &levels[0];
        for l in &levels[1..] {
            let ratio = l.magnification / base.magnification;
            let ew = f64::from(base.width) * ratio;
            let eh = f64::from(base.height) * ratio;
            if (f64::from(l.width) - ew).abs() > 1.0 || (f64::from(l.height) - eh).abs() > 1.0 {
                return Err(SlideError::Invalid(format!(
                    "level {}x is {}×{}, expected about {ew:.0}×{eh:.0} from the {}x base",
                    l.magnification, l.width, l.height, base.magnification
                )));
            }
        }
        Ok(Self {
            slide_id: slide_id.into(),
            caption: caption.into(),
            levels,
        })
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn base_magnification(&self) -> f64 {
        self.levels[0].magnification
    }

    pub fn level(&self, magnification: f64) -> Option<&Level> {
        self.levels
            .iter()
            .find(|l| same_mag(l.magnification, magnification))
    }

    /// Pixel dimensions the slide has (or would have) at `magnification`.
    pub fn dims_at(&self, magnification: f64) -> (u32, u32) {
        if let Some(l) = self.level(magnification) {
            return (l.width, l.height);
        }
        let base = &self.levels[0];
        let ratio = magnification / base.magnification;
        (
            (f64::from(base.width) * ratio).round() as u32,
            (f64::from(base.height) * ratio).round() as u32,
        )
    }

    /// Level used to synthesise `magnification` when no exact level exists:
    /// the lowest level above it, or else the highest level below it.
    fn source_level_for(&self, magnification: f64) -> &Level {
        self.levels
            .iter()
            .rev()
            .find(|l| l.magnification > magnification)
            .unwrap_or(&self.levels[0])
    }

    /// Reads `(x, y, w, h)` in the pixel frame of `magnification`, resampling
    /// from a neighbouring level when the slide has no exact match. The result
    /// is clipped to the slide extent.
    pub fn read_at(
        &self,
        magnification: f64,
        x: u32,
        y: u32,
        w: u32,
        h: u32,
    ) -> Result<RgbImage, SlideError> {
        if let Some(level) = self.level(magnification) {
            return level.read_region(x, y, w, h);
        }
        let (tw, th) = self.dims_at(magnification);
        if x >= tw || y >= th {
            return Ok(RgbImage::new(0, 0));
        }
        let (cw, ch) = (w.min(tw - x), h.min(th - y));
        let src = self.source_level_for(magnification);
        let scale = src.magnification / magnification;
        let sx = (f64::from(x) * scale).floor() as u32;
        let sy = (f64::from(y) * scale).floor() as u32;
        let sw = ((f64::from(cw) * scale).round() as u32).max(1);
        let sh = ((f64::from(ch) * scale).round() as u32).max(1);
        let region = src.read_region(sx, sy, sw, sh)?;
        if region.width() == 0 || region.height() == 0 {
            return Ok(RgbImage::new(cw, ch));
        }
        Ok(imageops::resize(&region, cw, ch, imageops::FilterType::Triangle))
    }
}

/// `20x`, `2.5x`.
pub fn format_magnification(m: f64) -> String {
    if m.fract() == 0.0 {
        format!("{}x", m as i64)
    } else {
        format!("{m}x")
    }
}

/// Per-slide pipeline settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlideConfig {
    pub tissue: TissueParams,
    /// Minimum tissue fraction of a grid cell for it to be extracted.
    pub grid_tissue_fraction: f64,
    pub cap: usize,
    pub magnification: MagnificationDistribution,
}

impl Default for SlideConfig {
    fn default() -> Self {
        Self {
            tissue: TissueParams::default(),
            grid_tissue_fraction: 0.10,
            cap: DEFAULT_PATCH_CAP,
            magnification: MagnificationDistribution::default(),
        }
    }
}
