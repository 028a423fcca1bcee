//! HSV tissue segmentation at low magnification.
//!
//! Stage 1 thresholds saturation and value, stage 2 applies a binary
//! closing then opening, stage 3 drops small 8-connected components.

use image::{imageops, RgbImage};
use serde::{Deserialize, Serialize};

use super::{SlideError, SlidePyramid, MASK_MAGNIFICATION};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TissueParams {
    pub saturation_min: f64,
    pub value_min: f64,
    pub value_max: f64,
    /// Side of the square structuring element, in mask cells. Must be odd.
    pub morph_size: usize,
    pub min_component_cells: usize,
}

impl Default for TissueParams {
    fn default() -> Self {
        Self {
            saturation_min: 0.07,
            value_min: 0.05,
            value_max: 0.98,
            morph_size: 3,
            min_component_cells: 64,
        }
    }
}

/// Row-major boolean grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryGrid {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<bool>,
}

impl BinaryGrid {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            cells: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut cells = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                cells.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            cells,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.cells[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|c| **c).count()
    }

    /// True when every set cell of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryGrid) -> bool {
        self.cells.len() == other.cells.len()
            && self.cells.iter().zip(&other.cells).all(|(a, b)| !*a || *b)
    }

    /// Summed-area table with one row and column of zero padding.
    pub(crate) fn integral(&self) -> Vec<u64> {
        let (w, h) = (self.width, self.height);
        let mut sat = vec![0u64; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0u64;
            for x in 0..w {
                row += u64::from(self.cells[y * w + x]);
                sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
            }
        }
        sat
    }

    fn window_counts(&self, radius: usize) -> (Vec<u64>, Vec<u64>) {
        let (w, h) = (self.width, self.height);
        let sat = self.integral();
        let mut set = Vec::with_capacity(w * h);
        let mut area = Vec::with_capacity(w * h);
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(radius), (y + radius + 1).min(h));
            for x in 0..w {
                let (x0, x1) = (x.saturating_sub(radius), (x + radius + 1).min(w));
                let s = sat[y1 * (w + 1) + x1] + sat[y0 * (w + 1) + x0]
                    - sat[y0 * (w + 1) + x1]
                    - sat[y1 * (w + 1) + x0];
                set.push(s);
                area.push(((y1 - y0) * (x1 - x0)) as u64);
            }
        }
        (set, area)
    }

    /// Out-of-bounds cells count as background.
    pub fn dilate(&self, size: usize) -> BinaryGrid {
        let (set, _) = self.window_counts(size / 2);
        BinaryGrid {
            width: self.width,
            height: self.height,
            cells: set.into_iter().map(|s| s > 0).collect(),
        }
    }

    /// Out-of-bounds cells are ignored, so the slide border does not erode.
    pub fn erode(&self, size: usize) -> BinaryGrid {
        let (set, area) = self.window_counts(size / 2);
        BinaryGrid {
            width: self.width,
            height: self.height,
            cells: set.into_iter().zip(area).map(|(s, a)| s == a).collect(),
        }
    }

    pub fn close(&self, size: usize) -> BinaryGrid {
        self.dilate(size).erode(size)
    }

    pub fn open(&self, size: usize) -> BinaryGrid {
        self.erode(size).dilate(size)
    }

    /// Clears 8-connected components with fewer than `min_cells` cells.
    pub fn drop_small_components(&self, min_cells: usize) -> BinaryGrid {
        let (w, h) = (self.width, self.height);
        let mut out = self.clone();
        let mut seen = vec![false; w * h];
        let mut stack = Vec::new();
        let mut component = Vec::new();
        for start in 0..w * h {
            if !self.cells[start] || seen[start] {
                continue;
            }
            seen[start] = true;
            stack.push(start);
            component.clear();
            while let Some(i) = stack.pop() {
                component.push(i);
                let (x, y) = (i % w, i / w);
                for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        let j = ny * w + nx;
                        if self.cells[j] && !seen[j] {
                            seen[j] = true;
                            stack.push(j);
                        }
                    }
                }
            }
            if component.len() < min_cells {
                for &i in &component {
                    out.cells[i] = false;
                }
            }
        }
        out
    }
}

/// Binary tissue map at 5x.
#[derive(Debug, Clone, PartialEq)]
pub struct TissueMask {
    pub grid: BinaryGrid,
    pub scale_magnification: f64,
}

/// Intermediate masks, each a subset-or-neighbour of the previous one.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskStages {
    pub candidate: BinaryGrid,
    pub morphed: BinaryGrid,
    pub filtered: BinaryGrid,
}

/// HSV saturation and value of an 8-bit RGB pixel, both in [0, 1].
fn saturation_value(p: [u8; 3]) -> (f64, f64) {
    let max = p.iter().copied().max().unwrap_or(0);
    let min = p.iter().copied().min().unwrap_or(0);
    let v = f64::from(max) / 255.0;
    let s = if max == 0 {
        0.0
    } else {
        f64::from(max - min) / f64::from(max)
    };
    (s, v)
}

fn mask_image(slide: &SlidePyramid) -> Result<RgbImage, SlideError> {
    let (w, h) = slide.dims_at(MASK_MAGNIFICATION);
    if w == 0 || h == 0 {
        return Err(SlideError::ZeroArea);
    }
    if let Some(level) = slide.level(MASK_MAGNIFICATION) {
        return level.read_region(0, 0, level.width, level.height);
    }
    let src = slide.source_level_for(MASK_MAGNIFICATION);
    let full = src.read_region(0, 0, src.width, src.height)?;
    Ok(imageops::resize(&full, w, h, imageops::FilterType::Triangle))
}

/// Stage-1 candidate set of an RGB image.
pub fn hsv_candidates(img: &RgbImage, params: &TissueParams) -> BinaryGrid {
    let (w, h) = (img.width() as usize, img.height() as usize);
    BinaryGrid {
        width: w,
        height: h,
        cells: img
            .pixels()
            .map(|p| {
                let (s, v) = saturation_value(p.0);
                s >= params.saturation_min && v >= params.value_min && v <= params.value_max
            })
            .collect(),
    }
}

pub fn tissue_mask_stages(slide: &SlidePyramid, params: &TissueParams) -> Result<MaskStages, SlideError> {
    if params.morph_size % 2 == 0 {
        return Err(SlideError::Invalid(format!(
            "morph_size must be odd, got {}",
            params.morph_size
        )));
    }
    let img = mask_image(slide)?;
    let candidate = hsv_candidates(&img, params);
    let morphed = candidate.close(params.morph_size).open(params.morph_size);
    let filtered = morphed.drop_small_components(params.min_component_cells);
    Ok(MaskStages {
        candidate,
        morphed,
        filtered,
    })
}

/// Tissue mask at 5x; a 5x level is synthesised from the nearest level when
/// the slide has none.
pub fn tissue_mask(slide: &SlidePyramid, params: &TissueParams) -> Result<TissueMask, SlideError> {
    Ok(TissueMask {
        grid: tissue_mask_stages(slide, params)?.filtered,
        scale_magnification: MASK_MAGNIFICATION,
    })
}
