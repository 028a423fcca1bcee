use image::{imageops, RgbImage};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    grid_candidates, tissue_mask, GridCell, SlideConfig, SlideError, SlidePyramid, TissueMask,
    PATCH_SIZE,
};

const MAGNIFICATION_STREAM: u64 = 0;
const SUBSAMPLE_STREAM: u64 = 1;

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Probabilities of extracting at 5x, 10x and 20x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MagnificationDistribution {
    pub p5: f64,
    pub p10: f64,
    pub p20: f64,
}

impl Default for MagnificationDistribution {
    fn default() -> Self {
        Self {
            p5: 0.34,
            p10: 0.33,
            p20: 0.33,
        }
    }
}

impl MagnificationDistribution {
    pub fn validate(&self) -> Result<(), SlideError> {
        let ps = [self.p5, self.p10, self.p20];
        if ps.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(SlideError::Distribution(format!("negative or non-finite probability in {ps:?}")));
        }
        let sum: f64 = ps.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(SlideError::Distribution(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(())
    }
}

/// Draws one magnification from `rng`.
pub fn choose_magnification_with<R: Rng + ?Sized>(
    dist: &MagnificationDistribution,
    rng: &mut R,
) -> Result<f64, SlideError> {
    dist.validate()?;
    let u: f64 = rng.gen();
    let choices = [(5.0, dist.p5), (10.0, dist.p10), (20.0, dist.p20)];
    let mut acc = 0.0;
    for (mag, p) in choices {
        acc += p;
        if u < acc {
            return Ok(mag);
        }
    }
    // Rounding left `u` above the cumulative sum; fall back to the last
    // level with mass.
    Ok(choices
        .iter()
        .rev()
        .find(|(_, p)| *p > 0.0)
        .map(|(m, _)| *m)
        .expect("validated distribution has mass"))
}

/// Deterministic magnification choice for one slide.
pub fn choose_magnification(dist: &MagnificationDistribution, seed: u64) -> Result<f64, SlideError> {
    choose_magnification_with(dist, &mut seeded(seed, MAGNIFICATION_STREAM))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patch {
    pub grid_row: u32,
    pub grid_col: u32,
    /// 896×896 8-bit RGB PNG.
    #[serde(skip)]
    pub png: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSet {
    pub slide_id: String,
    pub magnification: f64,
    pub patches: Vec<Patch>,
    pub cap: usize,
    pub caption: String,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn cells(&self) -> Vec<GridCell> {
        self.patches
            .iter()
            .map(|p| GridCell {
                row: p.grid_row,
                col: p.grid_col,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchFailure {
    pub cell: GridCell,
    pub error: SlideError,
}

fn read_patch(slide: &SlidePyramid, cell: GridCell, mag: f64) -> Result<Vec<u8>, SlideError> {
    let (x, y) = (cell.col * PATCH_SIZE, cell.row * PATCH_SIZE);
    let region = slide.read_at(mag, x, y, PATCH_SIZE, PATCH_SIZE)?;
    let patch = if region.dimensions() == (PATCH_SIZE, PATCH_SIZE) {
        region
    } else {
        let mut canvas = RgbImage::new(PATCH_SIZE, PATCH_SIZE);
        imageops::replace(&mut canvas, &region, 0, 0);
        canvas
    };
    crate::encode_png(&patch).map_err(|reason| SlideError::Read {
        magnification: mag,
        x,
        y,
        w: PATCH_SIZE,
        h: PATCH_SIZE,
        reason,
    })
}

/// Reads and encodes one patch per candidate cell, in candidate order.
/// Partial edge patches are zero-padded; unreadable cells are skipped and
/// reported.
pub fn extract_patches(
    slide: &SlidePyramid,
    candidates: &[GridCell],
    target_mag: f64,
) -> Result<(PatchSet, Vec<PatchFailure>), SlideError> {
    if candidates.is_empty() {
        return Err(SlideError::NoCandidates);
    }
    let mut patches = Vec::with_capacity(candidates.len());
    let mut failures = Vec::new();
    for &cell in candidates {
        match read_patch(slide, cell, target_mag) {
            Ok(png) => patches.push(Patch {
                grid_row: cell.row,
                grid_col: cell.col,
                png,
            }),
            Err(error) => {
                log::warn!("slide {}: skipping patch {cell:?}: {error}", slide.slide_id);
                failures.push(PatchFailure { cell, error });
            }
        }
    }
    Ok((
        PatchSet {
            slide_id: slide.slide_id.clone(),
            magnification: target_mag,
            patches,
            cap: usize::MAX,
            caption: slide.caption.clone(),
        },
        failures,
    ))
}

/// Keeps at most `cap` patches chosen uniformly without replacement, in
/// their original order.
pub fn subsample_patches(mut set: PatchSet, cap: usize, seed: u64) -> PatchSet {
    set.cap = cap;
    if set.patches.len() <= cap {
        return set;
    }
    let mut picked = index::sample(&mut seeded(seed, SUBSAMPLE_STREAM), set.patches.len(), cap).into_vec();
    picked.sort_unstable();
    let mut keep = vec![false; set.patches.len()];
    for i in picked {
        keep[i] = true;
    }
    let mut flags = keep.into_iter();
    set.patches.retain(|_| flags.next().unwrap_or(false));
    set
}

/// Everything produced for one slide.
#[derive(Debug, Clone)]
pub struct SlidePrep {
    pub mask: TissueMask,
    pub magnification: f64,
    pub candidates: Vec<GridCell>,
    pub patches: PatchSet,
    pub failures: Vec<PatchFailure>,
    pub seed: u64,
}

/// Full slide pipeline. A slide without tissue yields an empty patch set.
pub fn prepare_slide(slide: &SlidePyramid, config: &SlideConfig, seed: u64) -> Result<SlidePrep, SlideError> {
    let mask = tissue_mask(slide, &config.tissue)?;
    let magnification = choose_magnification(&config.magnification, seed)?;
    let candidates = grid_candidates(&mask, magnification, config.grid_tissue_fraction);
    let (patches, failures) = if candidates.is_empty() {
        let empty = PatchSet {
            slide_id: slide.slide_id.clone(),
            magnification,
            patches: Vec::new(),
            cap: config.cap,
            caption: slide.caption.clone(),
        };
        (empty, Vec::new())
    } else {
        let (all, failures) = extract_patches(slide, &candidates, magnification)?;
        (subsample_patches(all, config.cap, seed), failures)
    };
    Ok(SlidePrep {
        mask,
        magnification,
        candidates,
        patches,
        failures,
        seed,
    })
}
