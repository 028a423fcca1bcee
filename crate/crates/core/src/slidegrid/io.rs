//! Slide directories and patch output.
//!
//! A slide directory holds `slide.json` plus one PNG per pyramid level:
//!
//! ```json
//! {
//!   "slide_id": "S-001",
//!   "caption": "colon biopsy",
//!   "levels": [
//!     {"magnification": 20, "file": "20x.png"},
//!     {"magnification": 5, "file": "5x.png"}
//!   ]
//! }
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{format_magnification, Level, PatchSet, SlideError, SlidePyramid};
use crate::volgrid::file_component;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlideManifest {
    pub slide_id: String,
    #[serde(default)]
    pub caption: String,
    pub levels: Vec<LevelEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelEntry {
    pub magnification: f64,
    pub file: String,
}

pub fn parse_slide_manifest(text: &str) -> Result<SlideManifest, SlideError> {
    let m: SlideManifest = serde_json::from_str(text).map_err(|e| SlideError::Manifest(e.to_string()))?;
    if m.slide_id.trim().is_empty() {
        return Err(SlideError::Manifest("slide_id is empty".into()));
    }
    if m.levels.is_empty() {
        return Err(SlideError::Manifest("no levels listed".into()));
    }
    for l in &m.levels {
        if !l.magnification.is_finite() || l.magnification <= 0.0 {
            return Err(SlideError::Manifest(format!(
                "magnification must be positive, got {}",
                l.magnification
            )));
        }
        let p = Path::new(&l.file);
        if l.file.is_empty() || p.is_absolute() || p.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
            return Err(SlideError::Manifest(format!(
                "level file {:?} must be a relative path inside the slide directory",
                l.file
            )));
        }
    }
    Ok(m)
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> SlideError {
    SlideError::Io(format!("{}: {e}", path.display()))
}

/// Opens a slide directory. `dir` may also point at the `slide.json` file.
pub fn open_slide_dir(dir: &Path) -> Result<SlidePyramid, SlideError> {
    let (root, manifest_path) = if dir.is_file() {
        (dir.parent().unwrap_or(Path::new(".")).to_path_buf(), dir.to_path_buf())
    } else {
        (dir.to_path_buf(), dir.join("slide.json"))
    };
    let text = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let manifest = parse_slide_manifest(&text)?;
    let mut levels = Vec::with_capacity(manifest.levels.len());
    for l in &manifest.levels {
        let path = root.join(&l.file);
        let img = image::open(&path).map_err(|e| io_err(&path, e))?.to_rgb8();
        levels.push(Level::from_image(l.magnification, img));
    }
    SlidePyramid::new(manifest.slide_id, manifest.caption, levels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchEntry {
    pub row: u32,
    pub col: u32,
    pub file: String,
}

/// Written as `{slide_id}/manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchManifest {
    pub slide_id: String,
    pub magnification: f64,
    pub seed: u64,
    pub caption: String,
    pub cap: usize,
    pub patches: Vec<PatchEntry>,
    pub token_count: usize,
}

/// Writes `{out}/{slide_id}/{mag}x/{row:04}_{col:04}.png` and the manifest.
pub fn write_patchset(set: &PatchSet, seed: u64, out_root: &Path) -> Result<PatchManifest, SlideError> {
    let slide_dir = file_component(&set.slide_id);
    let mag_dir = format_magnification(set.magnification);
    let dir = out_root.join(&slide_dir).join(&mag_dir);
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let mut patches = Vec::with_capacity(set.len());
    for p in &set.patches {
        let name = format!("{:04}_{:04}.png", p.grid_row, p.grid_col);
        let path = dir.join(&name);
        fs::write(&path, &p.png).map_err(|e| io_err(&path, e))?;
        patches.push(PatchEntry {
            row: p.grid_row,
            col: p.grid_col,
            file: format!("{slide_dir}/{mag_dir}/{name}"),
        });
    }
    let manifest = PatchManifest {
        slide_id: set.slide_id.clone(),
        magnification: set.magnification,
        seed,
        caption: set.caption.clone(),
        cap: set.cap,
        patches,
        token_count: crate::vision_token_count(set.len()),
    };
    let path = out_root.join(&slide_dir).join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| io_err(&path, e))?;
    Ok(manifest)
}
