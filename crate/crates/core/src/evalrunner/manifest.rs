//! Line-delimited evaluation manifests.
//!
//! One JSON object per line. Paths are relative to the manifest's directory.
//! Blank lines and lines starting with `#` are skipped.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EvalError, TaskKind};
use crate::promptforge::{Benchmark, LabTestEntry, TemporalClass};
use crate::slidegrid::PatchManifest;
use crate::volgrid::SequenceManifest;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    /// Image files in prompt order: slices, patches, `[prior, current]`, or
    /// a single image.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<String>,
    /// Stacked-volume index of each slice image; defaults to `0..n`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slice_indices: Option<Vec<usize>>,
    /// A `manifest.json` written by volume preparation, used in place of
    /// `images`/`slice_indices`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sequence: Option<String>,
    /// A `manifest.json` written by slide preparation, used in place of
    /// `images`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patch_set: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub history: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub choices: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub object: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pathology: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub type_procedure: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub discharge_note: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Gold {
    /// Condition name to presence, for classification tasks.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub labels: BTreeMap<String, bool>,
    /// Normalized `[y0, x0, y1, x1]`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entries: Option<Vec<LabTestEntry>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub choice: Option<char>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temporal: Option<TemporalClass>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    /// Optional; when present it must equal [`MANIFEST_SCHEMA_VERSION`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema_version: Option<u32>,
    pub example_id: String,
    pub task_kind: TaskKind,
    #[serde(default)]
    pub inputs: Inputs,
    #[serde(default)]
    pub gold: Gold,
    /// Conditions to query, for classification tasks.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub conditions: Vec<String>,
    /// Benchmark name, which selects the system instruction and thinking
    /// default. Falls back to the task's usual benchmark.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benchmark: Option<Benchmark>,
}

impl ManifestRecord {
    pub fn benchmark(&self) -> Benchmark {
        self.benchmark.unwrap_or(self.task_kind.default_benchmark())
    }

    /// Checks that the gold and inputs match the task kind.
    pub fn validate(&self) -> Result<(), String> {
        let i = &self.inputs;
        let g = &self.gold;
        let need = |ok: bool, what: &str| if ok { Ok(()) } else { Err(what.to_string()) };
        need(!self.example_id.trim().is_empty(), "example_id is empty")?;
        if let Some(v) = self.schema_version {
            need(v == MANIFEST_SCHEMA_VERSION, &format!("unsupported schema_version {v}"))?;
        }
        match self.task_kind {
            TaskKind::CtCls | TaskKind::MrCls | TaskKind::CtrateCls => {
                need(!self.conditions.is_empty(), "conditions are required")?;
                let mut seen = BTreeSet::new();
                for c in &self.conditions {
                    need(seen.insert(c), &format!("condition {c:?} is listed twice"))?;
                    need(g.labels.contains_key(c), &format!("gold.labels has no entry for condition {c:?}"))?;
                }
                if self.task_kind != TaskKind::CtrateCls {
                    need(i.history.as_deref().is_some_and(|h| !h.trim().is_empty()), "inputs.history is required")?;
                }
                need(self.has_images(), "inputs.images or inputs.sequence is required")?;
                if let Some(ix) = &i.slice_indices {
                    need(ix.len() == i.images.len(), "inputs.slice_indices must match inputs.images in length")?;
                }
            }
            TaskKind::WsiReport => {
                need(g.reference.is_some(), "gold.reference is required")?;
                need(self.has_images(), "inputs.images or inputs.patch_set is required")?;
            }
            TaskKind::Temporal => {
                need(g.temporal.is_some(), "gold.temporal is required")?;
                need(i.pathology.is_some(), "inputs.pathology is required")?;
                need(i.images.len() == 2, "inputs.images must hold [prior, current]")?;
            }
            TaskKind::BboxLoc => {
                need(g.bbox.is_some(), "gold.bbox is required")?;
                need(i.object.is_some(), "inputs.object is required")?;
                need(i.images.len() == 1, "inputs.images must hold exactly one image")?;
                let b = g.bbox.unwrap_or_default();
                need(
                    b.iter().all(|v| (0.0..=1.0).contains(v)) && b[0] <= b[2] && b[1] <= b[3],
                    "gold.bbox must be a normalized [y0, x0, y1, x1]",
                )?;
            }
            TaskKind::LabExtract => {
                need(g.entries.is_some(), "gold.entries is required")?;
                need(i.images.len() == 1, "inputs.images must hold exactly one image")?;
            }
            TaskKind::TextMcq => {
                need(g.choice.is_some_and(|c| ('A'..='E').contains(&c)), "gold.choice must be a letter A-E")?;
                need(i.question.is_some(), "inputs.question is required")?;
            }
            TaskKind::EhrnoteMcq => {
                need(g.choice.is_some_and(|c| ('A'..='E').contains(&c)), "gold.choice must be a letter A-E")?;
                need(i.question.is_some(), "inputs.question is required")?;
                need(i.discharge_note.is_some(), "inputs.discharge_note is required")?;
                need(i.choices.len() == 5, "inputs.choices must hold five options")?;
            }
        }
        Ok(())
    }

    fn has_images(&self) -> bool {
        !self.inputs.images.is_empty() || self.inputs.sequence.is_some() || self.inputs.patch_set.is_some()
    }
}

/// Image paths of a record with everything resolved against the manifest
/// directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedImages {
    /// Paths as written in the manifest (or the preparation manifest),
    /// relative to `base`. Used for prompt digests.
    pub relative: Vec<String>,
    pub absolute: Vec<PathBuf>,
    pub slice_indices: Vec<usize>,
    /// Caption from a patch-set manifest, if one was referenced.
    pub caption: Option<String>,
}

/// A parsed manifest with its location.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub base_dir: PathBuf,
    pub records: Vec<ManifestRecord>,
    /// Resolved images, parallel to `records`.
    pub images: Vec<ResolvedImages>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn tasks(&self) -> BTreeSet<TaskKind> {
        self.records.iter().map(|r| r.task_kind).collect()
    }

    /// Keeps only records of `task`.
    pub fn filter_task(&self, task: TaskKind) -> Manifest {
        let (records, images) = self
            .records
            .iter()
            .zip(&self.images)
            .filter(|(r, _)| r.task_kind == task)
            .map(|(r, i)| (r.clone(), i.clone()))
            .unzip();
        Manifest { base_dir: self.base_dir.clone(), records, images }
    }
}

/// Preparation manifests live one directory below the output root that
/// their file paths are relative to.
fn prep_root(manifest_path: &str) -> &str {
    let dir = manifest_path.rsplit_once('/').map_or("", |(d, _)| d);
    dir.rsplit_once('/').map_or("", |(d, _)| d)
}

fn under(root: &str, file: &str) -> String {
    if root.is_empty() {
        file.to_string()
    } else {
        format!("{root}/{file}")
    }
}

fn check_relative(p: &str) -> Result<(), String> {
    let path = Path::new(p);
    if path.is_absolute() || path.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
        return Err(format!("path {p:?} must be relative and stay inside the manifest directory"));
    }
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn resolve_images(record: &ManifestRecord, base: &Path, check_files: bool) -> Result<ResolvedImages, String> {
    let i = &record.inputs;
    let mut caption = None;
    let (relative, slice_indices) = if let Some(seq) = &i.sequence {
        check_relative(seq)?;
        let m: SequenceManifest = read_json(&base.join(seq))?;
        let files = m.files.iter().map(|f| under(prep_root(seq), f)).collect();
        (files, m.global_indices)
    } else if let Some(ps) = &i.patch_set {
        check_relative(ps)?;
        let m: PatchManifest = read_json(&base.join(ps))?;
        caption = Some(m.caption);
        let files: Vec<String> = m.patches.iter().map(|p| under(prep_root(ps), &p.file)).collect();
        let n = files.len();
        (files, (0..n).collect())
    } else {
        let n = i.images.len();
        (i.images.clone(), i.slice_indices.clone().unwrap_or_else(|| (0..n).collect()))
    };
    if relative.len() != slice_indices.len() {
        return Err("slice indices do not match the image list".into());
    }
    let mut absolute = Vec::with_capacity(relative.len());
    for r in &relative {
        check_relative(r)?;
        let p = base.join(r);
        if check_files && !p.is_file() {
            return Err(format!("image {} does not exist", p.display()));
        }
        absolute.push(p);
    }
    Ok(ResolvedImages { relative, absolute, slice_indices, caption })
}

/// Parses manifest text. With `check_files`, every image must exist.
pub fn parse_manifest(text: &str, base_dir: &Path, check_files: bool) -> Result<Manifest, EvalError> {
    let mut records = Vec::new();
    let mut images = Vec::new();
    let mut ids = BTreeSet::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let bad = |reason: String| EvalError::Manifest { line: line_no, reason };
        let record: ManifestRecord = serde_json::from_str(trimmed).map_err(|e| bad(e.to_string()))?;
        record.validate().map_err(bad)?;
        if !ids.insert(record.example_id.clone()) {
            return Err(bad(format!("duplicate example_id {:?}", record.example_id)));
        }
        images.push(resolve_images(&record, base_dir, check_files).map_err(bad)?);
        records.push(record);
    }
    if records.is_empty() {
        return Err(EvalError::EmptyManifest);
    }
    Ok(Manifest { base_dir: base_dir.to_path_buf(), records, images })
}

pub fn load_manifest(path: &Path) -> Result<Manifest, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, &base, true)
}
