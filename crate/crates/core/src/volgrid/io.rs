//! Raw volume input and PNG sequence output.
//!
//! A study directory holds one `<name>.meta` sidecar per volume next to the
//! little-endian voxel file it describes (`<name>.raw` unless the sidecar
//! names another file with `data:`). Sidecars are `key: value` lines; `#`
//! starts a comment.
//!
//! | key                 | value                                             |
//! |---------------------|---------------------------------------------------|
//! | `series_id`         | opaque identifier, unique within the study        |
//! | `modality`          | `CT` or `MR`                                      |
//! | `dims`              | `width height n_slices`                           |
//! | `spacing`           | `x_mm y_mm`                                       |
//! | `thickness`         | one value for all slices, or one per slice        |
//! | `orientation`       | `AXIAL`, `SAGITTAL`, `CORONAL` or `OTHER`         |
//! | `dtype`             | `uint8 int8 uint16 int16 uint32 int32 float32 float64` |
//! | `rescale_slope`     | optional, default 1                               |
//! | `rescale_intercept` | optional, default 0                               |
//! | `data`              | optional raw file name                            |
//!
//! Voxels are stored x-fastest, then y, then z.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Modality, Orientation, SliceSequence, VolumeError, VoxelVolume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RawDType {
    Uint8,
    Int8,
    Uint16,
    Int16,
    Uint32,
    Int32,
    Float32,
    Float64,
}

impl RawDType {
    pub fn size(self) -> usize {
        match self {
            RawDType::Uint8 | RawDType::Int8 => 1,
            RawDType::Uint16 | RawDType::Int16 => 2,
            RawDType::Uint32 | RawDType::Int32 | RawDType::Float32 => 4,
            RawDType::Float64 => 8,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s.to_ascii_lowercase().as_str() {
            "uint8" | "u8" => RawDType::Uint8,
            "int8" | "i8" => RawDType::Int8,
            "uint16" | "u16" => RawDType::Uint16,
            "int16" | "i16" => RawDType::Int16,
            "uint32" | "u32" => RawDType::Uint32,
            "int32" | "i32" => RawDType::Int32,
            "float32" | "f32" => RawDType::Float32,
            "float64" | "f64" => RawDType::Float64,
            _ => return None,
        })
    }
}

/// Parsed sidecar metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Sidecar {
    pub series_id: String,
    pub modality: Modality,
    pub dims: (usize, usize, usize),
    pub spacing_mm: (f64, f64),
    pub slice_thickness_mm: Vec<f64>,
    pub orientation: Orientation,
    pub dtype: RawDType,
    pub rescale_slope: f64,
    pub rescale_intercept: f64,
    pub data_file: Option<String>,
}

fn sidecar_err(line: usize, msg: impl std::fmt::Display) -> VolumeError {
    VolumeError::Sidecar(format!("line {line}: {msg}"))
}

fn numbers<T: std::str::FromStr>(value: &str, line: usize, key: &str) -> Result<Vec<T>, VolumeError> {
    value
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>()
                .map_err(|_| sidecar_err(line, format!("{key}: {s:?} is not a number")))
        })
        .collect()
}

/// Parses sidecar text.
pub fn parse_sidecar(text: &str) -> Result<Sidecar, VolumeError> {
    let mut series_id = None;
    let mut modality = None;
    let mut dims = None;
    let mut spacing = None;
    let mut thickness: Option<Vec<f64>> = None;
    let mut orientation = None;
    let mut dtype = None;
    let mut slope = None;
    let mut intercept = None;
    let mut data_file = None;

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| sidecar_err(lineno, "expected `key: value`"))?;
        let key = key.trim().to_ascii_lowercase();
        let value = value.trim();
        macro_rules! set_once {
            ($slot:ident, $v:expr) => {{
                if $slot.is_some() {
                    return Err(sidecar_err(lineno, format!("duplicate key {key:?}")));
                }
                $slot = Some($v);
            }};
        }
        match key.as_str() {
            "series_id" => {
                if value.is_empty() {
                    return Err(sidecar_err(lineno, "series_id is empty"));
                }
                set_once!(series_id, value.to_string())
            }
            "modality" => {
                let m = match value.to_ascii_uppercase().as_str() {
                    "CT" => Modality::Ct,
                    "MR" | "MRI" => Modality::Mr,
                    other => return Err(sidecar_err(lineno, format!("unknown modality {other:?}"))),
                };
                set_once!(modality, m)
            }
            "dims" => {
                let v: Vec<usize> = numbers(value, lineno, "dims")?;
                if v.len() != 3 {
                    return Err(sidecar_err(lineno, "dims needs width height n_slices"));
                }
                set_once!(dims, (v[0], v[1], v[2]))
            }
            "spacing" => {
                let v: Vec<f64> = numbers(value, lineno, "spacing")?;
                if v.len() != 2 {
                    return Err(sidecar_err(lineno, "spacing needs x_mm y_mm"));
                }
                set_once!(spacing, (v[0], v[1]))
            }
            "thickness" => {
                let v: Vec<f64> = numbers(value, lineno, "thickness")?;
                if v.is_empty() {
                    return Err(sidecar_err(lineno, "thickness is empty"));
                }
                set_once!(thickness, v)
            }
            "orientation" => {
                let o = match value.to_ascii_uppercase().as_str() {
                    "AXIAL" => Orientation::Axial,
                    "SAGITTAL" => Orientation::Sagittal,
                    "CORONAL" => Orientation::Coronal,
                    "OTHER" => Orientation::Other,
                    other => {
                        return Err(sidecar_err(lineno, format!("unknown orientation {other:?}")))
                    }
                };
                set_once!(orientation, o)
            }
            "dtype" => {
                let d = RawDType::parse(value)
                    .ok_or_else(|| sidecar_err(lineno, format!("unknown dtype {value:?}")))?;
                set_once!(dtype, d)
            }
            "rescale_slope" | "rescale_intercept" => {
                let v: f64 = value
                    .parse()
                    .ok()
                    .filter(|v: &f64| v.is_finite())
                    .ok_or_else(|| sidecar_err(lineno, format!("{key}: {value:?} is not a number")))?;
                if key == "rescale_slope" {
                    set_once!(slope, v)
                } else {
                    set_once!(intercept, v)
                }
            }
            "data" => set_once!(data_file, value.to_string()),
            _ => return Err(sidecar_err(lineno, format!("unknown key {key:?}"))),
        }
    }

    let missing = |k: &str| VolumeError::Sidecar(format!("missing key {k:?}"));
    let dims = dims.ok_or_else(|| missing("dims"))?;
    let mut thickness = thickness.ok_or_else(|| missing("thickness"))?;
    if thickness.len() == 1 && dims.2 > 1 {
        thickness = vec![thickness[0]; dims.2];
    }
    if thickness.len() != dims.2 {
        return Err(VolumeError::Sidecar(format!(
            "thickness lists {} values for {} slices",
            thickness.len(),
            dims.2
        )));
    }
    Ok(Sidecar {
        series_id: series_id.ok_or_else(|| missing("series_id"))?,
        modality: modality.ok_or_else(|| missing("modality"))?,
        dims,
        spacing_mm: spacing.ok_or_else(|| missing("spacing"))?,
        slice_thickness_mm: thickness,
        orientation: orientation.ok_or_else(|| missing("orientation"))?,
        dtype: dtype.ok_or_else(|| missing("dtype"))?,
        rescale_slope: slope.unwrap_or(1.0),
        rescale_intercept: intercept.unwrap_or(0.0),
        data_file,
    })
}

/// Decodes raw little-endian voxels described by `meta` into a volume.
pub fn decode_raw(meta: &Sidecar, bytes: &[u8]) -> Result<VoxelVolume, VolumeError> {
    let (w, h, n) = meta.dims;
    let count = w
        .checked_mul(h)
        .and_then(|v| v.checked_mul(n))
        .ok_or_else(|| VolumeError::Raw("dimensions overflow".into()))?;
    let size = meta.dtype.size();
    let expected = count
        .checked_mul(size)
        .ok_or_else(|| VolumeError::Raw("dimensions overflow".into()))?;
    if bytes.len() != expected {
        return Err(VolumeError::Raw(format!(
            "series {:?}: expected {expected} bytes for {w}×{h}×{n} {:?}, found {}",
            meta.series_id,
            meta.dtype,
            bytes.len()
        )));
    }
    let (slope, intercept) = (meta.rescale_slope, meta.rescale_intercept);
    let voxels = bytes
        .chunks_exact(size)
        .map(|c| {
            let v = match meta.dtype {
                RawDType::Uint8 => f64::from(c[0]),
                RawDType::Int8 => f64::from(c[0] as i8),
                RawDType::Uint16 => f64::from(u16::from_le_bytes([c[0], c[1]])),
                RawDType::Int16 => f64::from(i16::from_le_bytes([c[0], c[1]])),
                RawDType::Uint32 => f64::from(u32::from_le_bytes([c[0], c[1], c[2], c[3]])),
                RawDType::Int32 => f64::from(i32::from_le_bytes([c[0], c[1], c[2], c[3]])),
                RawDType::Float32 => f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
                RawDType::Float64 => f64::from_le_bytes(c.try_into().expect("chunk of 8")),
            };
            (v * slope + intercept) as f32
        })
        .collect();
    VoxelVolume::new(
        meta.series_id.clone(),
        meta.modality,
        meta.dims,
        meta.spacing_mm,
        meta.slice_thickness_mm.clone(),
        meta.orientation,
        voxels,
    )
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> VolumeError {
    VolumeError::Io(format!("{}: {e}", path.display()))
}

/// Loads every `*.meta` volume in `dir`, sorted by file name.
pub fn read_study(dir: &Path) -> Result<Vec<VoxelVolume>, VolumeError> {
    let mut metas: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "meta"))
        .collect();
    metas.sort();
    let mut out = Vec::with_capacity(metas.len());
    for meta_path in metas {
        let text = fs::read_to_string(&meta_path).map_err(|e| io_err(&meta_path, e))?;
        let meta = parse_sidecar(&text).map_err(|e| io_err(&meta_path, e))?;
        let raw_path = match &meta.data_file {
            Some(name) => dir.join(name),
            None => meta_path.with_extension("raw"),
        };
        let bytes = fs::read(&raw_path).map_err(|e| io_err(&raw_path, e))?;
        out.push(decode_raw(&meta, &bytes)?);
    }
    Ok(out)
}

/// One line of the sequence manifest written next to the PNGs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub study: String,
    pub modality: Modality,
    /// Paths relative to the output root, in sequence order.
    pub files: Vec<String>,
    pub global_indices: Vec<usize>,
    pub source_series: Vec<String>,
    pub token_count: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

pub(crate) fn file_component(s: &str) -> String {
    let cleaned: String = s
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
        .collect();
    if cleaned.is_empty() || cleaned.chars().all(|c| c == '.') {
        "_".to_string()
    } else {
        cleaned
    }
}

/// Writes `{out}/{study}/{seq:04}_{series_id}_{z:04}.png` for every entry
/// and `{out}/{study}/manifest.json`.
pub fn write_sequence(
    seq: &SliceSequence,
    study: &str,
    out_root: &Path,
) -> Result<SequenceManifest, VolumeError> {
    let study_dir_name = file_component(study);
    let study_dir = out_root.join(&study_dir_name);
    fs::create_dir_all(&study_dir).map_err(|e| io_err(&study_dir, e))?;
    let mut files = Vec::with_capacity(seq.len());
    for (i, entry) in seq.entries.iter().enumerate() {
        let name = format!(
            "{i:04}_{}_{:04}.png",
            file_component(&entry.series_id),
            entry.slice_index
        );
        let path = study_dir.join(&name);
        entry.image.save(&path).map_err(|e| io_err(&path, e))?;
        files.push(format!("{study_dir_name}/{name}"));
    }
    let manifest = SequenceManifest {
        study: study.to_string(),
        modality: seq.modality,
        files,
        global_indices: seq.entries.iter().map(|e| e.global_index).collect(),
        source_series: seq.source_series.clone(),
        token_count: seq.token_count(),
        warnings: seq.warnings.clone(),
    };
    let path = study_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| io_err(&path, e))?;
    Ok(manifest)
}
