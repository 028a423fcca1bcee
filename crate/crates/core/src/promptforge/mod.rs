//! Prompt rendering and reply parsing.
//!
//! Templates are fixed text fixtures (see [`TemplateStore`]); renderers bind
//! slots and interleave image parts. Parsers turn free-text model replies
//! into typed answers and return [`ParseMiss`] rather than failing.

mod parse;
mod render;
mod templates;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use parse::{
    parse_bboxes, parse_choice, parse_diagnosis_choice, parse_final_answer, parse_lab_entries,
    parse_temporal, parse_yes_no, BBoxParse, ListParse, ParseMiss,
};
pub use render::{
    render, render_ehrnoteqa_prompt, render_lab_prompt, render_localization_prompt,
    render_temporal_prompt, render_text_mcq_prompt, render_volume_prompt,
    render_volume_prompt_refs, render_wsi_prompt, render_wsi_prompt_refs, ImageRef, LabeledImage,
    Part, RenderOptions, RenderedPrompt, VolumePrompt,
};
pub use templates::{
    pinned_digests, segments, PromptTemplate, Segment, TemplateError, TemplateId, TemplateStore,
};

/// Normalized box `[y0, x0, y1, x1]` with a free-text label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub label: String,
    pub y0: f64,
    pub x0: f64,
    pub y1: f64,
    pub x1: f64,
}

impl BBox {
    /// Clamps into the unit square and sorts each axis pair.
    pub fn normalized(label: impl Into<String>, coords: [f64; 4]) -> Self {
        let c = coords.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        Self {
            label: label.into(),
            y0: c[0].min(c[2]),
            x0: c[1].min(c[3]),
            y1: c[0].max(c[2]),
            x1: c[1].max(c[3]),
        }
    }

    pub fn is_valid(&self) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        [self.y0, self.x0, self.y1, self.x1].into_iter().all(unit)
            && self.y0 <= self.y1
            && self.x0 <= self.x1
    }

    pub fn area(&self) -> f64 {
        (self.y1 - self.y0).max(0.0) * (self.x1 - self.x0).max(0.0)
    }
}

/// One row of a lab report.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabTestEntry {
    pub name: String,
    pub result: String,
    pub unit: String,
    pub range: String,
    pub panel: String,
    pub method: String,
    pub specimen: String,
    pub sample_collection_time: String,
}

impl LabTestEntry {
    pub const FIELDS: [&'static str; 8] = [
        "name",
        "result",
        "unit",
        "range",
        "panel",
        "method",
        "specimen",
        "sample_collection_time",
    ];

    pub fn field(&self, name: &str) -> Option<&str> {
        Some(match name {
            "name" => &self.name,
            "result" => &self.result,
            "unit" => &self.unit,
            "range" => &self.range,
            "panel" => &self.panel,
            "method" => &self.method,
            "specimen" => &self.specimen,
            "sample_collection_time" => &self.sample_collection_time,
            _ => return None,
        })
    }

    pub fn field_mut(&mut self, name: &str) -> Option<&mut String> {
        Some(match name {
            "name" => &mut self.name,
            "result" => &mut self.result,
            "unit" => &mut self.unit,
            "range" => &mut self.range,
            "panel" => &mut self.panel,
            "method" => &mut self.method,
            "specimen" => &mut self.specimen,
            "sample_collection_time" => &mut self.sample_collection_time,
            _ => return None,
        })
    }

    /// True when the collection time is empty or `DD-MM-YYYY HH:MM:SS`.
    pub fn time_is_well_formed(&self) -> bool {
        let t = self.sample_collection_time.as_bytes();
        if t.is_empty() {
            return true;
        }
        const PATTERN: &[u8] = b"00-00-0000 00:00:00";
        t.len() == PATTERN.len()
            && t.iter().zip(PATTERN).all(|(c, p)| match p {
                b'0' => c.is_ascii_digit(),
                sep => c == sep,
            })
    }
}

/// Change of a finding between two radiographs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalClass {
    Improved,
    Stable,
    Worsened,
}

impl TemporalClass {
    pub const ALL: [TemporalClass; 3] = [Self::Improved, Self::Stable, Self::Worsened];
}

impl fmt::Display for TemporalClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Improved => "improved",
            Self::Stable => "stable",
            Self::Worsened => "worsened",
        })
    }
}

impl FromStr for TemporalClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "improved" => Ok(Self::Improved),
            "stable" => Ok(Self::Stable),
            "worsened" => Ok(Self::Worsened),
            _ => Err(format!("unknown temporal class {s:?}")),
        }
    }
}

/// Typed answer extracted from a reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Answer {
    YesNo(bool),
    Choice(char),
    FreeText(String),
    BBoxes(Vec<BBox>),
    LabEntries(Vec<LabTestEntry>),
    Temporal(TemporalClass),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedAnswer {
    pub answer: Answer,
    pub raw_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Models that take no system instruction.
    Medgemma,
    /// Any other model; gets a generic assistant instruction.
    General,
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "medgemma" => Ok(Self::Medgemma),
            "general" => Ok(Self::General),
            _ => Err(format!("unknown model kind {s:?} (expected medgemma or general)")),
        }
    }
}

macro_rules! benchmarks {
    ($($variant:ident => $name:literal),* $(,)?) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum Benchmark { $(#[serde(rename = $name)] $variant),* }

        impl Benchmark {
            pub const ALL: &'static [Benchmark] = &[$(Benchmark::$variant),*];

            pub fn name(self) -> &'static str {
                match self { $(Benchmark::$variant => $name),* }
            }
        }
    };
}

benchmarks! {
    MedQa => "medqa",
    MedMcqa => "medmcqa",
    PubMedQa => "pubmedqa",
    MmluMed => "mmlu_med",
    MedXpertQaText => "medxpertqa_text",
    AfriMedQa => "afrimed_qa",
    EhrNoteQa => "ehrnoteqa",
    MsCxrT => "ms_cxr_t",
    SlakeVqa => "slake_vqa",
    VqaRad => "vqa_rad",
    Localization => "localization",
    PathologyWsi => "pathology_wsi",
    DermMcqa => "derm_mcqa",
    EyePacs => "eyepacs",
    LabExtraction => "lab_extraction",
    CtClassification => "ct_classification",
    MrClassification => "mr_classification",
    CtRate => "ct_rate",
    Other => "other",
}

impl Benchmark {
    /// Radiology and chest X-ray interpretation tasks.
    pub fn is_radiology(self) -> bool {
        matches!(self, Self::MsCxrT | Self::SlakeVqa | Self::VqaRad | Self::Localization)
    }

    /// Text benchmarks run with thinking enabled.
    pub fn thinking_by_default(self) -> bool {
        matches!(
            self,
            Self::MedQa
                | Self::MedMcqa
                | Self::EhrNoteQa
                | Self::PubMedQa
                | Self::MmluMed
                | Self::MedXpertQaText
                | Self::AfriMedQa
        )
    }
}

impl fmt::Display for Benchmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Benchmark {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Benchmark::ALL
            .iter()
            .copied()
            .find(|b| b.name() == s)
            .ok_or_else(|| format!("unknown benchmark {s:?}"))
    }
}

/// System instruction for a model/benchmark pair. General models always get
/// one; thinking is only switched on for the model family that lacks one.
pub fn resolve_system_text(
    store: &TemplateStore,
    model: ModelKind,
    benchmark: Benchmark,
    thinking: bool,
) -> Option<String> {
    let body = |id| store.get(id).body.clone();
    match model {
        ModelKind::Medgemma if thinking => Some(body(TemplateId::SystemThink)),
        ModelKind::Medgemma => None,
        ModelKind::General if benchmark.is_radiology() => Some(body(TemplateId::SystemRadiology)),
        ModelKind::General => Some(body(TemplateId::SystemMedical)),
    }
}
