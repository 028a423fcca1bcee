//! Prompt template fixtures and their digest check.
//!
//! Each template is a text file under `templates/`. `{slot}` marks a value
//! substituted at render time; `{image}` / `{images}` mark where image parts
//! go. Every file is pinned by `templates/DIGESTS` (sha256sum format) and a
//! store refuses to load if any file disagrees with it.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_hex;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template {file}: digest {found} does not match pinned {expected}")]
    DigestMismatch {
        file: String,
        expected: String,
        found: String,
    },
    #[error("template {0} has no pinned digest")]
    Unpinned(String),
    #[error("template {file}: {reason}")]
    Unreadable { file: String, reason: String },
    #[error("template {template}: slot {slot:?} is not bound")]
    UnboundSlot { template: TemplateId, slot: String },
    #[error("template {template}: {reason}")]
    Render { template: TemplateId, reason: String },
}

macro_rules! templates {
    ($($variant:ident => $file:literal),* $(,)?) => {
        /// Every shipped template.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum TemplateId { $($variant),* }

        impl TemplateId {
            pub const ALL: &'static [TemplateId] = &[$(TemplateId::$variant),*];

            pub fn file_name(self) -> &'static str {
                match self { $(TemplateId::$variant => concat!($file, ".txt")),* }
            }

            pub fn name(self) -> &'static str {
                match self { $(TemplateId::$variant => $file),* }
            }

            fn builtin_text(self) -> &'static str {
                match self {
                    $(TemplateId::$variant => include_str!(concat!("../../templates/", $file, ".txt"))),*
                }
            }
        }
    };
}

templates! {
    TextMcq => "text_mcq",
    BinarizedMcq => "binarized_mcq",
    SlakeVqa => "slake_vqa",
    VqaRad => "vqa_rad",
    PathologyWsi => "pathology_wsi",
    DermMcqa => "derm_mcqa",
    EyePacs => "eyepacs",
    EhrNoteQa => "ehrnoteqa",
    LabExtraction => "lab_extraction",
    Localization => "localization",
    CtUs1 => "ct_us1",
    MriUs1 => "mri_us1",
    CtRate => "ct_rate",
    TemporalCxr => "temporal_cxr",
    SystemRadiology => "system_radiology",
    SystemMedical => "system_medical",
    SystemThink => "system_think",
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TemplateId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .iter()
            .copied()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown template {s:?}"))
    }
}

const PINNED_DIGESTS: &str = include_str!("../../templates/DIGESTS");

/// `file name → sha256` from the checked-in digest list.
pub fn pinned_digests() -> BTreeMap<String, String> {
    PINNED_DIGESTS
        .lines()
        .filter_map(|l| {
            let (digest, file) = l.split_once("  ")?;
            Some((file.trim().to_string(), digest.trim().to_string()))
        })
        .collect()
}

/// Piece of a template body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment<'a> {
    Literal(&'a str),
    Slot(&'a str),
}

fn is_slot_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Splits a body into literals and `{slot}` references. Braces that do not
/// enclose a slot name stay literal.
pub fn segments(body: &str) -> Vec<Segment<'_>> {
    let mut out = Vec::new();
    let mut lit_start = 0;
    let mut i = 0;
    let bytes = body.as_bytes();
    while i < bytes.len() {
        if bytes[i] == b'{' {
            if let Some(len) = body[i + 1..].find('}') {
                let name = &body[i + 1..i + 1 + len];
                if is_slot_name(name) {
                    if lit_start < i {
                        out.push(Segment::Literal(&body[lit_start..i]));
                    }
                    out.push(Segment::Slot(name));
                    i += len + 2;
                    lit_start = i;
                    continue;
                }
            }
        }
        i += 1;
    }
    if lit_start < body.len() {
        out.push(Segment::Literal(&body[lit_start..]));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub body: String,
    pub digest: String,
}

impl PromptTemplate {
    /// Slot names in order of first appearance.
    pub fn slots(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for s in segments(&self.body) {
            if let Segment::Slot(name) = s {
                if !seen.contains(&name) {
                    seen.push(name);
                }
            }
        }
        seen
    }

    /// Renders every slot as its own `{name}` marker. Reproduces the fixture
    /// text exactly.
    pub fn render_placeholders(&self) -> String {
        segments(&self.body)
            .into_iter()
            .map(|s| match s {
                Segment::Literal(t) => t.to_string(),
                Segment::Slot(name) => format!("{{{name}}}"),
            })
            .collect()
    }
}

/// Verified set of all templates.
#[derive(Debug, Clone)]
pub struct TemplateStore {
    templates: BTreeMap<TemplateId, PromptTemplate>,
}

impl TemplateStore {
    fn from_texts(
        texts: impl IntoIterator<Item = (TemplateId, String)>,
    ) -> Result<Self, TemplateError> {
        let pinned = pinned_digests();
        let mut templates = BTreeMap::new();
        for (id, body) in texts {
            let file = id.file_name().to_string();
            let expected = pinned
                .get(&file)
                .ok_or_else(|| TemplateError::Unpinned(file.clone()))?;
            let found = sha256_hex(body.as_bytes());
            if &found != expected {
                return Err(TemplateError::DigestMismatch {
                    file,
                    expected: expected.clone(),
                    found,
                });
            }
            templates.insert(id, PromptTemplate { id, body, digest: found });
        }
        Ok(Self { templates })
    }

    /// Templates compiled into the crate, verified once per process.
    pub fn builtin() -> Result<&'static TemplateStore, TemplateError> {
        static STORE: OnceLock<Result<TemplateStore, TemplateError>> = OnceLock::new();
        STORE
            .get_or_init(|| {
                Self::from_texts(
                    TemplateId::ALL
                        .iter()
                        .map(|id| (*id, id.builtin_text().to_string())),
                )
            })
            .as_ref()
            .map_err(Clone::clone)
    }

    /// Loads templates from a directory of fixture files, checking each one
    /// against the pinned digests.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut texts = Vec::new();
        for id in TemplateId::ALL {
            let path = dir.join(id.file_name());
            let body = std::fs::read_to_string(&path).map_err(|e| TemplateError::Unreadable {
                file: id.file_name().to_string(),
                reason: e.to_string(),
            })?;
            texts.push((*id, body));
        }
        Self::from_texts(texts)
    }

    pub fn get(&self, id: TemplateId) -> &PromptTemplate {
        &self.templates[&id]
    }

    /// `template name → digest`, for run metadata.
    pub fn digests(&self) -> BTreeMap<String, String> {
        self.templates
            .values()
            .map(|t| (t.id.name().to_string(), t.digest.clone()))
            .collect()
    }
}
