use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::templates::{segments, Segment, TemplateError, TemplateId, TemplateStore};
use crate::digest::{sha256_hex, FieldHasher};
use crate::slidegrid::PatchSet;
use crate::volgrid::{Modality, SliceSequence};

/// Where the bytes of one image part come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ImageRef {
    /// A prepared PNG on disk.
    Path(PathBuf),
    /// PNG bytes held in memory.
    Png(Arc<Vec<u8>>),
}

impl ImageRef {
    pub fn png(bytes: Vec<u8>) -> Self {
        ImageRef::Png(Arc::new(bytes))
    }

    /// PNG bytes, reading from disk for path references.
    pub fn load(&self) -> std::io::Result<Arc<Vec<u8>>> {
        match self {
            ImageRef::Path(p) => std::fs::read(p).map(Arc::new),
            ImageRef::Png(b) => Ok(Arc::clone(b)),
        }
    }

    /// Stable identity used in prompt digests.
    pub fn key(&self) -> String {
        match self {
            ImageRef::Path(p) => format!("path:{}", p.display()),
            ImageRef::Png(b) => format!("png:{}", sha256_hex(b)),
        }
    }
}

impl Serialize for ImageRef {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.key())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum Part {
    Text(String),
    Image(ImageRef),
}

/// A prompt ready to send: ordered text and image parts plus optional
/// system text.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RenderedPrompt {
    pub template: TemplateId,
    pub parts: Vec<Part>,
    pub system_text: Option<String>,
    pub temperature: f64,
}

impl RenderedPrompt {
    pub fn image_count(&self) -> usize {
        self.parts
            .iter()
            .filter(|p| matches!(p, Part::Image(_)))
            .count()
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageRef> {
        self.parts.iter().filter_map(|p| match p {
            Part::Image(r) => Some(r),
            Part::Text(_) => None,
        })
    }

    /// Concatenated text parts, with `<image>` standing in for images.
    pub fn flat_text(&self) -> String {
        self.parts
            .iter()
            .map(|p| match p {
                Part::Text(t) => t.as_str(),
                Part::Image(_) => "<image>",
            })
            .collect()
    }

    /// Digest over system text, temperature and every part.
    pub fn digest(&self) -> String {
        self.digest_with(ImageRef::key)
    }

    /// Like [`digest`](Self::digest) with a caller-chosen image identity,
    /// e.g. a path relative to a dataset root.
    pub fn digest_with(&self, image_key: impl Fn(&ImageRef) -> String) -> String {
        let mut h = FieldHasher::new();
        h.field("template", self.template.name().as_bytes());
        h.field("system", self.system_text.as_deref().unwrap_or("").as_bytes());
        h.field("temperature", &self.temperature.to_le_bytes());
        for p in &self.parts {
            match p {
                Part::Text(t) => h.field("text", t.as_bytes()),
                Part::Image(r) => h.field("image", image_key(r).as_bytes()),
            };
        }
        h.finish()
    }
}

/// An image together with the text label placed right before it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledImage {
    pub label: Option<String>,
    pub image: ImageRef,
}

impl LabeledImage {
    pub fn bare(image: ImageRef) -> Self {
        Self { label: None, image }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderOptions {
    /// Corrects known spelling slips in template text ("responce").
    pub fix_typos: bool,
    pub temperature: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            fix_typos: false,
            temperature: 0.0,
        }
    }
}

fn fix_typos(text: &str) -> String {
    text.replace("responce", "response")
}

/// Renders template `id`. `{image}` takes exactly one image, `{images}` one
/// or more; every other slot must be bound in `slots`.
pub fn render(
    store: &TemplateStore,
    id: TemplateId,
    slots: &BTreeMap<&str, &str>,
    images: &[LabeledImage],
    opts: &RenderOptions,
) -> Result<RenderedPrompt, TemplateError> {
    let template = store.get(id);
    let err = |reason: String| TemplateError::Render { template: id, reason };
    let mut parts = Vec::new();
    let mut text = String::new();
    let mut images_used = false;
    for seg in segments(&template.body) {
        match seg {
            Segment::Literal(t) if opts.fix_typos => text.push_str(&fix_typos(t)),
            Segment::Literal(t) => text.push_str(t),
            Segment::Slot(name @ ("image" | "images")) => {
                if images_used {
                    return Err(err("template has more than one image slot".into()));
                }
                images_used = true;
                if images.is_empty() {
                    return Err(err(format!("slot {{{name}}} needs at least one image")));
                }
                if name == "image" && images.len() != 1 {
                    return Err(err(format!("slot {{image}} takes one image, got {}", images.len())));
                }
                for img in images {
                    if let Some(label) = &img.label {
                        text.push_str(label);
                    }
                    if !text.is_empty() {
                        parts.push(Part::Text(std::mem::take(&mut text)));
                    }
                    parts.push(Part::Image(img.image.clone()));
                }
            }
            Segment::Slot(name) => {
                let value = slots.get(name).ok_or_else(|| TemplateError::UnboundSlot {
                    template: id,
                    slot: name.to_string(),
                })?;
                text.push_str(value);
            }
        }
    }
    if !images_used && !images.is_empty() {
        return Err(err(format!("template takes no images, got {}", images.len())));
    }
    if !text.is_empty() {
        parts.push(Part::Text(text));
    }
    if parts.is_empty() {
        return Err(err("rendered prompt is empty".into()));
    }
    Ok(RenderedPrompt {
        template: id,
        parts,
        system_text: None,
        temperature: opts.temperature,
    })
}

/// Which volumetric question format to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VolumePrompt {
    /// CT with patient history.
    CtHistory,
    /// MR with patient history.
    MrHistory,
    /// Chest CT without history.
    CtRate,
}

impl VolumePrompt {
    pub fn template(self) -> TemplateId {
        match self {
            VolumePrompt::CtHistory => TemplateId::CtUs1,
            VolumePrompt::MrHistory => TemplateId::MriUs1,
            VolumePrompt::CtRate => TemplateId::CtRate,
        }
    }

    pub fn modality(self) -> Modality {
        match self {
            VolumePrompt::MrHistory => Modality::Mr,
            VolumePrompt::CtHistory | VolumePrompt::CtRate => Modality::Ct,
        }
    }
}

/// Volume prompt over already-prepared slice images: `SLICE {i}` before each
/// image, then the question.
pub fn render_volume_prompt_refs(
    store: &TemplateStore,
    slices: &[(usize, ImageRef)],
    history: &str,
    condition_label: &str,
    variant: VolumePrompt,
    opts: &RenderOptions,
) -> Result<RenderedPrompt, TemplateError> {
    let id = variant.template();
    if slices.is_empty() {
        return Err(TemplateError::Render {
            template: id,
            reason: "volume prompt needs at least one slice".into(),
        });
    }
    if variant != VolumePrompt::CtRate && history.trim().is_empty() {
        return Err(TemplateError::Render {
            template: id,
            reason: "patient history is required for this template".into(),
        });
    }
    let images: Vec<LabeledImage> = slices
        .iter()
        .map(|(i, r)| LabeledImage {
            label: Some(format!("SLICE {i}")),
            image: r.clone(),
        })
        .collect();
    let slots = BTreeMap::from([("history", history), ("label", condition_label)]);
    render(store, id, &slots, &images, opts)
}

/// Volume prompt for an in-memory slice sequence.
pub fn render_volume_prompt(
    store: &TemplateStore,
    seq: &SliceSequence,
    history: &str,
    condition_label: &str,
    variant: VolumePrompt,
    opts: &RenderOptions,
) -> Result<RenderedPrompt, TemplateError> {
    let id = variant.template();
    if seq.modality != variant.modality() {
        return Err(TemplateError::Render {
            template: id,
            reason: format!("{} sequence cannot use a {} template", seq.modality, variant.modality()),
        });
    }
    let slices = seq
        .entries
        .iter()
        .map(|e| {
            crate::encode_png(&e.image)
                .map(|png| (e.global_index, ImageRef::png(png)))
                .map_err(|reason| TemplateError::Render { template: id, reason })
        })
        .collect::<Result<Vec<_>, _>>()?;
    render_volume_prompt_refs(store, &slices, history, condition_label, variant, opts)
}

/// Pathology prompt over prepared patch images.
pub fn render_wsi_prompt_refs(
    store: &TemplateStore,
    patches: &[ImageRef],
    type_procedure: &str,
    question: &str,
    opts: &RenderOptions,
) -> Result<RenderedPrompt, TemplateError> {
    if patches.is_empty() {
        return Err(TemplateError::Render {
            template: TemplateId::PathologyWsi,
            reason: "patch set is empty".into(),
        });
    }
    let images: Vec<LabeledImage> = patches.iter().cloned().map(LabeledImage::bare).collect();
    let slots = BTreeMap::from([("type_procedure", type_procedure), ("question", question)]);
    render(store, TemplateId::PathologyWsi, &slots, &images, opts)
}

/// Pathology prompt for a patch set; `type_procedure` falls back to the
/// slide caption.
pub fn render_wsi_prompt(
    store: &TemplateStore,
    patchset: &PatchSet,
    type_procedure: Option<&str>,
    opts: &RenderOptions,
) -> Result<RenderedPrompt, TemplateError> {
    let refs: Vec<ImageRef> = patchset
        .patches
        .iter()
        .map(|p| ImageRef::png(p.png.clone()))
        .collect();
    let label = type_procedure.unwrap_or(&patchset.caption);
    render_wsi_prompt_refs(store, &refs, label, "", opts)
}

pub fn render_localization_prompt(
    store: &TemplateStore,
    image: ImageRef,
    object: &str,
    opts: &RenderOptions,
) -> Result<RenderedPrompt, TemplateError> {
    render(
        store,
        TemplateId::Localization,
        &BTreeMap::from([("object", object)]),
        &[LabeledImage::bare(image)],
        opts,
    )
}

/// Prior and current radiographs, in that order.
pub fn render_temporal_prompt(
    store: &TemplateStore,
    prior: ImageRef,
    current: ImageRef,
    pathology: &str,
    opts: &RenderOptions,
) -> Result<RenderedPrompt, TemplateError> {
    render(
        store,
        TemplateId::TemporalCxr,
        &BTreeMap::from([("label", pathology)]),
        &[LabeledImage::bare(prior), LabeledImage::bare(current)],
        opts,
    )
}

pub fn render_lab_prompt(
    store: &TemplateStore,
    document: ImageRef,
    opts: &RenderOptions,
) -> Result<RenderedPrompt, TemplateError> {
    render(
        store,
        TemplateId::LabExtraction,
        &BTreeMap::new(),
        &[LabeledImage::bare(document)],
        opts,
    )
}

pub fn render_text_mcq_prompt(
    store: &TemplateStore,
    question: &str,
    opts: &RenderOptions,
) -> Result<RenderedPrompt, TemplateError> {
    render(
        store,
        TemplateId::TextMcq,
        &BTreeMap::from([("question", question)]),
        &[],
        opts,
    )
}

/// Discharge-note question with exactly five choices, A through E.
pub fn render_ehrnoteqa_prompt(
    store: &TemplateStore,
    discharge_note: &str,
    question: &str,
    choices: &[String],
    opts: &RenderOptions,
) -> Result<RenderedPrompt, TemplateError> {
    if choices.len() != 5 {
        return Err(TemplateError::Render {
            template: TemplateId::EhrNoteQa,
            reason: format!("expected 5 choices, got {}", choices.len()),
        });
    }
    let slots = BTreeMap::from([
        ("discharge_note", discharge_note),
        ("orig_question", question),
        ("choice_A", choices[0].as_str()),
        ("choice_B", choices[1].as_str()),
        ("choice_C", choices[2].as_str()),
        ("choice_D", choices[3].as_str()),
        ("choice_E", choices[4].as_str()),
    ]);
    render(store, TemplateId::EhrNoteQa, &slots, &[], opts)
}
