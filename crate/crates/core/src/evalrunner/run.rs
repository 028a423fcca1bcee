//! Task protocols: prompt rendering, model calls, parsing and scoring.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::endpoint::{CallContext, Endpoint};
use super::manifest::{Manifest, ManifestRecord, ResolvedImages};
use super::report::{
    compute_aggregates, sort_rows, EvalReport, ExampleRow, ExampleScore, RowError, RunMetadata,
    REPORT_SCHEMA_VERSION,
};
use super::{EvalError, TaskKind};
use crate::digest::{sha256_hex, FieldHasher};
use crate::medmetrics::{
    extraction_counts, iou, match_lab_entries, rouge_l, select_prediction, tokenize, MatcherConfig,
};
use crate::promptforge::{
    parse_bboxes, parse_choice, parse_lab_entries, parse_temporal, parse_yes_no, render_ehrnoteqa_prompt,
    render_lab_prompt, render_localization_prompt, render_temporal_prompt, render_text_mcq_prompt,
    render_volume_prompt_refs, render_wsi_prompt_refs, resolve_system_text, Answer, BBox, ImageRef,
    LabTestEntry, ModelKind, RenderOptions, RenderedPrompt, TemplateError, TemplateStore, TemporalClass,
    VolumePrompt,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub model_kind: ModelKind,
    /// Overrides each benchmark's thinking default when set.
    pub thinking: Option<bool>,
    pub render: RenderOptions,
    pub matcher: MatcherConfig,
    /// Upper bound on concurrent endpoint calls. Does not affect results.
    #[serde(skip)]
    pub max_in_flight: usize,
    pub seed: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            model_kind: ModelKind::Medgemma,
            thinking: None,
            render: RenderOptions::default(),
            matcher: MatcherConfig::default(),
            max_in_flight: 8,
            seed: 0,
        }
    }
}

impl RunOptions {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.max_in_flight == 0 {
            return Err(EvalError::InvalidOptions("max_in_flight must be at least 1".into()));
        }
        if !(self.render.temperature >= 0.0 && self.render.temperature.is_finite()) {
            return Err(EvalError::InvalidOptions(format!(
                "temperature must be a non-negative number, got {}",
                self.render.temperature
            )));
        }
        Ok(())
    }
}

/// Context echoed into report metadata.
#[derive(Debug, Clone, Default)]
pub struct RunContext {
    /// The parsed configuration in its serialized form.
    pub config: Value,
}

/// Execution facts that vary between identical runs; kept out of the
/// report so that report files stay byte-stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub elapsed_ms: u128,
    pub calls: usize,
    pub call_errors: usize,
    pub max_in_flight: usize,
}

/// One endpoint call to make.
#[derive(Debug, Clone)]
struct Job<'m> {
    record: &'m ManifestRecord,
    images: &'m ResolvedImages,
    condition: Option<&'m str>,
}

/// Runs `f` over `items` with at most `max_in_flight` calls active at once.
/// Results come back in input order.
pub fn run_bounded<T: Sync, R: Send>(items: &[T], max_in_flight: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = max_in_flight.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= items.len() {
                            break;
                        }
                        done.push((i, f(&items[i])));
                    }
                    done
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every item processed")).collect()
}

fn images_of(job: &Job<'_>) -> Vec<ImageRef> {
    job.images.absolute.iter().cloned().map(ImageRef::Path).collect()
}

fn volume_variant(task: TaskKind) -> VolumePrompt {
    match task {
        TaskKind::MrCls => VolumePrompt::MrHistory,
        TaskKind::CtrateCls => VolumePrompt::CtRate,
        _ => VolumePrompt::CtHistory,
    }
}

fn render_job(job: &Job<'_>, store: &TemplateStore, opts: &RunOptions) -> Result<RenderedPrompt, TemplateError> {
    let r = job.record;
    let i = &r.inputs;
    let text = |v: &Option<String>| v.clone().unwrap_or_default();
    let ro = &opts.render;
    let mut prompt = match r.task_kind {
        TaskKind::CtCls | TaskKind::MrCls | TaskKind::CtrateCls => {
            let slices: Vec<(usize, ImageRef)> = job.images.slice_indices.iter().copied().zip(images_of(job)).collect();
            render_volume_prompt_refs(store, &slices, &text(&i.history), job.condition.unwrap_or(""), volume_variant(r.task_kind), ro)?
        }
        TaskKind::WsiReport => {
            let label = i.type_procedure.clone().or_else(|| job.images.caption.clone()).unwrap_or_default();
            render_wsi_prompt_refs(store, &images_of(job), &label, &text(&i.question), ro)?
        }
        TaskKind::Temporal => {
            let imgs = images_of(job);
            render_temporal_prompt(store, imgs[0].clone(), imgs[1].clone(), &text(&i.pathology), ro)?
        }
        TaskKind::BboxLoc => render_localization_prompt(store, images_of(job).remove(0), &text(&i.object), ro)?,
        TaskKind::LabExtract => render_lab_prompt(store, images_of(job).remove(0), ro)?,
        TaskKind::TextMcq => render_text_mcq_prompt(store, &text(&i.question), ro)?,
        TaskKind::EhrnoteMcq => render_ehrnoteqa_prompt(store, &text(&i.discharge_note), &text(&i.question), &i.choices, ro)?,
    };
    let benchmark = r.benchmark();
    let thinking = opts.thinking.unwrap_or(benchmark.thinking_by_default());
    prompt.system_text = resolve_system_text(store, opts.model_kind, benchmark, thinking);
    Ok(prompt)
}

fn next_letter(c: char, last: char) -> char {
    if c >= last {
        'A'
    } else {
        (c as u8 + 1) as char
    }
}

fn temporal_letter(t: TemporalClass) -> char {
    match t {
        TemporalClass::Improved => 'A',
        TemporalClass::Stable => 'B',
        TemporalClass::Worsened => 'C',
    }
}

fn bbox_reply(label: &str, b: [f64; 4]) -> String {
    json!([{"label": label, "box_2d": b}]).to_string()
}

/// A token that does not occur in `reference`.
fn foreign_token(reference: &str) -> String {
    let tokens = tokenize(reference);
    (0..)
        .map(|i| format!("zzq{i}"))
        .find(|t| !tokens.contains(t))
        .expect("unbounded search")
}

/// Canonical best and worst replies for a job.
fn canonical_replies(job: &Job<'_>) -> (String, String) {
    let g = &job.record.gold;
    let fa = |s: &str| format!("Final Answer: {s}");
    match job.record.task_kind {
        TaskKind::CtCls | TaskKind::MrCls | TaskKind::CtrateCls => {
            let truth = job.condition.and_then(|c| g.labels.get(c)).copied().unwrap_or(false);
            let yn = |b: bool| if b { "yes" } else { "no" };
            (fa(yn(truth)), fa(yn(!truth)))
        }
        TaskKind::TextMcq | TaskKind::EhrnoteMcq => {
            let c = g.choice.unwrap_or('A');
            (fa(&format!("({c})")), fa(&format!("({})", next_letter(c, 'E'))))
        }
        TaskKind::Temporal => {
            let c = temporal_letter(g.temporal.unwrap_or(TemporalClass::Stable));
            (fa(&c.to_string()), fa(&next_letter(c, 'C').to_string()))
        }
        TaskKind::BboxLoc => {
            let object = job.record.inputs.object.as_deref().unwrap_or("");
            (bbox_reply(object, g.bbox.unwrap_or_default()), bbox_reply(object, [0.0; 4]))
        }
        TaskKind::WsiReport => {
            let reference = g.reference.clone().unwrap_or_default();
            let wrong = foreign_token(&reference);
            (reference, wrong)
        }
        TaskKind::LabExtract => {
            let entries = g.entries.clone().unwrap_or_default();
            let gold = serde_json::to_string(&entries).expect("entries serialize");
            let bogus = LabTestEntry { name: "zzq unlisted analyte".into(), ..Default::default() };
            (gold, serde_json::to_string(&[bogus]).expect("entries serialize"))
        }
    }
}

struct Outcome {
    parsed: Option<Answer>,
    parse_miss: Option<String>,
    diagnostics: Vec<String>,
    score: ExampleScore,
}

fn score_reply(job: &Job<'_>, reply: Option<&str>, matcher: &MatcherConfig) -> Outcome {
    let g = &job.record.gold;
    let mut out = Outcome { parsed: None, parse_miss: None, diagnostics: Vec::new(), score: ExampleScore::Iou { iou: 0.0 } };
    macro_rules! parsed {
        ($parse:expr, $wrap:expr) => {
            match reply.map($parse) {
                Some(Ok(v)) => {
                    out.parsed = Some($wrap(v.clone()));
                    Some(v)
                }
                Some(Err(miss)) => {
                    out.parse_miss = Some(miss.reason);
                    None
                }
                None => None,
            }
        };
    }
    out.score = match job.record.task_kind {
        TaskKind::CtCls | TaskKind::MrCls | TaskKind::CtrateCls => {
            let gold = job.condition.and_then(|c| g.labels.get(c)).copied().unwrap_or(false);
            let pred = parsed!(parse_yes_no, Answer::YesNo);
            ExampleScore::Binary { gold, pred }
        }
        TaskKind::TextMcq | TaskKind::EhrnoteMcq => {
            let pred = parsed!(parse_choice, Answer::Choice);
            ExampleScore::Choice { gold: g.choice.unwrap_or('A'), pred }
        }
        TaskKind::Temporal => {
            let pred = parsed!(parse_temporal, Answer::Temporal);
            ExampleScore::Temporal {
                pathology: job.record.inputs.pathology.clone().unwrap_or_default(),
                gold: g.temporal.unwrap_or(TemporalClass::Stable),
                pred,
            }
        }
        TaskKind::BboxLoc => {
            let boxes = parsed!(|t| parse_bboxes(t).map(|p| {
                out.diagnostics = p.diagnostics;
                p.items
            }), Answer::BBoxes);
            let gold = BBox::normalized(job.record.inputs.object.clone().unwrap_or_default(), g.bbox.unwrap_or_default());
            let object = job.record.inputs.object.as_deref().unwrap_or("");
            let best = boxes.as_deref().and_then(|b| select_prediction(b, object));
            ExampleScore::Iou { iou: best.map_or(0.0, |b| iou(b, &gold)) }
        }
        TaskKind::WsiReport => {
            let text = reply.map(|r| r.trim().to_string());
            if let Some(t) = &text {
                out.parsed = Some(Answer::FreeText(t.clone()));
            }
            let reference = g.reference.as_deref().unwrap_or("");
            ExampleScore::RougeL { rouge_l: text.map_or(0.0, |t| rouge_l(&t, reference)) }
        }
        TaskKind::LabExtract => {
            let entries = parsed!(|t| parse_lab_entries(t).map(|p| {
                out.diagnostics = p.diagnostics;
                p.items
            }), Answer::LabEntries)
            .unwrap_or_default();
            let gold = g.entries.clone().unwrap_or_default();
            let m = match_lab_entries(&entries, &gold, matcher);
            ExampleScore::Extraction { counts: extraction_counts(&m, &entries, &gold, matcher) }
        }
    };
    out
}

fn evaluate_job(
    job: &Job<'_>,
    endpoint: &dyn Endpoint,
    store: &TemplateStore,
    opts: &RunOptions,
    base_dir: &Path,
) -> ExampleRow {
    let (gold_reply, wrong_reply) = canonical_replies(job);
    let ctx = CallContext {
        example_id: &job.record.example_id,
        condition: job.condition,
        task: job.record.task_kind,
        gold_reply: &gold_reply,
        wrong_reply: &wrong_reply,
    };
    let (digest, image_count, result) = match render_job(job, store, opts) {
        Ok(prompt) => {
            let digest = prompt.digest_with(|r| match r {
                ImageRef::Path(p) => p.strip_prefix(base_dir).unwrap_or(p).to_string_lossy().replace('\\', "/"),
                other => other.key(),
            });
            let result = endpoint.generate(&prompt, &ctx).map_err(|e| RowError { class: e.class().into(), message: e.to_string() });
            (digest, prompt.image_count(), result)
        }
        Err(e) => (String::new(), 0, Err(RowError { class: "render".into(), message: e.to_string() })),
    };
    let (reply, error) = match result {
        Ok(r) => (Some(r), None),
        Err(e) => {
            log::warn!("{} {:?}: {}", job.record.example_id, job.condition, e.message);
            (None, Some(e))
        }
    };
    let outcome = score_reply(job, reply.as_deref(), &opts.matcher);
    ExampleRow {
        example_id: job.record.example_id.clone(),
        condition: job.condition.map(str::to_string),
        task: job.record.task_kind,
        prompt_digest: digest,
        image_count,
        reply,
        parsed: outcome.parsed,
        parse_miss: outcome.parse_miss,
        error,
        diagnostics: outcome.diagnostics,
        score: outcome.score,
    }
}

fn jobs_of(manifest: &Manifest) -> Vec<Job<'_>> {
    let mut jobs = Vec::new();
    for (record, images) in manifest.records.iter().zip(&manifest.images) {
        if record.task_kind.is_classification() {
            for c in &record.conditions {
                jobs.push(Job { record, images, condition: Some(c) });
            }
        } else {
            jobs.push(Job { record, images, condition: None });
        }
    }
    jobs.sort_by(|a, b| (&a.record.example_id, a.condition).cmp(&(&b.record.example_id, b.condition)));
    jobs
}

/// Number of endpoint calls a manifest requires: one per condition for
/// classification records, one per record otherwise.
pub fn planned_calls(manifest: &Manifest) -> usize {
    jobs_of(manifest).len()
}

fn manifest_digest(manifest: &Manifest) -> String {
    let mut h = FieldHasher::new();
    let mut records: Vec<&ManifestRecord> = manifest.records.iter().collect();
    records.sort_by(|a, b| a.example_id.cmp(&b.example_id));
    for r in records {
        h.field("record", serde_json::to_string(r).expect("record serializes").as_bytes());
    }
    h.finish()
}

fn unix_ms(t: SystemTime) -> u128 {
    t.duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

/// Runs every record in `manifest` and builds the report.
pub fn run_evaluation(
    manifest: &Manifest,
    endpoint: &dyn Endpoint,
    store: &TemplateStore,
    opts: &RunOptions,
    ctx: &RunContext,
) -> Result<(EvalReport, RunInfo), EvalError> {
    opts.validate()?;
    if manifest.is_empty() {
        return Err(EvalError::EmptyManifest);
    }
    let started = SystemTime::now();
    let clock = Instant::now();
    let jobs = jobs_of(manifest);
    let mut rows = run_bounded(&jobs, opts.max_in_flight, |job| evaluate_job(job, endpoint, store, opts, &manifest.base_dir));
    sort_rows(&mut rows);
    let call_errors = rows.iter().filter(|r| r.error.is_some()).count();
    let config_text = serde_json::to_string(&ctx.config).expect("config serializes");
    let report = EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        metadata: RunMetadata {
            tool: "medharness".into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            endpoint: endpoint.describe(),
            endpoint_settings: endpoint.settings(),
            options: serde_json::to_value(opts).expect("options serialize"),
            config: ctx.config.clone(),
            config_digest: sha256_hex(config_text.as_bytes()),
            manifest_digest: manifest_digest(manifest),
            template_digests: store.digests(),
            seed: opts.seed,
        },
        aggregates: compute_aggregates(&rows),
        rows,
    };
    let info = RunInfo {
        started_unix_ms: unix_ms(started),
        finished_unix_ms: unix_ms(SystemTime::now()),
        elapsed_ms: clock.elapsed().as_millis(),
        calls: jobs.len(),
        call_errors,
        max_in_flight: opts.max_in_flight,
    };
    Ok((report, info))
}

/// A recorded model reply, for scoring without an endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub example_id: String,
    /// Required for classification records, one line per condition.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<String>,
    pub reply: String,
}

/// Parses line-delimited predictions. Blank and `#` lines are skipped.
pub fn parse_predictions(text: &str) -> Result<Vec<Prediction>, EvalError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let p: Prediction = serde_json::from_str(trimmed).map_err(|e| EvalError::Manifest {
            line: n + 1,
            reason: format!("prediction: {e}"),
        })?;
        out.push(p);
    }
    Ok(out)
}

/// Scores recorded replies against gold records with the same parsers and
/// metrics as a live run. A job with no prediction is scored wrong and
/// carries a `missing` error.
pub fn score_predictions(
    gold: &Manifest,
    predictions: &[Prediction],
    opts: &RunOptions,
    source: &str,
) -> Result<EvalReport, EvalError> {
    if gold.is_empty() {
        return Err(EvalError::EmptyManifest);
    }
    let jobs = jobs_of(gold);
    let mut replies = std::collections::BTreeMap::new();
    for (i, p) in predictions.iter().enumerate() {
        let key = (p.example_id.as_str(), p.condition.as_deref());
        if !jobs.iter().any(|j| (j.record.example_id.as_str(), j.condition) == key) {
            return Err(EvalError::Manifest {
                line: i + 1,
                reason: format!("prediction {:?} {:?} has no gold record", p.example_id, p.condition),
            });
        }
        if replies.insert(key, p.reply.as_str()).is_some() {
            return Err(EvalError::Manifest {
                line: i + 1,
                reason: format!("duplicate prediction for {:?} {:?}", p.example_id, p.condition),
            });
        }
    }
    let mut rows: Vec<ExampleRow> = jobs
        .iter()
        .map(|job| {
            let reply = replies.get(&(job.record.example_id.as_str(), job.condition)).copied();
            let outcome = score_reply(job, reply, &opts.matcher);
            ExampleRow {
                example_id: job.record.example_id.clone(),
                condition: job.condition.map(str::to_string),
                task: job.record.task_kind,
                prompt_digest: String::new(),
                image_count: job.images.relative.len(),
                reply: reply.map(str::to_string),
                parsed: outcome.parsed,
                parse_miss: outcome.parse_miss,
                error: reply.is_none().then(|| RowError { class: "missing".into(), message: "no prediction for this example".into() }),
                diagnostics: outcome.diagnostics,
                score: outcome.score,
            }
        })
        .collect();
    sort_rows(&mut rows);
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        metadata: RunMetadata {
            tool: "medharness".into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            endpoint: source.to_string(),
            endpoint_settings: Value::Null,
            options: serde_json::to_value(opts).expect("options serialize"),
            config: Value::Null,
            config_digest: String::new(),
            manifest_digest: manifest_digest(gold),
            template_digests: Default::default(),
            seed: opts.seed,
        },
        aggregates: compute_aggregates(&rows),
        rows,
    })
}

/// Runs only the records of one task kind.
pub fn run_task(
    manifest: &Manifest,
    task: TaskKind,
    endpoint: &dyn Endpoint,
    store: &TemplateStore,
    opts: &RunOptions,
    ctx: &RunContext,
) -> Result<(EvalReport, RunInfo), EvalError> {
    let subset = manifest.filter_task(task);
    if subset.is_empty() {
        return Err(EvalError::NoRecordsForTask(task));
    }
    run_evaluation(&subset, endpoint, store, opts, ctx)
}

/// Per-condition yes/no querying for CT, MR and chest-CT records.
pub fn run_condition_classification(
    manifest: &Manifest,
    task: TaskKind,
    endpoint: &dyn Endpoint,
    store: &TemplateStore,
    opts: &RunOptions,
) -> Result<EvalReport, EvalError> {
    if !task.is_classification() {
        return Err(EvalError::InvalidOptions(format!("{task} is not a classification task")));
    }
    run_task(manifest, task, endpoint, store, opts, &RunContext::default()).map(|(r, _)| r)
}

macro_rules! task_runner {
    ($($(#[$doc:meta])* $name:ident => $task:ident),* $(,)?) => {
        $(
            $(#[$doc])*
            pub fn $name(
                manifest: &Manifest,
                endpoint: &dyn Endpoint,
                store: &TemplateStore,
                opts: &RunOptions,
            ) -> Result<EvalReport, EvalError> {
                run_task(manifest, TaskKind::$task, endpoint, store, opts, &RunContext::default()).map(|(r, _)| r)
            }
        )*
    };
}

task_runner! {
    /// Localization: mean IoU of the best-labelled predicted box.
    run_bbox_eval => BboxLoc,
    /// Prior/current radiograph comparison: temporal macro accuracy.
    run_temporal_eval => Temporal,
    /// Slide report generation: ROUGE-L against the reference diagnosis.
    run_wsi_eval => WsiReport,
    /// Lab report extraction: matched-entry and per-field P/R/F1.
    run_lab_eval => LabExtract,
    /// Text multiple choice: choice-letter accuracy.
    run_mcq_eval => TextMcq,
    /// Discharge-note multiple choice: choice-letter accuracy.
    run_ehrnote_eval => EhrnoteMcq,
}
