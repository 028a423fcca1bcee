//! Per-example rows, aggregates, and report files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{EvalError, TaskKind};
use crate::medmetrics::{
    accuracy_from_counts, f1_from_counts, macro_average, temporal_macro_accuracy, ConfusionCounts,
    ExtractionCounts,
};
use crate::promptforge::{Answer, TemporalClass};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Everything needed to recompute a row's contribution to the aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "metric", rename_all = "snake_case")]
pub enum ExampleScore {
    Binary { gold: bool, pred: Option<bool> },
    Choice { gold: char, pred: Option<char> },
    Temporal { pathology: String, gold: TemporalClass, pred: Option<TemporalClass> },
    Iou { iou: f64 },
    RougeL { rouge_l: f64 },
    Extraction { counts: ExtractionCounts },
}

impl ExampleScore {
    /// A single number for the row: 1/0 for exact-answer scores, the
    /// continuous score otherwise, F1 for extraction.
    pub fn value(&self) -> f64 {
        let hit = |ok: bool| if ok { 1.0 } else { 0.0 };
        match self {
            ExampleScore::Binary { gold, pred } => hit(*pred == Some(*gold)),
            ExampleScore::Choice { gold, pred } => hit(*pred == Some(*gold)),
            ExampleScore::Temporal { gold, pred, .. } => hit(*pred == Some(*gold)),
            ExampleScore::Iou { iou } => *iou,
            ExampleScore::RougeL { rouge_l } => *rouge_l,
            ExampleScore::Extraction { counts } => counts.score().overall.f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowError {
    pub class: String,
    pub message: String,
}

/// One model call and its outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRow {
    pub example_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<String>,
    pub task: TaskKind,
    pub prompt_digest: String,
    pub image_count: usize,
    pub reply: Option<String>,
    pub parsed: Option<Answer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_miss: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<RowError>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
    pub score: ExampleScore,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ConditionAggregate {
    pub counts: ConfusionCounts,
    pub accuracy: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskAggregate {
    /// Name of the headline entry in `metrics`.
    pub primary_metric: String,
    pub examples: usize,
    pub calls: usize,
    pub parse_misses: usize,
    pub errors: usize,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub conditions: BTreeMap<String, ConditionAggregate>,
}

impl TaskAggregate {
    pub fn primary(&self) -> f64 {
        self.metrics.get(&self.primary_metric).copied().unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub tool: String,
    pub tool_version: String,
    pub endpoint: String,
    pub endpoint_settings: Value,
    /// Run options (model kind, thinking, temperature, matcher settings).
    pub options: Value,
    /// The parsed configuration, echoed as given.
    pub config: Value,
    pub config_digest: String,
    pub manifest_digest: String,
    pub template_digests: BTreeMap<String, String>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub metadata: RunMetadata,
    pub aggregates: BTreeMap<TaskKind, TaskAggregate>,
    /// Sorted by `(example_id, condition)`.
    pub rows: Vec<ExampleRow>,
}

fn row_key(r: &ExampleRow) -> (&str, Option<&str>) {
    (&r.example_id, r.condition.as_deref())
}

/// Sorts rows into report order.
pub fn sort_rows(rows: &mut [ExampleRow]) {
    rows.sort_by(|a, b| row_key(a).cmp(&row_key(b)));
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn aggregate_task(task: TaskKind, rows: &[&ExampleRow]) -> TaskAggregate {
    let mut agg = TaskAggregate {
        primary_metric: task.primary_metric().to_string(),
        examples: rows.iter().map(|r| r.example_id.as_str()).collect::<BTreeSet<_>>().len(),
        calls: rows.len(),
        parse_misses: rows.iter().filter(|r| r.parse_miss.is_some()).count(),
        errors: rows.iter().filter(|r| r.error.is_some()).count(),
        ..Default::default()
    };
    let mut conditions: BTreeMap<String, ConfusionCounts> = BTreeMap::new();
    let mut choices = Vec::new();
    let mut temporal = Vec::new();
    let mut continuous = Vec::new();
    let mut extraction = ExtractionCounts::default();
    for r in rows {
        match &r.score {
            ExampleScore::Binary { gold, pred } => {
                let key = r.condition.clone().unwrap_or_default();
                conditions.entry(key).or_default().record(*pred, *gold);
            }
            ExampleScore::Choice { gold, pred } => choices.push(if *pred == Some(*gold) { 1.0 } else { 0.0 }),
            ExampleScore::Temporal { pathology, gold, pred } => temporal.push((pathology.clone(), *gold, *pred)),
            ExampleScore::Iou { iou } => continuous.push(*iou),
            ExampleScore::RougeL { rouge_l } => continuous.push(*rouge_l),
            ExampleScore::Extraction { counts } => extraction.merge(counts),
        }
    }
    let m = &mut agg.metrics;
    match task {
        TaskKind::CtCls | TaskKind::MrCls | TaskKind::CtrateCls => {
            let per: BTreeMap<String, ConditionAggregate> = conditions
                .into_iter()
                .map(|(k, counts)| {
                    let c = ConditionAggregate { counts, accuracy: accuracy_from_counts(&counts), f1: f1_from_counts(&counts) };
                    (k, c)
                })
                .collect();
            let accs: Vec<f64> = per.values().map(|c| c.accuracy).collect();
            let f1s: Vec<f64> = per.values().map(|c| c.f1).collect();
            m.insert("macro_accuracy".into(), macro_average(&accs).unwrap_or(0.0));
            m.insert("macro_f1".into(), macro_average(&f1s).unwrap_or(0.0));
            agg.conditions = per;
        }
        TaskKind::TextMcq | TaskKind::EhrnoteMcq => {
            m.insert("accuracy".into(), mean(&choices));
        }
        TaskKind::Temporal => {
            m.insert("macro_accuracy".into(), temporal_macro_accuracy(&temporal).unwrap_or(0.0));
            let hits: Vec<f64> = temporal.iter().map(|(_, g, p)| if *p == Some(*g) { 1.0 } else { 0.0 }).collect();
            m.insert("accuracy".into(), mean(&hits));
        }
        TaskKind::BboxLoc => {
            m.insert("mean_iou".into(), mean(&continuous));
        }
        TaskKind::WsiReport => {
            m.insert("rouge_l".into(), mean(&continuous));
        }
        TaskKind::LabExtract => {
            let s = extraction.score();
            m.insert("precision".into(), s.overall.precision);
            m.insert("recall".into(), s.overall.recall);
            m.insert("f1".into(), s.overall.f1);
            for (field, prf) in &s.per_field {
                m.insert(format!("field.{field}.precision"), prf.precision);
                m.insert(format!("field.{field}.recall"), prf.recall);
                m.insert(format!("field.{field}.f1"), prf.f1);
            }
        }
    }
    agg
}

/// Aggregates for every task present in `rows`.
pub fn compute_aggregates(rows: &[ExampleRow]) -> BTreeMap<TaskKind, TaskAggregate> {
    let mut by_task: BTreeMap<TaskKind, Vec<&ExampleRow>> = BTreeMap::new();
    for r in rows {
        by_task.entry(r.task).or_default().push(r);
    }
    by_task.into_iter().map(|(t, rs)| (t, aggregate_task(t, &rs))).collect()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// `task,condition,metric,value`: task-level metrics with an empty
/// condition, then per-condition accuracy and F1.
pub fn summary_csv(report: &EvalReport) -> String {
    let mut out = String::from("task,condition,metric,value\n");
    for (task, agg) in &report.aggregates {
        for (metric, value) in &agg.metrics {
            let _ = writeln!(out, "{task},,{},{value}", csv_field(metric));
        }
        for (cond, c) in &agg.conditions {
            let cond = csv_field(cond);
            let _ = writeln!(out, "{task},{cond},accuracy,{}", c.accuracy);
            let _ = writeln!(out, "{task},{cond},f1,{}", c.f1);
        }
    }
    out
}

pub fn report_json(report: &EvalReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes") + "\n"
}

/// Writes `report.json` and `summary.csv` into `dir`.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    if report.rows.is_empty() {
        return Err(EvalError::Report("report has no rows".into()));
    }
    let io = |p: &Path, e: std::io::Error| EvalError::Io { path: p.display().to_string(), reason: e.to_string() };
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let json_path = dir.join("report.json");
    std::fs::write(&json_path, report_json(report)).map_err(|e| io(&json_path, e))?;
    let csv_path = dir.join("summary.csv");
    std::fs::write(&csv_path, summary_csv(report)).map_err(|e| io(&csv_path, e))?;
    Ok(vec![json_path, csv_path])
}

pub fn read_report(path: &Path) -> Result<EvalReport, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| EvalError::Report(format!("{}: {e}", path.display())))
}

fn same(a: f64, b: f64) -> bool {
    a == b || (a.is_nan() && b.is_nan()) || (a - b).abs() <= 1e-12 * a.abs().max(b.abs())
}

/// Recomputes aggregates from the rows and lists every disagreement,
/// naming the aggregate by path. Empty means the report is consistent.
pub fn verify_report(report: &EvalReport) -> Vec<String> {
    let mut problems = Vec::new();
    if report.schema_version != REPORT_SCHEMA_VERSION {
        problems.push(format!("schema_version {} is not {REPORT_SCHEMA_VERSION}", report.schema_version));
    }
    if report.rows.windows(2).any(|w| row_key(&w[0]) >= row_key(&w[1])) {
        problems.push("rows are not strictly sorted by (example_id, condition)".into());
    }
    let fresh = compute_aggregates(&report.rows);
    let tasks: BTreeSet<TaskKind> = fresh.keys().chain(report.aggregates.keys()).copied().collect();
    for task in tasks {
        let (Some(got), Some(want)) = (report.aggregates.get(&task), fresh.get(&task)) else {
            problems.push(format!("{task}: aggregate block present on only one side"));
            continue;
        };
        let counts = [
            ("examples", got.examples, want.examples),
            ("calls", got.calls, want.calls),
            ("parse_misses", got.parse_misses, want.parse_misses),
            ("errors", got.errors, want.errors),
        ];
        for (name, g, w) in counts {
            if g != w {
                problems.push(format!("{task}.{name}: report has {g}, rows give {w}"));
            }
        }
        if got.primary_metric != want.primary_metric {
            problems.push(format!("{task}.primary_metric: report has {:?}, expected {:?}", got.primary_metric, want.primary_metric));
        }
        let names: BTreeSet<&String> = got.metrics.keys().chain(want.metrics.keys()).collect();
        for name in names {
            match (got.metrics.get(name), want.metrics.get(name)) {
                (Some(g), Some(w)) if same(*g, *w) => {}
                (g, w) => problems.push(format!("{task}.metrics.{name}: report has {g:?}, rows give {w:?}")),
            }
        }
        let conds: BTreeSet<&String> = got.conditions.keys().chain(want.conditions.keys()).collect();
        for c in conds {
            match (got.conditions.get(c), want.conditions.get(c)) {
                (Some(g), Some(w)) if g.counts == w.counts && same(g.accuracy, w.accuracy) && same(g.f1, w.f1) => {}
                (g, w) => problems.push(format!("{task}.conditions.{c}: report has {g:?}, rows give {w:?}")),
            }
        }
    }
    problems
}
