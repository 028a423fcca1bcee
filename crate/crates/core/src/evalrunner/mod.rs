//! Evaluation driver: manifests in, model calls through an [`Endpoint`],
//! scored rows and aggregates out.
//!
//! Classification records are queried once per condition; every other
//! record gets a single call. Rows are sorted by `(example_id, condition)`
//! before aggregation, so reports do not depend on call scheduling.

mod endpoint;
mod manifest;
mod report;
mod run;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::promptforge::{Benchmark, TemplateError};

pub use endpoint::{
    build_request_body, endpoint_from_spec, parse_response_body, CallContext, CallError, Endpoint,
    EndpointConfig, HttpEndpoint, MockEndpoint, MockResponder, RetryPolicy, API_KEY_ENV,
};
pub use manifest::{
    load_manifest, parse_manifest, Gold, Inputs, Manifest, ManifestRecord, ResolvedImages,
    MANIFEST_SCHEMA_VERSION,
};
pub use report::{
    compute_aggregates, emit_report, read_report, report_json, sort_rows, summary_csv, verify_report,
    ConditionAggregate, EvalReport, ExampleRow, ExampleScore, RowError, RunMetadata, TaskAggregate,
    REPORT_SCHEMA_VERSION,
};
pub use run::{
    parse_predictions, planned_calls, run_bbox_eval, run_bounded, run_condition_classification, run_ehrnote_eval,
    run_evaluation, run_lab_eval, run_mcq_eval, run_task, run_temporal_eval, run_wsi_eval, score_predictions,
    Prediction, RunContext, RunInfo, RunOptions,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
    #[error("manifest has no records")]
    EmptyManifest,
    #[error("manifest has no {0} records")]
    NoRecordsForTask(TaskKind),
    #[error("invalid run options: {0}")]
    InvalidOptions(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("report: {0}")]
    Report(String),
}

impl EvalError {
    /// True for problems with the caller's inputs rather than the run.
    pub fn is_validation(&self) -> bool {
        !matches!(self, EvalError::Io { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    CtCls,
    MrCls,
    CtrateCls,
    WsiReport,
    Temporal,
    BboxLoc,
    LabExtract,
    TextMcq,
    EhrnoteMcq,
}

impl TaskKind {
    pub const ALL: [TaskKind; 9] = [
        TaskKind::CtCls,
        TaskKind::MrCls,
        TaskKind::CtrateCls,
        TaskKind::WsiReport,
        TaskKind::Temporal,
        TaskKind::BboxLoc,
        TaskKind::LabExtract,
        TaskKind::TextMcq,
        TaskKind::EhrnoteMcq,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::CtCls => "ct_cls",
            TaskKind::MrCls => "mr_cls",
            TaskKind::CtrateCls => "ctrate_cls",
            TaskKind::WsiReport => "wsi_report",
            TaskKind::Temporal => "temporal",
            TaskKind::BboxLoc => "bbox_loc",
            TaskKind::LabExtract => "lab_extract",
            TaskKind::TextMcq => "text_mcq",
            TaskKind::EhrnoteMcq => "ehrnote_mcq",
        }
    }

    pub fn is_classification(self) -> bool {
        matches!(self, TaskKind::CtCls | TaskKind::MrCls | TaskKind::CtrateCls)
    }

    /// Internal CT/MR sets are balanced and reported by accuracy; the chest
    /// CT set is imbalanced and reported by F1.
    pub fn primary_metric(self) -> &'static str {
        match self {
            TaskKind::CtCls | TaskKind::MrCls | TaskKind::Temporal => "macro_accuracy",
            TaskKind::CtrateCls => "macro_f1",
            TaskKind::WsiReport => "rouge_l",
            TaskKind::BboxLoc => "mean_iou",
            TaskKind::LabExtract => "f1",
            TaskKind::TextMcq | TaskKind::EhrnoteMcq => "accuracy",
        }
    }

    pub fn default_benchmark(self) -> Benchmark {
        match self {
            TaskKind::CtCls => Benchmark::CtClassification,
            TaskKind::MrCls => Benchmark::MrClassification,
            TaskKind::CtrateCls => Benchmark::CtRate,
            TaskKind::WsiReport => Benchmark::PathologyWsi,
            TaskKind::Temporal => Benchmark::MsCxrT,
            TaskKind::BboxLoc => Benchmark::Localization,
            TaskKind::LabExtract => Benchmark::LabExtraction,
            TaskKind::TextMcq => Benchmark::Other,
            TaskKind::EhrnoteMcq => Benchmark::EhrNoteQa,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = String;

    /// Accepts the full names plus the short scoring aliases `ct`, `mr`,
    /// `ctrate`, `wsi`, `bbox`, `lab`, `mcq` and `ehrnote`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let alias = match s {
            "ct" => Some(TaskKind::CtCls),
            "mr" => Some(TaskKind::MrCls),
            "ctrate" => Some(TaskKind::CtrateCls),
            "wsi" => Some(TaskKind::WsiReport),
            "bbox" => Some(TaskKind::BboxLoc),
            "lab" => Some(TaskKind::LabExtract),
            "mcq" => Some(TaskKind::TextMcq),
            "ehrnote" => Some(TaskKind::EhrnoteMcq),
            _ => None,
        };
        alias
            .or_else(|| TaskKind::ALL.into_iter().find(|t| t.name() == s))
            .ok_or_else(|| {
                let names: Vec<&str> = TaskKind::ALL.iter().map(|t| t.name()).collect();
                format!("unknown task {s:?}; expected one of {}", names.join(", "))
            })
    }
}
