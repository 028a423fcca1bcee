use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use medharness::config::GlobalConfig;
use medharness::evalrunner::{
    emit_report, endpoint_from_spec, load_manifest, parse_manifest, parse_predictions, read_report,
    report_json, run_evaluation, run_task, score_predictions, verify_report, EvalError, EvalReport,
    RunContext, RunOptions, TaskKind,
};
use medharness::promptforge::{
    render, resolve_system_text, Benchmark, ImageRef, LabeledImage, ModelKind, RenderOptions,
    TemplateId, TemplateStore,
};
use medharness::slidegrid::{open_slide_dir, prepare_slide, write_patchset};
use medharness::volgrid::{read_study, render_sequence, write_sequence, Modality};

#[derive(Parser, Debug)]
#[command(name = "medharness", version, about = "Preprocess medical images, render prompts, run and score evaluations")]
struct Cli {
    /// TOML configuration file; flags given on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Turn raw CT or MR volumes into an ordered PNG slice sequence.
    PrepVolume {
        /// A study directory of `*.meta` + `*.raw` pairs, or a directory of such studies.
        #[arg(long = "in", value_name = "DIR")]
        input: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Maximum slices per sequence [default: 85 or the config value].
        #[arg(long)]
        cap: Option<usize>,
        #[arg(long, value_enum, default_value_t = ModalityArg::Auto)]
        modality: ModalityArg,
    },
    /// Extract a capped, seeded patch set from a whole-slide image.
    PrepWsi {
        /// Slide directory holding `slide.json`, or the `slide.json` itself.
        #[arg(long = "in", value_name = "SLIDE")]
        input: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Maximum patches per slide [default: 126 or the config value].
        #[arg(long)]
        cap: Option<usize>,
        /// Sampling seed [default: the config seed].
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render one template and print the prompt as JSON.
    RenderPrompt {
        /// Template name, e.g. `ct_us1` or `localization`. Use `--list` to see all.
        #[arg(long, required_unless_present = "list")]
        template: Option<TemplateId>,
        /// Slot binding `name=value`; repeatable.
        #[arg(long = "slot", value_name = "NAME=VALUE")]
        slots: Vec<String>,
        /// Image file, optionally `PATH=LABEL`; repeatable, in order.
        #[arg(long = "image", value_name = "PATH[=LABEL]")]
        images: Vec<String>,
        #[arg(long)]
        fix_typos: bool,
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
        /// Attach the system text chosen for this model and benchmark.
        #[arg(long)]
        model_kind: Option<ModelKind>,
        #[arg(long, requires = "model_kind")]
        benchmark: Option<Benchmark>,
        #[arg(long, requires = "model_kind")]
        thinking: Option<bool>,
        /// Load templates from this directory instead of the built-in copies.
        #[arg(long, value_name = "DIR")]
        templates: Option<PathBuf>,
        /// List template names and digests.
        #[arg(long)]
        list: bool,
    },
    /// Query an endpoint over a manifest and write report.json, summary.csv and run_info.json.
    Run {
        /// Only run records of this task (all tasks when omitted).
        #[arg(long)]
        task: Option<TaskKind>,
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        /// `mock:gold|wrong|empty|echo` or an OpenAI-compatible base URL.
        #[arg(long, value_name = "URL|mock:NAME")]
        endpoint: String,
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
        #[arg(long, default_value_t = 8)]
        max_in_flight: usize,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, default_value = "medgemma")]
        model_kind: ModelKind,
        /// Force thinking on or off instead of the per-benchmark default.
        #[arg(long)]
        thinking: Option<bool>,
        #[arg(long)]
        fix_typos: bool,
        /// Run seed [default: the config seed].
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score recorded replies against gold records.
    Score {
        #[arg(long)]
        task: TaskKind,
        /// Line-delimited `{"example_id", "condition"?, "reply"}` records.
        #[arg(long, value_name = "FILE")]
        pred: PathBuf,
        /// Manifest-format gold records; images are not read.
        #[arg(long, value_name = "FILE")]
        gold: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Recompute a report's aggregates from its rows and list disagreements.
    VerifyReport {
        #[arg(value_name = "REPORT")]
        report: PathBuf,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ModalityArg {
    Auto,
    Ct,
    Mr,
}

/// Exit 1: the inputs are wrong. Exit 2: the work itself failed.
enum Failure {
    Validation(String),
    Runtime(String),
}

impl Failure {
    fn from_eval(e: EvalError) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type Outcome = Result<(), Failure>;

fn invalid(e: impl std::fmt::Display) -> Failure {
    Failure::Validation(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let cfg = match &cli.config {
        Some(path) => match GlobalConfig::load(path) {
            Ok(cfg) => cfg,
            Err(e) => {
                eprintln!("error: config {e}");
                return ExitCode::from(1);
            }
        },
        None => GlobalConfig::default(),
    };
    env_logger::Builder::new()
        .parse_filters(&cfg.log_level)
        .parse_env("RUST_LOG")
        .init();
    match dispatch(cli.command, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command, cfg: &GlobalConfig) -> Outcome {
    match command {
        Command::PrepVolume { input, out, cap, modality } => prep_volume(&input, &out, cap, modality, cfg),
        Command::PrepWsi { input, out, cap, seed } => prep_wsi(&input, &out, cap, seed, cfg),
        Command::RenderPrompt {
            template,
            slots,
            images,
            fix_typos,
            temperature,
            model_kind,
            benchmark,
            thinking,
            templates,
            list,
        } => {
            let store = load_store(templates.as_deref())?;
            if list {
                for (name, digest) in store.digests() {
                    println!("{name}\t{digest}");
                }
                return Ok(());
            }
            let id = template.ok_or_else(|| invalid("--template is required"))?;
            let opts = RenderOptions { fix_typos: fix_typos || cfg.prompt.fix_typos, temperature };
            let system = model_kind.map(|m| (m, benchmark.unwrap_or(Benchmark::Other), thinking));
            render_prompt(&store, id, &slots, &images, opts, system)
        }
        Command::Run {
            task,
            manifest,
            endpoint,
            temperature,
            max_in_flight,
            out,
            model_kind,
            thinking,
            fix_typos,
            seed,
        } => {
            let opts = RunOptions {
                model_kind,
                thinking,
                render: RenderOptions { fix_typos: fix_typos || cfg.prompt.fix_typos, temperature },
                matcher: cfg.matcher,
                max_in_flight,
                seed: seed.unwrap_or(cfg.seed),
            };
            run(task, &manifest, &endpoint, &out, opts, cfg)
        }
        Command::Score { task, pred, gold, out } => score(task, &pred, &gold, out.as_deref(), cfg),
        Command::VerifyReport { report } => {
            let rep = read_report(&report).map_err(invalid)?;
            let problems = verify_report(&rep);
            if problems.is_empty() {
                println!("ok: {} rows, {} task aggregates consistent", rep.rows.len(), rep.aggregates.len());
                Ok(())
            } else {
                for p in &problems {
                    println!("mismatch: {p}");
                }
                Err(invalid(format!("{} aggregate mismatches in {}", problems.len(), report.display())))
            }
        }
    }
}

fn load_store(dir: Option<&Path>) -> Result<TemplateStore, Failure> {
    match dir {
        Some(d) => TemplateStore::load_dir(d).map_err(invalid),
        None => TemplateStore::builtin().cloned().map_err(invalid),
    }
}

/// Study directories under `input`: itself if it holds volumes, otherwise
/// each subdirectory that does.
fn study_dirs(input: &Path) -> Result<Vec<PathBuf>, Failure> {
    let has_meta = |d: &Path| {
        fs::read_dir(d)
            .map(|it| it.flatten().any(|e| e.path().extension().is_some_and(|x| x == "meta")))
            .unwrap_or(false)
    };
    if !input.is_dir() {
        return Err(invalid(format!("{} is not a directory", input.display())));
    }
    if has_meta(input) {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| invalid(format!("{}: {e}", input.display())))?
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.is_dir() && has_meta(p))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(invalid(format!("no *.meta volumes under {}", input.display())));
    }
    Ok(dirs)
}

fn prep_volume(input: &Path, out: &Path, cap: Option<usize>, modality: ModalityArg, cfg: &GlobalConfig) -> Outcome {
    let cap = cap.unwrap_or(cfg.volume.cap);
    let mut lines = String::new();
    for dir in study_dirs(input)? {
        let study = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "study".into());
        let volumes = read_study(&dir).map_err(invalid)?;
        let want = match modality {
            ModalityArg::Auto => None,
            ModalityArg::Ct => Some(Modality::Ct),
            ModalityArg::Mr => Some(Modality::Mr),
        };
        if let Some(m) = want {
            if let Some(v) = volumes.iter().find(|v| v.modality() != m) {
                return Err(invalid(format!("{study}: series {} is {}, expected {m}", v.series_id(), v.modality())));
            }
        }
        let seq = render_sequence(&volumes, &cfg.volume.criteria, &cfg.volume.windows, cap)
            .map_err(|e| invalid(format!("{study}: {e}")))?;
        for w in &seq.warnings {
            log::warn!("{study}: {w}");
        }
        let manifest = write_sequence(&seq, &study, out).map_err(runtime)?;
        println!("{study}: {} slices, {} tokens", manifest.files.len(), manifest.token_count);
        lines.push_str(&serde_json::to_string(&manifest).expect("manifest serializes"));
        lines.push('\n');
    }
    let path = out.join("sequences.jsonl");
    fs::write(&path, lines).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn prep_wsi(input: &Path, out: &Path, cap: Option<usize>, seed: Option<u64>, cfg: &GlobalConfig) -> Outcome {
    let slide = open_slide_dir(input).map_err(invalid)?;
    let mut slide_cfg = cfg.slide;
    if let Some(c) = cap {
        if c == 0 {
            return Err(invalid("--cap must be at least 1"));
        }
        slide_cfg.cap = c;
    }
    let seed = seed.unwrap_or(cfg.seed);
    let prep = prepare_slide(&slide, &slide_cfg, seed).map_err(invalid)?;
    for f in &prep.failures {
        log::warn!("{}: patch ({}, {}) skipped: {}", slide.slide_id, f.cell.row, f.cell.col, f.error);
    }
    let manifest = write_patchset(&prep.patches, seed, out).map_err(runtime)?;
    println!(
        "{}: {}x, {} of {} candidate patches, {} tokens",
        manifest.slide_id,
        manifest.magnification,
        manifest.patches.len(),
        prep.candidates.len(),
        manifest.token_count
    );
    Ok(())
}

fn render_prompt(
    store: &TemplateStore,
    id: TemplateId,
    slots: &[String],
    images: &[String],
    opts: RenderOptions,
    system: Option<(ModelKind, Benchmark, Option<bool>)>,
) -> Outcome {
    let mut bound = BTreeMap::new();
    for s in slots {
        let (k, v) = s.split_once('=').ok_or_else(|| invalid(format!("--slot {s:?} is not NAME=VALUE")))?;
        bound.insert(k, v);
    }
    let labeled: Vec<LabeledImage> = images
        .iter()
        .map(|s| {
            let (path, label) = match s.split_once('=') {
                Some((p, l)) => (p, Some(l.to_string())),
                None => (s.as_str(), None),
            };
            LabeledImage { image: ImageRef::Path(PathBuf::from(path)), label }
        })
        .collect();
    let mut prompt = render(store, id, &bound, &labeled, &opts).map_err(invalid)?;
    if let Some((model, benchmark, thinking)) = system {
        let thinking = thinking.unwrap_or(benchmark.thinking_by_default());
        prompt.system_text = resolve_system_text(store, model, benchmark, thinking);
    }
    let out = json!({
        "template": prompt.template,
        "system_text": prompt.system_text,
        "temperature": prompt.temperature,
        "parts": prompt.parts,
        "image_count": prompt.image_count(),
        "digest": prompt.digest(),
    });
    println!("{}", serde_json::to_string_pretty(&out).expect("prompt serializes"));
    Ok(())
}

fn print_aggregates(report: &EvalReport) {
    for (task, agg) in &report.aggregates {
        println!(
            "{task}: {} = {:.4} ({} examples, {} calls, {} parse misses, {} errors)",
            agg.primary_metric,
            agg.primary(),
            agg.examples,
            agg.calls,
            agg.parse_misses,
            agg.errors
        );
    }
}

fn run(task: Option<TaskKind>, manifest: &Path, endpoint: &str, out: &Path, opts: RunOptions, cfg: &GlobalConfig) -> Outcome {
    opts.validate().map_err(Failure::from_eval)?;
    let m = load_manifest(manifest).map_err(invalid)?;
    let ep = endpoint_from_spec(endpoint, &cfg.endpoint).map_err(invalid)?;
    let store = TemplateStore::builtin().map_err(invalid)?;
    // The output directory and concurrency bound stay out of the report so
    // that it is byte-identical across reruns; run_info.json records them.
    let ctx = RunContext {
        config: json!({
            "config": cfg.to_json(),
            "invocation": {
                "task": task,
                "manifest": manifest.display().to_string(),
                "endpoint": ep.describe(),
            },
        }),
    };
    let (report, info) = match task {
        Some(t) => run_task(&m, t, ep.as_ref(), store, &opts, &ctx),
        None => run_evaluation(&m, ep.as_ref(), store, &opts, &ctx),
    }
    .map_err(Failure::from_eval)?;
    emit_report(&report, out).map_err(Failure::from_eval)?;
    let info_json = json!({"run": info, "out": out.display().to_string()});
    let path = out.join("run_info.json");
    fs::write(&path, serde_json::to_string_pretty(&info_json).expect("run info serializes") + "\n")
        .map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    print_aggregates(&report);
    if info.call_errors > 0 {
        return Err(runtime(format!(
            "{} of {} endpoint calls failed; see {}",
            info.call_errors,
            info.calls,
            out.join("report.json").display()
        )));
    }
    Ok(())
}

fn score(task: TaskKind, pred: &Path, gold: &Path, out: Option<&Path>, cfg: &GlobalConfig) -> Outcome {
    let read = |p: &Path| fs::read_to_string(p).map_err(|e| invalid(format!("{}: {e}", p.display())));
    let base = gold.parent().unwrap_or(Path::new("."));
    let manifest = parse_manifest(&read(gold)?, base, false)
        .map_err(|e| invalid(format!("{}: {e}", gold.display())))?
        .filter_task(task);
    if manifest.is_empty() {
        return Err(Failure::from_eval(EvalError::NoRecordsForTask(task)));
    }
    let predictions = parse_predictions(&read(pred)?).map_err(|e| invalid(format!("{}: {e}", pred.display())))?;
    let predictions: Vec<_> = predictions
        .into_iter()
        .filter(|p| manifest.records.iter().any(|r| r.example_id == p.example_id))
        .collect();
    let opts = RunOptions { matcher: cfg.matcher, seed: cfg.seed, ..Default::default() };
    let source = format!("predictions:{}", pred.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()));
    let report = score_predictions(&manifest, &predictions, &opts, &source).map_err(Failure::from_eval)?;
    if let Some(path) = out {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
        }
        fs::write(path, report_json(&report)).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    }
    print_aggregates(&report);
    Ok(())
}
