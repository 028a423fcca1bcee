//! Acceptance checks, one test per criterion. Each prints a PASS/FAIL line
//! (visible with `--nocapture`) and asserts its time budget.

mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use medharness::digest::sha256_hex;
use medharness::evalrunner::{
    emit_report, load_manifest, planned_calls, run_evaluation, run_task, CallContext, CallError,
    Endpoint, MockEndpoint, MockResponder, RunContext, RunOptions, TaskKind,
};
use medharness::medmetrics::{
    f1_from_counts, iou, match_lab_entries, rouge_l, score_extraction, ConfusionCounts, MatchPair,
    MatchPhase, MatcherConfig, Matching,
};
use medharness::promptforge::{
    pinned_digests, BBox, LabTestEntry, RenderedPrompt, TemplateId, TemplateStore,
};
use medharness::slidegrid::{
    choose_magnification, grid_candidates, prepare_slide, subsample_patches, tissue_mask, Level,
    MagnificationDistribution, Patch, PatchSet, SlideConfig, SlidePyramid, TissueParams, PATCH_SIZE,
};
use medharness::vision_token_count;
use medharness::volgrid::{sample_equidistant, window_ct_slice, CT_WINDOWS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: u8, name: &str, budget: Duration, start: Instant, ok: bool, detail: &str) {
    let elapsed = start.elapsed();
    let pass = ok && elapsed < budget;
    println!(
        "criterion {n} {name}: {} ({:.3}s of {:.0}s) {detail}",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs_f64()
    );
    assert!(ok, "criterion {n} failed: {detail}");
    assert!(elapsed < budget, "criterion {n} exceeded its {budget:?} budget: {elapsed:?}");
}

#[test]
fn c1_token_accounting() {
    let t = Instant::now();
    let a = vision_token_count(85);
    let b = vision_token_count(126);
    let ok = a == 21_760 && b == 32_256;
    report(1, "token accounting", Duration::from_secs(1), t, ok, &format!("85 -> {a}, 126 -> {b}"));
}

#[test]
fn c2_windowing() {
    let t = Instant::now();
    let mut problems = Vec::new();
    for (c, w) in CT_WINDOWS.iter().enumerate() {
        let (lo, hi) = (w.lo_hu, w.hi_hu);
        let probes: Vec<f32> = (0..=20).map(|k| (lo + (hi - lo) * k as f64 / 20.0) as f32).collect();
        let img = window_ct_slice(&probes, probes.len(), 1, &CT_WINDOWS).unwrap();
        let out: Vec<u8> = img.pixels().map(|p| p.0[c]).collect();
        if out[0] != 0 || out[20] != 255 {
            problems.push(format!("channel {c}: endpoints map to {} and {}", out[0], out[20]));
        }
        for (v, got) in probes.iter().zip(&out) {
            let hand = 255.0 * (f64::from(*v) - lo) / (hi - lo);
            if (f64::from(*got) - hand).abs() > 1.0 {
                problems.push(format!("channel {c}: {v} HU -> {got}, hand formula {hand:.3}"));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut hu: Vec<f32> = (0..10_000).map(|_| rng.gen_range(-3000.0f32..3000.0)).collect();
    hu.sort_by(f32::total_cmp);
    let img = window_ct_slice(&hu, hu.len(), 1, &CT_WINDOWS).unwrap();
    for (c, w) in CT_WINDOWS.iter().enumerate() {
        let out: Vec<u8> = img.pixels().map(|p| p.0[c]).collect();
        if out.windows(2).any(|p| p[0] > p[1]) {
            problems.push(format!("channel {c} is not monotone"));
        }
        for (v, got) in hu.iter().zip(&out) {
            let v = f64::from(*v);
            if (v <= w.lo_hu && *got != 0) || (v >= w.hi_hu && *got != 255) {
                problems.push(format!("channel {c}: {v} HU not clamped ({got})"));
            }
        }
    }
    let ok = problems.is_empty();
    report(2, "windowing", Duration::from_secs(5), t, ok, &problems.join("; "));
}

#[test]
fn c3_equidistant_sampling() {
    let t = Instant::now();
    let mut problems = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let n = rng.gen_range(1..=10_000usize);
        let cap = rng.gen_range(1..=300usize);
        let idx = sample_equidistant(n, cap);
        let strict = idx.windows(2).all(|w| w[0] < w[1]);
        let ends = idx.first() == Some(&0) && (idx.len() < 2 || idx.last() == Some(&(n - 1)));
        if idx.len() != n.min(cap) || !strict || !ends || idx.iter().any(|&i| i >= n) {
            problems.push(format!("n={n} cap={cap}"));
        }
    }
    let even: Vec<usize> = (0..85).map(|k| 2 * k).collect();
    if sample_equidistant(169, 85) != even {
        problems.push("n=169 cap=85 is not the even indices".into());
    }
    let ok = problems.is_empty();
    report(3, "equidistant sampling", Duration::from_secs(5), t, ok, &problems.join("; "));
}

#[test]
fn c4_wsi_pipeline() {
    let t = Instant::now();
    let mut problems = Vec::new();
    let pink = image::Rgb([230u8, 150, 200]);
    let white = image::Rgb([255u8, 255, 255]);
    let (x0, y0, x1, y1) = (200u32, 300u32, 800u32, 700u32);
    let img = image::RgbImage::from_fn(1000, 1000, |x, y| {
        if (x0..x1).contains(&x) && (y0..y1).contains(&y) {
            pink
        } else {
            white
        }
    });
    let slide = SlidePyramid::new("synthetic", "colon biopsy", vec![Level::from_image(5.0, img.clone())]).unwrap();

    // Brute-force oracle: a pixel is tissue when it is the tissue colour.
    let mask = tissue_mask(&slide, &TissueParams::default()).unwrap();
    let (mut inter, mut union) = (0usize, 0usize);
    for y in 0..1000usize {
        for x in 0..1000usize {
            let truth = img.get_pixel(x as u32, y as u32) == &pink;
            let got = mask.grid.get(x, y);
            inter += usize::from(truth && got);
            union += usize::from(truth || got);
        }
    }
    let overlap = inter as f64 / union as f64;
    if overlap < 0.95 {
        problems.push(format!("mask overlap {overlap:.4}"));
    }

    for mag in [5.0, 10.0, 20.0] {
        let cells = grid_candidates(&mask, mag, SlideConfig::default().grid_tissue_fraction);
        if cells.is_empty() {
            problems.push(format!("no candidates at {mag}x"));
        }
        let rects: Vec<(u32, u32)> = cells.iter().map(|c| (c.col * PATCH_SIZE, c.row * PATCH_SIZE)).collect();
        for (i, a) in rects.iter().enumerate() {
            for b in &rects[i + 1..] {
                let dx = a.0.abs_diff(b.0);
                let dy = a.1.abs_diff(b.1);
                if dx < PATCH_SIZE && dy < PATCH_SIZE {
                    problems.push(format!("patches {a:?} and {b:?} overlap at {mag}x"));
                }
            }
        }
    }

    let prep = prepare_slide(&slide, &SlideConfig::default(), 11).unwrap();
    let again = prepare_slide(&slide, &SlideConfig::default(), 11).unwrap();
    if prep.patches != again.patches || prep.patches.is_empty() {
        problems.push("end-to-end patch set is empty or not seed-deterministic".into());
    }

    let full = PatchSet {
        slide_id: "dense".into(),
        magnification: 20.0,
        patches: (0..400u32)
            .map(|i| Patch { grid_row: i / 20, grid_col: i % 20, png: i.to_le_bytes().to_vec() })
            .collect(),
        cap: usize::MAX,
        caption: String::new(),
    };
    let a = subsample_patches(full.clone(), 126, 5);
    let b = subsample_patches(full.clone(), 126, 5);
    let mut rest = full.patches.iter();
    let subsequence = a.patches.iter().all(|p| rest.any(|q| q == p));
    if a.len() != 126 || !subsequence || a != b {
        problems.push("subsample is not an ordered, seed-deterministic 126-subsequence".into());
    }

    let dist = MagnificationDistribution::default();
    let mut counts = [0usize; 3];
    let draws = 100_000u64;
    for seed in 0..draws {
        let m = choose_magnification(&dist, seed).unwrap();
        counts[if m == 5.0 { 0 } else if m == 10.0 { 1 } else { 2 }] += 1;
    }
    for (c, p) in counts.iter().zip([0.34, 0.33, 0.33]) {
        let f = *c as f64 / draws as f64;
        if (f - p).abs() > 0.01 {
            problems.push(format!("magnification frequency {f:.4} vs {p}"));
        }
    }
    let ok = problems.is_empty();
    report(4, "whole-slide pipeline", Duration::from_secs(30), t, ok, &format!("overlap {overlap:.4} {}", problems.join("; ")));
}

/// Every sequence over `k` symbols of length 0..=`max_len`, ordered by
/// length then value. `offset[l]` is the index of the first length-`l` one.
struct SeqSpace {
    k: usize,
    offset: Vec<usize>,
    total: usize,
}

impl SeqSpace {
    fn new(k: usize, max_len: usize) -> Self {
        let mut offset = vec![0];
        for l in 0..=max_len {
            offset.push(offset[l] + k.pow(l as u32));
        }
        let total = offset[max_len + 1];
        Self { k, offset, total }
    }

    fn index(&self, seq: &[usize]) -> usize {
        self.offset[seq.len()] + seq.iter().fold(0, |acc, &s| acc * self.k + s)
    }

    fn decode(&self, idx: usize) -> Vec<usize> {
        let len = self.offset.iter().rposition(|&o| o <= idx).unwrap();
        let mut v = idx - self.offset[len];
        let mut seq = vec![0; len];
        for slot in seq.iter_mut().rev() {
            *slot = v % self.k;
            v /= self.k;
        }
        seq
    }

    fn len_of(&self, idx: usize) -> usize {
        self.offset.iter().rposition(|&o| o <= idx).unwrap()
    }
}

/// Checks `rouge_l` against an LCS found by enumerating every common
/// subsequence, for all pairs of sequences in the space.
fn rouge_exhaustive(k: usize, max_len: usize) -> Vec<String> {
    let space = SeqSpace::new(k, max_len);
    let words = space.total.div_ceil(64);
    let seqs: Vec<Vec<usize>> = (0..space.total).map(|i| space.decode(i)).collect();
    // Bitset of every subsequence of each sequence.
    let subs: Vec<Vec<u64>> = seqs
        .iter()
        .map(|s| {
            let mut bits = vec![0u64; words];
            for mask in 0u32..(1 << s.len()) {
                let sub: Vec<usize> = (0..s.len()).filter(|i| mask >> i & 1 == 1).map(|i| s[i]).collect();
                let j = space.index(&sub);
                bits[j / 64] |= 1 << (j % 64);
            }
            bits
        })
        .collect();
    let text: Vec<String> = seqs
        .iter()
        .map(|s| s.iter().map(|&t| ["alpha", "beta", "gamma"][t]).collect::<Vec<_>>().join(" "))
        .collect();
    let mut problems = Vec::new();
    for a in 0..space.total {
        for b in 0..space.total {
            let mut lcs = 0;
            for w in (0..words).rev() {
                let common = subs[a][w] & subs[b][w];
                if common != 0 {
                    lcs = space.len_of(w * 64 + 63 - common.leading_zeros() as usize);
                    break;
                }
            }
            let (la, lb) = (seqs[a].len(), seqs[b].len());
            let want = match (la, lb) {
                (0, 0) => 1.0,
                (0, _) | (_, 0) => 0.0,
                _ => 2.0 * lcs as f64 / (la + lb) as f64,
            };
            let got = rouge_l(&text[a], &text[b]);
            if (got - want).abs() > 1e-12 && problems.len() < 5 {
                problems.push(format!("rouge_l({:?}, {:?}) = {got}, oracle {want}", text[a], text[b]));
            }
        }
    }
    problems
}

#[test]
fn c5_metric_oracles() {
    let t = Instant::now();
    let mut problems = rouge_exhaustive(2, 8);
    problems.extend(rouge_exhaustive(3, 5));

    // Coordinates sit on the raster lattice so pixel-centre counting is an
    // exact area oracle.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let random_box = |rng: &mut ChaCha8Rng| {
        let mut span = || {
            let a = rng.gen_range(0..=1000u32);
            let mut b = rng.gen_range(0..=1000u32);
            while b == a {
                b = rng.gen_range(0..=1000u32);
            }
            (a.min(b), a.max(b))
        };
        let (y0, y1) = span();
        let (x0, x1) = span();
        [y0, x0, y1, x1]
    };
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let a = random_box(&mut rng);
        let b = random_box(&mut rng);
        let inside = |r: &[u32; 4], y: u32, x: u32| r[0] <= y && y < r[2] && r[1] <= x && x < r[3];
        let (mut inter, mut union) = (0u64, 0u64);
        for y in 0..1000 {
            for x in 0..1000 {
                let (ia, ib) = (inside(&a, y, x), inside(&b, y, x));
                inter += u64::from(ia && ib);
                union += u64::from(ia || ib);
            }
        }
        let oracle = inter as f64 / union as f64;
        let to_box = |r: [u32; 4]| BBox::normalized("x", r.map(|v| f64::from(v) / 1000.0));
        let got = iou(&to_box(a), &to_box(b));
        worst = worst.max((got - oracle).abs());
    }
    if worst > 2e-3 {
        problems.push(format!("iou deviates from raster oracle by {worst}"));
    }

    for tp in 0..=5u64 {
        for fp in 0..=5u64 {
            for fn_ in 0..=5u64 {
                for tn in 0..=5u64 {
                    let mut pairs = Vec::new();
                    pairs.extend(std::iter::repeat((true, true)).take(tp as usize));
                    pairs.extend(std::iter::repeat((true, false)).take(fp as usize));
                    pairs.extend(std::iter::repeat((false, true)).take(fn_ as usize));
                    pairs.extend(std::iter::repeat((false, false)).take(tn as usize));
                    let hits = pairs.iter().filter(|(p, g)| *p && *g).count() as f64;
                    let predicted = pairs.iter().filter(|(p, _)| *p).count() as f64;
                    let actual = pairs.iter().filter(|(_, g)| *g).count() as f64;
                    let want = if hits == 0.0 {
                        0.0
                    } else {
                        let (p, r) = (hits / predicted, hits / actual);
                        2.0 * p * r / (p + r)
                    };
                    let got = f1_from_counts(&ConfusionCounts { tp, fp, fn_, tn });
                    if (got - want).abs() > 1e-12 {
                        problems.push(format!("f1 of ({tp},{fp},{fn_},{tn}) = {got}, tally {want}"));
                    }
                }
            }
        }
    }
    let ok = problems.is_empty();
    report(5, "metric oracles", Duration::from_secs(60), t, ok, &format!("max iou error {worst:.2e} {}", problems.join("; ")));
}

fn lab(name: &str, result: &str, unit: &str, specimen: &str) -> LabTestEntry {
    LabTestEntry {
        name: name.into(),
        result: result.into(),
        unit: unit.into(),
        specimen: specimen.into(),
        ..Default::default()
    }
}

#[test]
fn c6_matcher_fixture() {
    let t = Instant::now();
    let gold = vec![
        lab("Hemoglobin", "13.5", "g/dL", "Blood"),
        lab("White Blood Cell Count", "7.2", "", ""),
        lab("Platelet Count", "250", "", ""),
        lab("Glucose", "98", "mg/dL", ""),
        lab("Sodium", "140", "", ""),
        lab("Potassium", "4.1", "", ""),
        lab("Total Serum Protein Level", "7.0", "", ""),
        lab("Alanine Aminotransferase (ALT)", "30", "", ""),
        lab("Creatinine", "1.00", "mg/dL", ""),
        lab("Thyroid Stimulating Hormone", "2.5", "", ""),
    ];
    let pred = vec![
        lab("Glucose", "98", "mg/dl", ""),
        lab("HEMOGLOBIN (Hb)", "13.5", "g/dL", "blood "),
        lab("White Blood Cell Count", "7.5", "", ""),
        lab("Platelet Count.", "250", "", ""),
        lab("Sodium", "141", "", ""),
        lab("Serum Total Protein Level", "7.0", "", ""),
        lab("Alanine Aminotransferase", "31", "", ""),
        lab("Creatinine", "1.0", "umol/L", ""),
        lab("WBC Count", "7.2", "cells/uL", ""),
        lab("Potassium Level", "4.1", "", ""),
    ];
    let cfg = MatcherConfig::default();
    let pair = |pred, gold, phase| MatchPair { pred, gold, phase };
    use MatchPhase::*;
    let expected = Matching {
        pairs: vec![
            pair(1, 0, ExactNameResult),
            pair(3, 2, ExactNameResult),
            pair(0, 3, ExactNameResult),
            pair(7, 8, ExactNameResult),
            pair(2, 1, ExactName),
            pair(4, 4, ExactName),
            pair(6, 7, ExactName),
            pair(5, 6, Fuzzy),
        ],
        unmatched_pred: vec![8, 9],
        unmatched_gold: vec![5, 9],
    };
    let mut problems = Vec::new();
    let matching = match_lab_entries(&pred, &gold, &cfg);
    if matching != expected {
        problems.push(format!("matching {matching:?}"));
    }
    let score = score_extraction(&matching, &pred, &gold, &cfg);
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
    let mut check = |what: &str, got: (f64, f64, f64), want: (f64, f64, f64)| {
        if !(close(got.0, want.0) && close(got.1, want.1) && close(got.2, want.2)) {
            problems.push(format!("{what}: got {got:?}, want {want:?}"));
        }
    };
    let prf = |p: &medharness::medmetrics::Prf| (p.precision, p.recall, p.f1);
    check("overall", prf(&score.overall), (0.8, 0.8, 0.8));
    check("name", prf(&score.per_field["name"]), (0.7, 0.7, 0.7));
    check("result", prf(&score.per_field["result"]), (0.5, 0.5, 0.5));
    check("unit", prf(&score.per_field["unit"]), (0.5, 2.0 / 3.0, 4.0 / 7.0));
    check("specimen", prf(&score.per_field["specimen"]), (1.0, 1.0, 1.0));
    for field in ["range", "panel", "method", "sample_collection_time"] {
        check(field, prf(&score.per_field[field]), (1.0, 1.0, 1.0));
    }

    let perfect = score_extraction(&match_lab_entries(&gold, &gold, &cfg), &gold, &gold, &cfg);
    let all_one = std::iter::once(&perfect.overall)
        .chain(perfect.per_field.values())
        .all(|p| p.precision == 1.0 && p.recall == 1.0 && p.f1 == 1.0);
    if !all_one || perfect.per_field.len() != LabTestEntry::FIELDS.len() {
        problems.push("perfect prediction does not score 1.0 everywhere".into());
    }
    let ok = problems.is_empty();
    report(6, "lab matcher fixture", Duration::from_secs(5), t, ok, &problems.join("; "));
}

/// Counts calls while delegating to a mock.
struct Counting {
    inner: MockEndpoint,
    calls: AtomicUsize,
}

impl Endpoint for Counting {
    fn generate(&self, prompt: &RenderedPrompt, ctx: &CallContext<'_>) -> Result<String, CallError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.generate(prompt, ctx)
    }

    fn describe(&self) -> String {
        self.inner.describe()
    }
}

#[test]
fn c7_end_to_end_self_check() {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let manifest = load_manifest(&common::full_manifest(dir.path())).unwrap();
    let store = TemplateStore::builtin().unwrap();
    let opts = RunOptions { seed: 7, ..Default::default() };
    let ctx = RunContext::default();
    let mut problems = Vec::new();

    if planned_calls(&manifest) != common::full_manifest_calls() {
        problems.push(format!("planned {} calls", planned_calls(&manifest)));
    }
    let rate = Counting { inner: MockEndpoint::new(MockResponder::Gold), calls: AtomicUsize::new(0) };
    let (rate_report, info) = run_task(&manifest, TaskKind::CtrateCls, &rate, store, &opts, &ctx).unwrap();
    let made = rate.calls.load(Ordering::SeqCst);
    if made != 180 || info.calls != 180 || rate_report.rows.len() != 180 {
        problems.push(format!("chest CT task made {made} calls, expected 10 x 18 = 180"));
    }
    let ct = Counting { inner: MockEndpoint::new(MockResponder::Gold), calls: AtomicUsize::new(0) };
    run_task(&manifest, TaskKind::CtCls, &ct, store, &opts, &ctx).unwrap();
    if ct.calls.load(Ordering::SeqCst) != common::CT_RECORDS * common::CT_CONDITIONS {
        problems.push("CT task call count".into());
    }

    for (responder, target) in [(MockResponder::Gold, 1.0), (MockResponder::Wrong, 0.0)] {
        let ep = Counting { inner: MockEndpoint::new(responder), calls: AtomicUsize::new(0) };
        let (rep, _) = run_evaluation(&manifest, &ep, store, &opts, &ctx).unwrap();
        if ep.calls.load(Ordering::SeqCst) != common::full_manifest_calls() {
            problems.push(format!("{responder:?}: call count {}", ep.calls.load(Ordering::SeqCst)));
        }
        if rep.aggregates.len() != TaskKind::ALL.len() {
            problems.push(format!("{responder:?}: {} task aggregates", rep.aggregates.len()));
        }
        for (task, agg) in &rep.aggregates {
            if agg.primary() != target {
                problems.push(format!("{responder:?}: {task} {} = {}", agg.primary_metric, agg.primary()));
            }
        }
    }

    let emit = |sub: &str| {
        let (rep, _) = run_evaluation(&manifest, &MockEndpoint::new(MockResponder::Gold), store, &opts, &ctx).unwrap();
        let out = dir.path().join(sub);
        emit_report(&rep, &out).unwrap();
        (std::fs::read(out.join("report.json")).unwrap(), std::fs::read(out.join("summary.csv")).unwrap())
    };
    if emit("first") != emit("second") {
        problems.push("re-emitted report differs".into());
    }
    let ok = problems.is_empty();
    report(7, "end-to-end self-check", Duration::from_secs(60), t, ok, &problems.join("; "));
}

/// The appendix prompt tables, transcribed into fixture notation: the
/// `{{ image }} + ` / `{{ images }} + ` prefix becomes `{image}` /
/// `{images}` and template variables become `{snake_case}` slots.
const PAPER_TEMPLATES: &[(TemplateId, &str)] = &[
    (
        TemplateId::TextMcq,
        "{question}\nYou may write out your argument before stating your final, very short, definitive, and concise answer (no more than a few words or the letter corresponding to your answer choice if the question is multiple choice) X in the format \"Final Answer: X\":",
    ),
    (
        TemplateId::BinarizedMcq,
        "{image}{question} You MUST end your responce with either \"Final Answer: yes\" or \"Final Answer: no",
    ),
    (
        TemplateId::SlakeVqa,
        "{image}{question} You may write out your argument before stating your final, very short, definitive, and concise answer X (no more than a few words or the letter corresponding to your answer choice if the question is multiple choice) in the format \"Final Answer: X\":",
    ),
    (
        TemplateId::VqaRad,
        "{image}{question} You may write out your argument before stating your final, very short, definitive, and concise answer X (no more than a few words or the letter corresponding to your answer choice if the question is multiple choice) in the format \"Final Answer: X\":",
    ),
    (
        TemplateId::PathologyWsi,
        "{images}Provide a brief diagnostic text for the set of pathology patches extracted from a pathology slide. Consider the tissue type and procedure (below) when deciding what to include in the diagnostic text. {type_procedure} {question}",
    ),
    (
        TemplateId::DermMcqa,
        "{image}{question} You must choose the most likely diagnosis and respond with \"The most likely diagnosis is:\" followed by your choice letter.",
    ),
    (
        TemplateId::EyePacs,
        "{image}Given this fundus image, determine the most likely diabetic retinopathy (DR) stage present, even if you are unsure:\n      A: No DR\n      B: mild DR\n      C: moderate DR\n      D: severe DR\n      E: proliferative DR\n  You must choose the most likely diagnosis and respond with \"The most likely diagnosis is:\" followed by your choice letter. ",
    ),
    (
        TemplateId::EhrNoteQa,
        "BEGIN_INSTRUCTIONS\nGiven the following discharge note for a patient, answer the question by only picking one of the A, B, C, D, E options. Each discharge note starts with \"DISCHARGE ?:\", the question starts with \"QUESTION:\" and the choices with \"CHOICE_?:\" where ? is a single character. To answer, describe your thought process for each choice; finish your answer with \"Final Answer: (?)\" where ? is a single character indicating the correct choice.\nEND_INSTRUCTIONS\n\n{discharge_note}\n\nQUESTION:\n{orig_question}\nthe choices are:\nCHOICE_A: {choice_A}\nCHOICE_B: {choice_B}\nCHOICE_C: {choice_C}\nCHOICE_D: {choice_D}\nCHOICE_E: {choice_E}\nDescribe your thought process for each choice and end your answer with \"Final Answer: (?)\" where ? is a single character indicating the correct answer. Use this exact format at the end \"Final Answer: (?)\".",
    ),
    (
        TemplateId::LabExtraction,
        "{image}You are a Clinical Data Extraction Specialist. Your job is to parse lab reports with high precision.\nFrom the given lab report, extract all lab tests into a JSON list.\nEach test object in the list must include: name, result, unit, range, panel, method, specimen, sample_collection_time (formatted as DD-MM-YYYY HH:MM:SS)",
    ),
    (TemplateId::Localization, "{image}Where is the {object}?"),
    (
        TemplateId::CtUs1,
        "{images}After looking at the indication and patient history \"{history}\"... Is there \"{label}\" in the CT volume? You may write out your argument before stating your final answer \"Final Answer: yes\" or \"Final Answer: no\".",
    ),
    (
        TemplateId::MriUs1,
        "{images}'After looking at the patient history \"{history}\", Is there {label} in the MRI volume? You may write out your argument before stating your final answer \"\"Final Answer: yes\"\" or \"\"Final Answer: no\"\"",
    ),
    (
        TemplateId::CtRate,
        "{images}You are an expert radiologist for chest CT. Looking at these CT slices, is there {label}? Answer with 'Final Answer: yes' or 'Final Answer: no'",
    ),
    (TemplateId::SystemRadiology, "You are a helpful radiology assistant."),
    (TemplateId::SystemMedical, "You are a helpful medical assistant."),
    (TemplateId::SystemThink, "SYSTEM INSTRUCTION: think silently if needed."),
];

#[test]
fn c8_prompt_fidelity() {
    let t = Instant::now();
    let store = TemplateStore::builtin().unwrap();
    let pinned = pinned_digests();
    let mut problems = Vec::new();
    for id in TemplateId::ALL {
        let tpl = store.get(*id);
        let digest = sha256_hex(tpl.render_placeholders().as_bytes());
        if tpl.render_placeholders() != tpl.body || pinned.get(id.file_name()) != Some(&digest) {
            problems.push(format!("{id} does not render to its pinned text"));
        }
    }
    for (id, text) in PAPER_TEMPLATES {
        if pinned.get(id.file_name()) != Some(&sha256_hex(text.as_bytes())) {
            problems.push(format!("{id} differs from the transcribed table text"));
        }
    }
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("templates");
    match TemplateStore::load_dir(&dir) {
        Ok(from_disk) => {
            for id in TemplateId::ALL {
                if from_disk.get(*id).body != store.get(*id).body {
                    problems.push(format!("{id} on disk differs from the compiled copy"));
                }
            }
        }
        Err(e) => problems.push(e.to_string()),
    }
    if !store.get(TemplateId::BinarizedMcq).body.contains("responce") {
        problems.push("binarized template lost its original spelling".into());
    }
    if !store.get(TemplateId::SystemThink).body.contains("think silently if needed.") {
        problems.push("thinking instruction changed".into());
    }
    let ok = problems.is_empty();
    report(8, "prompt fidelity", Duration::from_secs(1), t, ok, &problems.join("; "));
}
