//! Lab-report matching and per-field scoring.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::promptforge::LabTestEntry;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatcherConfig {
    /// Minimum name-token Jaccard similarity for a fuzzy pair.
    pub fuzzy_threshold: f64,
    /// Relative tolerance when both field values parse as numbers.
    pub numeric_rel_tol: f64,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            fuzzy_threshold: 0.8,
            numeric_rel_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchPhase {
    ExactNameResult,
    ExactName,
    Fuzzy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchPair {
    pub pred: usize,
    pub gold: usize,
    pub phase: MatchPhase,
}

/// One-to-one pairing of predicted and gold entries.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Matching {
    pub pairs: Vec<MatchPair>,
    pub unmatched_pred: Vec<usize>,
    pub unmatched_gold: Vec<usize>,
}

/// Lab test name in comparable form: parenthesised groups removed,
/// whitespace collapsed, trailing punctuation stripped, case-folded.
pub fn normalize_lab_name(name: &str) -> String {
    let mut depth = 0usize;
    let mut kept = String::with_capacity(name.len());
    for c in name.chars() {
        match c {
            '(' => depth += 1,
            ')' if depth > 0 => depth -= 1,
            _ if depth == 0 => kept.push(c),
            _ => {}
        }
    }
    let collapsed = kept.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_lowercase()
}

/// Field value in comparable form: trimmed, whitespace collapsed, case-folded.
pub fn normalize_value(value: &str) -> String {
    value.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn parse_number(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Equal as numbers within `rel_tol` when both parse, else equal after
/// [`normalize_value`].
pub fn values_equal(a: &str, b: &str, rel_tol: f64) -> bool {
    let (a, b) = (normalize_value(a), normalize_value(b));
    match (parse_number(&a), parse_number(&b)) {
        (Some(x), Some(y)) => x == y || (x - y).abs() <= rel_tol * x.abs().max(y.abs()),
        _ => a == b,
    }
}

fn name_tokens(normalized: &str) -> BTreeSet<&str> {
    normalized
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .collect()
}

fn jaccard(a: &BTreeSet<&str>, b: &BTreeSet<&str>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Three-phase matcher: equal name and result, then equal name, then greedy
/// fuzzy name match. Each phase only sees entries left over by earlier ones.
pub fn match_lab_entries(pred: &[LabTestEntry], gold: &[LabTestEntry], cfg: &MatcherConfig) -> Matching {
    let pred_names: Vec<String> = pred.iter().map(|e| normalize_lab_name(&e.name)).collect();
    let gold_names: Vec<String> = gold.iter().map(|e| normalize_lab_name(&e.name)).collect();
    let mut pred_used = vec![false; pred.len()];
    let mut gold_used = vec![false; gold.len()];
    let mut pairs = Vec::new();

    for phase in [MatchPhase::ExactNameResult, MatchPhase::ExactName] {
        for g in 0..gold.len() {
            if gold_used[g] || gold_names[g].is_empty() {
                continue;
            }
            let hit = (0..pred.len()).find(|&p| {
                !pred_used[p]
                    && pred_names[p] == gold_names[g]
                    && (phase == MatchPhase::ExactName
                        || values_equal(&pred[p].result, &gold[g].result, cfg.numeric_rel_tol))
            });
            if let Some(p) = hit {
                pred_used[p] = true;
                gold_used[g] = true;
                pairs.push(MatchPair { pred: p, gold: g, phase });
            }
        }
    }

    let pred_tokens: Vec<_> = pred_names.iter().map(|n| name_tokens(n)).collect();
    let gold_tokens: Vec<_> = gold_names.iter().map(|n| name_tokens(n)).collect();
    let mut candidates = Vec::new();
    for g in (0..gold.len()).filter(|&g| !gold_used[g]) {
        for p in (0..pred.len()).filter(|&p| !pred_used[p]) {
            let s = jaccard(&pred_tokens[p], &gold_tokens[g]);
            if s >= cfg.fuzzy_threshold {
                candidates.push((s, g, p));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for (_, g, p) in candidates {
        if !gold_used[g] && !pred_used[p] {
            gold_used[g] = true;
            pred_used[p] = true;
            pairs.push(MatchPair { pred: p, gold: g, phase: MatchPhase::Fuzzy });
        }
    }

    Matching {
        pairs,
        unmatched_pred: (0..pred.len()).filter(|&p| !pred_used[p]).collect(),
        unmatched_gold: (0..gold.len()).filter(|&g| !gold_used[g]).collect(),
    }
}

/// Precision, recall and their harmonic mean.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    /// Ratios with zero denominators read as 0, except that nothing
    /// predicted against nothing expected is a perfect 1.
    pub fn from_counts(correct: u64, pred_total: u64, gold_total: u64) -> Self {
        if pred_total == 0 && gold_total == 0 {
            return Self { precision: 1.0, recall: 1.0, f1: 1.0 };
        }
        let ratio = |n: u64, d: u64| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let (precision, recall) = (ratio(correct, pred_total), ratio(correct, gold_total));
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self { precision, recall, f1 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldCounts {
    pub correct: u64,
    pub pred_nonempty: u64,
    pub gold_nonempty: u64,
}

/// Summable extraction tallies; several documents are scored by adding
/// their counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub per_field: BTreeMap<String, FieldCounts>,
}

impl ExtractionCounts {
    pub fn merge(&mut self, other: &ExtractionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        for (k, v) in &other.per_field {
            let f = self.per_field.entry(k.clone()).or_default();
            f.correct += v.correct;
            f.pred_nonempty += v.pred_nonempty;
            f.gold_nonempty += v.gold_nonempty;
        }
    }

    pub fn score(&self) -> ExtractionScore {
        ExtractionScore {
            overall: Prf::from_counts(self.tp, self.tp + self.fp, self.tp + self.fn_),
            per_field: self
                .per_field
                .iter()
                .map(|(k, c)| (k.clone(), Prf::from_counts(c.correct, c.pred_nonempty, c.gold_nonempty)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtractionScore {
    pub overall: Prf,
    pub per_field: BTreeMap<String, Prf>,
}

/// Tallies for one document. A field is correct for a matched pair when
/// both values are non-empty and equal.
pub fn extraction_counts(
    matching: &Matching,
    pred: &[LabTestEntry],
    gold: &[LabTestEntry],
    cfg: &MatcherConfig,
) -> ExtractionCounts {
    let mut per_field = BTreeMap::new();
    for field in LabTestEntry::FIELDS {
        let nonempty = |e: &LabTestEntry| !e.field(field).unwrap_or("").trim().is_empty();
        let correct = matching
            .pairs
            .iter()
            .filter(|m| {
                let (p, g) = (&pred[m.pred], &gold[m.gold]);
                let (pv, gv) = (p.field(field).unwrap_or(""), g.field(field).unwrap_or(""));
                nonempty(p)
                    && nonempty(g)
                    && if field == "name" {
                        normalize_lab_name(pv) == normalize_lab_name(gv)
                    } else {
                        values_equal(pv, gv, cfg.numeric_rel_tol)
                    }
            })
            .count() as u64;
        per_field.insert(
            field.to_string(),
            FieldCounts {
                correct,
                pred_nonempty: pred.iter().filter(|e| nonempty(e)).count() as u64,
                gold_nonempty: gold.iter().filter(|e| nonempty(e)).count() as u64,
            },
        );
    }
    ExtractionCounts {
        tp: matching.pairs.len() as u64,
        fp: matching.unmatched_pred.len() as u64,
        fn_: matching.unmatched_gold.len() as u64,
        per_field,
    }
}

pub fn score_extraction(
    matching: &Matching,
    pred: &[LabTestEntry],
    gold: &[LabTestEntry],
    cfg: &MatcherConfig,
) -> ExtractionScore {
    extraction_counts(matching, pred, gold, cfg).score()
}
