//! Scoring functions.
//!
//! Every function here is pure. Unparseable replies reach these functions as
//! `None` and are scored as wrong.

mod lab;
mod text;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::promptforge::{BBox, TemporalClass};

pub use lab::{
    extraction_counts, match_lab_entries, normalize_lab_name, normalize_value, score_extraction,
    values_equal, ExtractionCounts, ExtractionScore, FieldCounts, MatchPair, MatchPhase, MatcherConfig,
    Matching, Prf,
};
pub use text::{rouge_l, tokenize, tokenized_f1};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricError {
    #[error("cannot average an empty set of {0}")]
    Empty(&'static str),
}

/// Intersection over union of two boxes; 0 when the union has no area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let inter = ih * iw;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// The predicted box whose label best matches the queried object by
/// tokenized F1; the first one wins ties.
pub fn select_prediction<'a>(predictions: &'a [BBox], object: &str) -> Option<&'a BBox> {
    let mut best: Option<(&BBox, f64)> = None;
    for b in predictions {
        let score = tokenized_f1(&b.label, object);
        if best.map_or(true, |(_, s)| score > s) {
            best = Some((b, score));
        }
    }
    best.map(|(b, _)| b)
}

/// Mean IoU over records; a missing prediction scores 0.
pub fn mean_iou(records: &[(Option<BBox>, BBox)]) -> Result<f64, MetricError> {
    let scores: Vec<f64> = records
        .iter()
        .map(|(p, g)| p.as_ref().map_or(0.0, |p| iou(p, g)))
        .collect();
    mean(&scores).ok_or(MetricError::Empty("localization records"))
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Unweighted mean of per-condition values.
pub fn macro_average(values: &[f64]) -> Result<f64, MetricError> {
    mean(values).ok_or(MetricError::Empty("per-condition values"))
}

/// Binary confusion table.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    /// Tallies one answer. A missing prediction is counted as the wrong
    /// answer: a false negative for a positive gold, a false positive
    /// otherwise.
    pub fn record(&mut self, pred: Option<bool>, gold: bool) {
        match (pred.unwrap_or(!gold), gold) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

/// `2tp / (2tp + fp + fn)`, 0 when the denominator is 0.
pub fn f1_from_counts(c: &ConfusionCounts) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * c.tp) as f64 / denom as f64
    }
}

/// `(tp + tn) / total`, 0 for an empty table.
pub fn accuracy_from_counts(c: &ConfusionCounts) -> f64 {
    match c.total() {
        0 => 0.0,
        n => (c.tp + c.tn) as f64 / n as f64,
    }
}

/// Fraction of records whose prediction equals the gold answer.
pub fn accuracy<T: PartialEq>(records: &[(Option<T>, T)]) -> Result<f64, MetricError> {
    let hits: Vec<f64> = records
        .iter()
        .map(|(p, g)| if p.as_ref() == Some(g) { 1.0 } else { 0.0 })
        .collect();
    mean(&hits).ok_or(MetricError::Empty("records"))
}

/// Per pathology: mean accuracy over the gold classes present. Then the
/// unweighted mean over pathologies.
pub fn temporal_macro_accuracy(
    records: &[(String, TemporalClass, Option<TemporalClass>)],
) -> Result<f64, MetricError> {
    let mut tallies: BTreeMap<&str, BTreeMap<TemporalClass, (u64, u64)>> = BTreeMap::new();
    for (pathology, gold, pred) in records {
        let t = tallies.entry(pathology).or_default().entry(*gold).or_default();
        t.1 += 1;
        if pred.as_ref() == Some(gold) {
            t.0 += 1;
        }
    }
    let per_pathology: Vec<f64> = tallies
        .values()
        .map(|classes| {
            let accs: Vec<f64> = classes.values().map(|(c, n)| *c as f64 / *n as f64).collect();
            mean(&accs).unwrap_or(0.0)
        })
        .collect();
    mean(&per_pathology).ok_or(MetricError::Empty("temporal records"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(y0: f64, x0: f64, y1: f64, x1: f64) -> BBox {
        BBox { label: String::new(), y0, x0, y1, x1 }
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&bx(0.0, 0.0, 0.2, 0.2), &bx(0.5, 0.5, 0.9, 0.9)), 0.0);
        assert_eq!(iou(&a, &bx(0.0, 0.0, 1.0, 0.5)), 0.5);
        assert_eq!(iou(&bx(0.3, 0.3, 0.3, 0.3), &bx(0.3, 0.3, 0.3, 0.3)), 0.0);
    }

    #[test]
    fn mean_iou_rules() {
        let g = bx(0.1, 0.1, 0.5, 0.5);
        assert_eq!(mean_iou(&[(Some(g.clone()), g.clone())]), Ok(1.0));
        assert_eq!(mean_iou(&[(Some(g.clone()), g.clone()), (None, g.clone())]), Ok(0.5));
        assert!(mean_iou(&[]).is_err());
    }

    #[test]
    fn best_label_then_first() {
        let mut a = bx(0.0, 0.0, 0.1, 0.1);
        a.label = "heart".into();
        let mut b = bx(0.0, 0.0, 0.2, 0.2);
        b.label = "left lung".into();
        let mut c = b.clone();
        c.label = "left lung".into();
        c.y1 = 0.3;
        let preds = [a.clone(), b.clone(), c];
        assert_eq!(select_prediction(&preds, "left lung"), Some(&b));
        assert_eq!(select_prediction(&preds, "spleen"), Some(&a));
        assert_eq!(select_prediction(&[], "x"), None);
    }

    #[test]
    fn counts_examples() {
        let c = ConfusionCounts { tp: 2, fp: 1, fn_: 1, tn: 0 };
        assert!((f1_from_counts(&c) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(f1_from_counts(&ConfusionCounts::default()), 0.0);
        let perfect = ConfusionCounts { tp: 3, fp: 0, fn_: 0, tn: 4 };
        assert_eq!(f1_from_counts(&perfect), 1.0);
        assert_eq!(accuracy_from_counts(&perfect), 1.0);
    }

    #[test]
    fn miss_counts_wrong() {
        let mut c = ConfusionCounts::default();
        c.record(None, true);
        c.record(None, false);
        assert_eq!(c, ConfusionCounts { tp: 0, fp: 1, fn_: 1, tn: 0 });
        assert_eq!(accuracy_from_counts(&c), 0.0);
    }

    #[test]
    fn macro_examples() {
        assert_eq!(macro_average(&[1.0, 0.0]), Ok(0.5));
        assert_eq!(macro_average(&[0.3]), Ok(0.3));
        let eighteen: Vec<f64> = (0..18).map(|i| i as f64 / 17.0).collect();
        assert!((macro_average(&eighteen).unwrap() - 0.5).abs() < 1e-12);
        assert!(macro_average(&[]).is_err());
    }

    #[test]
    fn temporal_examples() {
        use TemporalClass::*;
        let rec = |p: &str, g, pr| (p.to_string(), g, pr);
        assert_eq!(
            temporal_macro_accuracy(&[rec("edema", Improved, Some(Improved)), rec("edema", Stable, Some(Worsened))]),
            Ok(0.5)
        );
        assert_eq!(temporal_macro_accuracy(&[rec("a", Stable, Some(Stable)), rec("b", Worsened, Some(Worsened))]), Ok(1.0));
        assert_eq!(temporal_macro_accuracy(&[rec("a", Stable, None)]), Ok(0.0));
        // Class-balanced within a pathology: 2/2 improved and 0/1 stable.
        assert_eq!(
            temporal_macro_accuracy(&[
                rec("a", Improved, Some(Improved)),
                rec("a", Improved, Some(Improved)),
                rec("a", Stable, Some(Improved)),
            ]),
            Ok(0.5)
        );
    }

    /// Brute force: expand the table into labelled records and count.
    fn f1_by_records(c: &ConfusionCounts) -> f64 {
        let mut records = Vec::new();
        records.extend(std::iter::repeat((true, true)).take(c.tp as usize));
        records.extend(std::iter::repeat((true, false)).take(c.fp as usize));
        records.extend(std::iter::repeat((false, true)).take(c.fn_ as usize));
        records.extend(std::iter::repeat((false, false)).take(c.tn as usize));
        let tp = records.iter().filter(|(p, g)| *p && *g).count() as f64;
        let pred_pos = records.iter().filter(|(p, _)| *p).count() as f64;
        let gold_pos = records.iter().filter(|(_, g)| *g).count() as f64;
        if pred_pos + gold_pos == 0.0 {
            return 0.0;
        }
        let (p, r) = (
            if pred_pos > 0.0 { tp / pred_pos } else { 0.0 },
            if gold_pos > 0.0 { tp / gold_pos } else { 0.0 },
        );
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    #[test]
    fn f1_matches_exhaustive_oracle() {
        for tp in 0..=5 {
            for fp in 0..=5 {
                for fn_ in 0..=5 {
                    for tn in 0..=5 {
                        let c = ConfusionCounts { tp, fp, fn_, tn };
                        assert!((f1_from_counts(&c) - f1_by_records(&c)).abs() < 1e-12, "{c:?}");
                    }
                }
            }
        }
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0f64..0.5, 0.0f64..0.5, 0.01f64..0.5, 0.01f64..0.5)
            .prop_map(|(y, x, h, w)| bx(y, x, y + h, x + w))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_reflexive(a in arb_box(), b in arb_box()) {
            prop_assert!((iou(&a, &b) - iou(&b, &a)).abs() < 1e-12);
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&iou(&a, &b)));
        }

        #[test]
        fn iou_translation_invariant(a in arb_box(), b in arb_box(), dy in 0.0f64..0.2, dx in 0.0f64..0.2) {
            let shift = |v: &BBox| bx(v.y0 + dy, v.x0 + dx, v.y1 + dy, v.x1 + dx);
            prop_assert!((iou(&a, &b) - iou(&shift(&a), &shift(&b))).abs() < 1e-9);
        }

        #[test]
        fn macro_properties(v in 0.0f64..1.0, n in 1usize..20, mut vals in proptest::collection::vec(0.0f64..1.0, 1..20)) {
            let same = vec![v; n];
            prop_assert!((macro_average(&same).unwrap() - v).abs() < 1e-12);
            let before = macro_average(&vals).unwrap();
            vals.reverse();
            prop_assert!((macro_average(&vals).unwrap() - before).abs() < 1e-12);
        }
    }
}
