use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::labels::ClassLabel;

const CLASSES: usize = ClassLabel::ALL.len();

/// Classes averaged into `f1_class_avg`; abnormal is excluded.
pub const F1_AVERAGE_CLASSES: [ClassLabel; 3] =
    [ClassLabel::Bronchiectasis, ClassLabel::Mucus, ClassLabel::Atelectasis];

pub(crate) fn class_index(c: ClassLabel) -> usize {
    ClassLabel::ALL.iter().position(|&k| k == c).expect("label is in ALL")
}

/// `num / den`, with 0/0 taken as 0.
fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Ground-truth count.
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocPoint {
    /// Scores `>= threshold` are called positive; the first point uses +inf.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub area: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Rows are ground truth, columns predictions, both in `ClassLabel::ALL` order.
    pub confusion: [[u64; CLASSES]; CLASSES],
    pub per_class: [ClassMetrics; CLASSES],
    /// Healthy-vs-disease collapse.
    pub tpr: f64,
    pub tnr: f64,
    pub accuracy: f64,
    /// Exact-class accuracy over all five classes.
    pub class_accuracy: f64,
    pub f1_class_avg: f64,
    /// One-vs-rest curves for classes whose truth has both outcomes.
    pub roc: BTreeMap<ClassLabel, RocCurve>,
}

impl EvalReport {
    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    pub fn metrics(&self, class: ClassLabel) -> ClassMetrics {
        self.per_class[class_index(class)]
    }

    /// Collapsed `[[TN, FP], [FN, TP]]`.
    pub fn binary_confusion(&self) -> [[u64; 2]; 2] {
        let mut m = [[0; 2]; 2];
        for (t, row) in self.confusion.iter().enumerate() {
            for (p, &n) in row.iter().enumerate() {
                m[ClassLabel::ALL[t].is_disease() as usize][ClassLabel::ALL[p].is_disease() as usize] += n;
            }
        }
        m
    }

    /// Adds one-vs-rest ROC curves from per-patch class scores (in
    /// `ClassLabel::ALL` order); classes with single-outcome truth are skipped.
    pub fn with_roc(mut self, scores: &[[f64; CLASSES]], truth: &[ClassLabel]) -> Result<Self> {
        self.roc = class_rocs(scores, truth)?;
        Ok(self)
    }
}

pub fn evaluate_predictions(pred: &[ClassLabel], truth: &[ClassLabel]) -> Result<EvalReport> {
    if pred.len() != truth.len() {
        return Err(Error::invalid(format!("{} predictions for {} ground-truth labels", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    let mut confusion = [[0u64; CLASSES]; CLASSES];
    for (&p, &t) in pred.iter().zip(truth) {
        confusion[class_index(t)][class_index(p)] += 1;
    }
    let mut per_class = [ClassMetrics {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
        support: 0,
    }; CLASSES];
    for (c, m) in per_class.iter_mut().enumerate() {
        let tp = confusion[c][c] as f64;
        let support: u64 = confusion[c].iter().sum();
        let predicted: u64 = confusion.iter().map(|row| row[c]).sum();
        m.support = support;
        m.precision = ratio(tp, predicted as f64);
        m.recall = ratio(tp, support as f64);
        m.f1 = ratio(2.0 * m.precision * m.recall, m.precision + m.recall);
    }
    let report = EvalReport {
        confusion,
        per_class,
        tpr: 0.0,
        tnr: 0.0,
        accuracy: 0.0,
        class_accuracy: ratio((0..CLASSES).map(|c| confusion[c][c]).sum::<u64>() as f64, pred.len() as f64),
        f1_class_avg: F1_AVERAGE_CLASSES.iter().map(|&c| per_class[class_index(c)].f1).sum::<f64>()
            / F1_AVERAGE_CLASSES.len() as f64,
        roc: BTreeMap::new(),
    };
    let [[tn, fp], [fn_, tp]] = report.binary_confusion().map(|r| r.map(|v| v as f64));
    Ok(EvalReport {
        tpr: ratio(tp, tp + fn_),
        tnr: ratio(tn, tn + fp),
        accuracy: ratio(tp + tn, tp + tn + fp + fn_),
        ..report
    })
}

/// Sweeps every distinct score as a threshold, highest first; area by the
/// trapezoid rule.
pub fn roc_curve(scores: &[f64], truth: &[bool]) -> Result<RocCurve> {
    if scores.len() != truth.len() {
        return Err(Error::invalid(format!("{} scores for {} labels", scores.len(), truth.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("roc_curve scores"));
    }
    let pos = truth.iter().filter(|&&t| t).count() as f64;
    let neg = truth.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::invalid("ROC needs both positive and negative ground truth"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut k = 0;
    while k < order.len() {
        let t = scores[order[k]];
        while k < order.len() && scores[order[k]] == t {
            if truth[order[k]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            k += 1;
        }
        points.push(RocPoint {
            threshold: t,
            fpr: fp / neg,
            tpr: tp / pos,
        });
    }
    let area = points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum();
    Ok(RocCurve { points, area })
}

pub fn class_rocs(scores: &[[f64; CLASSES]], truth: &[ClassLabel]) -> Result<BTreeMap<ClassLabel, RocCurve>> {
    if scores.len() != truth.len() {
        return Err(Error::invalid(format!("{} score rows for {} labels", scores.len(), truth.len())));
    }
    let mut out = BTreeMap::new();
    for (c, &class) in ClassLabel::ALL.iter().enumerate() {
        let is_class: Vec<bool> = truth.iter().map(|&t| t == class).collect();
        if is_class.iter().all(|&b| b) || !is_class.iter().any(|&b| b) {
            continue;
        }
        let s: Vec<f64> = scores.iter().map(|row| row[c]).collect();
        out.insert(class, roc_curve(&s, &is_class)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use ClassLabel::*;

    fn any_label() -> impl Strategy<Value = ClassLabel> {
        (0usize..5).prop_map(|i| ClassLabel::ALL[i])
    }

    #[test]
    fn perfect_prediction() {
        let truth = [Healthy, Bronchiectasis, Mucus, Atelectasis, Abnormal, Healthy];
        let r = evaluate_predictions(&truth, &truth).unwrap();
        assert_eq!((r.tpr, r.tnr, r.accuracy, r.class_accuracy), (1.0, 1.0, 1.0, 1.0));
        for c in ClassLabel::ALL {
            assert_eq!(r.metrics(c).f1, 1.0);
        }
        assert_eq!(r.f1_class_avg, 1.0);
    }

    #[test]
    fn all_healthy_prediction() {
        let truth = [Healthy, Mucus, Healthy, Atelectasis];
        let r = evaluate_predictions(&[Healthy; 4], &truth).unwrap();
        assert_eq!((r.tpr, r.tnr), (0.0, 1.0));
        assert_eq!(r.accuracy, 0.5);
    }

    #[test]
    fn hand_computed_confusion() {
        let pred = [Bronchiectasis, Bronchiectasis, Mucus, Healthy];
        let truth = [Bronchiectasis, Mucus, Mucus, Healthy];
        let r = evaluate_predictions(&pred, &truth).unwrap();
        let be = r.metrics(Bronchiectasis);
        assert_eq!((be.precision, be.recall), (0.5, 1.0));
        assert!((be.f1 - 2.0 / 3.0).abs() < 1e-12);
        let mu = r.metrics(Mucus);
        assert_eq!((mu.precision, mu.recall), (1.0, 0.5));
        assert!((mu.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.metrics(Atelectasis).f1, 0.0);
        assert!((r.f1_class_avg - 4.0 / 9.0).abs() < 1e-9);
        assert_eq!(r.confusion[class_index(Mucus)][class_index(Bronchiectasis)], 1);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(evaluate_predictions(&[Healthy], &[Healthy, Mucus]).is_err());
        assert!(evaluate_predictions(&[], &[]).is_err());
    }

    #[test]
    fn roc_oracles() {
        let r = roc_curve(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert_eq!(r.area, 0.75);
        let perfect = roc_curve(&[0.0, 0.0, 1.0, 1.0], &[false, false, true, true]).unwrap();
        assert_eq!(perfect.area, 1.0);
        let constant = roc_curve(&[0.3; 6], &[true, false, true, false, false, true]).unwrap();
        assert_eq!(constant.area, 0.5);
        assert!(roc_curve(&[0.1, 0.2], &[true, true]).is_err());
        assert!(roc_curve(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn roc_points_are_sorted_by_fpr() {
        let r = roc_curve(&[0.9, 0.1, 0.5, 0.5, 0.7, 0.2], &[true, false, true, false, false, true]).unwrap();
        assert!(r.points.windows(2).all(|w| w[0].fpr <= w[1].fpr && w[0].tpr <= w[1].tpr));
        let last = r.points.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
    }

    /// Area as the probability that a positive outranks a negative (ties 1/2).
    fn pairwise_area(scores: &[f64], truth: &[bool]) -> f64 {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (i, &ti) in truth.iter().enumerate() {
            for (j, &tj) in truth.iter().enumerate() {
                if ti && !tj {
                    pairs += 1.0;
                    wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 1.0,
                        std::cmp::Ordering::Equal => 0.5,
                        std::cmp::Ordering::Less => 0.0,
                    };
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn class_rocs_skip_absent_classes() {
        let truth = [Healthy, Mucus, Healthy, Mucus];
        let scores = [
            [0.9, 0.0, 0.0, 0.1, 0.0],
            [0.2, 0.0, 0.0, 0.8, 0.0],
            [0.6, 0.0, 0.0, 0.4, 0.0],
            [0.7, 0.0, 0.0, 0.3, 0.0],
        ];
        let rocs = class_rocs(&scores, &truth).unwrap();
        assert_eq!(rocs.keys().copied().collect::<Vec<_>>(), vec![Healthy, Mucus]);
        assert_eq!(rocs[&Mucus].area, 0.75);
    }

    proptest! {
        #[test]
        fn binary_collapse_is_consistent(pairs in prop::collection::vec((any_label(), any_label()), 1..60)) {
            let (pred, truth): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let r = evaluate_predictions(&pred, &truth).unwrap();
            let agree = pred.iter().zip(&truth).filter(|(p, t)| p.is_disease() == t.is_disease()).count();
            prop_assert!((r.accuracy - agree as f64 / pred.len() as f64).abs() < 1e-12);
            for (c, row) in r.confusion.iter().enumerate() {
                let n = truth.iter().filter(|&&t| t == ClassLabel::ALL[c]).count() as u64;
                prop_assert_eq!(row.iter().sum::<u64>(), n);
            }
            for v in [r.tpr, r.tnr, r.accuracy, r.f1_class_avg] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn f1_average_ignores_abnormal(pairs in prop::collection::vec((any_label(), any_label()), 1..40)) {
            let (pred, truth): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let base = evaluate_predictions(&pred, &truth).unwrap();
            // Appending abnormal-vs-abnormal and abnormal-vs-healthy rows moves only
            // abnormal and healthy cells.
            let mut p2 = pred.clone();
            let mut t2 = truth.clone();
            p2.extend([Abnormal, Healthy, Abnormal]);
            t2.extend([Abnormal, Abnormal, Healthy]);
            let more = evaluate_predictions(&p2, &t2).unwrap();
            prop_assert!((base.f1_class_avg - more.f1_class_avg).abs() < 1e-12);
        }

        #[test]
        fn roc_area_matches_pairwise_oracle(
            rows in prop::collection::vec((0u8..8, any::<bool>()), 2..30),
        ) {
            let scores: Vec<f64> = rows.iter().map(|r| r.0 as f64 / 8.0).collect();
            let truth: Vec<bool> = rows.iter().map(|r| r.1).collect();
            prop_assume!(truth.iter().any(|&t| t) && truth.iter().any(|&t| !t));
            let area = roc_curve(&scores, &truth).unwrap().area;
            prop_assert!((area - pairwise_area(&scores, &truth)).abs() < 1e-12);
            // Strictly monotone transform.
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(roc_curve(&warped, &truth).unwrap().area, area);
        }
    }
}
