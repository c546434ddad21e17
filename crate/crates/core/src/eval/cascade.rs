use crate::error::{Error, Result};
use crate::labels::ClassLabel;
use crate::model::{predict_batch, Head, LayerStack};
use crate::tensor::Tensor;

use super::metrics::class_index;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

pub struct CascadeModel {
    pub detector: LayerStack<f32>,
    pub scorer: LayerStack<f32>,
    pub threshold: f64,
}

impl CascadeModel {
    pub fn new(detector: LayerStack<f32>, scorer: LayerStack<f32>, threshold: f64) -> Result<Self> {
        if detector.head != Head::Binary {
            return Err(Error::invalid(format!("cascade detector needs a binary head, got {}", detector.head)));
        }
        if scorer.head != Head::Multiclass(4) || scorer.head.classes().contains(&ClassLabel::Healthy) {
            return Err(Error::invalid(format!("cascade scorer needs a 4-class disease head, got {}", scorer.head)));
        }
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::invalid(format!("detector threshold {threshold} is outside (0, 1)")));
        }
        Ok(Self {
            detector,
            scorer,
            threshold,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeOutput {
    pub label: ClassLabel,
    pub detector_score: f32,
    /// Softmax over `ClassLabel::DISEASES`.
    pub scorer_scores: Vec<f32>,
}

impl CascadeOutput {
    /// Per-class scores in `ClassLabel::ALL` order: healthy `1 - d`, disease
    /// `c` gets `d * scorer_c`.
    pub fn class_scores(&self) -> [f64; 5] {
        let d = self.detector_score as f64;
        let mut s = [0.0; 5];
        s[class_index(ClassLabel::Healthy)] = 1.0 - d;
        for (c, &p) in ClassLabel::DISEASES.iter().zip(&self.scorer_scores) {
            s[class_index(*c)] = d * p as f64;
        }
        s
    }
}

fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Healthy below the threshold, otherwise the scorer's most likely disease.
pub fn gate(detector_score: f32, scorer_scores: &[f32], threshold: f64) -> ClassLabel {
    if (detector_score as f64) < threshold {
        ClassLabel::Healthy
    } else {
        ClassLabel::DISEASES[argmax(scorer_scores)]
    }
}

pub fn cascade_predict_batch(model: &CascadeModel, patches: &[&Tensor<f32>]) -> Result<Vec<CascadeOutput>> {
    let det = predict_batch(&model.detector, patches)?;
    let sc = predict_batch(&model.scorer, patches)?;
    Ok(det
        .into_iter()
        .zip(sc)
        .map(|(d, s)| CascadeOutput {
            label: gate(d[0], &s, model.threshold),
            detector_score: d[0],
            scorer_scores: s,
        })
        .collect())
}

pub fn cascade_predict(model: &CascadeModel, patch: &Tensor<f32>) -> Result<CascadeOutput> {
    Ok(cascade_predict_batch(model, &[patch])?.remove(0))
}

/// Label and `ClassLabel::ALL`-ordered scores of a single network's output row.
pub fn network_prediction(head: Head, row: &[f32]) -> Result<(ClassLabel, [f64; 5])> {
    match head {
        Head::Binary => Err(Error::invalid(
            "a binary detector alone cannot name a class; pair it with a scorer",
        )),
        Head::Multiclass(_) => {
            let classes = head.classes();
            let mut s = [0.0; 5];
            for (c, &p) in classes.iter().zip(row) {
                s[class_index(*c)] = p as f64;
            }
            Ok((classes[argmax(row)], s))
        }
    }
}
