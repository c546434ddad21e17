//! Training objectives: the dice loss of the detector and the class-weighted
//! cross-entropy of the scorer.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Added to numerator and denominator of the dice ratio so that an all-zero
/// prediction against an all-zero truth has loss 0.
pub const DICE_SMOOTHING: f64 = 1e-6;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the log.
pub const PROB_CLAMP: f64 = 1e-7;

/// `L = 1 - 2 sum(p y) / (sum(p^2) + sum(y^2))` over the whole vector, with
/// smoothing. Returns the loss and dL/dp.
pub fn dice_loss<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if pred.shape() != truth.shape() || pred.is_empty() {
        return Err(Error::shape(format!(
            "dice_loss prediction {:?} and truth {:?} must match",
            pred.shape(),
            truth.shape()
        )));
    }
    if let Some(p) = pred.data().iter().find(|p| !(p.as_f64() >= 0.0 && p.as_f64() <= 1.0)) {
        return Err(Error::invalid(format!("dice_loss prediction {p:?} is outside [0, 1]")));
    }
    if let Some(y) = truth.data().iter().find(|y| !(y.is_zero() || y.is_one())) {
        return Err(Error::invalid(format!("dice_loss truth {y:?} is not binary")));
    }
    let (mut py, mut pp, mut yy) = (0.0f64, 0.0f64, 0.0f64);
    for (&p, &y) in pred.data().iter().zip(truth.data()) {
        let (p, y) = (p.as_f64(), y.as_f64());
        py += p * y;
        pp += p * p;
        yy += y * y;
    }
    let num = 2.0 * py + DICE_SMOOTHING;
    let den = pp + yy + DICE_SMOOTHING;
    let loss = 1.0 - num / den;
    let grad = Tensor::from_fn(pred.shape(), |i| {
        let (p, y) = (pred.data()[i].as_f64(), truth.data()[i].as_f64());
        T::of(-(2.0 * y * den - num * 2.0 * p) / (den * den))
    });
    Ok((loss, grad))
}

/// `L = -(1/n) sum_i sum_j w_j y_ij log p_ij` for `[n, m]` predictions.
///
/// `weights[j]` is the weight of column `j`. The gradient is taken at the
/// clamped probability.
pub fn weighted_cross_entropy<T: Scalar>(
    pred: &Tensor<T>,
    truth: &Tensor<T>,
    weights: &[f64],
) -> Result<(f64, Tensor<T>)> {
    pred.expect_rank(2, "weighted_cross_entropy prediction")?;
    if pred.shape() != truth.shape() {
        return Err(Error::shape(format!(
            "weighted_cross_entropy prediction {:?} and truth {:?} must match",
            pred.shape(),
            truth.shape()
        )));
    }
    let (n, m) = (pred.shape()[0], pred.shape()[1]);
    if weights.len() != m {
        return Err(Error::shape(format!("{} class weights for {m} columns", weights.len())));
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0)) {
        return Err(Error::invalid(format!("class weight {w} is not positive")));
    }
    for (i, row) in truth.data().chunks(m).enumerate() {
        let ones = row.iter().filter(|v| v.is_one()).count();
        let zeros = row.iter().filter(|v| v.is_zero()).count();
        if ones != 1 || zeros != m - 1 {
            return Err(Error::invalid(format!("truth row {i} is not one-hot")));
        }
    }
    for (i, row) in pred.data().chunks(m).enumerate() {
        let s: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (s - 1.0).abs() > 1e-5 || row.iter().any(|v| !(v.as_f64() >= 0.0)) {
            return Err(Error::invalid(format!("prediction row {i} is not a probability vector (sum {s})")));
        }
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(pred.shape());
    for (idx, (&p, &y)) in pred.data().iter().zip(truth.data()).enumerate() {
        if y.is_one() {
            let w = weights[idx % m];
            let pc = p.as_f64().clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            loss -= inv_n * w * pc.ln();
            grad.data_mut()[idx] = T::of(-inv_n * w / pc);
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_difference_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn dice_perfect_and_disjoint() {
        assert!(dice_loss(&t(&[1.0, 0.0, 1.0]), &t(&[1.0, 0.0, 1.0])).unwrap().0.abs() < 1e-9);
        assert!((dice_loss(&t(&[0.0, 0.0]), &t(&[1.0, 1.0])).unwrap().0 - 1.0).abs() < 1e-6);
        // smoothing makes the empty case a perfect match
        assert!(dice_loss(&t(&[0.0, 0.0]), &t(&[0.0, 0.0])).unwrap().0.abs() < 1e-12);
    }

    #[test]
    fn dice_hand_value_and_gradient() {
        // 1 - 2 * 0.5 / (0.25 + 1)
        let (loss, grad) = dice_loss(&t(&[0.5]), &t(&[1.0])).unwrap();
        assert!((loss - 0.2).abs() < 1e-6, "{loss}");
        let f = |p: &Tensor<f64>| dice_loss(p, &t(&[1.0])).unwrap().0;
        assert!(finite_difference_check(f, &t(&[0.5]), &grad, 1e-6) < 1e-4);
    }

    #[test]
    fn dice_gradient_at_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p: Vec<f64> = (0..8).map(|_| rng.random_range(0.05..0.95)).collect();
        let y: Vec<f64> = (0..8).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let (_, g) = dice_loss(&t(&p), &t(&y)).unwrap();
        let f = |p: &Tensor<f64>| dice_loss(p, &t(&y)).unwrap().0;
        assert!(finite_difference_check(f, &t(&p), &g, 1e-6) < 1e-4);
    }

    #[test]
    fn dice_rejects_out_of_range_prediction() {
        assert!(dice_loss(&t(&[1.2]), &t(&[1.0])).is_err());
        assert!(dice_loss(&t(&[0.2]), &t(&[0.5])).is_err());
    }

    fn rows(n: usize, m: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![n, m], v.to_vec()).unwrap()
    }

    #[test]
    fn cross_entropy_hand_values() {
        let (l, _) = weighted_cross_entropy(&rows(1, 2, &[0.5, 0.5]), &rows(1, 2, &[1.0, 0.0]), &[1.0, 1.0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-6);
        let (l, _) = weighted_cross_entropy(&rows(1, 2, &[1.0, 0.0]), &rows(1, 2, &[1.0, 0.0]), &[1.0, 1.0]).unwrap();
        assert!(l >= 0.0 && l < 2e-7, "{l}");
        let truth = rows(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let pred = rows(2, 2, &[0.3, 0.7, 0.6, 0.4]);
        let (a, _) = weighted_cross_entropy(&pred, &truth, &[1.0, 1.0]).unwrap();
        let (b, _) = weighted_cross_entropy(&pred, &truth, &[2.0, 1.0]).unwrap();
        // doubling the first class weight doubles the first sample's term
        assert!((b - a - (-(0.3f64).ln() / 2.0)).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_non_one_hot() {
        let err = weighted_cross_entropy(&rows(1, 2, &[0.5, 0.5]), &rows(1, 2, &[1.0, 1.0]), &[1.0, 1.0]);
        assert!(err.unwrap_err().to_string().contains("one-hot"));
    }

    #[test]
    fn cross_entropy_gradient() {
        let pred = rows(3, 3, &[0.2, 0.3, 0.5, 0.6, 0.1, 0.3, 0.25, 0.25, 0.5]);
        let truth = rows(3, 3, &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let w = [1.2, 1.0, 1.8];
        let (_, g) = weighted_cross_entropy(&pred, &truth, &w).unwrap();
        // the loss as a function of free probabilities (no simplex check)
        let f = |p: &Tensor<f64>| -> f64 {
            -(1.0 / 3.0)
                * p.data()
                    .iter()
                    .zip(truth.data())
                    .enumerate()
                    .map(|(i, (&p, &y))| w[i % 3] * y * p.ln())
                    .sum::<f64>()
        };
        assert!(finite_difference_check(f, &pred, &g, 1e-7) < 1e-4);
    }

    proptest! {
        #[test]
        fn dice_is_bounded(p in prop::collection::vec(0.0f64..=1.0, 1..20), seed in any::<u64>()) {
            let y: Vec<f64> = (0..p.len()).map(|i| ((seed >> (i % 64)) & 1) as f64).collect();
            let (l, _) = dice_loss(&t(&p), &t(&y)).unwrap();
            prop_assert!((0.0..=1.0).contains(&l));
        }

        #[test]
        fn dice_is_symmetric_on_binary_vectors(a in any::<u32>(), b in any::<u32>(), n in 1usize..32) {
            let bits = |s: u32| t(&(0..n).map(|i| ((s >> i) & 1) as f64).collect::<Vec<_>>());
            let l1 = dice_loss(&bits(a), &bits(b)).unwrap().0;
            let l2 = dice_loss(&bits(b), &bits(a)).unwrap().0;
            prop_assert!((l1 - l2).abs() < 1e-12);
        }

        #[test]
        fn unit_weights_give_plain_cross_entropy(raw in prop::collection::vec(0.01f64..1.0, 8), cls in prop::collection::vec(0usize..4, 2)) {
            let mut p = raw.clone();
            for row in p.chunks_mut(4) {
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            let mut y = vec![0.0; 8];
            y[cls[0]] = 1.0;
            y[4 + cls[1]] = 1.0;
            let (l, _) = weighted_cross_entropy(&rows(2, 4, &p), &rows(2, 4, &y), &[1.0; 4]).unwrap();
            let plain = -(p[cls[0]].ln() + p[4 + cls[1]].ln()) / 2.0;
            prop_assert!((l - plain).abs() < 1e-12);
        }
    }
}
