//! Central finite-difference gradient checking.

use crate::tensor::Tensor;

/// Largest per-coordinate relative error between `analytic_grad` and the
/// central difference `(f(x + h e_i) - f(x - h e_i)) / 2h`.
///
/// The relative error of a coordinate is `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn finite_difference_check(
    f: impl Fn(&Tensor<f64>) -> f64,
    x: &Tensor<f64>,
    analytic_grad: &Tensor<f64>,
    h: f64,
) -> f64 {
    assert!(h > 0.0, "finite difference step must be positive");
    assert_eq!(x.shape(), analytic_grad.shape(), "gradient shape");
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = analytic_grad.data()[i];
        let denom = numeric.abs().max(analytic.abs()).max(1e-8);
        worst = worst.max((numeric - analytic).abs() / denom);
    }
    worst
}
