//! Per-channel batch normalization over `[N, C, ...]` tensors.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BnHyper {
    pub epsilon: f64,
    /// Weight kept by the running statistics on each update.
    pub momentum: f64,
}

impl Default for BnHyper {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            momentum: DEFAULT_MOMENTUM,
        }
    }
}

/// Running mean and variance used at inference.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Number of training batches folded in so far.
    pub updates: u64,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            updates: 0,
        }
    }
}

pub struct BnCache<T> {
    x_hat: Vec<T>,
    inv_std: Vec<T>,
    shape: Vec<usize>,
}

pub struct BnGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

fn layout<T: Scalar>(input: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let s = input.shape();
    if s.len() < 2 {
        return Err(Error::shape(format!("batch_norm expects [N, C, ...], got {s:?}")));
    }
    let (n, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(format!(
            "batch_norm scale {:?} / shift {:?} do not match {c} channels",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok((n, c, inner))
}

/// Training-mode forward: normalizes with batch statistics and folds them into `stats`.
pub fn batch_norm_train<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &mut RunningStats<T>,
    hyper: BnHyper,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let (n, c, inner) = layout(input, gamma, beta)?;
    let m = n * inner;
    if m < 2 {
        return Err(Error::invalid(format!(
            "batch_norm training needs at least 2 values per channel, got {m}"
        )));
    }
    let x = input.data();
    let eps = T::of(hyper.epsilon);
    let mf = T::of(m as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut x_hat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); c];
    let momentum = T::of(hyper.momentum);
    for ch in 0..c {
        let values = || (0..n).flat_map(move |b| (b * c + ch) * inner..(b * c + ch + 1) * inner);
        let mean = values().map(|i| x[i]).sum::<T>() / mf;
        let var = values().map(|i| (x[i] - mean) * (x[i] - mean)).sum::<T>() / mf;
        let istd = T::one() / (var + eps).sqrt();
        inv_std[ch] = istd;
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        for i in values() {
            let xh = (x[i] - mean) * istd;
            x_hat[i] = xh;
            out[i] = g * xh + b;
        }
        let unbiased = var * mf / T::of((m - 1) as f64);
        stats.mean[ch] = momentum * stats.mean[ch] + (T::one() - momentum) * mean;
        stats.var[ch] = momentum * stats.var[ch] + (T::one() - momentum) * unbiased;
    }
    stats.updates += 1;
    let out = Tensor::new(input.shape().to_vec(), out)?;
    out.ensure_finite("batch_norm")?;
    Ok((
        out,
        BnCache {
            x_hat,
            inv_std,
            shape: input.shape().to_vec(),
        },
    ))
}

/// Inference-mode forward using the running statistics only.
pub fn batch_norm_infer<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &RunningStats<T>,
    hyper: BnHyper,
) -> Result<Tensor<T>> {
    let (n, c, inner) = layout(input, gamma, beta)?;
    if stats.updates == 0 {
        return Err(Error::UninitializedStatistics);
    }
    let eps = T::of(hyper.epsilon);
    let scale: Vec<T> = (0..c)
        .map(|ch| gamma.data()[ch] / (stats.var[ch] + eps).sqrt())
        .collect();
    let mut out = input.clone();
    for b in 0..n {
        for ch in 0..c {
            let (s, mu, shift) = (scale[ch], stats.mean[ch], beta.data()[ch]);
            let base = (b * c + ch) * inner;
            for v in &mut out.data_mut()[base..base + inner] {
                *v = (*v - mu) * s + shift;
            }
        }
    }
    out.ensure_finite("batch_norm")?;
    Ok(out)
}

pub fn batch_norm_backward<T: Scalar>(cache: &BnCache<T>, gamma: &Tensor<T>, grad_out: &Tensor<T>) -> Result<BnGrads<T>> {
    if grad_out.shape() != cache.shape.as_slice() {
        return Err(Error::shape(format!(
            "batch_norm grad_out {:?} does not match input {:?}",
            grad_out.shape(),
            cache.shape
        )));
    }
    let (n, c) = (cache.shape[0], cache.shape[1]);
    let inner: usize = cache.shape[2..].iter().product();
    let mf = T::of((n * inner) as f64);
    let dy = grad_out.data();
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let idx = || (0..n).flat_map(move |b| (b * c + ch) * inner..(b * c + ch + 1) * inner);
        let sum_dy: T = idx().map(|i| dy[i]).sum();
        let sum_dy_xh: T = idx().map(|i| dy[i] * cache.x_hat[i]).sum();
        dgamma[ch] = sum_dy_xh;
        dbeta[ch] = sum_dy;
        let k = gamma.data()[ch] * cache.inv_std[ch] / mf;
        for i in idx() {
            dx[i] = k * (mf * dy[i] - sum_dy - cache.x_hat[i] * sum_dy_xh);
        }
    }
    Ok(BnGrads {
        input: Tensor::new(cache.shape.clone(), dx)?,
        gamma: Tensor::new(vec![c], dgamma)?,
        beta: Tensor::new(vec![c], dbeta)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_difference_check;
    use crate::testutil::random_tensor;

    fn channel_moments(t: &Tensor<f64>, ch: usize) -> (f64, f64) {
        let s = t.shape();
        let (n, c, inner) = (s[0], s[1], s[2] * s[3]);
        let vals: Vec<f64> = (0..n)
            .flat_map(|b| t.data()[(b * c + ch) * inner..(b * c + ch + 1) * inner].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        (mean, var)
    }

    #[test]
    fn train_mode_standardizes_each_channel() {
        let x = random_tensor::<f64>(&[4, 3, 5, 5], 1).map(|v| 3.0 * v + 7.0);
        let mut stats = RunningStats::new(3);
        let (y, _) = batch_norm_train(&x, &Tensor::full(&[3], 1.0), &Tensor::zeros(&[3]), &mut stats, BnHyper::default()).unwrap();
        for ch in 0..3 {
            let (m, v) = channel_moments(&y, ch);
            assert!(m.abs() < 1e-4, "{m}");
            assert!((v - 1.0).abs() < 1e-3, "{v}");
        }
        assert_eq!(stats.updates, 1);
    }

    #[test]
    fn zero_scale_gives_constant_shift() {
        let x = random_tensor::<f32>(&[2, 2, 3, 3], 2);
        let mut stats = RunningStats::new(2);
        let shift = Tensor::new(vec![2], vec![0.3, -0.7]).unwrap();
        let (y, _) = batch_norm_train(&x, &Tensor::zeros(&[2]), &shift, &mut stats, BnHyper::default()).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            assert_eq!(*v, shift.data()[(i / 9) % 2]);
        }
    }

    #[test]
    fn infer_before_training_is_an_error() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        let stats = RunningStats::new(1);
        let err = batch_norm_infer(&x, &Tensor::full(&[1], 1.0), &Tensor::zeros(&[1]), &stats, BnHyper::default());
        assert!(matches!(err, Err(Error::UninitializedStatistics)));
    }

    #[test]
    fn running_statistics_follow_momentum() {
        let x = Tensor::<f64>::new(vec![2, 1, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let mut stats = RunningStats::new(1);
        batch_norm_train(&x, &Tensor::full(&[1], 1.0), &Tensor::zeros(&[1]), &mut stats, BnHyper::default()).unwrap();
        // batch mean 4, unbiased variance 20/3
        assert!((stats.mean[0] - 0.4).abs() < 1e-12);
        assert!((stats.var[0] - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-12);
        let y = batch_norm_infer(&x, &Tensor::full(&[1], 1.0), &Tensor::zeros(&[1]), &stats, BnHyper::default()).unwrap();
        let expect = (1.0 - 0.4) / (stats.var[0] + 1e-5).sqrt();
        assert!((y.data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn single_value_per_channel_is_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 2, 1, 1]);
        let mut stats = RunningStats::new(2);
        assert!(batch_norm_train(&x, &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2]), &mut stats, BnHyper::default()).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = random_tensor::<f64>(&[3, 2, 2, 3], 31);
        let gamma = random_tensor::<f64>(&[2], 32).map(|v| v + 1.5);
        let beta = random_tensor::<f64>(&[2], 33);
        let proj = random_tensor::<f64>(&[3, 2, 2, 3], 34);
        let f = |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| {
            let mut s = RunningStats::new(2);
            let (y, _) = batch_norm_train(x, g, b, &mut s, BnHyper::default()).unwrap();
            y.data().iter().zip(proj.data()).map(|(a, p)| a * p).sum::<f64>()
        };
        let mut s = RunningStats::new(2);
        let (_, cache) = batch_norm_train(&x, &gamma, &beta, &mut s, BnHyper::default()).unwrap();
        let g = batch_norm_backward(&cache, &gamma, &proj).unwrap();
        let ex = finite_difference_check(|v| f(v, &gamma, &beta), &x, &g.input, 1e-5);
        let eg = finite_difference_check(|v| f(&x, v, &beta), &gamma, &g.gamma, 1e-5);
        let eb = finite_difference_check(|v| f(&x, &gamma, v), &beta, &g.beta, 1e-5);
        assert!(ex < 1e-3 && eg < 1e-3 && eb < 1e-3, "{ex} {eg} {eb}");
    }
}
