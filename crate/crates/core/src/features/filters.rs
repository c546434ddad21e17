//! Multi-scale Gaussian-derivative filter bank.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scales of the standard bank.
pub const BANK_SIGMAS: [f64; 3] = [0.5, 1.0, 1.5];

/// Maps produced per scale.
pub const MAPS_PER_SIGMA: usize = 5;

/// Sampled Gaussian and its first two derivatives on `-r..=r`, `r = ceil(3 sigma)`.
///
/// Each kernel is normalized against its moment so that convolving a
/// sampled polynomial reproduces the analytic derivative: `g` sums to 1,
/// `g1` differentiates `x` to 1, `g2` annihilates constants and maps `x^2`
/// to 2.
#[derive(Clone, Debug)]
pub struct GaussianKernels {
    pub radius: usize,
    pub g: Vec<f64>,
    pub g1: Vec<f64>,
    pub g2: Vec<f64>,
}

impl GaussianKernels {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!("filter sigma must be positive, got {sigma}")));
        }
        let radius = (3.0 * sigma).ceil() as usize;
        let ks: Vec<f64> = (-(radius as i64)..=radius as i64).map(|k| k as f64).collect();
        let raw: Vec<f64> = ks.iter().map(|k| (-k * k / (2.0 * sigma * sigma)).exp()).collect();
        let total: f64 = raw.iter().sum();
        let g: Vec<f64> = raw.iter().map(|v| v / total).collect();

        // (I * g1)(x) = sum_k I(x - k) g1(k); for I = x this is -sum_k k g1(k).
        let second_moment: f64 = ks.iter().zip(&g).map(|(k, v)| k * k * v).sum();
        let g1 = ks.iter().zip(&g).map(|(k, v)| -k * v / second_moment).collect();

        let shape: Vec<f64> = ks.iter().zip(&g).map(|(k, v)| (k * k - second_moment) * v).collect();
        let scale: f64 = ks.iter().zip(&shape).map(|(k, v)| k * k * v).sum();
        let g2 = shape.iter().map(|v| 2.0 * v / scale).collect();
        Ok(Self { radius, g, g1, g2 })
    }
}

/// Convolution along rows (`axis_x`) or columns with edge replication.
fn convolve_axis(data: &[f64], h: usize, w: usize, kernel: &[f64], axis_x: bool) -> Vec<f64> {
    let r = (kernel.len() / 2) as i64;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &kv) in kernel.iter().enumerate() {
                let k = j as i64 - r;
                let (sy, sx) = if axis_x {
                    (y as i64, (x as i64 - k).clamp(0, w as i64 - 1))
                } else {
                    ((y as i64 - k).clamp(0, h as i64 - 1), x as i64)
                };
                acc += data[sy as usize * w + sx as usize] * kv;
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn separable(data: &[f64], h: usize, w: usize, kx: &[f64], ky: &[f64]) -> Vec<f64> {
    let rows = convolve_axis(data, h, w, kx, true);
    convolve_axis(&rows, h, w, ky, false)
}

/// The five responses of one scale, each `[H, W]`.
#[derive(Clone, Debug)]
pub struct FilterResponses {
    pub gaussian: Tensor<f64>,
    pub gradient_magnitude: Tensor<f64>,
    pub laplacian: Tensor<f64>,
    /// Smaller Hessian eigenvalue.
    pub eig_min: Tensor<f64>,
    pub eig_max: Tensor<f64>,
}

impl FilterResponses {
    pub fn maps(&self) -> [&Tensor<f64>; MAPS_PER_SIGMA] {
        [&self.gaussian, &self.gradient_magnitude, &self.laplacian, &self.eig_min, &self.eig_max]
    }
}

/// `(height, width)` of a `[H, W]` or `[1, H, W]` patch.
pub(crate) fn patch_dims(patch: &Tensor<f32>) -> Result<(usize, usize)> {
    match patch.shape() {
        &[h, w] | &[1, h, w] if h > 0 && w > 0 => Ok((h, w)),
        s => Err(Error::shape(format!("expected a [H, W] or [1, H, W] patch, got {s:?}"))),
    }
}

pub fn filter_bank(patch: &Tensor<f32>, sigma: f64) -> Result<FilterResponses> {
    let (h, w) = patch_dims(patch)?;
    let k = GaussianKernels::new(sigma)?;
    let img: Vec<f64> = patch.data().iter().map(|&v| v as f64).collect();
    let smooth = separable(&img, h, w, &k.g, &k.g);
    let ix = separable(&img, h, w, &k.g1, &k.g);
    let iy = separable(&img, h, w, &k.g, &k.g1);
    let ixx = separable(&img, h, w, &k.g2, &k.g);
    let iyy = separable(&img, h, w, &k.g, &k.g2);
    let ixy = separable(&img, h, w, &k.g1, &k.g1);

    let n = h * w;
    let (mut grad, mut lap, mut lo, mut hi) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for i in 0..n {
        grad[i] = ix[i].hypot(iy[i]);
        lap[i] = ixx[i] + iyy[i];
        let mean = 0.5 * (ixx[i] + iyy[i]);
        let radius = (0.5 * (ixx[i] - iyy[i])).hypot(ixy[i]);
        lo[i] = mean - radius;
        hi[i] = mean + radius;
    }
    let map = |v: Vec<f64>| Tensor::new(vec![h, w], v);
    let out = FilterResponses {
        gaussian: map(smooth)?,
        gradient_magnitude: map(grad)?,
        laplacian: map(lap)?,
        eig_min: map(lo)?,
        eig_max: map(hi)?,
    };
    for m in out.maps() {
        m.ensure_finite("filter_bank")?;
    }
    Ok(out)
}
