//! 16 equalized intensity histograms per patch: the original patch plus the
//! five filter responses at each of the three bank scales.

use rayon::prelude::*;

use super::filters::{filter_bank, patch_dims, BANK_SIGMAS, MAPS_PER_SIGMA};
use crate::data::{PatchOrigin, PatchSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const HISTOGRAM_BINS: usize = 100;
pub const MAP_COUNT: usize = 1 + BANK_SIGMAS.len() * MAPS_PER_SIGMA;
pub const FEATURE_LEN: usize = MAP_COUNT * HISTOGRAM_BINS;

/// How each map's values are brought into [0, 1] before binning.
#[derive(Clone, Debug, PartialEq)]
pub enum MapRange {
    /// Min-max of the map itself; a constant map becomes all zeros.
    PerPatch,
    /// One fixed `(lo, hi)` per map, values clamped.
    Fixed(Vec<(f64, f64)>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureConfig {
    pub range: MapRange,
    pub equalize: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            range: MapRange::PerPatch,
            equalize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f32>,
    pub origin: Option<PatchOrigin>,
}

impl AsRef<[f32]> for FeatureVector {
    fn as_ref(&self) -> &[f32] {
        &self.values
    }
}

/// The 16 maps in feature order: original, then per scale gaussian, gradient
/// magnitude, laplacian, smaller and larger Hessian eigenvalue.
pub fn feature_maps(patch: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
    patch_dims(patch)?;
    let mut maps = Vec::with_capacity(MAP_COUNT);
    maps.push(patch.data().iter().map(|&v| v as f64).collect());
    for sigma in BANK_SIGMAS {
        let r = filter_bank(patch, sigma)?;
        maps.extend(r.maps().iter().map(|m| m.data().to_vec()));
    }
    Ok(maps)
}

pub fn normalize_min_max(map: &[f64]) -> Vec<f64> {
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; map.len()];
    }
    map.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// L1-normalized histogram of values in [0, 1]; 1.0 falls in the last bin.
pub fn unit_histogram(values: &[f64], bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    for &v in values {
        let b = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        h[b] += 1.0;
    }
    let n = values.len().max(1) as f64;
    h.iter_mut().for_each(|c| *c /= n);
    h
}

/// Moves each bin's mass to `round(cdf * (bins - 1))`, the bin its values
/// land in after equalization. Total mass is preserved.
pub fn equalize_histogram(hist: &[f64]) -> Vec<f64> {
    let bins = hist.len();
    let total: f64 = hist.iter().sum();
    let mut out = vec![0.0; bins];
    if total <= 0.0 {
        return out;
    }
    let mut cdf = 0.0;
    for &mass in hist {
        cdf += mass;
        if mass > 0.0 {
            let target = ((cdf / total) * (bins - 1) as f64).round() as usize;
            out[target.min(bins - 1)] += mass;
        }
    }
    out
}

pub fn build_feature_vector(patch: &Tensor<f32>) -> Result<FeatureVector> {
    build_feature_vector_with(patch, &FeatureConfig::default())
}

pub fn build_feature_vector_with(patch: &Tensor<f32>, cfg: &FeatureConfig) -> Result<FeatureVector> {
    let maps = feature_maps(patch)?;
    if let MapRange::Fixed(ranges) = &cfg.range {
        if ranges.len() != MAP_COUNT {
            return Err(Error::invalid(format!("fixed map range needs {MAP_COUNT} entries, got {}", ranges.len())));
        }
    }
    let mut values = Vec::with_capacity(FEATURE_LEN);
    for (m, map) in maps.iter().enumerate() {
        if map.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("build_feature_vector"));
        }
        let unit = match &cfg.range {
            MapRange::PerPatch => normalize_min_max(map),
            MapRange::Fixed(ranges) => {
                let (lo, hi) = ranges[m];
                let span = if hi > lo { hi - lo } else { 1.0 };
                map.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
            }
        };
        let mut hist = unit_histogram(&unit, HISTOGRAM_BINS);
        if cfg.equalize {
            hist = equalize_histogram(&hist);
        }
        values.extend(hist.iter().map(|&v| v as f32));
    }
    Ok(FeatureVector { values, origin: None })
}

/// Feature vectors of many patches, in order, carrying their origins.
pub fn features_for_samples(samples: &[PatchSample], cfg: &FeatureConfig) -> Result<Vec<FeatureVector>> {
    samples
        .par_iter()
        .map(|s| {
            let mut fv = build_feature_vector_with(&s.pixels, cfg)?;
            fv.origin = Some(s.origin.clone());
            Ok(fv)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_patch(side: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[1, side, side], |_| rng.random::<f32>())
    }

    fn block_sums(fv: &FeatureVector) -> Vec<f64> {
        fv.values
            .chunks(HISTOGRAM_BINS)
            .map(|b| b.iter().map(|&v| v as f64).sum())
            .collect()
    }

    #[test]
    fn vector_has_sixteen_unit_blocks() {
        for seed in 0..4 {
            let fv = build_feature_vector(&random_patch(60, seed)).unwrap();
            assert_eq!(fv.values.len(), FEATURE_LEN);
            assert_eq!(FEATURE_LEN, 1600);
            assert!(fv.values.iter().all(|v| v.is_finite() && *v >= 0.0));
            for s in block_sums(&fv) {
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn constant_patch_concentrates_each_histogram() {
        let patch = Tensor::full(&[1, 60, 60], 0.4f32);
        let raw = build_feature_vector_with(
            &patch,
            &FeatureConfig {
                equalize: false,
                ..Default::default()
            },
        )
        .unwrap();
        for block in raw.values.chunks(HISTOGRAM_BINS) {
            assert_eq!(block[0], 1.0);
            assert!(block[1..].iter().all(|&v| v == 0.0));
        }
        // Equalization maps a single full bin to the top of the range.
        let eq = build_feature_vector(&patch).unwrap();
        for block in eq.values.chunks(HISTOGRAM_BINS) {
            assert_eq!(block[HISTOGRAM_BINS - 1], 1.0);
        }
    }

    #[test]
    fn uniform_patch_histogram_is_flat() {
        // 100x100 = 10^4 uniform samples; each bin count is Binomial(n, 1/100).
        let patch = random_patch(100, 42);
        let unit = normalize_min_max(&feature_maps(&patch).unwrap()[0]);
        let hist = unit_histogram(&unit, HISTOGRAM_BINS);
        let (n, p): (f64, f64) = (10_000.0, 0.01);
        let se = (p * (1.0 - p) / n).sqrt();
        for (b, &mass) in hist.iter().enumerate() {
            assert!((mass - p).abs() <= 3.0 * se, "bin {b}: {mass}");
        }
    }

    #[test]
    fn histogram_edges() {
        let h = unit_histogram(&[0.0, 0.00999, 0.01, 0.5, 1.0], 100);
        assert_eq!(h[0], 0.4);
        assert_eq!(h[1], 0.2);
        assert_eq!(h[50], 0.2);
        assert_eq!(h[99], 0.2);
    }

    #[test]
    fn equalization_follows_the_cdf() {
        // Two bins of mass 0.5: cdfs 0.5 and 1.0 over 5 bins -> targets 2 and 4.
        let eq = equalize_histogram(&[0.5, 0.0, 0.0, 0.5, 0.0]);
        assert_eq!(eq, vec![0.0, 0.0, 0.5, 0.0, 0.5]);
        let flat = vec![0.25; 4];
        // cdfs 0.25, 0.5, 0.75, 1 over 3 steps -> 0.75, 1.5, 2.25, 3 rounded.
        assert_eq!(equalize_histogram(&flat), vec![0.0, 0.25, 0.5, 0.25]);
        assert_eq!(equalize_histogram(&[0.0; 3]), vec![0.0; 3]);
    }

    #[test]
    fn fixed_ranges_are_checked() {
        let patch = random_patch(60, 1);
        let bad = FeatureConfig {
            range: MapRange::Fixed(vec![(0.0, 1.0); 3]),
            equalize: true,
        };
        assert!(build_feature_vector_with(&patch, &bad).is_err());
        let good = FeatureConfig {
            range: MapRange::Fixed(vec![(-1.0, 1.0); MAP_COUNT]),
            equalize: false,
        };
        let fv = build_feature_vector_with(&patch, &good).unwrap();
        assert!(block_sums(&fv).iter().all(|s| (s - 1.0).abs() < 1e-6));
    }

    #[test]
    fn non_finite_patch_is_an_error() {
        let mut patch = random_patch(60, 2);
        patch.data_mut()[7] = f32::NAN;
        assert!(build_feature_vector(&patch).is_err());
    }
}
