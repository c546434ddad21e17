//! Context patches: resampling a grid cell with its surroundings into a
//! fixed-size network input, plus minority replication and augmentation.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use super::slice::{label_cells, AnnotatedSlice, CellRect};
use crate::error::Result;
use crate::labels::ClassLabel;
use crate::seed::rng_for;
use crate::tensor::Tensor;

/// Edge of the resampled annotation cell.
pub const CELL_PX: usize = 20;
/// Context window edge in cells; the patch covers 3x3 cells.
pub const CONTEXT_FACTOR: usize = 3;
/// Edge of a network input patch.
pub const PATCH_PX: usize = CELL_PX * CONTEXT_FACTOR;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PatchOrigin {
    pub slice_id: String,
    pub cell_row: usize,
    pub cell_col: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    /// `[1, 60, 60]`, values in [0, 1].
    pub pixels: Tensor<f32>,
    pub label: ClassLabel,
    pub origin: PatchOrigin,
}

/// Maps patch pixel indices to slice coordinates for one cell.
///
/// The context window starts one cell above and left of the cell and spans
/// three cells; pixel centres are aligned so the cell lands exactly on the
/// central 20x20 of the patch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContextGeometry {
    pub origin_y: f64,
    pub origin_x: f64,
    /// Slice pixels per patch pixel.
    pub scale: f64,
}

impl ContextGeometry {
    pub fn for_cell(cell: &CellRect) -> Self {
        let g = cell.size as f64;
        Self {
            origin_y: cell.y0 as f64 - g,
            origin_x: cell.x0 as f64 - g,
            scale: g / CELL_PX as f64,
        }
    }

    /// Slice coordinate of the centre of patch pixel `i` along one axis.
    pub fn to_slice(&self, origin: f64, i: f64) -> f64 {
        origin + (i + 0.5) * self.scale - 0.5
    }

    /// Continuous patch coordinate of slice pixel centre `p`.
    pub fn to_patch(&self, origin: f64, p: f64) -> f64 {
        (p + 0.5 - origin) / self.scale - 0.5
    }

    /// Slice pixel rows/columns whose centres fall inside the patch footprint.
    pub fn footprint(&self, height: usize, width: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let span = PATCH_PX as f64 * self.scale;
        let range = |origin: f64, limit: usize| {
            let lo = origin.max(0.0).ceil() as usize;
            let hi = ((origin + span).min(limit as f64)).ceil().max(0.0) as usize;
            lo.min(limit)..hi.min(limit)
        };
        (range(self.origin_y, height), range(self.origin_x, width))
    }
}

/// Bilinear sample with edge replication: coordinates are clamped into the
/// image before interpolation.
pub fn sample_bilinear(data: &[f32], height: usize, width: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (height - 1) as f64);
    let x = x.clamp(0.0, (width - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(height - 1), (x0 + 1).min(width - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |r: usize, c: usize| data[r * width + c] as f64;
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Resamples the square region starting at `(y0, x0)` with edge `span`
/// slice pixels onto an `out x out` grid.
pub fn resample_region(data: &[f32], height: usize, width: usize, y0: f64, x0: f64, span: f64, out: usize) -> Vec<f32> {
    let geo = ContextGeometry {
        origin_y: y0,
        origin_x: x0,
        scale: span / out as f64,
    };
    let mut px = Vec::with_capacity(out * out);
    for i in 0..out {
        let y = geo.to_slice(geo.origin_y, i as f64);
        for j in 0..out {
            let x = geo.to_slice(geo.origin_x, j as f64);
            px.push(sample_bilinear(data, height, width, y, x) as f32);
        }
    }
    px
}

/// The cell alone, resampled to 20x20.
pub fn cell_thumbnail(slice: &AnnotatedSlice, cell: &CellRect) -> Vec<f32> {
    resample_region(
        slice.image.data(),
        slice.height(),
        slice.width(),
        cell.y0 as f64,
        cell.x0 as f64,
        cell.size as f64,
        CELL_PX,
    )
}

/// Resamples the 3g x 3g context of `cell` to a 60x60 patch.
pub fn extract_patch(slice: &AnnotatedSlice, cell: &CellRect, label: ClassLabel) -> PatchSample {
    let geo = ContextGeometry::for_cell(cell);
    let mut px = resample_region(
        slice.image.data(),
        slice.height(),
        slice.width(),
        geo.origin_y,
        geo.origin_x,
        (CONTEXT_FACTOR * cell.size) as f64,
        PATCH_PX,
    );
    px.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    PatchSample {
        pixels: Tensor::new(vec![1, PATCH_PX, PATCH_PX], px).expect("patch size"),
        label,
        origin: PatchOrigin {
            slice_id: slice.id.clone(),
            cell_row: cell.row,
            cell_col: cell.col,
        },
    }
}

/// One labeled patch per grid cell of the slice.
pub fn extract_slice_patches(slice: &AnnotatedSlice) -> Result<Vec<PatchSample>> {
    Ok(label_cells(slice)?
        .into_iter()
        .map(|(cell, label)| extract_patch(slice, &cell, label))
        .collect())
}

/// Patches of all slices, in slice then cell order.
pub fn extract_all(slices: &[AnnotatedSlice]) -> Result<Vec<PatchSample>> {
    let per_slice: Vec<Vec<PatchSample>> = slices
        .par_iter()
        .map(extract_slice_patches)
        .collect::<Result<_>>()?;
    Ok(per_slice.into_iter().flatten().collect())
}

/// Indices of a replicated stream: diseased samples `factor` times,
/// healthy once, shuffled by `seed`.
pub fn oversample_indices(labels: &[ClassLabel], factor: usize, seed: u64) -> Vec<usize> {
    let factor = factor.max(1);
    let mut idx: Vec<usize> = labels
        .iter()
        .enumerate()
        .flat_map(|(i, l)| std::iter::repeat(i).take(if l.is_disease() { factor } else { 1 }))
        .collect();
    idx.shuffle(&mut rng_for(seed, OVERSAMPLE_SALT));
    idx
}

const OVERSAMPLE_SALT: u64 = 0x6f76_6572;

/// Replicates every diseased sample `factor` times (healthy samples once)
/// and shuffles the result with `seed`.
pub fn oversample_minority(samples: &[PatchSample], factor: usize, seed: u64) -> Vec<PatchSample> {
    let labels: Vec<ClassLabel> = samples.iter().map(|s| s.label).collect();
    oversample_indices(&labels, factor, seed)
        .into_iter()
        .map(|i| samples[i].clone())
        .collect()
}

/// Dihedral transforms used for augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transform {
    Identity,
    FlipHorizontal,
    FlipVertical,
    Rotate90,
    Rotate180,
    Rotate270,
}

impl Transform {
    pub const ALL: [Transform; 6] = [
        Transform::Identity,
        Transform::FlipHorizontal,
        Transform::FlipVertical,
        Transform::Rotate90,
        Transform::Rotate180,
        Transform::Rotate270,
    ];

    pub fn from_seed(seed: u64) -> Self {
        Self::ALL[rng_for(seed, 0xa11).random_range(0..Self::ALL.len())]
    }

    /// Applies the transform to each `size x size` plane of `data`
    /// (rotations are counter-clockwise).
    pub fn apply(self, data: &[f32], size: usize) -> Vec<f32> {
        let n = size;
        let mut out = vec![0.0; data.len()];
        for (dst, src) in out.chunks_mut(n * n).zip(data.chunks(n * n)) {
            for y in 0..n {
                for x in 0..n {
                    let (sy, sx) = match self {
                        Transform::Identity => (y, x),
                        Transform::FlipHorizontal => (y, n - 1 - x),
                        Transform::FlipVertical => (n - 1 - y, x),
                        Transform::Rotate90 => (x, n - 1 - y),
                        Transform::Rotate180 => (n - 1 - y, n - 1 - x),
                        Transform::Rotate270 => (n - 1 - x, y),
                    };
                    dst[y * n + x] = src[sy * n + sx];
                }
            }
        }
        out
    }
}

/// Applies one seed-chosen transform from {identity, flips, 90/180/270
/// rotations}; the label is unchanged.
pub fn augment(patch: &PatchSample, seed: u64) -> PatchSample {
    let t = Transform::from_seed(seed);
    let size = *patch.pixels.shape().last().expect("patch rank");
    PatchSample {
        pixels: Tensor::new(patch.pixels.shape().to_vec(), t.apply(patch.pixels.data(), size)).expect("same shape"),
        label: patch.label,
        origin: patch.origin.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::slice::{grid_partition, LabelMask};
    use proptest::prelude::*;
    use rand::Rng;
    use std::collections::{BTreeMap, BTreeSet};

    fn slice_from(h: usize, w: usize, g: usize, f: impl Fn(usize, usize) -> f32) -> AnnotatedSlice {
        let img = Tensor::from_fn(&[h, w], |i| f(i / w, i % w));
        AnnotatedSlice::new("t", img, LabelMask::healthy(h, w), g).unwrap()
    }

    #[test]
    fn constant_image_gives_constant_patch() {
        let s = slice_from(80, 80, 20, |_, _| 0.37);
        for cell in grid_partition(&s).unwrap() {
            let p = extract_patch(&s, &cell, ClassLabel::Healthy);
            assert_eq!(p.pixels.shape(), [1, 60, 60]);
            assert!(p.pixels.data().iter().all(|&v| (v - 0.37).abs() < 1e-6));
        }
    }

    #[test]
    fn corner_cells_are_edge_replicated() {
        let s = slice_from(40, 40, 20, |y, x| ((y * 40 + x) % 7) as f32 / 6.0);
        let cells = grid_partition(&s).unwrap();
        let p = extract_patch(&s, &cells[0], ClassLabel::Healthy);
        assert!(p.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
        // above-left of the corner cell replicates pixel (0, 0)
        assert_eq!(p.pixels.data()[0], s.image.data()[0]);
    }

    #[test]
    fn bilinear_downsample_keeps_a_ramp_linear() {
        let ramp = |y: usize, x: usize| (0.3 * y as f64 + 0.7 * x as f64) as f32 / 40.0;
        let data: Vec<f32> = (0..1600).map(|i| ramp(i / 40, i % 40)).collect();
        let out = resample_region(&data, 40, 40, 0.0, 0.0, 40.0, 20);
        // interior output samples lie on a plane: second differences vanish
        for i in 0..20 {
            for j in 1..19 {
                let d = out[i * 20 + j - 1] - 2.0 * out[i * 20 + j] + out[i * 20 + j + 1];
                assert!(d.abs() < 1e-5);
            }
        }
        for j in 0..20 {
            for i in 1..19 {
                let d = out[(i - 1) * 20 + j] - 2.0 * out[i * 20 + j] + out[(i + 1) * 20 + j];
                assert!(d.abs() < 1e-5);
            }
        }
        // corner-to-corner: the diagonal is an arithmetic progression
        let step = out[21] - out[0];
        for k in 0..20 {
            assert!((out[k * 21] - (out[0] + step * k as f32)).abs() < 1e-5);
        }
    }

    #[test]
    fn patch_centre_is_the_cell_thumbnail() {
        let s = slice_from(75, 75, 25, |y, x| ((y * 13 + x * 7) % 31) as f32 / 30.0);
        for cell in grid_partition(&s).unwrap() {
            let p = extract_patch(&s, &cell, ClassLabel::Healthy);
            let thumb = cell_thumbnail(&s, &cell);
            for i in 0..CELL_PX {
                for j in 0..CELL_PX {
                    let centre = p.pixels.data()[(i + CELL_PX) * PATCH_PX + j + CELL_PX];
                    assert!((centre - thumb[i * CELL_PX + j]).abs() < 1e-6);
                }
            }
        }
    }

    fn dummy(label: ClassLabel, id: usize) -> PatchSample {
        PatchSample {
            pixels: Tensor::zeros(&[1, 2, 2]),
            label,
            origin: PatchOrigin {
                slice_id: format!("s{id}"),
                cell_row: id,
                cell_col: 0,
            },
        }
    }

    #[test]
    fn replication_counts() {
        let three: Vec<_> = (0..3).map(|i| dummy(ClassLabel::Mucus, i)).collect();
        assert_eq!(oversample_minority(&three, 2, 1).len(), 6);
        let mixed: Vec<_> = (0..10)
            .map(|i| dummy(if i % 3 == 0 { ClassLabel::Atelectasis } else { ClassLabel::Healthy }, i))
            .collect();
        let once = oversample_minority(&mixed, 1, 4);
        let key = |v: &[PatchSample]| {
            let mut k: Vec<_> = v.iter().map(|s| s.origin.clone()).collect();
            k.sort();
            k
        };
        assert_eq!(key(&once), key(&mixed));
    }

    #[test]
    fn table_one_balance() {
        let mut labels = vec![ClassLabel::Healthy; 217_787];
        for (c, n) in [
            (ClassLabel::Bronchiectasis, 2507),
            (ClassLabel::Abnormal, 592),
            (ClassLabel::Mucus, 622),
            (ClassLabel::Atelectasis, 691),
        ] {
            labels.extend(std::iter::repeat(c).take(n));
        }
        let idx = oversample_indices(&labels, 16, 3);
        let diseased = idx.iter().filter(|&&i| labels[i].is_disease()).count();
        assert_eq!((diseased, idx.len()), (70_592, 288_379));
        assert!((diseased as f64 / idx.len() as f64 - 0.2448).abs() < 0.002);
    }

    fn sample_patch(seed: u64) -> PatchSample {
        let mut rng = crate::seed::rng_for(seed, 1);
        PatchSample {
            pixels: Tensor::from_fn(&[1, 60, 60], |_| rng.random::<f32>()),
            label: ClassLabel::Bronchiectasis,
            origin: PatchOrigin {
                slice_id: "a".into(),
                cell_row: 0,
                cell_col: 0,
            },
        }
    }

    #[test]
    fn rotations_compose() {
        let p = sample_patch(9);
        let twice = Transform::Rotate180.apply(&Transform::Rotate180.apply(p.pixels.data(), 60), 60);
        assert_eq!(twice, p.pixels.data());
        let r = Transform::Rotate90.apply(&Transform::Rotate270.apply(p.pixels.data(), 60), 60);
        assert_eq!(r, p.pixels.data());
        let r2 = Transform::Rotate90.apply(&Transform::Rotate90.apply(p.pixels.data(), 60), 60);
        assert_eq!(r2, Transform::Rotate180.apply(p.pixels.data(), 60));
    }

    #[test]
    fn augment_is_seeded_and_label_preserving() {
        let p = sample_patch(10);
        assert_eq!(augment(&p, 77), augment(&p, 77));
        let seen: BTreeSet<_> = (0..200).map(|s| Transform::from_seed(s) as u8).collect();
        assert_eq!(seen.len(), 6);
        assert_eq!(augment(&p, 5).label, p.label);
    }

    proptest! {
        #[test]
        fn transforms_permute_pixels(seed in any::<u64>(), which in 0usize..6) {
            let p = sample_patch(seed);
            let out = Transform::ALL[which].apply(p.pixels.data(), 60);
            let hist = |v: &[f32]| {
                let mut m = BTreeMap::new();
                for x in v {
                    *m.entry(x.to_bits()).or_insert(0usize) += 1;
                }
                m
            };
            prop_assert_eq!(hist(&out), hist(p.pixels.data()));
        }

        #[test]
        fn replication_keeps_distinct_origins(n in 1usize..40, factor in 1usize..5, seed in any::<u64>()) {
            let samples: Vec<_> = (0..n)
                .map(|i| dummy(ClassLabel::ALL[(i * 7 + seed as usize) % 5], i))
                .collect();
            let out = oversample_minority(&samples, factor, seed);
            let a: BTreeSet<_> = samples.iter().map(|s| s.origin.clone()).collect();
            let b: BTreeSet<_> = out.iter().map(|s| s.origin.clone()).collect();
            prop_assert_eq!(a, b);
            let expected: usize = samples.iter().map(|s| if s.label.is_disease() { factor } else { 1 }).sum();
            prop_assert_eq!(out.len(), expected);
        }
    }
}
