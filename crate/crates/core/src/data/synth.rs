//! Synthetic CT-like slices with texture lesions, and small patch sets for
//! model sanity benchmarks.
//!
//! Slices are rendered in a Hounsfield-like range, clamped to
//! [-1000, 400] and min-max rescaled. Every slice contains a saturated
//! vessel pixel and an air pixel, so the rescale is the same fixed map for
//! all slices. Lesions are square blocks of grid cells separated by at least
//! two healthy cells, which keeps every healthy cell's 3x3 context free of
//! more than one lesion.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::patch::{PatchOrigin, PatchSample, PATCH_PX};
use super::slice::{rescale_intensity, AnnotatedSlice, LabelMask};
use crate::error::{Error, Result};
use crate::kv::{join_list, KvDoc};
use crate::labels::ClassLabel;
use crate::seed::rng_for;
use crate::tensor::Tensor;

pub const HU_MIN: f32 = -1000.0;
pub const HU_MAX: f32 = 400.0;
const PARENCHYMA: f32 = -800.0;
/// Pixel noise standard deviation in HU per unit of `noise`.
const NOISE_HU: f32 = 60.0;
/// Minimum number of healthy cells between two lesion blocks.
const BLOCK_GAP: usize = 2;
const PLACEMENT_ATTEMPTS: usize = 2000;

/// Diseased-class counts of the clinical training set, used as the default
/// class mix: bronchiectasis, abnormal, mucus, atelectasis.
pub const CLINICAL_DISEASE_COUNTS: [(ClassLabel, f64); 4] = [
    (ClassLabel::Bronchiectasis, 2507.0),
    (ClassLabel::Abnormal, 592.0),
    (ClassLabel::Mucus, 622.0),
    (ClassLabel::Atelectasis, 691.0),
];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub slices: usize,
    pub height: usize,
    pub width: usize,
    pub grid_size_px: usize,
    /// Lesion block edge in cells.
    pub block_cells: usize,
    /// Fraction of all cells that are diseased.
    pub disease_fraction: f64,
    /// Relative weight of each disease class.
    pub class_mix: Vec<(ClassLabel, f64)>,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            slices: 50,
            height: 200,
            width: 200,
            grid_size_px: 20,
            block_cells: 2,
            disease_fraction: 0.02,
            class_mix: CLINICAL_DISEASE_COUNTS.to_vec(),
            noise: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.slices == 0 || self.block_cells == 0 {
            return Err(Error::invalid("synthetic set needs at least one slice and a positive block size"));
        }
        if self.grid_size_px < super::slice::MIN_GRID_SIZE || self.height < self.grid_size_px || self.width < self.grid_size_px {
            return Err(Error::invalid(format!(
                "grid {} does not fit a {}x{} slice",
                self.grid_size_px, self.height, self.width
            )));
        }
        let (rows, cols) = self.cell_dims();
        if rows < self.block_cells + 2 || cols < self.block_cells + 2 {
            return Err(Error::invalid("slice too small for a lesion block with a healthy border"));
        }
        if !(0.0..1.0).contains(&self.disease_fraction) {
            return Err(Error::invalid(format!("disease fraction {} is outside [0, 1)", self.disease_fraction)));
        }
        if self.class_mix.iter().any(|(c, w)| !c.is_disease() || !(*w > 0.0)) {
            return Err(Error::invalid("class mix needs diseased classes with positive weights"));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::invalid(format!("noise level {} is negative", self.noise)));
        }
        Ok(())
    }

    pub fn cell_dims(&self) -> (usize, usize) {
        (self.height / self.grid_size_px, self.width / self.grid_size_px)
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("slices", self.slices);
        doc.set("height", self.height);
        doc.set("width", self.width);
        doc.set("grid_size_px", self.grid_size_px);
        doc.set("block_cells", self.block_cells);
        doc.set("disease_fraction", self.disease_fraction);
        let mix: Vec<String> = self.class_mix.iter().map(|(c, w)| format!("{}:{w}", c.short())).collect();
        doc.set("class_mix", join_list(&mix));
        doc.set("noise", self.noise);
        doc.set("seed", self.seed);
        doc
    }

    /// Reads the keys present in `doc`, defaulting the rest.
    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        let d = Self::default();
        let class_mix = match doc.get_list::<String>("class_mix")? {
            None => d.class_mix,
            Some(items) => items
                .iter()
                .map(|item| {
                    let (c, w) = item
                        .split_once(':')
                        .ok_or_else(|| Error::format(doc.origin(), format!("class mix item {item:?} is not class:weight")))?;
                    let c: ClassLabel = c.parse()?;
                    let w: f64 = w
                        .parse()
                        .map_err(|_| Error::format(doc.origin(), format!("bad class weight in {item:?}")))?;
                    Ok((c, w))
                })
                .collect::<Result<_>>()?,
        };
        let cfg = Self {
            slices: doc.get_or("slices", d.slices)?,
            height: doc.get_or("height", d.height)?,
            width: doc.get_or("width", d.width)?,
            grid_size_px: doc.get_or("grid_size_px", d.grid_size_px)?,
            block_cells: doc.get_or("block_cells", d.block_cells)?,
            disease_fraction: doc.get_or("disease_fraction", d.disease_fraction)?,
            class_mix,
            noise: doc.get_or("noise", d.noise)?,
            seed: doc.get_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A lesion block: top-left cell and class.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Block {
    row: usize,
    col: usize,
    label: ClassLabel,
}

/// Number of blocks per class: the disease cell budget split by the class
/// mix with largest remainders, at least one block per listed class.
fn allocate_blocks(cfg: &SynthConfig) -> Vec<ClassLabel> {
    let (rows, cols) = cfg.cell_dims();
    let cells = (cfg.slices * rows * cols) as f64;
    let per_block = (cfg.block_cells * cfg.block_cells) as f64;
    let total = (cfg.disease_fraction * cells / per_block).round() as usize;
    let weight_sum: f64 = cfg.class_mix.iter().map(|(_, w)| w).sum();
    let quotas: Vec<f64> = cfg.class_mix.iter().map(|(_, w)| w / weight_sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    let assigned: usize = counts.iter().sum();
    for &i in order.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts.iter_mut().for_each(|c| *c = (*c).max(1));
    cfg.class_mix
        .iter()
        .zip(counts)
        .flat_map(|(&(c, _), n)| std::iter::repeat(c).take(n))
        .collect()
}

fn separated(a: &Block, b: &Block, size: usize) -> bool {
    let far = size + BLOCK_GAP;
    a.row.abs_diff(b.row) >= far || a.col.abs_diff(b.col) >= far
}

fn place_blocks(cfg: &SynthConfig) -> Result<Vec<Vec<Block>>> {
    let (rows, cols) = cfg.cell_dims();
    let b = cfg.block_cells;
    let mut labels = allocate_blocks(cfg);
    let mut rng = rng_for(cfg.seed, 0x626c_6f63);
    labels.shuffle(&mut rng);
    let mut per_slice: Vec<Vec<Block>> = vec![Vec::new(); cfg.slices];
    for label in labels {
        let placed = (0..PLACEMENT_ATTEMPTS).find_map(|_| {
            let s = rng.random_range(0..cfg.slices);
            // one healthy cell between the block and the slice border
            let cand = Block {
                row: rng.random_range(1..=rows - b - 1),
                col: rng.random_range(1..=cols - b - 1),
                label,
            };
            per_slice[s].iter().all(|o| separated(o, &cand, b)).then_some((s, cand))
        });
        let (s, block) = placed.ok_or_else(|| {
            Error::invalid(format!(
                "cannot place {} lesion blocks in {} slices; lower disease_fraction or add slices",
                per_slice.iter().map(Vec::len).sum::<usize>() + 1,
                cfg.slices
            ))
        })?;
        per_slice[s].push(block);
    }
    Ok(per_slice)
}

/// A few random low-frequency sinusoids, amplitude ~`amp` HU.
struct SmoothField {
    waves: Vec<(f32, f32, f32, f32)>,
}

impl SmoothField {
    fn new(rng: &mut ChaCha8Rng, amp: f32) -> Self {
        let waves = (0..4)
            .map(|_| {
                let freq = rng.random_range(1.0f32 / 90.0..1.0 / 35.0) * std::f32::consts::TAU;
                let theta = rng.random_range(0.0..std::f32::consts::PI);
                let phase = rng.random_range(0.0..std::f32::consts::TAU);
                (freq * theta.cos(), freq * theta.sin(), phase, amp / 4.0)
            })
            .collect();
        Self { waves }
    }

    fn at(&self, y: f32, x: f32) -> f32 {
        self.waves.iter().map(|&(fy, fx, ph, a)| a * (fy * y + fx * x + ph).sin()).sum()
    }
}

fn gaussian_bump(hu: &mut [f32], w: usize, cy: f32, cx: f32, sigma: f32, peak: f32) {
    let h = hu.len() / w;
    let r = (3.0 * sigma).ceil() as isize;
    let (iy, ix) = (cy.round() as isize, cx.round() as isize);
    for y in (iy - r).max(0)..(iy + r + 1).min(h as isize) {
        for x in (ix - r).max(0)..(ix + r + 1).min(w as isize) {
            let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
            hu[y as usize * w + x as usize] += peak * (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
}

/// Renders one lesion texture over the pixel square `[y0, y0+span) x [x0, x0+span)`.
fn render_lesion(hu: &mut [f32], w: usize, y0: usize, x0: usize, span: usize, label: ClassLabel, rng: &mut ChaCha8Rng) {
    let pixels = (y0..y0 + span).flat_map(|y| (x0..x0 + span).map(move |x| (y, x)));
    match label {
        ClassLabel::Bronchiectasis => {
            // dilated airways: dark lumen inside a bright wall
            let k = (span / 20).max(1);
            let cell = span as f32 / k as f32;
            let mut rings = Vec::new();
            for i in 0..k {
                for j in 0..k {
                    let cy = y0 as f32 + (i as f32 + 0.5) * cell + rng.random_range(-2.0..2.0);
                    let cx = x0 as f32 + (j as f32 + 0.5) * cell + rng.random_range(-2.0..2.0);
                    rings.push((cy, cx, cell * rng.random_range(0.28..0.36)));
                }
            }
            for (y, x) in pixels {
                for &(cy, cx, r) in &rings {
                    let d = ((y as f32 - cy).powi(2) + (x as f32 - cx).powi(2)).sqrt();
                    let v = &mut hu[y * w + x];
                    if d < r - 1.5 {
                        *v = -950.0;
                    } else {
                        *v += 650.0 * (-((d - r) / 1.2).powi(2)).exp();
                    }
                }
            }
        }
        ClassLabel::Mucus => {
            let n = (span * span / 300).max(3);
            for _ in 0..n {
                let cy = y0 as f32 + rng.random_range(4.0..span as f32 - 4.0);
                let cx = x0 as f32 + rng.random_range(4.0..span as f32 - 4.0);
                gaussian_bump(hu, w, cy, cx, rng.random_range(2.5..3.5), 750.0);
            }
        }
        ClassLabel::Atelectasis => {
            for (y, x) in pixels {
                hu[y * w + x] = -960.0;
            }
        }
        ClassLabel::Abnormal => {
            let theta = rng.random_range(0.0..std::f32::consts::PI);
            let (sy, sx) = (theta.sin(), theta.cos());
            let freq = std::f32::consts::TAU / 8.0;
            for (y, x) in pixels {
                hu[y * w + x] += 280.0 * (freq * (sy * y as f32 + sx * x as f32)).sin();
            }
        }
        ClassLabel::Healthy => {}
    }
}

fn render_slice(cfg: &SynthConfig, index: usize, blocks: &[Block]) -> Result<AnnotatedSlice> {
    let (h, w, g) = (cfg.height, cfg.width, cfg.grid_size_px);
    let mut rng = rng_for(cfg.seed, 0x5_0000 + index as u64);
    let field = SmoothField::new(&mut rng, 80.0);
    let mut hu: Vec<f32> = (0..h * w)
        .map(|i| PARENCHYMA + field.at((i / w) as f32, (i % w) as f32))
        .collect();
    let mut mask = LabelMask::healthy(h, w);
    for block in blocks {
        let (y0, x0, span) = (block.row * g, block.col * g, cfg.block_cells * g);
        render_lesion(&mut hu, w, y0, x0, span, block.label, &mut rng);
        for y in y0..y0 + span {
            mask.codes[y * w + x0..y * w + x0 + span].fill(block.label.code());
        }
    }
    // vessels: a few tiny bright dots, the first saturating exactly
    for k in 0..3 {
        let (y, x) = (rng.random_range(0..h), rng.random_range(0..w));
        gaussian_bump(&mut hu, w, y as f32, x as f32, 0.8, if k == 0 { 2000.0 } else { 900.0 });
    }
    if cfg.noise > 0.0 {
        let normal = Normal::new(0.0f32, NOISE_HU * cfg.noise as f32).expect("finite std");
        hu.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    // one air pixel and one saturated vessel pixel pin the intensity range
    let air = rng.random_range(0..h * w);
    hu[air] = HU_MIN;
    let vessel = (air + h * w / 2) % (h * w);
    hu[vessel] = HU_MAX;
    hu.iter_mut().for_each(|v| *v = v.clamp(HU_MIN, HU_MAX));
    let image = rescale_intensity(&Tensor::new(vec![h, w], hu)?);
    AnnotatedSlice::new(format!("synth_{index:04}"), image, mask, g)
}

/// Deterministic synthetic slices per `cfg`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<AnnotatedSlice>> {
    cfg.validate()?;
    let blocks = place_blocks(cfg)?;
    blocks
        .par_iter()
        .enumerate()
        .map(|(i, b)| render_slice(cfg, i, b))
        .collect()
}

/// Maps HU to the fixed [0, 1] scale used by synthetic slices.
pub fn hu_to_unit(v: f32) -> f32 {
    ((v - HU_MIN) / (HU_MAX - HU_MIN)).clamp(0.0, 1.0)
}

fn background_patch(rng: &mut ChaCha8Rng, noise: f64) -> Vec<f32> {
    let field = SmoothField::new(rng, 80.0);
    let normal = Normal::new(0.0f32, NOISE_HU * noise as f32 + f32::MIN_POSITIVE).expect("finite std");
    (0..PATCH_PX * PATCH_PX)
        .map(|i| {
            let v = PARENCHYMA + field.at((i / PATCH_PX) as f32, (i % PATCH_PX) as f32);
            v + if noise > 0.0 { normal.sample(rng) } else { 0.0 }
        })
        .collect()
}

fn to_patch(hu: Vec<f32>, label: ClassLabel, set: &str, index: usize) -> PatchSample {
    PatchSample {
        pixels: Tensor::new(vec![1, PATCH_PX, PATCH_PX], hu.into_iter().map(hu_to_unit).collect()).expect("patch size"),
        label,
        origin: PatchOrigin {
            slice_id: set.to_string(),
            cell_row: index,
            cell_col: 0,
        },
    }
}

/// Two linearly separable textures: bright blobs (labeled mucus) and
/// stripes (labeled healthy), alternating, `n` patches.
pub fn blobs_vs_stripes(n: usize, noise: f64, seed: u64) -> Vec<PatchSample> {
    (0..n)
        .map(|i| {
            let mut rng = rng_for(seed, 0xb10b_0000 + i as u64);
            let mut hu = background_patch(&mut rng, noise);
            let label = if i % 2 == 0 {
                render_lesion(&mut hu, PATCH_PX, 0, 0, PATCH_PX, ClassLabel::Mucus, &mut rng);
                ClassLabel::Mucus
            } else {
                render_lesion(&mut hu, PATCH_PX, 0, 0, PATCH_PX, ClassLabel::Abnormal, &mut rng);
                ClassLabel::Healthy
            };
            to_patch(hu, label, "blobs_vs_stripes", i)
        })
        .collect()
}

/// A weak-label localization sample: the patch, whether a blob is present,
/// and the blob's pixel footprint (empty when absent).
#[derive(Clone, Debug)]
pub struct BlobPatch {
    pub sample: PatchSample,
    pub present: bool,
    /// Row-major 60x60 flags, true inside the blob.
    pub blob_mask: Vec<bool>,
}

/// Patches with one bright blob (label mucus) or none (healthy), alternating.
pub fn blob_patches(n: usize, noise: f64, seed: u64) -> Vec<BlobPatch> {
    (0..n)
        .map(|i| {
            let mut rng = rng_for(seed, 0xb1_0000_0000 + i as u64);
            let mut hu = background_patch(&mut rng, noise);
            let present = i % 2 == 0;
            let mut blob_mask = vec![false; PATCH_PX * PATCH_PX];
            if present {
                let sigma = rng.random_range(4.0f32..6.0);
                let cy = rng.random_range(12.0f32..48.0);
                let cx = rng.random_range(12.0f32..48.0);
                gaussian_bump(&mut hu, PATCH_PX, cy, cx, sigma, 750.0);
                for (k, m) in blob_mask.iter_mut().enumerate() {
                    let d2 = ((k / PATCH_PX) as f32 - cy).powi(2) + ((k % PATCH_PX) as f32 - cx).powi(2);
                    *m = d2 <= (1.5 * sigma).powi(2);
                }
            }
            let label = if present { ClassLabel::Mucus } else { ClassLabel::Healthy };
            BlobPatch {
                sample: to_patch(hu, label, "blobs", i),
                present,
                blob_mask,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::slice::label_cells;
    use std::collections::BTreeMap;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            slices: 6,
            disease_fraction: 0.04,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_same_slices() {
        assert_eq!(synth_generate(&small(3)).unwrap(), synth_generate(&small(3)).unwrap());
        assert_ne!(synth_generate(&small(3)).unwrap(), synth_generate(&small(4)).unwrap());
    }

    #[test]
    fn intensity_range_is_pinned() {
        for s in synth_generate(&small(1)).unwrap() {
            let d = s.image.data();
            assert_eq!(d.iter().cloned().fold(f32::INFINITY, f32::min), 0.0);
            assert_eq!(d.iter().cloned().fold(f32::NEG_INFINITY, f32::max), 1.0);
        }
    }

    #[test]
    fn clinical_imbalance_is_reproduced() {
        let cfg = SynthConfig {
            slices: 50,
            seed: 11,
            ..SynthConfig::default()
        };
        let slices = synth_generate(&cfg).unwrap();
        let mut counts: BTreeMap<ClassLabel, usize> = BTreeMap::new();
        for s in &slices {
            for (_, l) in label_cells(s).unwrap() {
                *counts.entry(l).or_default() += 1;
            }
        }
        let total: usize = counts.values().sum();
        assert_eq!(total, 50 * 100);
        let frac = |c| *counts.get(&c).unwrap_or(&0) as f64 / total as f64;
        assert!((frac(ClassLabel::Healthy) - 0.98).abs() <= 0.005);
        let diseased: f64 = CLINICAL_DISEASE_COUNTS.iter().map(|(_, n)| n).sum();
        assert_eq!(diseased, 4412.0);
        for (c, n) in CLINICAL_DISEASE_COUNTS {
            assert!((frac(c) - 0.02 * n / diseased).abs() <= 0.005, "{c}: {}", frac(c));
        }
    }

    #[test]
    fn noiseless_ring_cells_are_labeled_as_rings() {
        let cfg = SynthConfig {
            slices: 1,
            disease_fraction: 0.04,
            class_mix: vec![(ClassLabel::Bronchiectasis, 1.0)],
            noise: 0.0,
            seed: 2,
            ..SynthConfig::default()
        };
        let s = &synth_generate(&cfg).unwrap()[0];
        let labeled = label_cells(s).unwrap();
        let ring: Vec<_> = labeled.iter().filter(|(_, l)| *l == ClassLabel::Bronchiectasis).collect();
        assert_eq!(ring.len(), 4);
        for (cell, _) in ring {
            let win = s.mask.window(cell);
            assert!(win.iter().all(|&c| c == ClassLabel::Bronchiectasis.code()));
            // the ring walls are far brighter than parenchyma
            let px: Vec<f32> = (cell.y0..cell.y0 + cell.size)
                .flat_map(|y| s.image.data()[y * 200 + cell.x0..y * 200 + cell.x0 + cell.size].to_vec())
                .collect();
            assert!(px.iter().cloned().fold(0.0, f32::max) > hu_to_unit(-400.0));
        }
    }

    #[test]
    fn blocks_keep_their_distance() {
        let cfg = SynthConfig {
            slices: 3,
            disease_fraction: 0.1,
            seed: 5,
            ..SynthConfig::default()
        };
        for blocks in place_blocks(&cfg).unwrap() {
            for (i, a) in blocks.iter().enumerate() {
                assert!(a.row >= 1 && a.row + 2 <= 9 && a.col >= 1 && a.col + 2 <= 9);
                for b in &blocks[i + 1..] {
                    assert!(separated(a, b, 2));
                }
            }
        }
    }

    #[test]
    fn overfull_request_is_an_error() {
        let cfg = SynthConfig {
            slices: 1,
            disease_fraction: 0.9,
            ..SynthConfig::default()
        };
        assert!(synth_generate(&cfg).is_err());
    }

    #[test]
    fn config_round_trips_through_kv() {
        let cfg = small(9);
        let text = cfg.to_kv().to_string();
        let back = SynthConfig::from_kv(&KvDoc::parse(&text, std::path::Path::new("c")).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn patch_generators_are_deterministic_and_in_range() {
        let a = blobs_vs_stripes(6, 0.3, 1);
        assert_eq!(a, blobs_vs_stripes(6, 0.3, 1));
        assert!(a.iter().all(|p| p.pixels.data().iter().all(|v| (0.0..=1.0).contains(v))));
        let b = blob_patches(4, 0.3, 2);
        assert!(b[0].present && b[0].blob_mask.iter().any(|&m| m));
        assert!(!b[1].present && b[1].blob_mask.iter().all(|&m| !m));
    }
}
