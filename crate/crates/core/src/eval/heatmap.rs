//! Slice-level heatmaps from patch heatmaps, thresholding and PGM output.

use std::io::Write;
use std::path::Path;

use crate::data::{sample_bilinear, CellRect, ContextGeometry, PATCH_PX};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn map_dims(t: &Tensor<f32>) -> Result<(usize, usize)> {
    match t.shape() {
        &[h, w] | &[1, h, w] if h > 0 && w > 0 => Ok((h, w)),
        s => Err(Error::shape(format!("expected a [H, W] heatmap, got {s:?}"))),
    }
}

/// Maps each patch heatmap back onto the slice through the inverse of the
/// patch resampling and averages wherever patches overlap. Pixels no patch
/// covers stay 0.
pub fn aggregate_heatmap(patches: &[(Tensor<f32>, CellRect)], height: usize, width: usize) -> Result<Tensor<f32>> {
    let mut sum = vec![0.0f64; height * width];
    let mut count = vec![0u32; height * width];
    for (map, cell) in patches {
        if map_dims(map)? != (PATCH_PX, PATCH_PX) {
            return Err(Error::shape(format!("patch heatmap must be {PATCH_PX}x{PATCH_PX}, got {:?}", map.shape())));
        }
        if cell.size == 0 || cell.y0 + cell.size > height || cell.x0 + cell.size > width {
            return Err(Error::invalid(format!(
                "cell ({}, {}) lies outside the {height}x{width} slice",
                cell.row, cell.col
            )));
        }
        let geo = ContextGeometry::for_cell(cell);
        let (rows, cols) = geo.footprint(height, width);
        for y in rows {
            let py = geo.to_patch(geo.origin_y, y as f64);
            for x in cols.clone() {
                let px = geo.to_patch(geo.origin_x, x as f64);
                sum[y * width + x] += sample_bilinear(map.data(), PATCH_PX, PATCH_PX, py, px);
                count[y * width + x] += 1;
            }
        }
    }
    let data = sum
        .iter()
        .zip(&count)
        .map(|(&s, &n)| if n == 0 { 0.0 } else { (s / n as f64) as f32 })
        .collect();
    Tensor::new(vec![height, width], data)
}

/// Pixels at or above the nearest-rank `percentile` of the nonzero values.
/// An all-zero heatmap gives an empty mask.
pub fn threshold_heatmap(heatmap: &Tensor<f32>, percentile: f64) -> Result<Vec<bool>> {
    if !(percentile > 0.0 && percentile < 100.0) {
        return Err(Error::invalid(format!("percentile {percentile} is outside (0, 100)")));
    }
    let mut nonzero: Vec<f32> = heatmap.data().iter().copied().filter(|&v| v != 0.0).collect();
    if nonzero.is_empty() {
        return Ok(vec![false; heatmap.len()]);
    }
    nonzero.sort_by(f32::total_cmp);
    let rank = ((percentile / 100.0 * nonzero.len() as f64).ceil() as usize).clamp(1, nonzero.len());
    let cut = nonzero[rank - 1];
    Ok(heatmap.data().iter().map(|&v| v != 0.0 && v >= cut).collect())
}

/// 8-bit binary PGM; values are clamped to [0, 1] and scaled to 0..=255.
pub fn write_pgm(path: &Path, heatmap: &Tensor<f32>) -> Result<()> {
    let (h, w) = map_dims(heatmap)?;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(heatmap.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Mean heatmap value inside and outside a pixel mask of the same size.
pub fn mean_inside_outside(map: &Tensor<f32>, mask: &[bool]) -> Result<(f64, f64)> {
    if map.len() != mask.len() {
        return Err(Error::shape(format!("mask of {} pixels for a heatmap of {}", mask.len(), map.len())));
    }
    let (mut sums, mut counts) = ([0.0f64; 2], [0usize; 2]);
    for (&v, &m) in map.data().iter().zip(mask) {
        sums[m as usize] += v as f64;
        counts[m as usize] += 1;
    }
    if counts.contains(&0) {
        return Err(Error::invalid("mask must have pixels both inside and outside"));
    }
    Ok((sums[1] / counts[1] as f64, sums[0] / counts[0] as f64))
}

pub fn mask_to_tensor(mask: &[bool], height: usize, width: usize) -> Result<Tensor<f32>> {
    Tensor::new(vec![height, width], mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())
}
