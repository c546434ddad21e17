use crate::error::{Error, Result};
use crate::labels::ClassLabel;
use crate::tensor::Tensor;

/// Smallest accepted grid cell edge in pixels.
pub const MIN_GRID_SIZE: usize = 4;

/// Fraction of a cell that diseased pixels must cover for the cell to be
/// labeled diseased (inclusive).
pub const DISEASE_COVERAGE: f64 = 0.5;

/// Per-pixel class codes of one slice, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    pub height: usize,
    pub width: usize,
    pub codes: Vec<u8>,
}

impl LabelMask {
    pub fn healthy(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            codes: vec![ClassLabel::Healthy.code(); height * width],
        }
    }

    pub fn window(&self, cell: &CellRect) -> Vec<u8> {
        (cell.y0..cell.y0 + cell.size)
            .flat_map(|y| self.codes[y * self.width + cell.x0..y * self.width + cell.x0 + cell.size].iter().copied())
            .collect()
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(
            vec![self.height, self.width],
            self.codes.iter().map(|&c| c as f32).collect(),
        )
        .expect("mask dimensions are positive")
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        t.expect_rank(2, "label mask")?;
        let codes = t
            .data()
            .iter()
            .map(|&v| {
                if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                    Ok(v as u8)
                } else {
                    Err(Error::invalid(format!("label mask value {v} is not an integer code")))
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            height: t.shape()[0],
            width: t.shape()[1],
            codes,
        })
    }
}

/// One annotated 2-D slice: intensities in [0, 1], a label mask and the
/// annotation grid size.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedSlice {
    pub id: String,
    /// `[H, W]`
    pub image: Tensor<f32>,
    pub mask: LabelMask,
    pub grid_size_px: usize,
}

impl AnnotatedSlice {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: LabelMask, grid_size_px: usize) -> Result<Self> {
        image.expect_rank(2, "slice image")?;
        if image.shape() != [mask.height, mask.width] {
            return Err(Error::shape(format!(
                "slice image {:?} and mask {}x{} differ",
                image.shape(),
                mask.height,
                mask.width
            )));
        }
        if let Some(v) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("slice image value {v} is outside [0, 1]")));
        }
        Ok(Self {
            id: id.into(),
            image,
            mask,
            grid_size_px,
        })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }
}

/// Min-max rescaling to [0, 1]; a constant image maps to all zeros.
pub fn rescale_intensity(raw: &Tensor<f32>) -> Tensor<f32> {
    let (lo, hi) = raw
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi as f64 - lo as f64;
    if !(range > 0.0) {
        return Tensor::zeros(raw.shape());
    }
    raw.map(|v| (((v as f64 - lo as f64) / range) as f32).clamp(0.0, 1.0))
}

/// A square grid cell in slice pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CellRect {
    pub row: usize,
    pub col: usize,
    pub y0: usize,
    pub x0: usize,
    pub size: usize,
}

/// Tiles the slice with non-overlapping cells from the top-left corner;
/// partial cells at the bottom and right borders are dropped.
pub fn grid_partition(slice: &AnnotatedSlice) -> Result<Vec<CellRect>> {
    grid_cells(slice.height(), slice.width(), slice.grid_size_px)
}

pub fn grid_cells(height: usize, width: usize, g: usize) -> Result<Vec<CellRect>> {
    if g < MIN_GRID_SIZE {
        return Err(Error::invalid(format!("grid size {g} is below {MIN_GRID_SIZE} pixels")));
    }
    if g > height || g > width {
        return Err(Error::invalid(format!("grid size {g} exceeds image {height}x{width}")));
    }
    let (rows, cols) = (height / g, width / g);
    Ok((0..rows)
        .flat_map(|row| {
            (0..cols).map(move |col| CellRect {
                row,
                col,
                y0: row * g,
                x0: col * g,
                size: g,
            })
        })
        .collect())
}

/// Labels a cell from its mask window.
///
/// A cell is diseased when diseased pixels cover at least half of it; it
/// then takes the highest-priority disease present among its pixels.
pub fn label_cell(window: &[u8]) -> Result<ClassLabel> {
    if window.is_empty() {
        return Err(Error::invalid("empty mask window"));
    }
    let mut counts = [0usize; 5];
    for &code in window {
        counts[ClassLabel::from_code(code)?.code() as usize] += 1;
    }
    let diseased = window.len() - counts[0];
    if (diseased as f64) < DISEASE_COVERAGE * window.len() as f64 {
        return Ok(ClassLabel::Healthy);
    }
    Ok(ClassLabel::DISEASES
        .into_iter()
        .filter(|c| counts[c.code() as usize] > 0)
        .max_by_key(|c| c.priority())
        .expect("at least half the window is diseased"))
}

/// Labels of every grid cell of the slice, in [`grid_partition`] order.
pub fn label_cells(slice: &AnnotatedSlice) -> Result<Vec<(CellRect, ClassLabel)>> {
    grid_partition(slice)?
        .into_iter()
        .map(|cell| Ok((cell, label_cell(&slice.mask.window(&cell))?)))
        .collect()
}
