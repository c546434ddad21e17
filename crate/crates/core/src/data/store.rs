//! On-disk layouts.
//!
//! Dataset directory:
//!
//! ```text
//! manifest.csv          slice_id,image,mask,grid_size_px
//! images/<id>.ctxt      [H, W] intensities in [0, 1]
//! masks/<id>.ctxt       [H, W] class codes
//! ```
//!
//! Patch store directory: `patches.ctxt` holding `[N, 1, 60, 60]` and
//! `patches.csv` with one `index,slice_id,cell_row,cell_col,label` row per
//! patch.

use std::fmt::Write as _;
use std::path::Path;

use super::patch::{PatchOrigin, PatchSample, PATCH_PX};
use super::slice::{AnnotatedSlice, LabelMask};
use crate::error::{Error, Result};
use crate::labels::ClassLabel;
use crate::tensor::Tensor;

pub const DATASET_MANIFEST: &str = "manifest.csv";
const DATASET_HEADER: &str = "slice_id,image,mask,grid_size_px";
pub const PATCH_TENSOR: &str = "patches.ctxt";
pub const PATCH_INDEX: &str = "patches.csv";
const PATCH_HEADER: &str = "index,slice_id,cell_row,cell_col,label";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains([',', '/', '\\', '\n']) || id.starts_with('.') {
        return Err(Error::invalid(format!("slice id {id:?} cannot be used as a file name")));
    }
    Ok(())
}

pub(crate) fn csv_rows<'a>(text: &'a str, header: &str, path: &Path) -> Result<impl Iterator<Item = (usize, Vec<&'a str>)>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == header => {}
        _ => return Err(Error::format(path, format!("expected header {header:?}"))),
    }
    let width = header.split(',').count();
    let rows: Vec<_> = lines.map(|(i, l)| (i + 1, l.split(',').map(str::trim).collect::<Vec<_>>())).collect();
    if let Some((line, r)) = rows.iter().find(|(_, r)| r.len() != width) {
        return Err(Error::format(path, format!("line {line}: expected {width} fields, found {}", r.len())));
    }
    Ok(rows.into_iter())
}

pub(crate) fn parse_field<T: std::str::FromStr>(v: &str, what: &str, line: usize, path: &Path) -> Result<T> {
    v.parse()
        .map_err(|_| Error::format(path, format!("line {line}: bad {what} {v:?}")))
}

pub fn save_dataset(dir: &Path, slices: &[AnnotatedSlice]) -> Result<()> {
    create_dir(&dir.join("images"))?;
    create_dir(&dir.join("masks"))?;
    let mut manifest = format!("{DATASET_HEADER}\n");
    for s in slices {
        check_id(&s.id)?;
        let image = format!("images/{}.ctxt", s.id);
        let mask = format!("masks/{}.ctxt", s.id);
        s.image.save(dir.join(&image))?;
        s.mask.to_tensor().save(dir.join(&mask))?;
        writeln!(manifest, "{},{image},{mask},{}", s.id, s.grid_size_px).expect("string write");
    }
    let path = dir.join(DATASET_MANIFEST);
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Vec<AnnotatedSlice>> {
    let path = dir.join(DATASET_MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let slices = csv_rows(&text, DATASET_HEADER, &path)?
        .map(|(line, r)| {
            let grid = parse_field(r[3], "grid size", line, &path)?;
            let image = Tensor::load(dir.join(r[1]))?;
            let mask = LabelMask::from_tensor(&Tensor::load(dir.join(r[2]))?)?;
            AnnotatedSlice::new(r[0], image, mask, grid)
        })
        .collect();
    slices
}

/// Splits slices in manifest order: the last `ceil(test_fraction * n)`
/// slices form the test set.
pub fn split_slices(slices: Vec<AnnotatedSlice>, test_fraction: f64) -> Result<(Vec<AnnotatedSlice>, Vec<AnnotatedSlice>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::invalid(format!("test fraction {test_fraction} is outside [0, 1)")));
    }
    let mut train = slices;
    let n_test = (test_fraction * train.len() as f64).ceil() as usize;
    let test = train.split_off(train.len() - n_test);
    Ok((train, test))
}

pub fn save_patches(dir: &Path, patches: &[PatchSample]) -> Result<()> {
    if patches.is_empty() {
        return Err(Error::invalid("refusing to write an empty patch store"));
    }
    create_dir(dir)?;
    let mut data = Vec::with_capacity(patches.len() * PATCH_PX * PATCH_PX);
    let mut index = format!("{PATCH_HEADER}\n");
    for (i, p) in patches.iter().enumerate() {
        if p.pixels.shape() != [1, PATCH_PX, PATCH_PX] {
            return Err(Error::shape(format!("patch {i} has shape {:?}", p.pixels.shape())));
        }
        check_id(&p.origin.slice_id)?;
        data.extend_from_slice(p.pixels.data());
        writeln!(
            index,
            "{i},{},{},{},{}",
            p.origin.slice_id,
            p.origin.cell_row,
            p.origin.cell_col,
            p.label.short()
        )
        .expect("string write");
    }
    Tensor::new(vec![patches.len(), 1, PATCH_PX, PATCH_PX], data)?.save(dir.join(PATCH_TENSOR))?;
    let path = dir.join(PATCH_INDEX);
    std::fs::write(&path, index).map_err(|e| Error::io(&path, e))
}

pub fn load_patches(dir: &Path) -> Result<Vec<PatchSample>> {
    let tensor_path = dir.join(PATCH_TENSOR);
    let all = Tensor::load(&tensor_path)?;
    if all.rank() != 4 || all.shape()[1..] != [1, PATCH_PX, PATCH_PX] {
        return Err(Error::format(&tensor_path, format!("expected [N, 1, 60, 60], found {:?}", all.shape())));
    }
    let path = dir.join(PATCH_INDEX);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let rows: Vec<_> = csv_rows(&text, PATCH_HEADER, &path)?.collect();
    if rows.len() != all.shape()[0] {
        return Err(Error::format(
            &path,
            format!("{} index rows for {} patches", rows.len(), all.shape()[0]),
        ));
    }
    let per = PATCH_PX * PATCH_PX;
    rows.into_iter()
        .enumerate()
        .map(|(i, (line, r))| {
            if parse_field::<usize>(r[0], "index", line, &path)? != i {
                return Err(Error::format(&path, format!("line {line}: index out of order")));
            }
            let label: ClassLabel = r[4]
                .parse()
                .map_err(|_| Error::format(&path, format!("line {line}: bad label {:?}", r[4])))?;
            Ok(PatchSample {
                pixels: Tensor::new(vec![1, PATCH_PX, PATCH_PX], all.data()[i * per..(i + 1) * per].to_vec())?,
                label,
                origin: PatchOrigin {
                    slice_id: r[1].to_string(),
                    cell_row: parse_field(r[2], "cell row", line, &path)?,
                    cell_col: parse_field(r[3], "cell column", line, &path)?,
                },
            })
        })
        .collect()
}
