//! Slices, annotation grids, context patches and synthetic data.

pub mod patch;
pub mod slice;
pub mod store;
pub mod synth;

pub use patch::{
    augment, extract_all, extract_patch, extract_slice_patches, oversample_minority, ContextGeometry, PatchOrigin,
    PatchSample, Transform, CELL_PX, PATCH_PX, sample_bilinear,
};
pub use slice::{grid_cells, grid_partition, label_cell, label_cells, rescale_intensity, AnnotatedSlice, CellRect, LabelMask};
pub use store::{load_dataset, load_patches, save_dataset, save_patches, split_slices};
pub use synth::{blob_patches, blobs_vs_stripes, synth_generate, BlobPatch, SynthConfig};
