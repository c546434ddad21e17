//! Network builders, the layer-stack engine, training loops and model files.

pub mod build;
pub mod io;
pub mod stack;
pub mod train;

pub use build::{build_heatmap_net, build_texture_net, GlobalPooling, HeatmapNetConfig, TextureNetConfig};
pub use io::{load_model, save_model, MODEL_MANIFEST};
pub use stack::{Head, LayerDescriptor, LayerKind, LayerStack, Trace};
pub use train::{
    batch_tensor, predict_batch, predict_heatmaps, predict_patch, predict_samples, train_classifier, Objective,
    TrainRunConfig,
};
