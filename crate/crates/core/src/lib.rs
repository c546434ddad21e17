//! Patch-wise texture classification of lung CT slices.
//!
//! A binary detector network gates a four-class scorer network (the
//! cascade). The crate also provides a direct five-class network, a
//! handcrafted-feature random forest and a weak-label heatmap U-net, along
//! with the data pipeline and evaluation metrics needed to train and compare
//! them on synthetic data.

pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod gradcheck;
pub mod kv;
pub mod labels;
pub mod layers;
pub mod losses;
pub mod model;
pub mod optim;
pub mod recipe;
pub mod seed;
pub mod tensor;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use labels::{ClassLabel, ClassWeights};
pub use tensor::Tensor;
