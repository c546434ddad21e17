//! Handcrafted texture features and the random-forest baseline.

pub mod filters;
pub mod forest;
pub mod histogram;

pub use filters::{filter_bank, FilterResponses, GaussianKernels, BANK_SIGMAS};
pub use forest::{load_forest, rf_predict, rf_predict_label, rf_train, save_forest, Forest, ForestConfig, Tree};
pub use histogram::{
    build_feature_vector, build_feature_vector_with, features_for_samples, FeatureConfig, FeatureVector, MapRange,
    FEATURE_LEN, HISTOGRAM_BINS, MAP_COUNT,
};
