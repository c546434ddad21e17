//! Layer primitives with hand-written forward and backward passes.

pub mod activation;
pub mod batch_norm;
pub mod conv;
pub mod dense;
pub mod dropout;
pub mod pool;

pub use activation::{activation, activation_backward, ActivationFn, DEFAULT_LEAKY_SLOPE};
pub use batch_norm::{batch_norm_backward, batch_norm_infer, batch_norm_train, BnCache, BnGrads, BnHyper, RunningStats};
pub use conv::{conv2d, conv2d_backward, ConvGrads};
pub use dense::{dense, dense_backward, DenseGrads};
pub use dropout::{dropout, dropout_backward, Mode};
pub use pool::{
    concat_channels, crop, crop_backward, edge_pad, edge_pad_backward, global_avg_pool, global_avg_pool_backward,
    global_max_pool, global_max_pool_backward, mean_pool2x2, mean_pool2x2_backward, split_channels, upsample2x,
    upsample2x_backward, Padding,
};
