use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Scalar, Tensor};

/// Uniform values in [-1, 1).
pub(crate) fn random_tensor<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-1.0..1.0)))
}
