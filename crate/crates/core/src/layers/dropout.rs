use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Inverted dropout. In training mode each element is zeroed with
/// probability `rate` and survivors are scaled by `1 / (1 - rate)`; the
/// returned mask holds the per-element multiplier for the backward pass.
pub fn dropout<T: Scalar>(input: &Tensor<T>, rate: f64, mode: Mode, seed: u64) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate {rate} is outside [0, 1)")));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok((input.clone(), None));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = T::of(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..input.len())
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let mut out = input.clone();
    out.data_mut().iter_mut().zip(&mask).for_each(|(v, &m)| *v = *v * m);
    Ok((out, Some(mask)))
}

pub fn dropout_backward<T: Scalar>(mask: Option<&[T]>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut grad = grad_out.clone();
    if let Some(mask) = mask {
        grad.data_mut().iter_mut().zip(mask).for_each(|(g, &m)| *g = *g * m);
    }
    grad
}
