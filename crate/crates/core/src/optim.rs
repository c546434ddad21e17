//! Stochastic gradient descent with classical momentum.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 64,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum {} is outside [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(())
    }
}

/// One update: `v <- momentum * v - lr * g; p <- p + v`.
pub fn sgd_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    velocity: &mut [Tensor<T>],
    config: &SgdConfig,
) -> Result<()> {
    config.validate()?;
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::shape(format!(
            "sgd_step got {} parameters, {} gradients and {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for (i, ((p, g), v)) in params.iter().zip(grads).zip(velocity.iter()).enumerate() {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::shape(format!(
                "sgd_step tensor {i}: parameter {:?}, gradient {:?}, velocity {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            )));
        }
    }
    let lr = T::of(config.learning_rate);
    let mu = T::of(config.momentum);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = mu * *vv - lr * gv;
            *pv = *pv + *vv;
        }
    }
    Ok(())
}
