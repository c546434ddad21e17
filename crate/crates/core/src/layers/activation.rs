use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ActivationFn {
    LeakyRelu { slope: f64 },
    Sigmoid,
    /// Normalizes over the last dimension.
    Softmax,
}

impl ActivationFn {
    pub fn name(&self) -> &'static str {
        match self {
            ActivationFn::LeakyRelu { .. } => "leaky_relu",
            ActivationFn::Sigmoid => "sigmoid",
            ActivationFn::Softmax => "softmax",
        }
    }
}

pub fn activation<T: Scalar>(input: &Tensor<T>, kind: ActivationFn) -> Result<Tensor<T>> {
    input.ensure_finite("activation input")?;
    let out = match kind {
        ActivationFn::LeakyRelu { slope } => {
            let a = T::of(slope);
            input.map(|x| if x >= T::zero() { x } else { a * x })
        }
        ActivationFn::Sigmoid => input.map(sigmoid),
        ActivationFn::Softmax => {
            let d = *input
                .shape()
                .last()
                .ok_or_else(|| Error::shape("softmax of a rank-0 tensor"))?;
            let mut out = input.clone();
            for row in out.data_mut().chunks_mut(d) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                row.iter_mut().for_each(|v| *v = (*v - max).exp());
                let total: T = row.iter().copied().sum();
                row.iter_mut().for_each(|v| *v = *v / total);
            }
            out
        }
    };
    Ok(out)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Gradient w.r.t. the activation input. Leaky ReLU needs the forward
/// input; sigmoid and softmax use the forward output.
pub fn activation_backward<T: Scalar>(
    input: &Tensor<T>,
    output: &Tensor<T>,
    grad_out: &Tensor<T>,
    kind: ActivationFn,
) -> Result<Tensor<T>> {
    if grad_out.shape() != output.shape() {
        return Err(Error::shape(format!(
            "activation grad_out {:?} does not match output {:?}",
            grad_out.shape(),
            output.shape()
        )));
    }
    let mut grad = grad_out.clone();
    match kind {
        ActivationFn::LeakyRelu { slope } => {
            let a = T::of(slope);
            for (g, &x) in grad.data_mut().iter_mut().zip(input.data()) {
                if x < T::zero() {
                    *g = *g * a;
                }
            }
        }
        ActivationFn::Sigmoid => {
            for (g, &y) in grad.data_mut().iter_mut().zip(output.data()) {
                *g = *g * y * (T::one() - y);
            }
        }
        ActivationFn::Softmax => {
            let d = *output.shape().last().unwrap_or(&1);
            for (g, y) in grad.data_mut().chunks_mut(d).zip(output.data().chunks(d)) {
                let dot: T = g.iter().zip(y).map(|(&a, &b)| a * b).sum();
                for (gi, &yi) in g.iter_mut().zip(y) {
                    *gi = yi * (*gi - dot);
                }
            }
        }
    }
    Ok(grad)
}
