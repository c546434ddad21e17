use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

fn dims<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>) -> Result<(usize, usize, usize)> {
    input.expect_rank(2, "dense input")?;
    weights.expect_rank(2, "dense weights")?;
    let (n, d) = (input.shape()[0], input.shape()[1]);
    let (d2, m) = (weights.shape()[0], weights.shape()[1]);
    if d != d2 {
        return Err(Error::shape(format!(
            "dense input {:?} does not match weights {:?}",
            input.shape(),
            weights.shape()
        )));
    }
    Ok((n, d, m))
}

/// Affine map `[N,D] x [D,M] + [M] -> [N,M]`.
pub fn dense<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d, m) = dims(input, weights)?;
    if bias.shape() != [m] {
        return Err(Error::shape(format!(
            "dense bias {:?} does not match {m} outputs",
            bias.shape()
        )));
    }
    let mut out: Vec<T> = (0..n).flat_map(|_| bias.data().iter().copied()).collect();
    gemm(
        MatRef::new(input.data(), n, d),
        MatRef::new(weights.data(), d, m),
        T::one(),
        &mut out,
    );
    Tensor::new(vec![n, m], out)
}

pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<DenseGrads<T>> {
    let (n, d, m) = dims(input, weights)?;
    if grad_out.shape() != [n, m] {
        return Err(Error::shape(format!(
            "dense grad_out {:?} does not match [{n}, {m}]",
            grad_out.shape()
        )));
    }
    let mut dx = vec![T::zero(); n * d];
    gemm(
        MatRef::new(grad_out.data(), n, m),
        MatRef::new(weights.data(), d, m).t(),
        T::zero(),
        &mut dx,
    );
    let mut dw = vec![T::zero(); d * m];
    gemm(
        MatRef::new(input.data(), n, d).t(),
        MatRef::new(grad_out.data(), n, m),
        T::zero(),
        &mut dw,
    );
    let mut db = vec![T::zero(); m];
    for row in grad_out.data().chunks(m) {
        db.iter_mut().zip(row).for_each(|(a, &g)| *a = *a + g);
    }
    Ok(DenseGrads {
        input: Tensor::new(vec![n, d], dx)?,
        weights: Tensor::new(vec![d, m], dw)?,
        bias: Tensor::new(vec![m], db)?,
    })
}
