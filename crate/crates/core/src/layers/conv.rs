//! Same-size 2-D cross-correlation with zero padding.
//!
//! Kernels are square with odd size `k` and padding `k / 2`, so the spatial
//! size is preserved. The texture nets use 3x3 kernels; the heatmap head
//! uses 1x1.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k_out: usize,
    ksize: usize,
}

impl Geometry {
    fn hw(&self) -> usize {
        self.h * self.w
    }

    fn patch_len(&self) -> usize {
        self.c * self.ksize * self.ksize
    }
}

fn geometry<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>) -> Result<Geometry> {
    input.expect_rank(4, "conv2d input")?;
    weights.expect_rank(4, "conv2d weights")?;
    let (is, ws) = (input.shape(), weights.shape());
    if ws[2] != ws[3] || ws[2] % 2 == 0 {
        return Err(Error::shape(format!(
            "conv2d kernel must be square with odd size, got weights {ws:?}"
        )));
    }
    if is[1] != ws[1] {
        return Err(Error::shape(format!(
            "conv2d input {is:?} has {} channels but weights {ws:?} expect {}",
            is[1], ws[1]
        )));
    }
    Ok(Geometry {
        n: is[0],
        c: is[1],
        h: is[2],
        w: is[3],
        k_out: ws[0],
        ksize: ws[2],
    })
}

fn im2col<T: Scalar>(g: &Geometry, sample: &[T], cols: &mut [T]) {
    let (h, w, k) = (g.h as isize, g.w as isize, g.ksize);
    let pad = (k / 2) as isize;
    let hw = g.hw();
    for c in 0..g.c {
        let plane = &sample[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y + dy;
                    let out_row = &mut dst[(y * w) as usize..((y + 1) * w) as usize];
                    if sy < 0 || sy >= h {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &plane[(sy * w) as usize..((sy + 1) * w) as usize];
                    for (x, v) in out_row.iter_mut().enumerate() {
                        let sx = x as isize + dx;
                        *v = if sx < 0 || sx >= w {
                            T::zero()
                        } else {
                            src_row[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &Geometry, cols: &[T], sample_grad: &mut [T]) {
    let (h, w, k) = (g.h as isize, g.w as isize, g.ksize);
    let pad = (k / 2) as isize;
    let hw = g.hw();
    for c in 0..g.c {
        let plane = &mut sample_grad[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y + dy;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x + dx;
                        if sx < 0 || sx >= w {
                            continue;
                        }
                        let v = src[(y * w + x) as usize];
                        let p = &mut plane[(sy * w + sx) as usize];
                        *p = *p + v;
                    }
                }
            }
        }
    }
}

/// Forward pass: `[N,C,H,W] x [K,C,k,k] + [K] -> [N,K,H,W]`.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let g = geometry(input, weights)?;
    if bias.shape() != [g.k_out] {
        return Err(Error::shape(format!(
            "conv2d bias {:?} does not match {} output channels",
            bias.shape(),
            g.k_out
        )));
    }
    let hw = g.hw();
    let in_len = g.c * hw;
    let out_len = g.k_out * hw;
    let mut out = Tensor::zeros(&[g.n, g.k_out, g.h, g.w]);
    out.data_mut()
        .par_chunks_mut(out_len)
        .zip(input.data().par_chunks(in_len))
        .for_each_init(
            || vec![T::zero(); g.patch_len() * hw],
            |cols, (dst, src)| {
                for (k, plane) in dst.chunks_mut(hw).enumerate() {
                    plane.iter_mut().for_each(|v| *v = bias.data()[k]);
                }
                im2col(&g, src, cols);
                gemm(
                    MatRef::new(weights.data(), g.k_out, g.patch_len()),
                    MatRef::new(cols, g.patch_len(), hw),
                    T::one(),
                    dst,
                );
            },
        );
    Ok(out)
}

/// Backward pass given the upstream gradient `grad_out` of shape `[N,K,H,W]`.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let g = geometry(input, weights)?;
    if grad_out.shape() != [g.n, g.k_out, g.h, g.w] {
        return Err(Error::shape(format!(
            "conv2d grad_out {:?} does not match output shape {:?}",
            grad_out.shape(),
            [g.n, g.k_out, g.h, g.w]
        )));
    }
    let hw = g.hw();
    let in_len = g.c * hw;
    let out_len = g.k_out * hw;
    let plen = g.patch_len();

    let per_sample: Vec<(Vec<T>, Vec<T>, Vec<T>)> = input
        .data()
        .par_chunks(in_len)
        .zip(grad_out.data().par_chunks(out_len))
        .map(|(src, gout)| {
            let mut cols = vec![T::zero(); plen * hw];
            im2col(&g, src, &mut cols);
            let mut dw = vec![T::zero(); g.k_out * plen];
            gemm(
                MatRef::new(gout, g.k_out, hw),
                MatRef::new(&cols, plen, hw).t(),
                T::zero(),
                &mut dw,
            );
            let db: Vec<T> = gout.chunks(hw).map(|p| p.iter().copied().sum()).collect();
            gemm(
                MatRef::new(weights.data(), g.k_out, plen).t(),
                MatRef::new(gout, g.k_out, hw),
                T::zero(),
                &mut cols,
            );
            let mut dx = vec![T::zero(); in_len];
            col2im(&g, &cols, &mut dx);
            (dx, dw, db)
        })
        .collect();

    let mut grad_in = Vec::with_capacity(g.n * in_len);
    let mut grad_w = vec![T::zero(); g.k_out * plen];
    let mut grad_b = vec![T::zero(); g.k_out];
    for (dx, dw, db) in per_sample {
        grad_in.extend_from_slice(&dx);
        grad_w.iter_mut().zip(&dw).for_each(|(a, &b)| *a = *a + b);
        grad_b.iter_mut().zip(&db).for_each(|(a, &b)| *a = *a + b);
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), grad_in)?,
        weights: Tensor::new(weights.shape().to_vec(), grad_w)?,
        bias: Tensor::new(vec![g.k_out], grad_b)?,
    })
}
