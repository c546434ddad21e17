//! Global pooling plus the resampling helpers used by the U-net.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn nchw<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize, usize)> {
    t.expect_rank(4, what)?;
    let s = t.shape();
    Ok((s[0], s[1], s[2], s[3]))
}

/// `[N,C,H,W] -> [N,C]`, mean over the spatial plane.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = nchw(input, "global_avg_pool")?;
    let inv = T::of(1.0 / (h * w) as f64);
    let data = input
        .data()
        .chunks(h * w)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new(vec![n, c], data)
}

pub fn global_avg_pool_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let hw: usize = input_shape[2..].iter().product();
    let inv = T::of(1.0 / hw as f64);
    let data = grad_out
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat(g * inv).take(hw))
        .collect();
    Tensor::new(input_shape.to_vec(), data)
}

/// `[N,C,H,W] -> [N,C]` maximum; also returns the flat argmax per plane
/// (first occurrence on ties).
pub fn global_max_pool<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = nchw(input, "global_max_pool")?;
    let mut arg = Vec::with_capacity(n * c);
    let mut out = Vec::with_capacity(n * c);
    for plane in input.data().chunks(h * w) {
        let (i, v) = plane
            .iter()
            .copied()
            .enumerate()
            .fold((0, T::neg_infinity()), |best, (i, v)| if v > best.1 { (i, v) } else { best });
        arg.push(i);
        out.push(v);
    }
    Ok((Tensor::new(vec![n, c], out)?, arg))
}

pub fn global_max_pool_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let hw: usize = input_shape[2..].iter().product();
    let mut grad = Tensor::zeros(input_shape);
    for (p, (&i, &g)) in argmax.iter().zip(grad_out.data()).enumerate() {
        grad.data_mut()[p * hw + i] = g;
    }
    Ok(grad)
}

/// 2x2 mean downsampling; H and W must be even.
pub fn mean_pool2x2<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = nchw(input, "mean_pool2x2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "mean_pool2x2 needs even spatial size, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let q = T::of(0.25);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for (dst, src) in out.data_mut().chunks_mut(oh * ow).zip(input.data().chunks(h * w)) {
        for y in 0..oh {
            for x in 0..ow {
                let a = src[2 * y * w + 2 * x] + src[2 * y * w + 2 * x + 1];
                let b = src[(2 * y + 1) * w + 2 * x] + src[(2 * y + 1) * w + 2 * x + 1];
                dst[y * ow + x] = (a + b) * q;
            }
        }
    }
    Ok(out)
}

pub fn mean_pool2x2_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let q = T::of(0.25);
    let mut grad = Tensor::zeros(input_shape);
    for (dst, src) in grad.data_mut().chunks_mut(h * w).zip(grad_out.data().chunks(oh * ow)) {
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = src[(y / 2) * ow + x / 2] * q;
            }
        }
    }
    Ok(grad)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2x<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = nchw(input, "upsample2x")?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for (dst, src) in out.data_mut().chunks_mut(oh * ow).zip(input.data().chunks(h * w)) {
        for y in 0..oh {
            for x in 0..ow {
                dst[y * ow + x] = src[(y / 2) * w + x / 2];
            }
        }
    }
    Ok(out)
}

pub fn upsample2x_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let ow = 2 * w;
    let mut grad = Tensor::zeros(input_shape);
    for (dst, src) in grad.data_mut().chunks_mut(h * w).zip(grad_out.data().chunks(4 * h * w)) {
        for (i, &g) in src.iter().enumerate() {
            let (y, x) = (i / ow, i % ow);
            let d = &mut dst[(y / 2) * w + x / 2];
            *d = *d + g;
        }
    }
    Ok(grad)
}

/// Spatial padding amounts: top, bottom, left, right.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

/// Pads every plane by replicating its border pixels.
pub fn edge_pad<T: Scalar>(input: &Tensor<T>, pad: Padding) -> Result<Tensor<T>> {
    let (n, c, h, w) = nchw(input, "edge_pad")?;
    let (oh, ow) = (h + pad.top + pad.bottom, w + pad.left + pad.right);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for (dst, src) in out.data_mut().chunks_mut(oh * ow).zip(input.data().chunks(h * w)) {
        for y in 0..oh {
            let sy = y.saturating_sub(pad.top).min(h - 1);
            for x in 0..ow {
                let sx = x.saturating_sub(pad.left).min(w - 1);
                dst[y * ow + x] = src[sy * w + sx];
            }
        }
    }
    Ok(out)
}

pub fn edge_pad_backward<T: Scalar>(input_shape: &[usize], pad: Padding, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (oh, ow) = (h + pad.top + pad.bottom, w + pad.left + pad.right);
    let mut grad = Tensor::zeros(input_shape);
    for (dst, src) in grad.data_mut().chunks_mut(h * w).zip(grad_out.data().chunks(oh * ow)) {
        for y in 0..oh {
            let sy = y.saturating_sub(pad.top).min(h - 1);
            for x in 0..ow {
                let sx = x.saturating_sub(pad.left).min(w - 1);
                let d = &mut dst[sy * w + sx];
                *d = *d + src[y * ow + x];
            }
        }
    }
    Ok(grad)
}

/// Removes `pad` from every border; the inverse geometry of [`edge_pad`].
pub fn crop<T: Scalar>(input: &Tensor<T>, pad: Padding) -> Result<Tensor<T>> {
    let (n, c, h, w) = nchw(input, "crop")?;
    if pad.top + pad.bottom >= h || pad.left + pad.right >= w {
        return Err(Error::shape(format!("crop {pad:?} removes all of {h}x{w}")));
    }
    let (oh, ow) = (h - pad.top - pad.bottom, w - pad.left - pad.right);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for (dst, src) in out.data_mut().chunks_mut(oh * ow).zip(input.data().chunks(h * w)) {
        for y in 0..oh {
            let row = (y + pad.top) * w + pad.left;
            dst[y * ow..(y + 1) * ow].copy_from_slice(&src[row..row + ow]);
        }
    }
    Ok(out)
}

pub fn crop_backward<T: Scalar>(input_shape: &[usize], pad: Padding, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (oh, ow) = (h - pad.top - pad.bottom, w - pad.left - pad.right);
    let mut grad = Tensor::zeros(input_shape);
    for (dst, src) in grad.data_mut().chunks_mut(h * w).zip(grad_out.data().chunks(oh * ow)) {
        for y in 0..oh {
            let row = (y + pad.top) * w + pad.left;
            dst[row..row + ow].copy_from_slice(&src[y * ow..(y + 1) * ow]);
        }
    }
    Ok(grad)
}

/// Concatenates `[N,Ca,H,W]` and `[N,Cb,H,W]` along channels.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca, h, w) = nchw(a, "concat")?;
    let (nb, cb, hb, wb) = nchw(b, "concat")?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::shape(format!(
            "cannot concatenate {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (la, lb) = (ca * h * w, cb * h * w);
    let mut data = Vec::with_capacity(n * (la + lb));
    for (xa, xb) in a.data().chunks(la).zip(b.data().chunks(lb)) {
        data.extend_from_slice(xa);
        data.extend_from_slice(xb);
    }
    Tensor::new(vec![n, ca + cb, h, w], data)
}

/// Splits a concatenated gradient back into the parts of the two inputs.
pub fn split_channels<T: Scalar>(grad: &Tensor<T>, first_channels: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = nchw(grad, "split")?;
    if first_channels == 0 || first_channels >= c {
        return Err(Error::shape(format!("cannot split {c} channels at {first_channels}")));
    }
    let la = first_channels * h * w;
    let mut a = Vec::with_capacity(n * la);
    let mut b = Vec::with_capacity(grad.len() - n * la);
    for chunk in grad.data().chunks(c * h * w) {
        a.extend_from_slice(&chunk[..la]);
        b.extend_from_slice(&chunk[la..]);
    }
    Ok((
        Tensor::new(vec![n, first_channels, h, w], a)?,
        Tensor::new(vec![n, c - first_channels, h, w], b)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_difference_check;
    use crate::testutil::random_tensor;

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn global_average_of_constant_and_small_map() {
        let c = global_avg_pool(&Tensor::<f32>::full(&[2, 3, 4, 4], 0.7)).unwrap();
        assert!(c.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
        let m = Tensor::new(vec![1, 1, 2, 2], vec![1.0f64, 3.0, 5.0, 7.0]).unwrap();
        let brute = m.data().iter().sum::<f64>() / m.len() as f64;
        assert_eq!(global_avg_pool(&m).unwrap().data(), &[brute]);
        assert_eq!(brute, 4.0);
    }

    #[test]
    fn global_average_gradient() {
        let x = random_tensor::<f64>(&[2, 3, 3, 2], 50);
        let proj = random_tensor::<f64>(&[2, 3], 51);
        let g = global_avg_pool_backward(x.shape(), &proj).unwrap();
        let err = finite_difference_check(|v| dot(&global_avg_pool(v).unwrap(), &proj), &x, &g, 1e-6);
        assert!(err < 1e-3);
        assert!(g.data()[..6].iter().all(|&v| (v - proj.data()[0] / 6.0).abs() < 1e-15));
    }

    #[test]
    fn global_max_gradient_routes_to_argmax() {
        let x = random_tensor::<f64>(&[1, 2, 3, 3], 52);
        let proj = random_tensor::<f64>(&[1, 2], 53);
        let (_, arg) = global_max_pool(&x).unwrap();
        let g = global_max_pool_backward(x.shape(), &arg, &proj).unwrap();
        let err = finite_difference_check(|v| dot(&global_max_pool(v).unwrap().0, &proj), &x, &g, 1e-6);
        assert!(err < 1e-3);
    }

    #[test]
    fn resampling_helpers_have_adjoint_backward_passes() {
        let x = random_tensor::<f64>(&[2, 2, 4, 6], 60);
        let pad = Padding { top: 1, bottom: 2, left: 0, right: 3 };

        let p = random_tensor::<f64>(&[2, 2, 2, 3], 61);
        let g = mean_pool2x2_backward(x.shape(), &p).unwrap();
        assert!(finite_difference_check(|v| dot(&mean_pool2x2(v).unwrap(), &p), &x, &g, 1e-6) < 1e-3);

        let p = random_tensor::<f64>(&[2, 2, 8, 12], 62);
        let g = upsample2x_backward(x.shape(), &p).unwrap();
        assert!(finite_difference_check(|v| dot(&upsample2x(v).unwrap(), &p), &x, &g, 1e-6) < 1e-3);

        let p = random_tensor::<f64>(&[2, 2, 7, 9], 63);
        let g = edge_pad_backward(x.shape(), pad, &p).unwrap();
        assert!(finite_difference_check(|v| dot(&edge_pad(v, pad).unwrap(), &p), &x, &g, 1e-6) < 1e-3);

        let p = random_tensor::<f64>(&[2, 2, 1, 3], 64);
        let g = crop_backward(x.shape(), pad, &p).unwrap();
        assert!(finite_difference_check(|v| dot(&crop(v, pad).unwrap(), &p), &x, &g, 1e-6) < 1e-3);
    }

    #[test]
    fn crop_inverts_edge_pad() {
        let x = random_tensor::<f32>(&[1, 3, 5, 5], 65);
        let pad = Padding { top: 2, bottom: 2, left: 1, right: 2 };
        assert_eq!(crop(&edge_pad(&x, pad).unwrap(), pad).unwrap(), x);
    }

    #[test]
    fn concat_then_split_round_trips() {
        let a = random_tensor::<f32>(&[2, 1, 3, 3], 66);
        let b = random_tensor::<f32>(&[2, 2, 3, 3], 67);
        let cat = concat_channels(&a, &b).unwrap();
        assert_eq!(cat.shape(), [2, 3, 3, 3]);
        let (a2, b2) = split_channels(&cat, 1).unwrap();
        assert_eq!((a2, b2), (a, b));
    }

    #[test]
    fn odd_sizes_are_rejected_by_mean_pool() {
        assert!(mean_pool2x2(&Tensor::<f32>::zeros(&[1, 1, 5, 4])).is_err());
    }
}
