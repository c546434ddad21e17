//! Dense row-major tensors and the on-disk tensor format.
//!
//! The file layout is: magic `CTXT`, format version (u16), rank (u16), one
//! u32 per dimension, then the values as 32-bit floats. Everything is
//! little-endian.

use std::fmt::Debug;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_traits::Float;

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"CTXT";
pub const TENSOR_FORMAT_VERSION: u16 = 1;

/// Floating point element type of a [`Tensor`].
///
/// Production passes run in `f32`; gradient checks promote the same code to
/// `f64`.
pub trait Scalar: Float + Default + Debug + Send + Sync + std::iter::Sum + 'static {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` over raw strided matrices.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing matrices of
    /// the given sizes (see `matrixmultiply::sgemm`).
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major matrix operand for [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    /// Read the stored `rows x cols` matrix as its transpose.
    pub transposed: bool,
}

impl<'a, T> MatRef<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    fn logical(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = a * b + beta * out`, with `out` a contiguous row-major matrix.
pub(crate) fn gemm<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, out: &mut [T]) {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    assert_eq!(k, k2, "gemm inner dimensions");
    assert_eq!(out.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|v| *v = *v * beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: sizes and strides were checked against the slice lengths above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Dense n-dimensional array with contiguous row-major storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Fails with [`Error::NonFinite`] naming `op` if any value is NaN or infinite.
    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub(crate) fn expect_rank(&self, rank: usize, what: &str) -> Result<()> {
        if self.rank() == rank {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{what} expects a rank-{rank} tensor, got shape {:?}",
                self.shape
            )))
        }
    }
}

impl Tensor<f32> {
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&TENSOR_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.shape.len() as u16).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(8 + 4 * self.shape.len() + 4 * self.data.len());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Parses a tensor; `origin` names the source in error messages.
    pub fn read_from<R: Read>(mut r: R, origin: &Path) -> Result<Self> {
        let io = |e| Error::io(origin, e);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::format(origin, "missing CTXT magic bytes"));
        }
        let mut u16buf = [0u8; 2];
        r.read_exact(&mut u16buf).map_err(io)?;
        let version = u16::from_le_bytes(u16buf);
        if version != TENSOR_FORMAT_VERSION {
            return Err(Error::Version {
                path: origin.to_path_buf(),
                found: version.into(),
                expected: TENSOR_FORMAT_VERSION.into(),
            });
        }
        r.read_exact(&mut u16buf).map_err(io)?;
        let rank = u16::from_le_bytes(u16buf) as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut u32buf = [0u8; 4];
        for _ in 0..rank {
            r.read_exact(&mut u32buf).map_err(io)?;
            shape.push(u32::from_le_bytes(u32buf) as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw).map_err(io)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(io)? != 0 {
            return Err(Error::format(origin, "trailing bytes after tensor data"));
        }
        Tensor::new(shape, data).map_err(|e| Error::format(origin, e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file), path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn header_layout_is_little_endian() {
        let t = Tensor::new(vec![2, 1], vec![1.0f32, -2.0]).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(&bytes[..4], b"CTXT");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..8], &[2, 0]);
        assert_eq!(&bytes[8..12], &[2, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[1, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 24);
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = Tensor::new(vec![1], vec![3.0f32]).unwrap().to_bytes();
        bytes[4] = 9;
        let err = Tensor::read_from(&bytes[..], Path::new("x.ctxt")).unwrap_err();
        assert!(matches!(err, Error::Version { found: 9, .. }), "{err}");
    }

    #[test]
    fn bad_magic_is_reported() {
        let err = Tensor::read_from(&b"NOPE\x01\x00\x00\x00"[..], Path::new("y")).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn gemm_matches_naive_product() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let mut out = vec![0.0; 8];
        gemm(MatRef::new(&a, 2, 3), MatRef::new(&b, 3, 4), 0.0, &mut out);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert_eq!(out[i * 4 + j], want);
            }
        }
        // a^T (3x2) * a (2x3)
        let mut g = vec![0.0; 9];
        gemm(MatRef::new(&a, 2, 3).t(), MatRef::new(&a, 2, 3), 0.0, &mut g);
        for i in 0..3 {
            for j in 0..3 {
                let want: f64 = (0..2).map(|k| a[k * 3 + i] * a[k * 3 + j]).sum();
                assert_eq!(g[i * 3 + j], want);
            }
        }
    }

    proptest! {
        #[test]
        fn file_round_trip_is_bitwise(
            dims in prop::collection::vec(1usize..5, 1..4),
            seed in any::<u32>(),
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n)
                .map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32) & 0x7f7f_ffff))
                .collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = Tensor::read_from(&t.to_bytes()[..], Path::new("mem")).unwrap();
            prop_assert_eq!(t.shape(), back.shape());
            let same = t.data().iter().zip(back.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }
}
