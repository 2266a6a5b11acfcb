//! Dense rank-4 tensors in `(batch, height, width, channels)` layout.
//!
//! Every feature map, weight and attention field in the crate is a
//! [`Tensor`]. Convolution weights reuse the same rank-4 container with the
//! axes read as `(k_h, k_w, C_in, C_out)`, and vectors are stored as
//! `(1, 1, 1, len)`.

use std::fmt;
use std::io::{Read, Write};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element type stored in a serialized tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating point element type of the engine. Implemented for `f32`
/// (training) and `f64` (gradient checks and golden tests).
pub trait Scalar:
    Float
    + FromPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    /// Converts an `f64` constant, rounding for `f32`.
    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `C = A·B (+ C if accumulate)`, all row-major with explicit strides.
    ///
    /// # Safety
    /// The caller guarantees that every index reachable through the given
    /// dimensions and strides is in bounds for the three slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        accumulate: bool,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8], dtype: DType) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn of(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        accumulate: bool,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        let beta = if accumulate { 1.0 } else { 0.0 };
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8], dtype: DType) -> Self {
        match dtype {
            DType::F32 => f32::from_le_bytes(bytes.try_into().expect("4 bytes")),
            DType::F64 => f64::from_le_bytes(bytes.try_into().expect("8 bytes")) as f32,
        }
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn of(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        accumulate: bool,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        let beta = if accumulate { 1.0 } else { 0.0 };
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8], dtype: DType) -> Self {
        match dtype {
            DType::F32 => f32::from_le_bytes(bytes.try_into().expect("4 bytes")) as f64,
            DType::F64 => f64::from_le_bytes(bytes.try_into().expect("8 bytes")),
        }
    }
}

/// Row-major matrix operand for [`gemm`]: `rows × cols`, optionally read
/// transposed.
#[derive(Clone, Copy)]
pub struct Mat<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T> Mat<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Mat {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Mat {
            transposed: !self.transposed,
            ..self
        }
    }

    fn logical(&self) -> (usize, usize, isize, isize) {
        if self.transposed {
            (self.cols, self.rows, 1, self.cols as isize)
        } else {
            (self.rows, self.cols, self.cols as isize, 1)
        }
    }
}

/// `out (m × n) = a · b`, or `out += a · b` when `accumulate` is set.
pub fn gemm<T: Scalar>(a: Mat<'_, T>, b: Mat<'_, T>, out: &mut [T], accumulate: bool) {
    assert_eq!(a.data.len(), a.rows * a.cols, "gemm: lhs length");
    assert_eq!(b.data.len(), b.rows * b.cols, "gemm: rhs length");
    let (m, k, rsa, csa) = a.logical();
    let (k2, n, rsb, csb) = b.logical();
    assert_eq!(k, k2, "gemm: inner dimensions");
    assert_eq!(out.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    // SAFETY: lengths were checked against the logical dimensions above and
    // the strides describe dense row-major storage of those dimensions.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            accumulate,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `(batch, height, width, channels)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape {
        n: 1,
        h: 1,
        w: 1,
        c: 1,
    };

    pub const fn new(n: usize, h: usize, w: usize, c: usize) -> Self {
        Shape { n, h, w, c }
    }

    /// `(1, 1, 1, len)`.
    pub const fn vector(len: usize) -> Self {
        Shape::new(1, 1, 1, len)
    }

    pub const fn len(&self) -> usize {
        self.n * self.h * self.w * self.c
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of pixels over all images.
    pub const fn pixels(&self) -> usize {
        self.n * self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.h, self.w, self.c]
    }

    #[inline]
    pub fn index(&self, n: usize, y: usize, x: usize, c: usize) -> usize {
        debug_assert!(n < self.n && y < self.h && x < self.w && c < self.c);
        ((n * self.h + y) * self.w + x) * self.c + c
    }

    pub fn with_c(self, c: usize) -> Self {
        Shape { c, ..self }
    }

    pub fn with_hw(self, h: usize, w: usize) -> Self {
        Shape { h, w, ..self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.h, self.w, self.c)
    }
}

/// Dense rank-4 array. Constructors reject non-finite data.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::DataLength {
                shape,
                len: data.len(),
                expected: shape.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor from kernel output without the finiteness scan.
    pub(crate) fn from_raw(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.len(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        assert!(value.is_finite(), "Tensor::full with non-finite value");
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    /// Unlike `full`, accepts any value so a diverged loss can be reported.
    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Shape::SCALAR,
            data: vec![value],
        }
    }

    pub fn from_fn(
        shape: Shape,
        mut f: impl FnMut(usize, usize, usize, usize) -> T,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for y in 0..shape.h {
                for x in 0..shape.w {
                    for c in 0..shape.c {
                        data.push(f(n, y, x, c));
                    }
                }
            }
        }
        Self::new(shape, data)
    }

    pub fn from_f64(shape: Shape, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    /// In-place access for owners (optimizer updates, running statistics).
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, n: usize, y: usize, x: usize, c: usize) -> T {
        self.data[self.shape.index(n, y, x, c)]
    }

    pub fn item(&self) -> T {
        assert_eq!(self.shape, Shape::SCALAR, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        if shape.len() != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{} -> {}", self.shape, shape),
            ));
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor::from_raw(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_raw(
            self.shape,
            self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        )
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max)
    }

    /// Copies image `n` out of a batch.
    pub fn image(&self, n: usize) -> Tensor<T> {
        let per = self.shape.h * self.shape.w * self.shape.c;
        Tensor::from_raw(
            Shape::new(1, self.shape.h, self.shape.w, self.shape.c),
            self.data[n * per..(n + 1) * per].to_vec(),
        )
    }

    /// Concatenates along the batch axis.
    pub fn stack(images: &[Tensor<T>]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of zero tensors".into()))?
            .shape;
        let mut data = Vec::with_capacity(first.len() * images.len());
        let mut n = 0;
        for t in images {
            if (t.shape.h, t.shape.w, t.shape.c) != (first.h, first.w, first.c) {
                return Err(Error::shape("stack", format!("{} vs {}", t.shape, first)));
            }
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor::from_raw(
            Shape::new(n, first.h, first.w, first.c),
            data,
        ))
    }

    /// Serializes as `"PTNS"`, dtype code, four little-endian `u32` dims,
    /// then the raw little-endian elements.
    pub fn write_ptns(&self, mut out: impl Write) -> std::io::Result<()> {
        out.write_all(&self.to_ptns_bytes())
    }

    pub fn to_ptns_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(PTNS_HEADER_LEN + self.len() * T::DTYPE.size());
        buf.extend_from_slice(PTNS_MAGIC);
        buf.push(T::DTYPE.code());
        for d in self.shape.dims() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            v.write_le(&mut buf);
        }
        buf
    }

    /// Reads a serialized tensor, converting the stored dtype to `T`.
    pub fn read_ptns(mut input: impl Read) -> Result<Self> {
        let mut header = [0u8; PTNS_HEADER_LEN];
        input
            .read_exact(&mut header)
            .map_err(|e| Error::Format(format!("truncated tensor header: {e}")))?;
        let (shape, dtype) = parse_ptns_header(&header)?;
        let mut raw = vec![0u8; shape.len() * dtype.size()];
        input
            .read_exact(&mut raw)
            .map_err(|e| Error::Format(format!("truncated tensor data: {e}")))?;
        let data = raw
            .chunks_exact(dtype.size())
            .map(|b| T::read_le(b, dtype))
            .collect();
        Tensor::new(shape, data)
    }

    pub fn from_ptns_bytes(bytes: &[u8]) -> Result<Self> {
        let t = Self::read_ptns(bytes)?;
        let used = PTNS_HEADER_LEN + t.len() * stored_dtype(bytes)?.size();
        if used != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after tensor",
                bytes.len() - used
            )));
        }
        Ok(t)
    }
}

pub const PTNS_MAGIC: &[u8; 4] = b"PTNS";
pub const PTNS_HEADER_LEN: usize = 4 + 1 + 16;

fn stored_dtype(bytes: &[u8]) -> Result<DType> {
    DType::from_code(
        *bytes
            .get(4)
            .ok_or_else(|| Error::Format("truncated".into()))?,
    )
}

fn parse_ptns_header(header: &[u8; PTNS_HEADER_LEN]) -> Result<(Shape, DType)> {
    if &header[..4] != PTNS_MAGIC {
        return Err(Error::Format("bad magic, expected PTNS".into()));
    }
    let dtype = DType::from_code(header[4])?;
    let dim =
        |i: usize| u32::from_le_bytes(header[5 + 4 * i..9 + 4 * i].try_into().unwrap()) as usize;
    Ok((Shape::new(dim(0), dim(1), dim(2), dim(3)), dtype))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructor_checks_length_and_finiteness() {
        let s = Shape::new(1, 2, 2, 1);
        assert!(Tensor::<f64>::new(s, vec![0.0; 3]).is_err());
        assert!(matches!(
            Tensor::<f64>::new(s, vec![0.0, f64::NAN, 0.0, 0.0]),
            Err(Error::NonFinite { index: 1 })
        ));
        assert!(Tensor::<f64>::new(s, vec![0.0, f64::INFINITY, 0.0, 0.0]).is_err());
        assert!(Tensor::<f64>::new(s, vec![1.0; 4]).is_ok());
    }

    #[test]
    fn ptns_layout_is_bit_exact() {
        let t = Tensor::<f32>::new(Shape::new(1, 1, 2, 1), vec![1.0, -2.5]).unwrap();
        let bytes = t.to_ptns_bytes();
        let mut expected = b"PTNS".to_vec();
        expected.push(0);
        for d in [1u32, 1, 2, 1] {
            expected.extend_from_slice(&d.to_le_bytes());
        }
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn ptns_rejects_garbage() {
        assert!(Tensor::<f64>::from_ptns_bytes(b"NOPE").is_err());
        let t = Tensor::<f64>::ones(Shape::new(1, 2, 2, 2));
        let mut bytes = t.to_ptns_bytes();
        bytes.push(0);
        assert!(Tensor::<f64>::from_ptns_bytes(&bytes).is_err());
        bytes.truncate(bytes.len() - 9);
        assert!(Tensor::<f64>::from_ptns_bytes(&bytes).is_err());
        let mut bad_dtype = t.to_ptns_bytes();
        bad_dtype[4] = 7;
        assert!(Tensor::<f64>::from_ptns_bytes(&bad_dtype).is_err());
    }

    #[test]
    fn ptns_converts_between_dtypes() {
        let t = Tensor::<f64>::from_f64(Shape::vector(3), &[0.5, -1.0, 2.0]).unwrap();
        let back: Tensor<f32> = Tensor::from_ptns_bytes(&t.to_ptns_bytes()).unwrap();
        assert_eq!(back.data(), &[0.5f32, -1.0, 2.0]);
    }

    #[test]
    fn gemm_handles_transposes() {
        // a = [[1,2,3],[4,5,6]], b = [[1,0],[0,1],[1,1]]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0f64; 4];
        gemm(Mat::new(&a, 2, 3), Mat::new(&b, 3, 2), &mut c, false);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        // aᵀ·a is 3×3
        let mut ata = [0.0f64; 9];
        gemm(Mat::new(&a, 2, 3).t(), Mat::new(&a, 2, 3), &mut ata, false);
        assert_eq!(ata, [17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);
        gemm(Mat::new(&a, 2, 3).t(), Mat::new(&a, 2, 3), &mut ata, true);
        assert_eq!(ata[0], 34.0);
    }
}
