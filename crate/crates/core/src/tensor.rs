//! Dense rank-4 feature maps in NCHW layout.
//!
//! Values are stored as `f64` in row-major order. Construction through
//! [`Tensor::from_vec`] validates both the length invariant and finiteness;
//! [`Tensor::from_vec_unchecked`] keeps the length check but skips the scan
//! for NaN/Inf, which is what the hot paths of the executor use.

use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"CCT1";

/// Element type tag stored in the tensor header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::format(format!("unknown dtype tag {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl From<[usize; 4]> for Shape {
    fn from(d: [usize; 4]) -> Self {
        Shape::new(d[0], d[1], d[2], d[3])
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        let head: Vec<_> = self.data.iter().take(PREVIEW).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &head)
            .field("len", &self.data.len())
            .finish()
    }
}

impl Tensor {
    /// Checked construction: length must match and every value must be finite.
    pub fn from_vec(shape: impl Into<Shape>, data: Vec<f64>) -> Result<Self> {
        let t = Self::from_vec_unchecked(shape, data)?;
        if let Some(i) = t.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(t)
    }

    /// Fast construction: only the length invariant is enforced.
    pub fn from_vec_unchecked(shape: impl Into<Shape>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if data.len() != shape.numel() {
            return Err(Error::shape(format!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.numel()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Shape>, value: f64) -> Self {
        let shape = shape.into();
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Shape::new(1, 1, 1, 1),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let s = &self.shape;
        ((n * s.c + c) * s.h + h) * s.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(n, c, h, w)]
    }

    /// Contiguous `h*w` plane for one (batch, channel) pair.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn reshape(self, shape: impl Into<Shape>) -> Result<Self> {
        Self::from_vec_unchecked(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, a: f64) -> Self {
        self.map(|v| a * v)
    }

    /// `a*self + b*other`, shapes must agree.
    pub fn axpby(&self, a: f64, other: &Tensor, b: f64) -> Result<Self> {
        self.expect_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(x, y)| a * x + b * y).collect();
        Ok(Tensor {
            shape: self.shape,
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other)?;
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += y;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max))
    }

    pub(crate) fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "expected shape {}, got {}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Serialize as `CCT1`, four little-endian `u32` dims, a dtype tag and the raw values.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(TENSOR_MAGIC)?;
        for d in self.shape.dims() {
            let d = u32::try_from(d).map_err(|_| Error::format(format!("dimension {d} exceeds u32")))?;
            out.write_all(&d.to_le_bytes())?;
        }
        out.write_all(&[DType::F64 as u8])?;
        for v in &self.data {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(21 + 8 * self.numel());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Reads one tensor; `f32` payloads are widened to `f64`.
    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut input, &mut magic, "tensor magic")?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::format(format!("bad tensor magic {magic:?}")));
        }
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            let mut b = [0u8; 4];
            read_exact(&mut input, &mut b, "tensor shape")?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let mut tag = [0u8; 1];
        read_exact(&mut input, &mut tag, "dtype tag")?;
        let dtype = DType::from_tag(tag[0])?;
        let shape = Shape::from(dims);
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format("tensor shape overflows"))?;
        let mut data = Vec::with_capacity(numel.min(1 << 24));
        match dtype {
            DType::F64 => {
                let mut b = [0u8; 8];
                for _ in 0..numel {
                    read_exact(&mut input, &mut b, "tensor payload")?;
                    data.push(f64::from_le_bytes(b));
                }
            }
            DType::F32 => {
                let mut b = [0u8; 4];
                for _ in 0..numel {
                    read_exact(&mut input, &mut b, "tensor payload")?;
                    data.push(f32::from_le_bytes(b) as f64);
                }
            }
        }
        Tensor::from_vec(shape, data)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }
}

pub(crate) fn read_exact<R: Read>(input: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::format(format!("truncated input while reading {what}")),
        _ => Error::Io(e),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_invariant_enforced() {
        assert!(Tensor::from_vec([1, 1, 2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::from_vec_unchecked([1, 1, 2, 2], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec([1, 1, 2, 2], vec![0.0; 4]).is_ok());
    }

    #[test]
    fn checked_mode_rejects_non_finite() {
        let err = Tensor::from_vec([1, 1, 1, 2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(1)));
        assert!(Tensor::from_vec([1, 1, 1, 1], vec![f64::INFINITY]).is_err());
        assert!(Tensor::from_vec_unchecked([1, 1, 1, 1], vec![f64::NAN]).is_ok());
    }

    #[test]
    fn zero_sized_dims_allowed() {
        let t = Tensor::zeros([2, 0, 3, 3]);
        assert_eq!(t.numel(), 0);
        let back = Tensor::from_bytes(&t.to_bytes()).unwrap();
        assert_eq!(back.shape(), t.shape());
    }

    #[test]
    fn header_layout() {
        let t = Tensor::from_vec([1, 2, 1, 1], vec![1.5, -2.0]).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[0..4], b"CCT1");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(b[20], 1);
        assert_eq!(&b[21..29], &1.5f64.to_le_bytes());
        assert_eq!(b.len(), 21 + 16);
    }

    #[test]
    fn f32_payload_widens() {
        let mut b = Vec::new();
        b.extend_from_slice(b"CCT1");
        for d in [1u32, 1, 1, 2] {
            b.extend_from_slice(&d.to_le_bytes());
        }
        b.push(0);
        b.extend_from_slice(&0.25f32.to_le_bytes());
        b.extend_from_slice(&(-3.0f32).to_le_bytes());
        let t = Tensor::from_bytes(&b).unwrap();
        assert_eq!(t.data(), &[0.25, -3.0]);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let t = Tensor::full([1, 1, 2, 2], 1.0);
        let mut b = t.to_bytes();
        let truncated = &b[..b.len() - 3];
        assert!(matches!(Tensor::from_bytes(truncated), Err(Error::Format(_))));
        b[0] = b'X';
        assert!(matches!(Tensor::from_bytes(&b), Err(Error::Format(_))));
    }
}
