//! Dense row-major `f64` arrays and the `.ten` container format.
//!
//! A [`Tensor`] is a plain value: it owns its data and knows nothing about
//! differentiation. Differentiable computation happens on a
//! [`Tape`](crate::autodiff::Tape), which records operations over tensors.
//!
//! The `.ten` layout is
//!
//! ```text
//! "T2DP" | u8 version (=1) | u8 rank | rank x u32 LE dims | f32 LE payload
//! ```
//!
//! Values are narrowed to `f32` on save, so a save/load cycle is lossy below
//! single precision.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const TEN_MAGIC: &[u8; 4] = b"T2DP";
pub const TEN_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) && !data.is_empty() {
            return Err(Error::shape("tensor", format!("zero-sized dim in {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor {
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::shape(
                "item",
                format!("expected one element, shape is {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    /// Elementwise `self += other`; shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "add_assign",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for x in &mut self.data {
            *x *= s;
        }
    }

    pub fn to_ten_bytes(&self) -> Result<Vec<u8>> {
        if self.shape.len() > u8::MAX as usize {
            return Err(Error::shape("ten", "rank exceeds 255"));
        }
        let mut out = Vec::with_capacity(6 + 4 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(TEN_MAGIC);
        out.push(TEN_VERSION);
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            let d = u32::try_from(d).map_err(|_| Error::shape("ten", "dim exceeds u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &x in &self.data {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
        Ok(out)
    }

    /// Parses a `.ten` buffer; `origin` names the source in error messages.
    pub fn from_ten_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < 6 || &bytes[..4] != TEN_MAGIC {
            return Err(Error::format(origin, "bad magic bytes (expected T2DP)"));
        }
        if bytes[4] != TEN_VERSION {
            return Err(Error::format(
                origin,
                format!("unsupported version {}", bytes[4]),
            ));
        }
        let rank = bytes[5] as usize;
        let header = 6 + 4 * rank;
        if bytes.len() < header {
            return Err(Error::format(origin, "truncated header"));
        }
        let shape: Vec<usize> = bytes[6..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        let numel: usize = shape.iter().product();
        if bytes.len() != header + 4 * numel {
            return Err(Error::format(
                origin,
                format!(
                    "payload is {} bytes, shape {shape:?} needs {}",
                    bytes.len() - header,
                    4 * numel
                ),
            ));
        }
        let data = bytes[header..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Tensor::new(&shape, data).map_err(|e| Error::format(origin, e.to_string()))
    }

    pub fn save_ten(&self, path: &Path) -> Result<()> {
        let bytes = self.to_ten_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_ten(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ten_bytes(&bytes, path)
    }
}
