//! Dense tensors and the CFT1 interchange format.
//!
//! A CFT1 file is, with no padding and no trailer:
//!
//! | bytes            | content                                   |
//! |------------------|-------------------------------------------|
//! | 0..4             | ASCII magic `CFT1`                        |
//! | 4                | rank `r` as `u8`, `r ∈ {1, 2, 3}`         |
//! | 5..5+4r          | `r` dimensions, `u32` little-endian       |
//! | rest             | `∏ dims` values, `f32` little-endian      |
//!
//! The payload is row-major. Non-finite values are rejected on load.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::TokenMatrix;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"CFT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(Error::Shape(format!(
                "tensor rank must be 1..=3, got {}",
                shape.len()
            )));
        }
        if shape.iter().any(|&d| d == 0 || d > u32::MAX as usize) {
            return Err(Error::Shape(format!("invalid dimensions {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn vector(data: Vec<f32>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + 4 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 5 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing CFT1 magic".into()));
        }
        let rank = bytes[4] as usize;
        if !(1..=3).contains(&rank) {
            return Err(Error::Format(format!("unsupported rank {rank}")));
        }
        let header = 5 + 4 * rank;
        if bytes.len() < header {
            return Err(Error::Corruption("header truncated".into()));
        }
        let shape: Vec<usize> = bytes[5..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        if shape.contains(&0) {
            return Err(Error::Corruption(format!("zero dimension in {shape:?}")));
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Corruption(format!("dimensions {shape:?} overflow")))?;
        let payload = &bytes[header..];
        if payload.len() != count * 4 {
            return Err(Error::Corruption(format!(
                "shape {shape:?} needs {} payload bytes, found {}",
                count * 4,
                payload.len()
            )));
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite value at flat index {i}"
            )));
        }
        Ok(Self { shape, data })
    }

    /// Converts a rank-2 tensor into a token matrix.
    pub fn to_matrix<T: Scalar>(&self) -> Result<TokenMatrix<T>> {
        match self.shape[..] {
            [rows, cols] => TokenMatrix::new(
                rows,
                cols,
                self.data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
            ),
            _ => Err(Error::Shape(format!(
                "expected a rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Rank-2 tensors load as-is; rank-3 spatial maps are flattened.
    pub fn to_tokens<T: Scalar>(&self) -> Result<TokenMatrix<T>> {
        if self.rank() == 3 {
            flatten_spatial(self)
        } else {
            self.to_matrix()
        }
    }

    pub fn to_vector<T: Scalar>(&self) -> Result<Vec<T>> {
        if self.rank() != 1 {
            return Err(Error::Shape(format!(
                "expected a rank-1 tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect())
    }

    pub fn from_matrix<T: Scalar>(m: &TokenMatrix<T>) -> Self {
        Self {
            shape: vec![m.rows(), m.cols()],
            data: m.data().iter().map(|v| v.to_f64_lossy() as f32).collect(),
        }
    }

    pub fn from_slice<T: Scalar>(values: &[T]) -> Result<Self> {
        Self::vector(values.iter().map(|v| v.to_f64_lossy() as f32).collect())
    }
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| Error::Read {
        path: path.to_path_buf(),
        source,
    })?;
    Tensor::decode(&bytes)
}

pub fn write_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, t.encode()).map_err(|source| Error::Write {
        path: path.to_path_buf(),
        source,
    })
}

/// Flattens an `(H, W, d)` map into `H·W` token rows; row `r` is cell
/// `(r / W, r % W)`.
pub fn flatten_spatial<T: Scalar>(t: &Tensor) -> Result<TokenMatrix<T>> {
    match t.shape[..] {
        // Row-major (H, W, d) is already (H·W, d) row-major.
        [h, w, d] => TokenMatrix::new(
            h * w,
            d,
            t.data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
        ),
        _ => Err(Error::Shape(format!(
            "flatten_spatial needs rank 3, got shape {:?}",
            t.shape
        ))),
    }
}
