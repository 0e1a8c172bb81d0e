//! Dense `f64` tensors.
//!
//! Volumes are channels-first `[C, X, Y, Z]` with X varying fastest in
//! memory, so the flat offset of `(c, x, y, z)` is
//! `((c * Z + z) * Y + y) * X + x`. The same order is used on disk, which
//! makes serialization a straight little-endian dump of `data`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} holds {} values but {} were given",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(values: &[f64]) -> Self {
        Tensor {
            shape: vec![values.len()],
            data: values.to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `(C, X, Y, Z)` of a rank-4 volume.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[c, x, y, z] => Ok([c, x, y, z]),
            other => Err(Error::Dimension(format!(
                "expected a [C,X,Y,Z] volume, got shape {other:?}"
            ))),
        }
    }

    pub fn spatial(&self) -> Result<[usize; 3]> {
        let [_, x, y, z] = self.dims4()?;
        Ok([x, y, z])
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(shape: Vec<usize>, bytes: &[u8]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if bytes.len() != n * 8 {
            return Err(Error::Format(format!(
                "blob holds {} bytes, shape {:?} needs {}",
                bytes.len(),
                shape,
                n * 8
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data)
    }
}

/// Flat offset into a channels-first, X-fastest volume.
#[inline]
pub fn offset(dims: [usize; 3], c: usize, x: usize, y: usize, z: usize) -> usize {
    ((c * dims[2] + z) * dims[1] + y) * dims[0] + x
}

/// JSON side-car describing a raw tensor blob.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorDescriptor {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
}

pub const DTYPE_F64_LE: &str = "f64le";

/// Writes `tensor` as `<dir>/<file>` and returns its descriptor.
pub fn write_tensor(dir: &Path, name: &str, tensor: &Tensor) -> Result<TensorDescriptor> {
    let file = format!("{name}.bin");
    let path = dir.join(&file);
    fs::write(&path, tensor.to_le_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(TensorDescriptor {
        name: name.to_string(),
        shape: tensor.shape.clone(),
        dtype: DTYPE_F64_LE.to_string(),
        file,
    })
}

pub fn read_tensor(dir: &Path, desc: &TensorDescriptor) -> Result<Tensor> {
    if desc.dtype != DTYPE_F64_LE {
        return Err(Error::Format(format!(
            "tensor {}: unsupported dtype {:?}",
            desc.name, desc.dtype
        )));
    }
    let path = dir.join(&desc.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Tensor::from_le_bytes(desc.shape.clone(), &bytes)
        .map_err(|e| Error::Format(format!("tensor {}: {e}", desc.name)))
}
