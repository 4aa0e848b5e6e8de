//! Named dense tensors of `f64`, the storage unit for every trainable parameter set.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(other.name.clone(), &other.shape)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn zeros_like(tensors: &[Tensor]) -> Vec<Tensor> {
    tensors.iter().map(Tensor::zeros_like).collect()
}

/// Checks that two tensor lists have the same names and shapes in the same order.
pub fn check_same_layout(expected: &[Tensor], actual: &[Tensor]) -> Result<()> {
    if expected.len() != actual.len() {
        return Err(Error::invalid(format!(
            "tensor count mismatch: expected {}, got {}",
            expected.len(),
            actual.len()
        )));
    }
    for (e, a) in expected.iter().zip(actual) {
        if e.shape != a.shape || e.name != a.name {
            return Err(Error::Shape {
                name: e.name.clone(),
                expected: e.shape.clone(),
                actual: a.shape.clone(),
            });
        }
    }
    Ok(())
}

/// `dst += scale * src`, tensor by tensor.
pub fn add_scaled(dst: &mut [Tensor], src: &[Tensor], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        for (x, y) in d.data.iter_mut().zip(&s.data) {
            *x += scale * y;
        }
    }
}

pub fn scale(tensors: &mut [Tensor], factor: f64) {
    for t in tensors {
        t.data.iter_mut().for_each(|v| *v *= factor);
    }
}

/// Content digest over names, shapes and little-endian values.
pub fn digest(tensors: &[Tensor]) -> String {
    let mut h = Sha256::new();
    for t in tensors {
        h.update(t.name.as_bytes());
        h.update([0u8]);
        for &d in &t.shape {
            h.update((d as u64).to_le_bytes());
        }
        for v in &t.data {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
