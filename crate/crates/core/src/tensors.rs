//! Named-tensor plumbing shared by the optimizer and checkpoint codec.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Borrowed view of a parameter tensor.
pub enum TensorRef<'a> {
    V(&'a Array1<f64>),
    M(&'a Array2<f64>),
}

/// Mutable view of a parameter tensor.
pub enum TensorMut<'a> {
    V(&'a mut Array1<f64>),
    M(&'a mut Array2<f64>),
}

impl TensorRef<'_> {
    pub fn shape(&self) -> Vec<usize> {
        match self {
            TensorRef::V(a) => a.shape().to_vec(),
            TensorRef::M(a) => a.shape().to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorRef::V(a) => a.len(),
            TensorRef::M(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements in row-major order.
    pub fn to_vec(&self) -> Vec<f64> {
        match self {
            TensorRef::V(a) => a.iter().copied().collect(),
            TensorRef::M(a) => a.iter().copied().collect(),
        }
    }

    pub fn iter(&self) -> Box<dyn Iterator<Item = &f64> + '_> {
        match self {
            TensorRef::V(a) => Box::new(a.iter()),
            TensorRef::M(a) => Box::new(a.iter()),
        }
    }
}

impl TensorMut<'_> {
    pub fn len(&self) -> usize {
        match self {
            TensorMut::V(a) => a.len(),
            TensorMut::M(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter_mut(&mut self) -> Box<dyn Iterator<Item = &mut f64> + '_> {
        match self {
            TensorMut::V(a) => Box::new(a.iter_mut()),
            TensorMut::M(a) => Box::new(a.iter_mut()),
        }
    }

    /// Overwrites the tensor from a row-major slice; lengths must match.
    pub fn fill_from(&mut self, data: &[f64]) {
        assert_eq!(self.len(), data.len(), "tensor length mismatch");
        for (dst, src) in self.iter_mut().zip(data.iter()) {
            *dst = *src;
        }
    }
}

/// A named list of tensors, split into trainable parameters and
/// non-trainable state (batch-norm running statistics).
pub trait NamedTensors {
    fn trainable(&self) -> Vec<(String, TensorRef<'_>)>;
    fn trainable_mut(&mut self) -> Vec<(String, TensorMut<'_>)>;

    fn state(&self) -> Vec<(String, TensorRef<'_>)> {
        Vec::new()
    }
    fn state_mut(&mut self) -> Vec<(String, TensorMut<'_>)> {
        Vec::new()
    }

    /// Trainable and state tensors, in that order.
    fn all(&self) -> Vec<(String, TensorRef<'_>)> {
        let mut v = self.trainable();
        v.extend(self.state());
        v
    }
    fn all_mut(&mut self) -> Vec<(String, TensorMut<'_>)> {
        // Both calls borrow disjoint fields but the compiler cannot see
        // that through two method calls, so each impl overrides when it
        // has state tensors.
        self.trainable_mut()
    }
}

/// Flattens every trainable tensor into one vector (row-major, declaration
/// order). Used by the finite-difference harness.
pub fn flatten_trainable<T: NamedTensors>(t: &T) -> Vec<f64> {
    let mut out = Vec::new();
    for (_, tensor) in t.trainable() {
        out.extend(tensor.iter().copied());
    }
    out
}

/// Writes a flat vector back into the trainable tensors.
pub fn unflatten_trainable<T: NamedTensors>(t: &mut T, flat: &[f64]) {
    let mut offset = 0;
    for (_, mut tensor) in t.trainable_mut() {
        let len = tensor.len();
        tensor.fill_from(&flat[offset..offset + len]);
        offset += len;
    }
    assert_eq!(offset, flat.len(), "flat vector length mismatch");
}

/// Encodes f64 values as base64 over their little-endian bytes.
pub fn encode_f64_b64(data: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for x in data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    B64.encode(bytes)
}

/// Decodes base64 little-endian f64 data, checking the element count.
pub fn decode_f64_b64(encoded: &str, expected_len: usize, field: &str) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(encoded)
        .map_err(|e| Error::Checkpoint(format!("field {field}: bad base64: {e}")))?;
    if bytes.len() != expected_len * 8 {
        return Err(Error::Checkpoint(format!(
            "field {field}: expected {expected_len} f64 values ({} bytes), got {} bytes",
            expected_len * 8,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}
