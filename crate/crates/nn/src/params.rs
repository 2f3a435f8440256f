use crate::error::{NnError, Result};
use crate::tensor::Tensor;

/// Ordered, named collection of trainable tensors.
///
/// The serialized blob is the concatenation of every tensor's values as
/// little-endian `f64`, in registration order. Shapes live with the model
/// configuration, not in the blob.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor and returns its index.
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_scalars() * 8);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Overwrites all values from a blob produced by [`ParamSet::to_blob`].
    pub fn load_blob(&mut self, blob: &[u8]) -> Result<()> {
        let expected = self.num_scalars() * 8;
        if blob.len() != expected {
            return Err(NnError::Blob(format!(
                "expected {expected} bytes, found {}",
                blob.len()
            )));
        }
        let mut chunks = blob.chunks_exact(8);
        for t in &mut self.tensors {
            for v in t.data_mut() {
                let bytes: [u8; 8] = chunks.next().expect("length checked").try_into().expect("8 bytes");
                *v = f64::from_le_bytes(bytes);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_round_trip_is_byte_identical() {
        let mut p = ParamSet::new();
        p.push("a", Tensor::from_vec(&[2], vec![1.5, -0.25]).unwrap());
        p.push("b", Tensor::from_vec(&[1, 3], vec![f64::MIN_POSITIVE, 3.0, 1e300]).unwrap());
        let blob = p.to_blob();
        let mut q = p.clone();
        q.tensors_mut()[0].data_mut()[0] = 0.0;
        q.load_blob(&blob).unwrap();
        assert_eq!(q, p);
        assert_eq!(q.to_blob(), blob);
        assert!(q.load_blob(&blob[1..]).is_err());
    }
}
