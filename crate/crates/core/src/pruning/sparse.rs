//! Index/value encoding of uploaded parameters, used for byte accounting.
//!
//! Wire layout, little-endian:
//!
//! | offset | size    | field                          |
//! |--------|---------|--------------------------------|
//! | 0      | 4       | magic `SPRS`                   |
//! | 4      | 1       | version (`1`)                  |
//! | 5      | 4       | `total_len` (u32)              |
//! | 9      | 4       | `nnz` (u32)                    |
//! | 13     | 4·nnz   | indices (u32, strictly rising) |
//! | …      | 4·nnz   | values (f32)                   |
//!
//! Values are narrowed to f32 on the wire. The in-memory payload keeps full
//! f64 precision, so `from_sparse(to_sparse(θ))` is bitwise exact. The layer
//! directory is not encoded; both ends know the model layout.

use crate::error::{Error, Result};
use crate::nn::{LayerInfo, ParamVector};

pub const SPARSE_MAGIC: [u8; 4] = *b"SPRS";
pub const SPARSE_VERSION: u8 = 1;
pub const HEADER_BYTES: usize = 13;
const ENTRY_BYTES: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct SparsePayload {
    indices: Vec<u32>,
    values: Vec<f64>,
    total_len: usize,
    directory: Vec<LayerInfo>,
}

impl SparsePayload {
    pub fn new(
        indices: Vec<u32>,
        values: Vec<f64>,
        total_len: usize,
        directory: Vec<LayerInfo>,
    ) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(Error::MalformedPayload(format!(
                "{} indices vs {} values",
                indices.len(),
                values.len()
            )));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::MalformedPayload(
                "indices not strictly increasing".into(),
            ));
        }
        if let Some(&last) = indices.last() {
            if last as usize >= total_len {
                return Err(Error::IndexOutOfBounds {
                    index: last as usize,
                    len: total_len,
                });
            }
        }
        Ok(Self {
            indices,
            values,
            total_len,
            directory,
        })
    }

    /// Encode the nonzero entries of `params`.
    pub fn from_params(params: &ParamVector) -> Self {
        let (indices, values) = params
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i as u32, *v))
            .unzip();
        Self {
            indices,
            values,
            total_len: params.total_len(),
            directory: params.directory(),
        }
    }

    /// Encode every entry, zeros included: the size of an uncompressed upload.
    pub fn dense(params: &ParamVector) -> Self {
        Self {
            indices: (0..params.total_len() as u32).collect(),
            values: params.to_flat(),
            total_len: params.total_len(),
            directory: params.directory(),
        }
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn directory(&self) -> &[LayerInfo] {
        &self.directory
    }

    pub fn payload_bytes(&self) -> usize {
        Self::bytes_for(self.nnz())
    }

    /// Encoded size of a payload with `nnz` entries.
    pub fn bytes_for(nnz: usize) -> usize {
        HEADER_BYTES + ENTRY_BYTES * nnz
    }

    /// Densify back into a parameter vector.
    pub fn to_params(&self) -> Result<ParamVector> {
        let mut flat = vec![0.0; self.total_len];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            let i = i as usize;
            if i >= self.total_len {
                return Err(Error::IndexOutOfBounds {
                    index: i,
                    len: self.total_len,
                });
            }
            flat[i] = v;
        }
        ParamVector::from_directory(&self.directory, &flat)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.payload_bytes());
        out.extend_from_slice(&SPARSE_MAGIC);
        out.push(SPARSE_VERSION);
        out.extend_from_slice(&(self.total_len as u32).to_le_bytes());
        out.extend_from_slice(&(self.nnz() as u32).to_le_bytes());
        for i in &self.indices {
            out.extend_from_slice(&i.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], directory: &[LayerInfo]) -> Result<Self> {
        if bytes.len() < HEADER_BYTES {
            return Err(Error::MalformedPayload(format!(
                "{} bytes is shorter than the header",
                bytes.len()
            )));
        }
        if bytes[..4] != SPARSE_MAGIC {
            return Err(Error::MalformedPayload("bad magic".into()));
        }
        if bytes[4] != SPARSE_VERSION {
            return Err(Error::MalformedPayload(format!(
                "unknown version {}",
                bytes[4]
            )));
        }
        let word = |at: usize| {
            u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
        };
        let total_len = word(5) as usize;
        let nnz = word(9) as usize;
        if bytes.len() != Self::bytes_for(nnz) {
            return Err(Error::MalformedPayload(format!(
                "expected {} bytes for {} entries, got {}",
                Self::bytes_for(nnz),
                nnz,
                bytes.len()
            )));
        }
        let dir_len: usize = directory.iter().map(LayerInfo::len).sum();
        if dir_len != total_len {
            return Err(Error::MalformedPayload(format!(
                "payload covers {total_len} scalars, layout has {dir_len}"
            )));
        }
        let idx_at = HEADER_BYTES;
        let val_at = idx_at + 4 * nnz;
        let indices = (0..nnz).map(|k| word(idx_at + 4 * k)).collect();
        let values = (0..nnz)
            .map(|k| {
                let at = val_at + 4 * k;
                f64::from(f32::from_le_bytes([
                    bytes[at],
                    bytes[at + 1],
                    bytes[at + 2],
                    bytes[at + 3],
                ]))
            })
            .collect();
        Self::new(indices, values, total_len, directory.to_vec())
    }
}

pub fn to_sparse(params: &ParamVector) -> SparsePayload {
    SparsePayload::from_params(params)
}

pub fn from_sparse(payload: &SparsePayload) -> Result<ParamVector> {
    payload.to_params()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pruning::{l1_prune, MaskScope};
    use proptest::prelude::*;

    #[test]
    fn byte_formula() {
        let mut v = vec![0.0; 1000];
        for (i, x) in v.iter_mut().enumerate().step_by(4) {
            *x = i as f64 + 1.0;
        }
        let p = SparsePayload::from_params(&ParamVector::from_flat(v));
        assert_eq!(p.nnz(), 250);
        assert_eq!(p.payload_bytes(), 250 * 8 + HEADER_BYTES);
        assert_eq!(p.encode().len(), p.payload_bytes());
    }

    #[test]
    fn pruned_payload_is_a_quarter_of_dense() {
        let v: Vec<f64> = (0..4000).map(|i| ((i * 37) % 101) as f64 + 0.5).collect();
        let theta = ParamVector::from_flat(v);
        let dense = SparsePayload::dense(&theta).payload_bytes();
        let pruned =
            SparsePayload::from_params(&l1_prune(&theta, 0.75, MaskScope::Global).unwrap())
                .payload_bytes();
        assert!((pruned as f64 - 0.25 * dense as f64).abs() <= HEADER_BYTES as f64);
    }

    #[test]
    fn out_of_bounds_index_rejected() {
        let dir = ParamVector::from_flat(vec![0.0; 3]).directory();
        assert!(matches!(
            SparsePayload::new(vec![0, 5], vec![1.0, 2.0], 3, dir.clone()),
            Err(Error::IndexOutOfBounds { index: 5, len: 3 })
        ));
        let mut bytes = SparsePayload::new(vec![0, 2], vec![1.0, 2.0], 3, dir.clone())
            .unwrap()
            .encode();
        bytes[17] = 9; // second index -> 9
        assert!(SparsePayload::decode(&bytes, &dir).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(SparsePayload::decode(&bad_magic, &dir).is_err());
    }

    proptest! {
        #[test]
        fn round_trips(v in proptest::collection::vec(prop_oneof![Just(0.0f64), -1e3f64..1e3], 0..200)) {
            let theta = ParamVector::from_flat(v.clone());
            let p = to_sparse(&theta);
            prop_assert!(from_sparse(&p).unwrap().bitwise_eq(&theta));

            // Through the wire format, values are narrowed to f32.
            let narrowed = theta.map(|x| f64::from(x as f32));
            let back = SparsePayload::decode(&p.encode(), &theta.directory()).unwrap();
            prop_assert!(from_sparse(&back).unwrap().bitwise_eq(&narrowed));
        }
    }
}
