//! Named parameter storage, kept apart from the tensors of any one forward
//! pass so that optimizers and checkpoints work on plain values.

use std::collections::BTreeMap;
use std::fmt;

use sha2::{Digest, Sha256};

use crate::backward::Gradients;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Param {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), values.len(), "parameter shape/value mismatch");
        Param {
            shape: shape.to_vec(),
            values,
        }
    }
}

/// Ordered map from parameter name to value.
#[derive(Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Param>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeError(pub String);

impl fmt::Display for DecodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "malformed parameter blob: {}", self.0)
    }
}

impl std::error::Error for DecodeError {}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param) {
        self.entries.insert(name.into(), param);
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|p| p.values.len()).sum()
    }

    /// Copies every entry of `other` under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet) {
        for (k, v) in &other.entries {
            self.entries.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Entries whose name starts with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Wraps every value in a tensor; `trainable` decides whether the
    /// tensors collect gradients.
    pub fn bind(&self, trainable: bool) -> BoundParams {
        let tensors = self
            .entries
            .iter()
            .map(|(k, p)| {
                let t = if trainable {
                    Tensor::variable(p.values.clone(), &p.shape)
                } else {
                    Tensor::from_vec(p.values.clone(), &p.shape)
                };
                (k.clone(), t)
            })
            .collect();
        BoundParams { tensors }
    }

    /// Little-endian serialisation with names in sorted order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.scalar_count() * 8);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, p) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for d in &p.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &p.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader { bytes, pos: 0 };
        let count = r.u32()? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| DecodeError(e.to_string()))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| DecodeError("size overflow".into()))?)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.insert(name, Param { shape, values });
        }
        if r.pos != bytes.len() {
            return Err(DecodeError(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(ParamSet { entries })
    }

    /// SHA-256 of the serialised form.
    pub fn digest(&self) -> [u8; 32] {
        let h = Sha256::digest(self.to_bytes());
        let mut out = [0u8; 32];
        out.copy_from_slice(&h);
        out
    }
}

impl fmt::Debug for ParamSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_map()
            .entries(self.entries.iter().map(|(k, p)| (k, &p.shape)))
            .finish()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| DecodeError(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Tensors created from a [`ParamSet`] for one forward pass.
#[derive(Clone)]
pub struct BoundParams {
    tensors: BTreeMap<String, Tensor>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn any_trainable(&self) -> bool {
        self.tensors.values().any(Tensor::requires_grad)
    }

    /// Gradient per parameter name (zeros where the scalar does not depend
    /// on the parameter).
    pub fn collect_grads(&self, grads: &Gradients) -> BTreeMap<String, Vec<f64>> {
        self.tensors
            .iter()
            .map(|(k, t)| (k.clone(), grads.get_or_zeros(t)))
            .collect()
    }

    /// Names of parameters that received a gradient.
    pub fn touched_by(&self, grads: &Gradients) -> Vec<String> {
        self.tensors
            .iter()
            .filter(|(_, t)| grads.contains(t))
            .map(|(k, _)| k.clone())
            .collect()
    }
}
