use std::ops::Index;

use sha2::{Digest, Sha256};

use crate::archive::{Archive, DType};
use crate::error::{GmsError, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub fn from_index(index: usize) -> Self {
        ParamId(index)
    }
}

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

/// Graph leaves for every parameter of a store, bound for one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let cur = &self.tensors[id.0];
        if cur.shape() != value.shape() {
            return Err(GmsError::dim(
                format!("parameter {}", self.names[id.0]),
                format!("{:?}", cur.shape()),
                format!("{:?}", value.shape()),
            ));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    /// In-place view used by the optimizer between graph lifetimes.
    pub(crate) fn data_mut(&mut self, id: ParamId) -> &mut [T] {
        self.tensors[id.0].data_mut()
    }

    /// Total element count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter as a leaf. With `trainable = false` the
    /// leaves are constants and never receive gradients.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<Bound> {
        let vars = self
            .tensors
            .iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { vars })
    }

    /// Stores every tensor as `{prefix}{name}`.
    pub fn save_into(&self, archive: &mut Archive, prefix: &str) -> Result<()> {
        for (name, t) in self.iter() {
            archive.insert_tensor(format!("{prefix}{name}"), t)?;
        }
        Ok(())
    }

    /// Overwrites every registered tensor from `archive`. Stored values of the
    /// other precision are converted.
    pub fn load_from(&mut self, archive: &Archive, prefix: &str) -> Result<()> {
        for id in self.ids().collect::<Vec<_>>() {
            let key = format!("{prefix}{}", self.name(id));
            let stored = archive
                .get(&key)
                .ok_or_else(|| GmsError::Format(format!("archive has no tensor {key:?}")))?;
            let t = match stored.dtype {
                DType::F32 => stored.to_tensor::<f32>()?.cast::<T>(),
                DType::F64 => stored.to_tensor::<f64>()?.cast::<T>(),
            };
            self.set(id, t)?;
        }
        Ok(())
    }

    /// Same names, values converted to another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// SHA-256 over names, shapes and little-endian element bytes.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (name, t) in self.iter() {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            buf.clear();
            t.data().iter().for_each(|&v| v.write_le(&mut buf));
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }
}
