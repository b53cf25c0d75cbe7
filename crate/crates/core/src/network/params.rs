use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Gradients = BTreeMap<String, Tensor>;

/// Adds `grad` into `grads[name]`, inserting it if absent.
pub fn accumulate(grads: &mut Gradients, name: &str, grad: Tensor) {
    match grads.get_mut(name) {
        Some(g) => g.add_assign(&grad),
        None => {
            grads.insert(name.to_string(), grad);
        }
    }
}

/// Named learnable parameters plus named non-learnable buffers (batch-norm running
/// statistics). Both maps iterate in name order, which every serializer relies on.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn param(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn try_param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Tensor {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn buffer(&self, name: &str) -> &Tensor {
        self.buffers
            .get(name)
            .unwrap_or_else(|| panic!("missing buffer `{name}`"))
    }

    pub fn buffer_mut(&mut self, name: &str) -> &mut Tensor {
        self.buffers
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing buffer `{name}`"))
    }

    pub fn set_param(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn set_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        self.buffers.insert(name.into(), value);
    }

    pub fn contains_param(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Copies in every parameter and buffer of `other`, replacing same-named entries.
    pub fn merge(&mut self, other: &ParamStore) {
        for (k, v) in &other.params {
            self.params.insert(k.clone(), v.clone());
        }
        for (k, v) in &other.buffers {
            self.buffers.insert(k.clone(), v.clone());
        }
    }

    /// SHA-256 over names, shapes and little-endian values of params and buffers.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (kind, map) in [("p", &self.params), ("b", &self.buffers)] {
            for (name, t) in map {
                h.update(kind.as_bytes());
                h.update(name.as_bytes());
                for d in t.shape() {
                    h.update((*d as u64).to_le_bytes());
                }
                for v in t.data() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    /// Largest absolute elementwise parameter difference; errors if the layouts differ.
    pub fn max_param_diff(&self, other: &ParamStore) -> Result<f64> {
        self.check_same_layout(other)?;
        Ok(self
            .params
            .iter()
            .map(|(k, v)| v.max_abs_diff(&other.params[k]))
            .fold(0.0, f64::max))
    }

    pub fn check_same_layout(&self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} vs {} parameters",
                self.params.len(),
                other.params.len()
            )));
        }
        for (k, v) in &self.params {
            match other.params.get(k) {
                Some(o) if o.shape() == v.shape() => {}
                Some(o) => {
                    return Err(Error::ShapeMismatch(format!(
                        "`{k}`: {:?} vs {:?}",
                        v.shape(),
                        o.shape()
                    )))
                }
                None => return Err(Error::ShapeMismatch(format!("`{k}` missing"))),
            }
        }
        Ok(())
    }
}
