use std::ops::Index;

use crate::error::Result;
use crate::tensor::{Graph, Real, Tensor, Var};
use crate::train::checkpoint::{Checkpoint, CheckpointError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named parameter tensors of one network. Names are dotted and unique,
/// `<prefix>.<local name>`.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    prefix: String,
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

/// Graph leaves bound to the parameters of a [`ParamStore`], in registration order.
pub struct Bound<'g, T> {
    vars: Vec<Var<'g, T>>,
}

impl<'g, T> Index<ParamId> for Bound<'g, T> {
    type Output = Var<'g, T>;

    fn index(&self, id: ParamId) -> &Var<'g, T> {
        &self.vars[id.0]
    }
}

impl<'g, T> Bound<'g, T> {
    pub fn vars(&self) -> &[Var<'g, T>] {
        &self.vars
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new(prefix: impl Into<String>) -> Self {
        ParamStore {
            prefix: prefix.into(),
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Registers `value` under `<prefix>.<name>`.
    ///
    /// Panics on a duplicate name; names come from builders, never user input.
    pub fn add(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        assert!(!self.names.contains(&full), "duplicate parameter name {full}");
        self.names.push(full);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Creates one graph leaf per parameter. Frozen parameters become constants.
    pub fn bind<'g>(&self, graph: &'g Graph<T>, trainable: bool) -> Bound<'g, T> {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    graph.leaf(v.clone())
                } else {
                    graph.constant(v.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Gradients accumulated on `bound`; zeros for parameters backward did not reach.
    pub fn grads(&self, bound: &Bound<'_, T>) -> Vec<Tensor<T>> {
        self.values
            .iter()
            .zip(&bound.vars)
            .map(|(v, var)| var.grad().unwrap_or_else(|| Tensor::zeros(v.shape().to_vec())))
            .collect()
    }

    pub fn save_into(&self, ck: &mut Checkpoint) {
        for (name, value) in self.names.iter().zip(&self.values) {
            ck.insert(name.clone(), value);
        }
    }

    pub fn load_from(&mut self, ck: &Checkpoint) -> Result<(), CheckpointError> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let loaded = ck.get::<T>(name)?;
            if loaded.shape() != value.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    found: loaded.shape().to_vec(),
                    expected: value.shape().to_vec(),
                });
            }
            *value = loaded;
        }
        Ok(())
    }

    /// FNV-1a hash over names and exact value bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, value) in self.names.iter().zip(&self.values) {
            eat(name.as_bytes());
            let mut buf = Vec::with_capacity(value.numel() * 8);
            for &v in value.data() {
                v.write_le(&mut buf);
            }
            eat(&buf);
        }
        h
    }

    pub fn map_values(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>)) {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            f(name, value);
        }
    }
}

