//! Named parameter storage.
//!
//! Parameters are addressed by dotted names whose first segment is the
//! checkpoint group (`encoder`, `variance_adaptor`, `decoder`,
//! `style_encoder`, `predictors`, `mi_estimator`). Values are reference
//! counted so computation graphs can hold them without copying.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    frozen: Vec<bool>,
    lookup: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on a duplicate name, which is always a
    /// model-construction bug.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.lookup.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.names.len());
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(Arc::new(value));
        self.frozen.push(false);
        id
    }

    /// Glorot-uniform initialised `fan_in × fan_out` matrix.
    pub fn add_glorot<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.add(name, Tensor::uniform(fan_in, fan_out, bound, rng))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub(crate) fn get_arc(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.values[id.0])
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(
            self.values[id.0].shape(),
            value.shape(),
            "shape change for {}",
            self.names[id.0]
        );
        self.values[id.0] = Arc::new(value);
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    /// Freezes (or unfreezes) every parameter whose name starts with
    /// `prefix.`; returns how many matched.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for (i, name) in self.names.iter().enumerate() {
            if in_group(name, prefix) {
                self.frozen[i] = frozen;
                n += 1;
            }
        }
        n
    }

    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.names
            .iter()
            .enumerate()
            .filter(move |(_, n)| in_group(n, prefix))
            .map(|(i, _)| ParamId(i))
    }

    pub fn num_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// SHA-256 over names, shapes and exact bit patterns of every parameter in
    /// a group. Identical hashes mean bitwise-identical parameters.
    pub fn group_hash(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for id in self.ids_with_prefix(prefix) {
            let t = self.get(id);
            h.update(self.names[id.0].as_bytes());
            h.update((t.rows() as u64).to_le_bytes());
            h.update((t.cols() as u64).to_le_bytes());
            for x in t.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn in_group(name: &str, prefix: &str) -> bool {
    prefix.is_empty()
        || name == prefix
        || (name.starts_with(prefix) && name.as_bytes().get(prefix.len()) == Some(&b'.'))
}
