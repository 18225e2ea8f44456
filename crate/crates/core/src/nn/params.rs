use std::collections::{BTreeMap, HashMap};

use super::graph::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Named tensors: trainable parameters plus non-trainable buffers
/// (normalization running statistics).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<F = f32> {
    tensors: BTreeMap<String, Tensor<F>>,
}

/// Buffers are updated by forward passes, never by the optimizer.
pub fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<F>> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total element count of trainable tensors.
    pub fn num_trainable(&self) -> usize {
        self.iter().filter(|(n, _)| !is_buffer(n)).map(|(_, t)| t.len()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Drop every tensor whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.tensors.retain(|k, _| !k.starts_with(prefix));
    }

    /// Copy in every tensor of `other` whose name starts with `prefix`.
    pub fn copy_prefix_from(&mut self, other: &ParamStore<F>, prefix: &str) {
        for (k, v) in other.iter().filter(|(k, _)| k.starts_with(prefix)) {
            self.tensors.insert(k.to_string(), v.clone());
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}

/// Parameters placed on a tape. Trainable ones are gradient leaves, the
/// rest are constants.
pub struct Bound<'s, F: Scalar> {
    store: &'s ParamStore<F>,
    vars: HashMap<String, Var>,
    trainable: Vec<(String, Var)>,
}

impl<'s, F: Scalar> Bound<'s, F> {
    pub fn new(g: &mut Graph<F>, store: &'s ParamStore<F>, trainable: impl Fn(&str) -> bool) -> Self {
        let mut vars = HashMap::with_capacity(store.len());
        let mut train = Vec::new();
        for (name, t) in store.iter() {
            if is_buffer(name) {
                continue;
            }
            let v = if trainable(name) {
                let v = g.param(t.clone());
                train.push((name.to_string(), v));
                v
            } else {
                g.constant(t.clone())
            };
            vars.insert(name.to_string(), v);
        }
        Self {
            store,
            vars,
            trainable: train,
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn opt_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Raw tensor, used for buffers.
    pub fn tensor(&self, name: &str) -> Result<&'s Tensor<F>> {
        self.store.get(name)
    }

    /// Gradients of the trainable parameters, by name. Parameters that did
    /// not influence the loss get zeros.
    pub fn collect(&self, grads: &mut Gradients<F>) -> ParamStore<F> {
        let mut out = ParamStore::new();
        for (name, v) in &self.trainable {
            let g = grads
                .take(*v)
                .unwrap_or_else(|| Tensor::zeros(self.store.get(name).expect("bound name").shape()));
            out.insert(name.clone(), g);
        }
        out
    }
}
