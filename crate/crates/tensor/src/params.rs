use std::collections::BTreeMap;

use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Named parameter tensors of one model, in stable (sorted) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Sets every parameter to zero.
    pub fn zero_all(&mut self) {
        for t in self.entries.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Records every parameter on `tape`, as leaves when `trainable`, as
    /// constants otherwise.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    /// Returns a store holding only the entries under `prefix/`, with the
    /// prefix stripped.
    pub fn sub_store(&self, prefix: &str) -> ParamStore {
        let p = format!("{prefix}/");
        let entries = self
            .entries
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
            .collect();
        ParamStore { entries }
    }

    /// Inserts every entry of `other` under `prefix/`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: &ParamStore) {
        for (k, v) in &other.entries {
            self.entries.insert(format!("{prefix}/{k}"), v.clone());
        }
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Collects the gradient of every bound parameter (zeros where the
    /// parameter did not influence the root).
    pub fn gradients(&self, tape: &Tape, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.shape(v)));
                (k.clone(), g)
            })
            .collect()
    }
}
