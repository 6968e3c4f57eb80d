use std::collections::BTreeMap;
use std::ops::Index;

use crate::graph::{Grads, Graph, Var};
use crate::tensor::Fnv;
use crate::{Float, Tensor, TensorError};

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

/// Gradients keyed like the [`ParamSet`] they belong to.
pub type ParamGrads<T> = BTreeMap<String, Tensor<T>>;

impl<T: Float> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, TensorError> {
        self.tensors
            .get(name)
            .ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>, TensorError> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Order-sensitive hash of every name and every element bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::default();
        for (name, t) in &self.tensors {
            h.write_bytes(name.as_bytes());
            h.write(t.checksum());
        }
        h.finish()
    }

    pub fn cast<U: Float>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Entries under `prefix/`, with the prefix removed.
    pub fn scoped(&self, prefix: &str) -> Self {
        let p = format!("{prefix}/");
        Self {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Insert every entry of `other` under `prefix/`.
    pub fn extend_scoped(&mut self, prefix: &str, other: &Self) {
        for (k, v) in &other.tensors {
            self.tensors.insert(format!("{prefix}/{k}"), v.clone());
        }
    }

    /// Largest element-wise difference over matching tensors.
    pub fn max_abs_diff(&self, other: &Self) -> Option<f64> {
        if self.tensors.keys().ne(other.tensors.keys()) {
            return None;
        }
        let mut m = 0.0f64;
        for (a, b) in self.tensors.values().zip(other.tensors.values()) {
            if a.shape() != b.shape() {
                return None;
            }
            m = m.max(a.max_abs_diff(b).as_f64());
        }
        Some(m)
    }

    /// Register every tensor as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), g.leaf(v.clone(), trainable)))
                .collect(),
        }
    }
}

/// Graph handles for a bound [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Pull this set's gradients out of `grads`; parameters without one are omitted.
    pub fn grads<T: Float>(&self, grads: &mut Grads<T>) -> ParamGrads<T> {
        self.vars
            .iter()
            .filter_map(|(k, v)| grads.take(*v).map(|g| (k.clone(), g)))
            .collect()
    }
}

impl Index<&str> for Bound {
    type Output = Var;

    fn index(&self, name: &str) -> &Var {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scoping_round_trips() {
        let mut a = ParamSet::<f32>::new();
        a.insert("w", Tensor::ones(&[2]));
        let mut all = ParamSet::new();
        all.extend_scoped("gen", &a);
        assert!(all.contains("gen/w"));
        assert_eq!(all.scoped("gen"), a);
        assert!(all.scoped("disc").is_empty());
    }

    #[test]
    fn frozen_binding_yields_no_grads() {
        let mut p = ParamSet::<f64>::new();
        p.insert("w", Tensor::ones(&[3]));
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let s = g.sum_all(b["w"]);
        let mut grads = g.backward(s);
        assert!(b.grads(&mut grads).is_empty());
    }
}
