//! Named parameter storage and graph binding.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

/// Every learnable tensor of a model, keyed by a stable hierarchical name
/// such as `encoder/fusion/stage1/layer1/msa/query/weight`.
///
/// Iteration order is the lexicographic order of names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter {name}")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    /// Replaces an existing parameter; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "set_param",
                format!("{name}: {:?} vs {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Subset of parameters whose names start with `prefix`.
    pub fn with_prefix<'a>(
        &'a self,
        prefix: &'a str,
    ) -> impl Iterator<Item = (&'a str, &'a Tensor)> {
        self.iter().filter(move |(k, _)| k.starts_with(prefix))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.params.remove(name)
    }
}

/// Whether SGD weight decay applies to a parameter.
///
/// Layer-norm affine terms and biases are exempt.
pub fn is_decayed(name: &str) -> bool {
    !matches!(name.rsplit('/').next(), Some("gamma" | "beta" | "bias"))
}

/// Gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

/// A forward pass in progress: a fresh graph plus lazily bound parameters.
pub struct Session<'p> {
    pub graph: Graph,
    store: &'p ParameterStore,
    bound: BTreeMap<String, Var>,
}

impl<'p> Session<'p> {
    pub fn new(store: &'p ParameterStore) -> Self {
        Session {
            graph: Graph::new(),
            store,
            bound: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParameterStore {
        self.store
    }

    /// Graph leaf for parameter `name`, created on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self
            .store
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))?;
        let v = self.graph.param(t.clone());
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.graph.constant(value)
    }

    /// Runs backward from `loss` and collects gradients of every bound
    /// parameter. Parameters the loss does not reach get zero gradients.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.graph.backward(loss)?;
        Ok(self
            .bound
            .iter()
            .map(|(name, &v)| {
                let g = self
                    .graph
                    .grad(v)
                    .unwrap_or_else(|| Tensor::zeros(self.graph.shape(v)));
                (name.clone(), g)
            })
            .collect())
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &str> {
        self.bound.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParameterStore::new();
        s.insert("a/weight", Tensor::zeros(&[2])).unwrap();
        assert!(s.insert("a/weight", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn decay_exemptions() {
        assert!(is_decayed("ffn/fc1/weight"));
        assert!(is_decayed("embed/alpha/weight"));
        assert!(!is_decayed("ffn/fc1/bias"));
        assert!(!is_decayed("ln1/gamma"));
        assert!(!is_decayed("ln1/beta"));
    }

    #[test]
    fn session_binds_once() {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let mut sess = Session::new(&s);
        let a = sess.param("w").unwrap();
        let b = sess.param("w").unwrap();
        assert_eq!(a, b);
        assert!(sess.param("missing").is_err());
    }
}
