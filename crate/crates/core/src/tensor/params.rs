use std::collections::BTreeMap;

use super::tape::{Tape, Var};
use super::value::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub trainable: bool,
}

/// Named trainable tensors, keyed by dotted path (`encoder.block3.conv1.weight`).
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(
            name.into(),
            Param {
                value,
                grad: None,
                trainable: true,
            },
        );
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

    pub fn param(&self, name: &str) -> Result<&Param> {
        self.params.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.param(name)?.value)
    }

    /// Replaces a value, keeping the shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self.param_mut(name)?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape("param_set", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Adds the tape's gradients into every parameter of this store that was
    /// bound with tracking. Tracked-but-unreached parameters receive zeros.
    pub fn pull_grads(&mut self, tape: &Tape) {
        for (name, p) in self.params.iter_mut() {
            let Some(&v) = tape.bindings.get(&(name.clone(), true)) else {
                continue;
            };
            let grad = p.grad.get_or_insert_with(|| Tensor::zeros(p.value.shape().to_vec()));
            if let Some(g) = tape.grad(v) {
                grad.data_mut().iter_mut().zip(g.data()).for_each(|(d, s)| *d += s);
            }
        }
    }
}

/// Read view over a [`ParamStore`] used while recording a forward pass.
/// With `track == false` every parameter enters the tape as a constant.
#[derive(Clone, Copy)]
pub struct Params<'a> {
    pub store: &'a ParamStore,
    pub track: bool,
}

impl<'a> Params<'a> {
    pub fn tracked(store: &'a ParamStore) -> Self {
        Self { store, track: true }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Self { store, track: false }
    }

    pub fn var(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        tape.bind(self.store, name, self.track)
    }
}

impl Tape {
    /// Leaf for a stored parameter, cached per tape so repeated lookups
    /// share one node (and one gradient).
    pub fn bind(&mut self, store: &ParamStore, name: &str, track: bool) -> Result<Var> {
        let p = store.param(name)?;
        let track = track && p.trainable;
        let key = (name.to_string(), track);
        if let Some(&v) = self.bindings.get(&key) {
            return Ok(v);
        }
        let v = self.leaf(p.value.clone(), track);
        self.bindings.insert(key, v);
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pull_grads_only_touches_tracked_bindings() {
        let mut store = ParamStore::new();
        store.insert("a.w", Tensor::full([2], 2.0));
        store.insert("b.w", Tensor::full([2], 3.0));
        let mut tape = Tape::new();
        let a = Params::tracked(&store).var(&mut tape, "a.w").unwrap();
        let b = Params::frozen(&store).var(&mut tape, "b.w").unwrap();
        let p = tape.mul(a, b).unwrap();
        let loss = tape.sum(p).unwrap();
        tape.backward(loss).unwrap();
        store.pull_grads(&tape);
        assert_eq!(store.param("a.w").unwrap().grad.as_ref().unwrap().data(), &[3.0, 3.0]);
        assert!(store.param("b.w").unwrap().grad.is_none());
    }

    #[test]
    fn binding_is_cached() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::ones([3]));
        let mut tape = Tape::new();
        let v1 = tape.bind(&store, "w", true).unwrap();
        let v2 = tape.bind(&store, "w", true).unwrap();
        assert_eq!(v1, v2);
        assert!(tape.bind(&store, "missing", true).is_err());
    }
}
