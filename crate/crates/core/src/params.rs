//! Named parameter storage shared by the transformer and the regression head.

use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::DiffusionRng;
use crate::tensor::{Real, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Real> Default for ParamStore<S> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

/// Leaf handles of a store on one graph.
#[derive(Clone, Debug)]
pub struct BoundParams(Vec<Var>);

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    /// Same handles with `id` rebound to `var`.
    pub fn with(&self, id: ParamId, var: Var) -> BoundParams {
        let mut b = self.clone();
        b.0[id.0] = var;
        b
    }
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor<S>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        tensor.set_requires_grad(true);
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Weight ~ N(0, std²).
    pub fn add_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut DiffusionRng) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| S::of(std * rng.normal())).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("valid shape"))
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Inserts every tensor as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph<S>) -> BoundParams {
        BoundParams(self.tensors.iter().map(|t| g.leaf(t)).collect())
    }

    /// Adds the gradients held by `g` into each tensor's gradient buffer.
    pub fn collect_grads(&mut self, g: &Graph<S>, bound: &BoundParams) {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.0) {
            if !t.requires_grad() {
                continue;
            }
            match g.grad(v) {
                Some(grad) => t.accumulate_grad(grad),
                None => t.accumulate_grad(&vec![S::zero(); t.len()]),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn set_trainable(&mut self, flag: bool) {
        self.tensors.iter_mut().for_each(|t| t.set_requires_grad(flag));
    }

    /// Replaces values by name; shapes must agree and every name must be present.
    pub fn load_from<'a>(&mut self, named: impl IntoIterator<Item = (&'a str, &'a Tensor<S>)>) -> Result<()> {
        let mut seen = vec![false; self.len()];
        for (name, src) in named {
            let id = self
                .find(name)
                .ok_or_else(|| Error::Format(format!("unexpected parameter {name:?}")))?;
            let dst = &mut self.tensors[id.0];
            if dst.shape() != src.shape() {
                return Err(Error::Shape(format!(
                    "parameter {name}: stored shape {:?}, expected {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Format(format!("missing parameter {:?}", self.names[i])));
        }
        Ok(())
    }

    pub fn cast<T: Real>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// SHA-256 over names, shapes and little-endian `f64` values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_and_collect() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let sq = g.mul(b.var(w), b.var(w)).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        store.collect_grads(&g, &b);
        store.collect_grads(&g, &b);
        assert_eq!(store.get(w).grad().unwrap(), &[4.0, 8.0]);
    }

    #[test]
    fn frozen_store_stays_off_tape() {
        let mut store = ParamStore::<f32>::new();
        store.add_zeros("a", &[3]);
        store.set_trainable(false);
        let mut g = Graph::new();
        store.bind(&mut g);
        assert_eq!(g.taped_len(), 0);
    }

    #[test]
    fn checksum_tracks_values() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add_zeros("a", &[3]);
        let before = store.checksum();
        assert_eq!(before, store.clone().checksum());
        store.get_mut(id).data_mut()[1] = 1e-7;
        assert_ne!(before, store.checksum());
    }
}
