//! Named parameter storage shared by every model component.

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, Scalar, Tensor, Var};
use rand::Rng;

/// Handle to a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry<T: Scalar> {
    name: String,
    value: Tensor<T>,
    trainable: bool,
}

/// Ordered collection of named tensors. Insertion order is the canonical
/// order for checkpoints, optimizer state and gradient reductions.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Summary produced by [`ParamStore::count`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub trainable: usize,
    pub frozen: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.trainable + self.frozen
    }

    /// Trainable fraction of all parameters, 0 for an empty store.
    pub fn ratio(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            self.trainable as f64 / self.total() as f64
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.entries.push(Entry {
            name: name.into(),
            value,
            trainable: true,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Tensor filled with `U(-bound, bound)` noise.
    pub fn add_uniform<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut R) -> ParamId {
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| T::of(if bound > 0.0 { rng.random_range(-bound..bound) } else { 0.0 }))
            .collect();
        self.add(name, Tensor::from_parts(shape.to_vec(), data))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Replaces a value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::shape(
                "param set",
                format!("{}: {:?} vs {:?}", e.name, e.value.shape(), value.shape()),
            ));
        }
        e.value = value;
        Ok(())
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    /// Freezes or unfreezes every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.trainable = trainable;
            }
        }
    }

    pub fn count(&self) -> ParamCount {
        let mut c = ParamCount { trainable: 0, frozen: 0 };
        for e in &self.entries {
            if e.trainable {
                c.trainable += e.value.len();
            } else {
                c.frozen += e.value.len();
            }
        }
        c
    }

    /// Element count of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.value.len())
            .sum()
    }

    /// Places every parameter on `g`: trainable ones as gradient leaves,
    /// frozen ones as constants.
    pub fn bind(&self, g: &mut Graph<T>) -> Binding {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if e.trainable {
                    g.param(e.value.clone())
                } else {
                    g.constant(e.value.clone())
                }
            })
            .collect();
        Binding { vars }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }
}

/// Graph handles for each parameter of a store, valid for one graph.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Points the given parameters at other graph values.
    pub fn rebind(&mut self, ids: &[ParamId], vars: &[Var]) {
        for (&id, &v) in ids.iter().zip(vars) {
            self.vars[id.0] = v;
        }
    }

    /// Per-parameter gradients in store order; frozen or unused parameters
    /// yield `None`.
    pub fn gradients<T: Scalar>(&self, store: &ParamStore<T>, grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        store
            .ids()
            .map(|id| {
                if store.is_trainable(id) {
                    grads.take(self.var(id))
                } else {
                    None
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::ones(&[3]));
        let b = store.add("frozen.b", Tensor::ones(&[3]));
        store.set_trainable_prefix("frozen.", false);
        let mut g = Graph::new();
        let bind = store.bind(&mut g);
        let ab = g.mul(bind.var(a), bind.var(b)).unwrap();
        let loss = g.sum_all(ab).unwrap();
        let mut grads = g.backward(loss).unwrap();
        let per = bind.gradients(&store, &mut grads);
        assert!(per[a.index()].is_some());
        assert!(per[b.index()].is_none());
        assert_eq!(store.count(), ParamCount { trainable: 3, frozen: 3 });
    }

    #[test]
    fn uniform_init_is_seeded() {
        let mk = || {
            let mut s = ParamStore::<f32>::new();
            s.add_uniform("w", &[4, 4], 0.5, &mut ChaCha8Rng::seed_from_u64(1));
            s
        };
        assert_eq!(mk().get(ParamId(0)), mk().get(ParamId(0)));
        assert!(mk().get(ParamId(0)).max_abs() <= 0.5);
    }

    #[test]
    fn set_rejects_shape_change() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", Tensor::zeros(&[2]));
        assert!(s.set(id, Tensor::zeros(&[3])).is_err());
        assert_eq!(s.find("w"), Some(id));
    }
}
