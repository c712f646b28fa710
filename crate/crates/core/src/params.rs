//! Named parameter storage and its binding onto a tape.

use indexmap::IndexMap;

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{MugError, Result};
use crate::tensor::{Real, Tensor};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Insertion-ordered map from unique parameter names to tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    map: IndexMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { map: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.map.contains_key(&name) {
            return Err(MugError::Config(format!("duplicate parameter name {name}")));
        }
        let (idx, _) = self.map.insert_full(name, value);
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.map[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.map[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.map.get_index(id.0).expect("param id").0
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.map.get_index_of(name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.map.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(Tensor::is_finite)
    }
}

/// Per-parameter gradients aligned with a [`ParamStore`]; `None` means the
/// parameter was not reached from the loss.
#[derive(Clone, Debug)]
pub struct ParamGrads<T> {
    pub grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> ParamGrads<T> {
    pub fn zeros_like(n: usize) -> Self {
        Self { grads: vec![None; n] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    /// Adds `other` in parameter order.
    pub fn accumulate(&mut self, other: ParamGrads<T>) {
        for (mine, theirs) in self.grads.iter_mut().zip(other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => {
                        for (a, &b) in m.data_mut().iter_mut().zip(t.data()) {
                            *a += b;
                        }
                    }
                    None => *mine = Some(t),
                }
            }
        }
    }

    pub fn scale(&mut self, c: T) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= c;
            }
        }
    }
}

/// A tape plus lazily bound leaves for the parameters of one store.
pub struct Graph<'p, T> {
    pub tape: Tape<T>,
    params: &'p ParamStore<T>,
    bound: Vec<Option<Var>>,
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    /// Leaf for parameter `id`, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        match self.bound[id.0] {
            Some(v) => v,
            None => {
                let v = self.tape.param(self.params.get(id).clone());
                self.bound[id.0] = Some(v);
                v
            }
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    pub fn param_grads(&self, grads: &mut Gradients<T>) -> ParamGrads<T> {
        ParamGrads {
            grads: self.bound.iter().map(|b| b.and_then(|v| grads.take(v))).collect(),
        }
    }

    /// Backward from `loss`, returning gradients per parameter.
    pub fn backward(&self, loss: Var) -> Result<ParamGrads<T>> {
        let mut g = self.tape.backward(loss)?;
        Ok(self.param_grads(&mut g))
    }
}
