use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return invalid(format!("duplicate parameter name `{name}`"));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// A forward pass in progress: a fresh tape plus lazily bound parameters.
pub struct Graph<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    trainable: Vec<bool>,
    trace: Option<Vec<(String, Var)>>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<'s> Graph<'s> {
    /// Every parameter is differentiated.
    pub fn new(store: &'s ParamStore) -> Self {
        Self::with_trainable(store, |_| true)
    }

    /// Only parameters whose name satisfies `trainable` are differentiated.
    pub fn with_trainable(store: &'s ParamStore, trainable: impl Fn(&str) -> bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            trainable: store.names.iter().map(|n| trainable(n)).collect(),
            trace: None,
            dropout_rng: None,
        }
    }

    /// Inference only: nothing is differentiated.
    pub fn frozen(store: &'s ParamStore) -> Self {
        Self::with_trainable(store, |_| false)
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let v = self.tape.leaf(self.store.get(id).clone(), self.trainable[id.0])?;
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    /// Enables dropout (training mode) driven by `rng`.
    pub fn set_dropout_rng(&mut self, rng: ChaCha8Rng) {
        self.dropout_rng = Some(rng);
    }

    /// Dropout in training mode, identity otherwise.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        match self.dropout_rng.as_mut() {
            Some(rng) if rate > 0.0 => self.tape.dropout(x, rate, rng),
            _ => Ok(x),
        }
    }

    /// Starts recording attention weight matrices under their layer names.
    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn record(&mut self, name: String, weights: Var) {
        if let Some(t) = self.trace.as_mut() {
            t.push((name, weights));
        }
    }

    pub fn traced(&self) -> &[(String, Var)] {
        self.trace.as_deref().unwrap_or(&[])
    }

    /// Gradients of every bound, trainable parameter after `tape.backward`.
    /// Unbound or frozen parameters yield `None`.
    pub fn param_grads(&self) -> Vec<Option<Tensor>> {
        self.bound
            .iter()
            .zip(&self.trainable)
            .map(|(v, &t)| match v {
                Some(v) if t => Some(self.tape.grad(*v).unwrap_or_else(|| Tensor::zeros(self.tape.shape(*v)))),
                _ => None,
            })
            .collect()
    }
}
