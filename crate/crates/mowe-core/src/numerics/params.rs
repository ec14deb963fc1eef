//! Named parameter storage and per-step tape sessions.
//!
//! A [`ParamStore`] owns every tensor in the model keyed by a stable
//! dotted name ("enc.base.block0.w"). Iteration order is the name order,
//! which keeps optimizer updates and serialization deterministic.
//!
//! A [`Session`] wraps one forward/backward pass: it binds parameters onto
//! a fresh [`Tape`] on first use (frozen entries become no-grad leaves) and
//! maps gradients back to names afterwards.

use std::collections::BTreeMap;

use crate::error::{MoweError, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub tensor: Tensor,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) {
        self.entries
            .insert(name.to_string(), ParamEntry { tensor, trainable });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry> {
        self.entries
            .get(name)
            .ok_or_else(|| MoweError::UnknownParam(name.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.tensor)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| MoweError::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all entries.
    pub fn num_params(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    /// Scalar count across trainable entries only.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Scalar count over entries whose name starts with `prefix`.
    pub fn num_params_under(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, e)| e.tensor.numel())
            .sum()
    }
}

pub struct Session<'a> {
    store: &'a ParamStore,
    pub tape: Tape,
    bound: BTreeMap<String, Var>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Session {
            store,
            tape: Tape::new(),
            bound: BTreeMap::new(),
        }
    }

    /// Bind a named parameter onto the tape (memoized per session).
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let entry = self.store.get(name)?;
        let v = self
            .tape
            .leaf(entry.tensor.clone(), entry.trainable, Some(name));
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Put a non-parameter tensor (input batch, mask) on the tape.
    pub fn constant(&mut self, t: Tensor, label: &str) -> Var {
        self.tape.leaf(t, false, Some(label))
    }

    /// Clone a parameter's current store value without binding it.
    pub fn store_tensor_clone(&self, name: &str) -> Result<Tensor> {
        Ok(self.store.get(name)?.tensor.clone())
    }

    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.tape.backward(root)
    }

    /// Gradient of the last backward pass for a bound parameter.
    /// `None` when the parameter is frozen or unreached.
    pub fn grad_of(&self, name: &str) -> Option<Tensor> {
        self.bound.get(name).and_then(|&v| self.tape.grad(v))
    }

    /// All trainable gradients by name; parameters bound to the tape but
    /// unreached by backward come back as zeros.
    pub fn grads(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, &v) in &self.bound {
            let entry = match self.store.get(name) {
                Ok(e) => e,
                Err(_) => continue,
            };
            if !entry.trainable {
                continue;
            }
            let g = self
                .tape
                .grad(v)
                .unwrap_or_else(|| Tensor::zeros(entry.tensor.shape().to_vec()));
            out.insert(name.clone(), g);
        }
        out
    }
}
