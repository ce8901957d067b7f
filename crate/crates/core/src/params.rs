//! Named parameter registry shared by every model component.
//!
//! Each parameter is registered exactly once with a stable name, a group
//! tag and a trainable flag. A forward pass binds the whole registry onto a
//! fresh graph; components address their parameters through [`ParamId`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, TensorId};

/// Index into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Which subsystem a parameter belongs to. Used for the encoder
/// trainable-fraction accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    TextEncoder,
    ImageEncoder,
    Fusion,
    Decoder,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    pub trainable: bool,
}

/// Exhaustive, insertion-ordered registry of model parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        value: Tensor,
        trainable: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name:?}")));
        }
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            group,
            value,
            trainable,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Iterates entries in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Leafs every parameter onto `g`; index i of the result corresponds to
    /// the i-th registry entry.
    pub fn bind_all(&self, g: &mut Graph) -> Vec<TensorId> {
        self.entries
            .iter()
            .map(|e| g.leaf(e.value.clone(), e.trainable))
            .collect()
    }

    /// Total scalar count, optionally restricted to trainable entries.
    pub fn scalar_count(&self, trainable_only: bool) -> usize {
        self.entries
            .iter()
            .filter(|e| !trainable_only || e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }
}

/// Per-forward-pass context: the graph plus the bound parameter ids.
pub struct Fwd<'a> {
    pub graph: &'a mut Graph,
    bound: &'a [TensorId],
}

impl<'a> Fwd<'a> {
    pub fn new(graph: &'a mut Graph, bound: &'a [TensorId]) -> Self {
        Fwd { graph, bound }
    }

    /// Graph node holding the given parameter.
    pub fn p(&self, id: ParamId) -> TensorId {
        self.bound[id.0]
    }
}
