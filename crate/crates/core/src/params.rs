//! Central parameter storage shared by all layers.
//!
//! Layers register tensors at construction time and keep only [`ParamId`]
//! handles, so optimizer state, checkpoints, and per-block parameter counts
//! all walk one flat, deterministically ordered list. Non-trainable buffers
//! (batch norm running statistics) live in the same store but are skipped by
//! the optimizer.

use ndarray::Array2;

use crate::autodiff::{NodeId, Tape};
use crate::scalar::Scalar;

/// Handle to a tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry<S: Scalar> {
    pub name: String,
    pub value: Array2<S>,
    pub trainable: bool,
}

/// Flat registry of named tensors in registration order.
#[derive(Debug, Clone)]
pub struct ParamStore<S: Scalar> {
    entries: Vec<ParamEntry<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Array2<S>) -> ParamId {
        self.insert(name.into(), value, true)
    }

    /// Registers a non-trainable buffer (running statistics and the like).
    pub fn register_buffer(&mut self, name: impl Into<String>, value: Array2<S>) -> ParamId {
        self.insert(name.into(), value, false)
    }

    fn insert(&mut self, name: String, value: Array2<S>, trainable: bool) -> ParamId {
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Array2<S> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<S> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<S>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Number of trainable scalars whose name starts with `prefix`. An empty
    /// prefix counts the whole model.
    pub fn count_trainable(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable && e.name.starts_with(prefix))
            .map(|e| e.value.len())
            .sum()
    }
}

/// Per-tape memo of parameter bindings. Binding the same parameter twice
/// within one tape returns the same node, so shared weights accumulate
/// gradients instead of splitting them across copies.
pub struct Binder {
    slots: Vec<Option<NodeId>>,
}

impl Binder {
    pub fn new<S: Scalar>(store: &ParamStore<S>) -> Self {
        Self {
            slots: vec![None; store.len()],
        }
    }

    /// Binds a parameter onto the tape: trainable tensors become leaves,
    /// buffers become constants.
    pub fn bind<S: Scalar>(
        &mut self,
        store: &ParamStore<S>,
        tape: &mut Tape<S>,
        id: ParamId,
    ) -> NodeId {
        if let Some(node) = self.slots[id.0] {
            return node;
        }
        let value = store.value(id).clone();
        let node = if store.is_trainable(id) {
            tape.leaf(value)
        } else {
            tape.constant(value)
        };
        self.slots[id.0] = Some(node);
        node
    }

    /// All (parameter, node) pairs bound on this tape, in store order.
    pub fn bound(&self) -> impl Iterator<Item = (ParamId, NodeId)> + '_ {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, slot)| slot.map(|n| (ParamId(i), n)))
    }
}
