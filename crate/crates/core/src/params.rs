//! Named parameter storage shared by the generator and discriminator.
//!
//! Entries keep their insertion order, which fixes both the initialization
//! draw order and the checkpoint layout, so identical seeds give identical
//! stores byte for byte.

use std::collections::HashMap;

use thiserror::Error;

use crate::autodiff::{RunningStats, Tape, Tensor, TensorId};

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("duplicate entry name {0:?}")]
    DuplicateName(String),
    #[error("no entry named {0:?}")]
    MissingEntry(String),
    #[error("entry {0:?} has the wrong kind")]
    WrongKind(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// A learnable tensor.
    Param(Tensor),
    /// Running batchnorm statistics; persisted but not optimized.
    Stats(RunningStats),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub payload: Payload,
}

/// Ordered, name-indexed parameter and statistics store for one network.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn add_param(&mut self, name: &str, tensor: Tensor) -> Result<(), ParamError> {
        self.add(name, Payload::Param(tensor))
    }

    pub fn add_stats(&mut self, name: &str, stats: RunningStats) -> Result<(), ParamError> {
        self.add(name, Payload::Stats(stats))
    }

    fn add(&mut self, name: &str, payload: Payload) -> Result<(), ParamError> {
        if self.index.contains_key(name) {
            return Err(ParamError::DuplicateName(name.to_string()));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            payload,
        });
        Ok(())
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Learnable tensor by name; panics on a missing or non-param name,
    /// which indicates an internal naming bug rather than a runtime input.
    pub fn param(&self, name: &str) -> &Tensor {
        match self.get(name) {
            Some(Payload::Param(t)) => t,
            _ => panic!("missing parameter {name:?}"),
        }
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Tensor {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name:?}"));
        match &mut self.entries[i].payload {
            Payload::Param(t) => t,
            _ => panic!("entry {name:?} is not a parameter"),
        }
    }

    pub fn stats_mut(&mut self, name: &str) -> &mut RunningStats {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("missing stats {name:?}"));
        match &mut self.entries[i].payload {
            Payload::Stats(s) => s,
            _ => panic!("entry {name:?} is not running stats"),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Payload> {
        self.index.get(name).map(|&i| &self.entries[i].payload)
    }

    /// Names of all learnable tensors, in store order.
    pub fn param_names(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| matches!(e.payload, Payload::Param(_)))
            .map(|e| e.name.as_str())
            .collect()
    }

    /// Total learnable scalar count.
    pub fn param_count(&self) -> usize {
        self.entries
            .iter()
            .filter_map(|e| match &e.payload {
                Payload::Param(t) => Some(t.numel()),
                Payload::Stats(_) => None,
            })
            .sum()
    }

    /// Copies every learnable tensor onto the tape as a leaf.
    pub fn insert_leaves(&self, tape: &mut Tape, requires_grad: bool) -> LeafMap {
        let mut pairs = Vec::new();
        for entry in &self.entries {
            if let Payload::Param(t) = &entry.payload {
                let id = tape.leaf(t.clone(), requires_grad);
                pairs.push((entry.name.clone(), id));
            }
        }
        LeafMap { pairs }
    }
}

/// Name-to-tape-id mapping for one forward pass.
pub struct LeafMap {
    pairs: Vec<(String, TensorId)>,
}

impl LeafMap {
    pub fn get(&self, name: &str) -> TensorId {
        self.pairs
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("no leaf named {name:?}"))
            .1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, TensorId)> {
        self.pairs.iter().map(|(n, id)| (n.as_str(), *id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_insertion_order() {
        let mut store = ParamStore::new();
        store.add_param("b", Tensor::zeros(vec![2])).unwrap();
        store.add_param("a", Tensor::zeros(vec![3])).unwrap();
        store.add_stats("s", RunningStats::new(2)).unwrap();
        let names: Vec<&str> = store.entries().iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, vec!["b", "a", "s"]);
        assert_eq!(store.param_names(), vec!["b", "a"]);
        assert_eq!(store.param_count(), 5);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add_param("w", Tensor::zeros(vec![1])).unwrap();
        assert!(matches!(
            store.add_param("w", Tensor::zeros(vec![1])),
            Err(ParamError::DuplicateName(_))
        ));
    }

    #[test]
    fn leaves_round_trip_values() {
        let mut store = ParamStore::new();
        store
            .add_param("w", Tensor::new(vec![2], vec![1.5, -2.5]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let leaves = store.insert_leaves(&mut tape, true);
        assert_eq!(tape.data(leaves.get("w")), &[1.5, -2.5]);
    }
}
