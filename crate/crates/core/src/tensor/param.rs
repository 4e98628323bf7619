use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{Shape4, Tensor4};
use crate::error::{Error, Result};

/// Which optimizer owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Network weights `w`.
    Weight,
    /// Intra-cell operation logits.
    Alpha,
    /// Hyper-cell depth logits.
    Beta,
    /// Aggregation-cell operation logits.
    AggAlpha,
    /// Non-trainable state such as running normalization statistics.
    Buffer,
}

impl ParamGroup {
    pub fn is_architecture(self) -> bool {
        matches!(self, ParamGroup::Alpha | ParamGroup::Beta | ParamGroup::AggAlpha)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    group: ParamGroup,
    tensor: Tensor4,
}

/// Named, insertion-ordered parameter map.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: IndexMap<String, Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor; names must be unique.
    pub fn register(&mut self, name: impl Into<String>, group: ParamGroup, mut tensor: Tensor4) -> Result<ParamId> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::invalid("ParamStore::register", format!("duplicate id `{name}`")));
        }
        tensor.requires_grad = group != ParamGroup::Buffer;
        let (idx, _) = self.entries.insert_full(name, Entry { group, tensor });
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).expect("param id").0
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn get(&self, id: ParamId) -> &Tensor4 {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor4 {
        &mut self.entries[id.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor4> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: ParamGroup) -> impl Iterator<Item = ParamId> + '_ {
        self.entries
            .values()
            .enumerate()
            .filter(move |(_, e)| e.group == group)
            .map(|(i, _)| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ParamGroup, &Tensor4)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), e.group, &e.tensor))
    }

    /// Number of scalar values in a group.
    pub fn count(&self, group: ParamGroup) -> usize {
        self.entries
            .values()
            .filter(|e| e.group == group)
            .map(|e| e.tensor.shape().numel())
            .sum()
    }

    pub fn clear_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.tensor.clear_grad();
        }
    }

    /// Copies values for every name present in both stores with equal shape.
    /// Returns the number of tensors copied.
    pub fn copy_matching(&mut self, source: &ParamStore) -> Result<usize> {
        let mut copied = 0;
        for (name, e) in self.entries.iter_mut() {
            if let Some(src) = source.entries.get(name) {
                if src.tensor.shape() != e.tensor.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "ParamStore::copy_matching",
                        lhs: e.tensor.shape(),
                        rhs: src.tensor.shape(),
                    });
                }
                e.tensor.data_mut().copy_from_slice(src.tensor.data());
                copied += 1;
            }
        }
        Ok(copied)
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|e| e.tensor.is_finite())
    }

    pub fn shape(&self, id: ParamId) -> Shape4 {
        self.get(id).shape()
    }
}
