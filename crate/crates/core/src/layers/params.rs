use std::collections::BTreeSet;

use indexmap::IndexMap;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Parameter,
    /// Persistent statistic such as a batch-norm running mean; never trainable.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub tensor: Tensor<T>,
    kind: EntryKind,
    trainable: bool,
}

impl<T> ParamEntry<T> {
    pub fn kind(&self) -> EntryKind {
        self.kind
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }
}

/// Named parameters and buffers in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T = f32> {
    entries: IndexMap<String, ParamEntry<T>>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { entries: IndexMap::new() }
    }
}

/// Element counts split by role.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub trainable: usize,
    pub frozen: usize,
    pub buffers: usize,
}

impl ParamCounts {
    pub fn total_params(&self) -> usize {
        self.trainable + self.frozen
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_parameter(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        self.insert(name.into(), tensor, EntryKind::Parameter, true)
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        self.insert(name.into(), tensor, EntryKind::Buffer, false)
    }

    /// Inserts an entry with an explicit flag; buffers ignore `trainable`.
    pub fn insert(&mut self, name: String, tensor: Tensor<T>, kind: EntryKind, trainable: bool) -> Result<()> {
        if self.entries.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        let trainable = trainable && kind == EntryKind::Parameter;
        self.entries.insert(name, ParamEntry { tensor, kind, trainable });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|e| &mut e.tensor)
    }

    pub(crate) fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name).ok_or_else(|| Error::Internal(format!("missing parameter `{name}`")))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.trainable)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Sets the trainable flag of every parameter whose name starts with
    /// `prefix` and returns how many entries matched. Buffers match but stay
    /// non-trainable.
    pub fn set_trainable(&mut self, prefix: &str, flag: bool) -> Result<usize> {
        let mut matched = 0;
        for (name, entry) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                matched += 1;
                if entry.kind == EntryKind::Parameter {
                    entry.trainable = flag;
                }
            }
        }
        if matched == 0 {
            let available: BTreeSet<String> = self
                .entries
                .keys()
                .map(|k| match k.find('.') {
                    Some(i) => k[..=i].to_string(),
                    None => k.clone(),
                })
                .collect();
            let available: Vec<String> = available.into_iter().collect();
            return Err(Error::config(format!(
                "no parameter matches prefix `{prefix}`; available prefixes: {}",
                available.join(", ")
            )));
        }
        Ok(matched)
    }

    /// Sets the flag of the single entry `name`; a no-op for buffers.
    pub fn set_entry_trainable(&mut self, name: &str, flag: bool) -> Result<()> {
        let entry = self.entries.get_mut(name).ok_or_else(|| Error::config(format!("no entry named `{name}`")))?;
        if entry.kind == EntryKind::Parameter {
            entry.trainable = flag;
        }
        Ok(())
    }

    pub fn counts(&self) -> ParamCounts {
        let mut c = ParamCounts::default();
        for e in self.entries.values() {
            let n = e.tensor.len();
            match (e.kind, e.trainable) {
                (EntryKind::Buffer, _) => c.buffers += n,
                (EntryKind::Parameter, true) => c.trainable += n,
                (EntryKind::Parameter, false) => c.frozen += n,
            }
        }
        c
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| (k.clone(), ParamEntry { tensor: e.tensor.cast(), kind: e.kind, trainable: e.trainable }))
                .collect(),
        }
    }
}
