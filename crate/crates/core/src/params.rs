//! Named parameter tensors with frozen/trainable flags.

use indexmap::IndexMap;

use crate::compute::{Tape, Tensor, Var};
use crate::error::{contract, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub tensor: Tensor,
    pub frozen: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, ParamEntry>,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Incremental 64-bit FNV-1a.
#[derive(Debug, Clone, Copy)]
pub struct Fnv1a(u64);

impl Default for Fnv1a {
    fn default() -> Self {
        Fnv1a(FNV_OFFSET)
    }
}

impl Fnv1a {
    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, frozen: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(contract(format!("duplicate parameter name {name:?}")));
        }
        self.entries
            .insert(name.to_string(), ParamEntry { tensor, frozen });
        Ok(())
    }

    /// Add every entry of `other`; names must not collide.
    pub fn extend(&mut self, other: ParamStore) -> Result<()> {
        for (name, e) in other.entries {
            self.insert(&name, e.tensor, e.frozen)?;
        }
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

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::MissingArtifact(format!("parameter {name:?} not in store")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Register an entry on a tape; frozen entries are untracked.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, name: &str) -> Result<Var> {
        let e = self
            .entries
            .get(name)
            .ok_or_else(|| Error::MissingArtifact(format!("parameter {name:?} not in store")))?;
        Ok(tape.param(name, &e.tensor, !e.frozen))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.iter()
            .filter(|(_, e)| !e.frozen)
            .map(|(n, _)| n.to_string())
            .collect()
    }

    /// Replace the value of a trainable parameter, keeping its shape.
    pub fn set_trainable(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| contract(format!("unknown parameter {name:?}")))?;
        if e.frozen {
            return Err(contract(format!(
                "attempt to overwrite frozen parameter {name:?}"
            )));
        }
        if e.tensor.shape() != tensor.shape() {
            return Err(contract(format!(
                "parameter {name:?}: shape {:?} cannot take {:?}",
                e.tensor.shape(),
                tensor.shape()
            )));
        }
        e.tensor = tensor;
        Ok(())
    }

    pub fn snapshot_trainables(&self) -> IndexMap<String, Tensor> {
        self.iter()
            .filter(|(_, e)| !e.frozen)
            .map(|(n, e)| (n.to_string(), e.tensor.clone()))
            .collect()
    }

    pub fn restore_trainables(&mut self, snap: &IndexMap<String, Tensor>) -> Result<()> {
        for (name, t) in snap {
            self.set_trainable(name, t.clone())?;
        }
        Ok(())
    }

    /// FNV-1a over names, shapes and exact 64-bit values of frozen entries.
    pub fn frozen_digest(&self) -> u64 {
        self.digest_where(|e| e.frozen)
    }

    /// Same digest restricted to entries whose name starts with `prefix`.
    pub fn digest_prefix(&self, prefix: &str) -> u64 {
        let mut h = Fnv1a::default();
        for (name, e) in self.iter().filter(|(n, _)| n.starts_with(prefix)) {
            hash_entry(&mut h, name, e);
        }
        h.finish()
    }

    fn digest_where(&self, keep: impl Fn(&ParamEntry) -> bool) -> u64 {
        let mut h = Fnv1a::default();
        for (name, e) in self.iter().filter(|(_, e)| keep(e)) {
            hash_entry(&mut h, name, e);
        }
        h.finish()
    }
}

fn hash_entry(h: &mut Fnv1a, name: &str, e: &ParamEntry) {
    h.update(name.as_bytes());
    for d in e.tensor.shape() {
        h.update(&(*d as u64).to_le_bytes());
    }
    for v in e.tensor.data() {
        h.update(&v.to_bits().to_le_bytes());
    }
}
