//! Profile registry: the naming service behind semantic addressing.
//!
//! Each node keeps its own registry view. A profile binds either to a
//! local component address or to the node that currently hosts it; a
//! migration rebind simply overwrites the binding, and the new binding is
//! pushed to peer nodes by the lifecycle machinery.

use crate::kernel::ComponentAddress;
use indexmap::IndexMap;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Binding {
    Local(ComponentAddress),
    Remote { node_id: String },
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RegistryError {
    #[error("profile {0:?} already has a live binding")]
    Duplicate(String),
    #[error("profile {0:?} not found")]
    NotFound(String),
}

#[derive(Debug, Default)]
pub struct ProfileRegistry {
    entries: IndexMap<String, Binding>,
}

impl ProfileRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a fresh binding; refuses to overwrite a live one.
    pub fn register(&mut self, profile: &str, binding: Binding) -> Result<(), RegistryError> {
        if self.entries.contains_key(profile) {
            return Err(RegistryError::Duplicate(profile.to_string()));
        }
        self.entries.insert(profile.to_string(), binding);
        Ok(())
    }

    /// Replaces the binding for a profile (migration rebind); inserts if
    /// the profile was unknown, so late-joining views converge.
    pub fn rebind(&mut self, profile: &str, binding: Binding) {
        self.entries.insert(profile.to_string(), binding);
    }

    pub fn resolve(&self, profile: &str) -> Result<&Binding, RegistryError> {
        self.entries.get(profile).ok_or_else(|| RegistryError::NotFound(profile.to_string()))
    }

    pub fn remove(&mut self, profile: &str) -> Option<Binding> {
        self.entries.shift_remove(profile)
    }

    /// Removes every profile bound to the given local address.
    pub fn remove_address(&mut self, addr: &ComponentAddress) -> Vec<String> {
        let gone: Vec<String> = self
            .entries
            .iter()
            .filter(|(_, b)| matches!(b, Binding::Local(a) if a == addr))
            .map(|(p, _)| p.clone())
            .collect();
        for p in &gone {
            self.entries.shift_remove(p);
        }
        gone
    }

    pub fn profiles(&self) -> impl Iterator<Item = (&String, &Binding)> {
        self.entries.iter()
    }
}
