//! Group-based access to models.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use crate::registry::Registry;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Allow,
    Deny,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownModel(pub String);

/// model name → groups allowed to use it (empty: any authenticated user).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AccessPolicy {
    required: BTreeMap<String, BTreeSet<String>>,
}

impl AccessPolicy {
    pub fn new() -> Self {
        Self::default()
    }

    /// One entry per registered model.
    pub fn from_registry(registry: &Registry) -> Self {
        let mut policy = Self::new();
        for entry in registry.models() {
            policy.set(&entry.spec.name, entry.spec.required_groups.iter().cloned());
        }
        policy
    }

    pub fn set(&mut self, model: &str, groups: impl IntoIterator<Item = String>) {
        self.required.insert(String::from(model), groups.into_iter().collect());
    }

    pub fn required_groups(&self, model: &str) -> Option<&BTreeSet<String>> {
        self.required.get(model)
    }

    pub fn models(&self) -> Vec<&str> {
        self.required.keys().map(String::as_str).collect()
    }
}

/// Allow iff the model needs no group or the principal is in at least one of them.
pub fn authorize<'a, G>(groups: G, model: &str, policy: &AccessPolicy) -> Result<Access, UnknownModel>
where
    G: IntoIterator<Item = &'a str>,
{
    let required = policy.required_groups(model).ok_or_else(|| UnknownModel(String::from(model)))?;
    if required.is_empty() {
        return Ok(Access::Allow);
    }
    let allowed = groups.into_iter().any(|g| required.contains(g));
    Ok(if allowed { Access::Allow } else { Access::Deny })
}
