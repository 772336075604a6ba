//! Name-keyed factories for runtime-selected strategies.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{FlError, Result};

pub type Factory<C, T> = fn(&C) -> Result<Box<T>>;

/// Maps a strategy name to a constructor taking that strategy's config.
pub struct Registry<C, T: ?Sized> {
    kind: &'static str,
    factories: BTreeMap<&'static str, Factory<C, T>>,
}

impl<C, T: ?Sized> Registry<C, T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            factories: BTreeMap::new(),
        }
    }

    /// Adds or replaces the factory for `name`.
    pub fn register(&mut self, name: &'static str, factory: Factory<C, T>) -> &mut Self {
        self.factories.insert(name, factory);
        self
    }

    pub fn build(&self, name: &str, config: &C) -> Result<Box<T>> {
        let factory = self.factories.get(name).ok_or_else(|| {
            FlError::Config(format!(
                "unknown {} `{name}` (known: {})",
                self.kind,
                self.names().join(", ")
            ))
        })?;
        factory(config)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.factories.keys().copied().collect()
    }
}

impl<C, T: ?Sized> fmt::Debug for Registry<C, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("kind", &self.kind)
            .field("names", &self.names())
            .finish()
    }
}
