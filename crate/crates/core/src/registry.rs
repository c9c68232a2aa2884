//! Name-keyed registries of interchangeable strategies.
//!
//! Each pluggable stage (singular-value cutoff rule, vessel enhancement,
//! display colormap) is a trait; implementations are registered under a
//! name and constructed at runtime from a [`StrategySpec`] found in the
//! pipeline configuration.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Result, SrusError};

/// A strategy selection as it appears in configuration files:
/// `{"name": "jerman", "params": {"tau": 0.5}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub params: Value,
}

impl StrategySpec {
    pub fn named(name: &str) -> Self {
        Self {
            name: name.to_string(),
            params: Value::Null,
        }
    }

    pub fn with_params(name: &str, params: Value) -> Self {
        Self {
            name: name.to_string(),
            params,
        }
    }
}

type Factory<T> = Box<dyn Fn(&Value) -> Result<Box<T>> + Send + Sync>;

pub struct Registry<T: ?Sized> {
    kind: &'static str,
    factories: BTreeMap<String, Factory<T>>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            factories: BTreeMap::new(),
        }
    }

    pub fn register<F>(&mut self, name: &str, factory: F) -> &mut Self
    where
        F: Fn(&Value) -> Result<Box<T>> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
        self
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn build(&self, spec: &StrategySpec) -> Result<Box<T>> {
        let factory =
            self.factories
                .get(&spec.name)
                .ok_or_else(|| SrusError::UnknownStrategy {
                    kind: self.kind,
                    name: spec.name.clone(),
                    available: self.names().collect::<Vec<_>>().join(", "),
                })?;
        factory(&spec.params)
    }
}

impl<T: ?Sized> fmt::Debug for Registry<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("kind", &self.kind)
            .field("names", &self.names().collect::<Vec<_>>())
            .finish()
    }
}

/// Deserialize strategy parameters, treating `null` as "all defaults".
pub fn parse_params<P>(kind: &str, params: &Value) -> Result<P>
where
    P: for<'de> Deserialize<'de> + Default,
{
    if params.is_null() {
        return Ok(P::default());
    }
    serde_json::from_value(params.clone())
        .map_err(|e| SrusError::config(format!("{kind} parameters: {e}")))
}
