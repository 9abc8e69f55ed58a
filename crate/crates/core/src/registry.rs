//! Name-keyed registries of interchangeable algorithm variants.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::apcd::{extract_natural, extract_vanilla, NaturalQ, QUpdate, VanillaQ};
use crate::error::{ApcdError, Result};
use crate::lqer::{Lqer, Lqr, Synthesizer};
use crate::model::{ChmmModel, MeasurementSequence};
use crate::policy::ControlPolicy;

pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: BTreeMap<String, Arc<T>>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self { kind, entries: BTreeMap::new() }
    }

    pub fn register(&mut self, name: &str, item: Arc<T>) -> &mut Self {
        self.entries.insert(name.to_string(), item);
        self
    }

    pub fn get(&self, name: &str) -> Result<Arc<T>> {
        self.entries.get(name).cloned().ok_or_else(|| ApcdError::Unknown {
            kind: self.kind,
            name: name.to_string(),
        })
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }
}

/// Turns measurement sequences into a policy.
pub trait Extractor: Send + Sync {
    fn name(&self) -> &'static str;

    fn extract(&self, model: &ChmmModel, sequences: &[MeasurementSequence]) -> Result<Box<dyn ControlPolicy>>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct VanillaExtractor;

#[derive(Debug, Clone, Copy, Default)]
pub struct NaturalExtractor;

impl Extractor for VanillaExtractor {
    fn name(&self) -> &'static str {
        "vanilla"
    }

    fn extract(&self, model: &ChmmModel, sequences: &[MeasurementSequence]) -> Result<Box<dyn ControlPolicy>> {
        Ok(Box::new(extract_vanilla(model, sequences)?))
    }
}

impl Extractor for NaturalExtractor {
    fn name(&self) -> &'static str {
        "natural"
    }

    fn extract(&self, model: &ChmmModel, sequences: &[MeasurementSequence]) -> Result<Box<dyn ControlPolicy>> {
        Ok(Box::new(extract_natural(model, sequences)?))
    }
}

pub fn extractors() -> Registry<dyn Extractor> {
    let mut r: Registry<dyn Extractor> = Registry::new("extraction method");
    r.register("vanilla", Arc::new(VanillaExtractor));
    r.register("natural", Arc::new(NaturalExtractor));
    r
}

pub fn synthesizers() -> Registry<dyn Synthesizer> {
    let mut r: Registry<dyn Synthesizer> = Registry::new("demonstrator");
    r.register("lqer", Arc::new(Lqer));
    r.register("lqr", Arc::new(Lqr));
    r
}

pub fn q_updates() -> Registry<dyn QUpdate> {
    let mut r: Registry<dyn QUpdate> = Registry::new("Q-update rule");
    r.register("vanilla", Arc::new(VanillaQ));
    r.register("natural", Arc::new(NaturalQ));
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookups_by_name() {
        assert_eq!(extractors().names(), vec!["natural", "vanilla"]);
        assert_eq!(extractors().get("vanilla").unwrap().name(), "vanilla");
        assert_eq!(synthesizers().get("lqr").unwrap().name(), "lqr");
        assert_eq!(q_updates().get("natural").unwrap().name(), "natural");
    }

    #[test]
    fn unknown_name_is_an_error() {
        let err = extractors().get("bogus").err().unwrap();
        assert_eq!(err.to_string(), "unknown extraction method 'bogus'");
    }
}
