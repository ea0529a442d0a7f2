use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Object categories, relation predicates and attribute words known to a
/// dataset. Loaded from the dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocabulary {
    pub categories: Vec<String>,
    pub predicates: Vec<String>,
    pub attributes: Vec<String>,
}

impl Vocabulary {
    pub fn category(&self, name: &str) -> Result<usize> {
        lookup(&self.categories, name, "category")
    }

    pub fn predicate(&self, name: &str) -> Result<usize> {
        lookup(&self.predicates, name, "predicate")
    }

    pub fn attribute(&self, name: &str) -> Result<usize> {
        lookup(&self.attributes, name, "attribute")
    }
}

fn lookup(list: &[String], name: &str, kind: &'static str) -> Result<usize> {
    list.iter().position(|s| s == name).ok_or_else(|| Error::Vocabulary {
        kind,
        value: name.to_string(),
    })
}
