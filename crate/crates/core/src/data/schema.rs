use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::sample::Sample;
use crate::error::{Error, Result};

/// One categorical field and its value dictionary. The last index
/// (`cardinality() - 1`) is reserved for values never seen while building.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Field {
    pub name: String,
    pub values: Vec<String>,
    #[serde(skip)]
    lookup: HashMap<String, usize>,
}

impl Field {
    fn new(name: String, values: Vec<String>) -> Self {
        let lookup = values
            .iter()
            .enumerate()
            .map(|(i, v)| (v.clone(), i))
            .collect();
        Field {
            name,
            values,
            lookup,
        }
    }

    pub fn cardinality(&self) -> usize {
        self.values.len() + 1
    }

    pub fn oov_index(&self) -> usize {
        self.values.len()
    }

    pub fn index_of(&self, value: &str) -> usize {
        self.lookup
            .get(value)
            .copied()
            .unwrap_or_else(|| self.oov_index())
    }
}

/// Ordered categorical fields with per-field dictionaries.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSchema {
    fields: Vec<Field>,
}

/// Dense per-field category indices of one sample.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct IdFeatures {
    pub indices: Vec<usize>,
}

impl FieldSchema {
    /// Builds dictionaries from `samples` (the training split). Values are
    /// indexed in order of first appearance.
    pub fn build(names: &[String], samples: &[Sample]) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::invalid("schema needs at least one field"));
        }
        let mut seen = std::collections::HashSet::new();
        for n in names {
            if !seen.insert(n) {
                return Err(Error::invalid(format!("duplicate field name `{n}`")));
            }
        }
        let mut fields = Vec::with_capacity(names.len());
        for (j, name) in names.iter().enumerate() {
            let mut values = Vec::new();
            let mut index = HashMap::new();
            for s in samples {
                let v = s.values.get(j).ok_or_else(|| {
                    Error::invalid(format!("sample has {} values, schema {}", s.values.len(), names.len()))
                })?;
                if !index.contains_key(v) {
                    index.insert(v.clone(), values.len());
                    values.push(v.clone());
                }
            }
            fields.push(Field::new(name.clone(), values));
        }
        Ok(FieldSchema { fields })
    }

    pub fn fields(&self) -> &[Field] {
        &self.fields
    }

    pub fn num_fields(&self) -> usize {
        self.fields.len()
    }

    pub fn field_names(&self) -> Vec<String> {
        self.fields.iter().map(|f| f.name.clone()).collect()
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.fields.iter().map(Field::cardinality).collect()
    }

    /// Σ cardinalities, OOV slots included.
    pub fn total_features(&self) -> usize {
        self.cardinalities().iter().sum()
    }

    /// Per-field index lookup; unseen values map to the field's OOV index.
    pub fn encode_ids(&self, sample: &Sample) -> IdFeatures {
        IdFeatures {
            indices: self
                .fields
                .iter()
                .zip(&sample.values)
                .map(|(f, v)| f.index_of(v))
                .collect(),
        }
    }

    /// Inverse of [`encode_ids`](Self::encode_ids); `None` for OOV slots.
    pub fn decode_ids(&self, ids: &IdFeatures) -> Vec<Option<String>> {
        self.fields
            .iter()
            .zip(&ids.indices)
            .map(|(f, &i)| f.values.get(i).cloned())
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            fields: Vec<RawField>,
        }
        #[derive(Deserialize)]
        struct RawField {
            name: String,
            values: Vec<String>,
        }
        let raw: Raw = serde_json::from_str(text)?;
        Ok(FieldSchema {
            fields: raw
                .fields
                .into_iter()
                .map(|f| Field::new(f.name, f.values))
                .collect(),
        })
    }
}
