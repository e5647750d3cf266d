//! Feature schema: the ordered feature vocabulary shared by the joiner, the
//! signal transformer and the analytics queries.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::ValueRange;

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("duplicate feature name {0:?}")]
    DuplicateName(String),
    #[error("schema must declare at least one feature")]
    Empty,
}

/// Where a feature's value originates. `Device`-origin features never
/// appear in server-side records; `Both`-origin features have a server copy
/// that the device may override with its own higher-resolution value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureOrigin {
    Server,
    Device,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDescriptor {
    pub name: String,
    pub origin: FeatureOrigin,
    pub range: ValueRange,
}

/// Ordered, uniquely named feature descriptors; the order fixes the layout
/// of every dense feature vector in the system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    features: Vec<FeatureDescriptor>,
}

impl FeatureSchema {
    pub fn new(features: Vec<FeatureDescriptor>) -> Result<Self, SchemaError> {
        if features.is_empty() {
            return Err(SchemaError::Empty);
        }
        let mut names: Vec<&str> = features.iter().map(|f| f.name.as_str()).collect();
        names.sort_unstable();
        for pair in names.windows(2) {
            if pair[0] == pair[1] {
                return Err(SchemaError::DuplicateName(pair[0].to_string()));
            }
        }
        Ok(Self { features })
    }

    pub fn features(&self) -> &[FeatureDescriptor] {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.features.iter().any(|f| f.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&FeatureDescriptor> {
        self.features.iter().find(|f| f.name == name)
    }
}
