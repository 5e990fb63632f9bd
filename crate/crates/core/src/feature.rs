// SPDX-License-Identifier: MIT OR Apache-2.0

//! Directions in residual space used for steering.

use serde::{Deserialize, Serialize};

use crate::linalg;

/// Where a feature direction came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// SAE decoder row; encodes a long-term background factor.
    Background,
    /// Contrastive representation direction; encodes a short-term pressure.
    Pressure,
}

/// A direction in a model's residual stream at a given layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub kind: FeatureKind,
    pub layer: usize,
    /// SAE feature index for background features.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
    #[serde(default)]
    pub explanation: String,
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(kind: FeatureKind, layer: usize, values: Vec<f64>) -> Self {
        Self {
            kind,
            layer,
            index: None,
            explanation: String::new(),
            values,
        }
    }

    pub fn with_index(mut self, index: usize) -> Self {
        self.index = Some(index);
        self
    }

    pub fn with_explanation(mut self, explanation: impl Into<String>) -> Self {
        self.explanation = explanation.into();
        self
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        linalg::norm(&self.values)
    }
}
