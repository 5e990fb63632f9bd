// SPDX-License-Identifier: MIT OR Apache-2.0

//! Extraction of long-term background (SAE) and short-term pressure
//! (contrastive) features from a decoder-only model's residual stream,
//! activation steering with those features, and multiple-choice personality
//! and safety assessment under steering.
//!
//! The [`model::ToyModel`] backend is a small deterministic transformer that
//! runs in process; anything implementing [`model::LanguageModel`] can take
//! its place.

pub mod assessment;
pub mod background;
pub mod error;
pub mod experiment;
pub mod feature;
pub mod fixtures;
pub mod linalg;
pub mod model;
pub mod pressure;
pub mod sae;
pub mod steering;
pub mod store;
pub mod synthetic;

pub use error::{Error, Result};
pub use feature::{FeatureKind, FeatureVector};
pub use model::{ModelHandle, ToyModel, ToyModelConfig};
pub use sae::SaeModel;
pub use steering::{PositionRule, SteeringHook};
