// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module in the crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by model access, feature extraction, steering and
/// persistence.
#[derive(Debug, thiserror::Error)]
#[non_exhaustive]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("symbol {symbol:?} at byte {offset} is not in the model vocabulary")]
    UnknownSymbol { symbol: char, offset: usize },

    #[error("token id {0} is outside the vocabulary")]
    UnknownToken(u32),

    #[error("layer {layer} out of range (model has {n_layers} layers)")]
    LayerOutOfRange { layer: usize, n_layers: usize },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("option {option:?} does not map to exactly one token ({n_tokens} tokens)")]
    MultiTokenOption { option: String, n_tokens: usize },

    #[error("feature index {index} out of range (m = {m})")]
    FeatureOutOfRange { index: usize, m: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },

    #[error("degenerate contrast: mean difference norm {norm:e} is below {threshold:e}")]
    ZeroDifference { norm: f64, threshold: f64 },

    #[error("no admissible coefficient: every grid point over-steers or is unstable")]
    NoAdmissibleCoefficient,

    #[error("schema error at {location}: {message}")]
    Schema { location: String, message: String },

    #[error("unsupported schema version {found} in {kind} file (supported: {supported})")]
    SchemaVersion {
        kind: &'static str,
        found: u64,
        supported: u64,
    },

    #[error("direction norm {norm} deviates from 1 by more than {tolerance:e}")]
    NormViolation { norm: f64, tolerance: f64 },

    #[error("{kind} {name:?} not found")]
    Missing { kind: &'static str, name: String },

    #[error("digest mismatch for {path}: manifest has {expected}, file has {actual}")]
    DigestMismatch {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            location: location.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable tag for this error, used in CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyInput(_) => "empty_input",
            Error::UnknownSymbol { .. } => "unknown_symbol",
            Error::UnknownToken(_) => "unknown_token",
            Error::LayerOutOfRange { .. } => "layer_out_of_range",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::MultiTokenOption { .. } => "multi_token_option",
            Error::FeatureOutOfRange { .. } => "feature_out_of_range",
            Error::InvalidConfig(_) => "invalid_config",
            Error::Diverged { .. } => "diverged",
            Error::ZeroDifference { .. } => "zero_difference",
            Error::NoAdmissibleCoefficient => "no_admissible_coefficient",
            Error::Schema { .. } => "schema",
            Error::SchemaVersion { .. } => "schema_version",
            Error::NormViolation { .. } => "norm_violation",
            Error::Missing { .. } => "missing",
            Error::DigestMismatch { .. } => "digest_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
