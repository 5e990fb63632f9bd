// SPDX-License-Identifier: MIT OR Apache-2.0

//! Short-term pressure directions from contrastive persona prompts.
//!
//! Each question is asked twice, once behind the negative persona prompt
//! and once behind the positive one. The last-token residuals of the two
//! runs form a matched pair; the direction is the first principal axis of
//! the per-pair differences, oriented along the mean difference.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::feature::{FeatureKind, FeatureVector};
use crate::linalg;
use crate::model::ModelHandle;

pub const DIRECTION_VERSION: u64 = 1;
pub const NORM_TOLERANCE: f64 = 1e-6;
pub const MIN_DIFFERENCE_NORM: f64 = 1e-12;

/// Short-term pressures, in report column order.
pub const PRESSURES: [&str; 7] = [
    "Achievement Striving",
    "Activity",
    "Assertiveness",
    "Competence",
    "Deliberation",
    "Gregariousness",
    "Trust",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastPair {
    pub pressure: String,
    pub negative: String,
    pub positive: String,
}

impl ContrastPair {
    pub fn new(pressure: impl Into<String>, negative: impl Into<String>, positive: impl Into<String>) -> Result<Self> {
        let pair = Self {
            pressure: pressure.into(),
            negative: negative.into(),
            positive: positive.into(),
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<()> {
        if self.negative.trim().is_empty() || self.positive.trim().is_empty() {
            return Err(Error::schema(
                format!("pair {:?}", self.pressure),
                "prompts must be non-empty",
            ));
        }
        if self.negative == self.positive {
            return Err(Error::schema(
                format!("pair {:?}", self.pressure),
                "negative and positive prompts are identical",
            ));
        }
        Ok(())
    }
}

/// Parses a contrast-pair file: one `{pressure, negative, positive}` object
/// or a list of them.
pub fn parse_contrast_pairs(text: &str) -> Result<Vec<ContrastPair>> {
    let root: Value = serde_json::from_str(text)?;
    let items = match root {
        Value::Array(items) => items,
        obj @ Value::Object(_) => vec![obj],
        _ => return Err(Error::schema("$", "expected a pair object or a list of pairs")),
    };
    let mut pairs = Vec::with_capacity(items.len());
    let mut seen = BTreeSet::new();
    for (i, item) in items.into_iter().enumerate() {
        let pair: ContrastPair =
            serde_json::from_value(item).map_err(|e| Error::schema(format!("$[{i}]"), e.to_string()))?;
        pair.validate()
            .map_err(|e| Error::schema(format!("$[{i}]"), e.to_string()))?;
        if !seen.insert(pair.pressure.clone()) {
            return Err(Error::schema(
                format!("$[{i}].pressure"),
                format!("duplicate pressure {:?}", pair.pressure),
            ));
        }
        pairs.push(pair);
    }
    Ok(pairs)
}

pub fn load_contrast_pairs(path: &Path) -> Result<Vec<ContrastPair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_contrast_pairs(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    pub fn sign(self) -> i8 {
        match self {
            Polarity::Negative => -1,
            Polarity::Positive => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stimulus {
    pub polarity: Polarity,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StimulusSet {
    pub pressure: String,
    pub items: Vec<Stimulus>,
}

impl StimulusSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

pub fn stimulus_text(prompt: &str, question: &str) -> String {
    format!("{prompt} {question}")
}

/// Question-major, negative before positive.
pub fn build_contrast_dataset(pair: &ContrastPair, questions: &[String]) -> Result<StimulusSet> {
    pair.validate()?;
    if questions.is_empty() {
        return Err(Error::EmptyInput("question list"));
    }
    let mut items = Vec::with_capacity(2 * questions.len());
    for q in questions {
        items.push(Stimulus {
            polarity: Polarity::Negative,
            text: stimulus_text(&pair.negative, q),
        });
        items.push(Stimulus {
            polarity: Polarity::Positive,
            text: stimulus_text(&pair.positive, q),
        });
    }
    Ok(StimulusSet {
        pressure: pair.pressure.clone(),
        items,
    })
}

/// Residual at the final token of each stimulus, split by polarity and kept
/// in stimulus order so `pos[i]` and `neg[i]` share a question.
pub fn capture_last_token_activations(
    stimuli: &StimulusSet,
    layer: usize,
    model: &ModelHandle,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    model.check_layer(layer)?;
    let layers = BTreeSet::from([layer]);
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for s in &stimuli.items {
        let tokens = model.tokenize(&s.text)?;
        let captures = model.forward_with_capture(&tokens, &layers)?;
        let v = captures[&layer].last(0).to_vec();
        match s.polarity {
            Polarity::Positive => pos.push(v),
            Polarity::Negative => neg.push(v),
        }
    }
    Ok((pos, neg))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionDiagnostics {
    /// Share of the differences' second moment captured by the first
    /// principal axis.
    pub explained_variance: f64,
    /// Cosine between the returned direction and the mean difference.
    pub sign_alignment: f64,
    pub mean_difference_norm: f64,
    pub n_pairs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectionResult {
    pub pressure: Option<String>,
    pub direction: FeatureVector,
    pub diagnostics: DirectionDiagnostics,
}

#[derive(Serialize, Deserialize)]
struct DirectionFile {
    schema_version: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pressure: Option<String>,
    layer: usize,
    direction: Vec<f64>,
    diagnostics: DirectionDiagnostics,
}

impl DirectionResult {
    pub fn layer(&self) -> usize {
        self.direction.layer
    }

    pub fn with_layer(mut self, layer: usize) -> Self {
        self.direction.layer = layer;
        self
    }

    pub fn with_pressure(mut self, pressure: impl Into<String>) -> Self {
        let p = pressure.into();
        self.direction.explanation = p.clone();
        self.pressure = Some(p);
        self
    }

    pub fn check_norm(&self) -> Result<()> {
        let norm = self.direction.norm();
        if !((norm - 1.0).abs() <= NORM_TOLERANCE) {
            return Err(Error::NormViolation {
                norm,
                tolerance: NORM_TOLERANCE,
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = DirectionFile {
            schema_version: DIRECTION_VERSION,
            pressure: self.pressure.clone(),
            layer: self.direction.layer,
            direction: self.direction.values.clone(),
            diagnostics: self.diagnostics,
        };
        let mut s = serde_json::to_string_pretty(&file)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        crate::store::check_schema_version(&value, "direction", DIRECTION_VERSION)?;
        let file: DirectionFile = serde_json::from_value(value)?;
        if !linalg::all_finite(&file.direction) {
            return Err(Error::NonFinite("direction vector"));
        }
        let mut direction = FeatureVector::new(FeatureKind::Pressure, file.layer, file.direction);
        if let Some(p) = &file.pressure {
            direction.explanation = p.clone();
        }
        let result = Self {
            pressure: file.pressure,
            direction,
            diagnostics: file.diagnostics,
        };
        result.check_norm()?;
        Ok(result)
    }
}

fn check_set(name: &'static str, set: &[Vec<f64>], d: usize) -> Result<()> {
    for v in set {
        if v.len() != d {
            return Err(Error::DimensionMismatch {
                context: name,
                expected: d,
                actual: v.len(),
            });
        }
        if !linalg::all_finite(v) {
            return Err(Error::NonFinite(name));
        }
    }
    Ok(())
}

fn mean(set: &[Vec<f64>], d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d];
    for v in set {
        for (a, b) in m.iter_mut().zip(v) {
            *a += b;
        }
    }
    let n = set.len() as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

/// Unit steering direction from matched positive/negative activations.
///
/// The principal axis is taken from the second-moment matrix of the
/// per-pair differences (no centering), so a single pair yields exactly the
/// normalized difference and consistently signed pairs are not cancelled.
/// The layer is left at 0; callers set it with
/// [`DirectionResult::with_layer`].
pub fn direction_extract(pos: &[Vec<f64>], neg: &[Vec<f64>]) -> Result<DirectionResult> {
    if pos.is_empty() {
        return Err(Error::EmptyInput("positive activations"));
    }
    if neg.is_empty() {
        return Err(Error::EmptyInput("negative activations"));
    }
    if pos.len() != neg.len() {
        return Err(Error::DimensionMismatch {
            context: "matched pair count (positive vs negative)",
            expected: pos.len(),
            actual: neg.len(),
        });
    }
    let d = pos[0].len();
    if d == 0 {
        return Err(Error::EmptyInput("activation vector"));
    }
    check_set("positive activations", pos, d)?;
    check_set("negative activations", neg, d)?;

    let delta: Vec<f64> = mean(pos, d)
        .into_iter()
        .zip(mean(neg, d))
        .map(|(p, n)| p - n)
        .collect();
    let delta_norm = linalg::norm(&delta);
    if !(delta_norm >= MIN_DIFFERENCE_NORM) {
        return Err(Error::ZeroDifference {
            norm: delta_norm,
            threshold: MIN_DIFFERENCE_NORM,
        });
    }

    let n = pos.len();
    let diffs = DMatrix::from_fn(n, d, |i, j| pos[i][j] - neg[i][j]);
    let svd = diffs.svd(false, true);
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let (top, sigma_top) = svd
        .singular_values
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, s)| if s > best.1 { (i, s) } else { best });
    let total: f64 = svd.singular_values.iter().map(|s| s * s).sum();
    let mut dir: Vec<f64> = v_t.row(top).iter().copied().collect();
    let norm = linalg::norm(&dir);
    dir.iter_mut().for_each(|x| *x /= norm);
    if linalg::dot(&dir, &delta) < 0.0 {
        dir.iter_mut().for_each(|x| *x = -*x);
    }

    let diagnostics = DirectionDiagnostics {
        explained_variance: if total > 0.0 { sigma_top * sigma_top / total } else { 0.0 },
        sign_alignment: linalg::dot(&dir, &delta) / delta_norm,
        mean_difference_norm: delta_norm,
        n_pairs: n,
    };
    Ok(DirectionResult {
        pressure: None,
        direction: FeatureVector::new(FeatureKind::Pressure, 0, dir),
        diagnostics,
    })
}

/// Builds stimuli, captures and extracts in one go.
pub fn extract_pressure_direction(
    pair: &ContrastPair,
    questions: &[String],
    layer: usize,
    model: &ModelHandle,
) -> Result<DirectionResult> {
    let stimuli = build_contrast_dataset(pair, questions)?;
    let (pos, neg) = capture_last_token_activations(&stimuli, layer, model)?;
    Ok(direction_extract(&pos, &neg)?
        .with_layer(layer)
        .with_pressure(&pair.pressure))
}
