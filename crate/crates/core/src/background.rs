// SPDX-License-Identifier: MIT OR Apache-2.0

//! Long-term background features: SAE features that fire on descriptor
//! phrases of one factor category, stay silent on the contrasting
//! categories, and stay silent on every other factor's descriptors.
//!
//! Phrase activations are pooled by taking the max over token positions of
//! each phrase's SAE encoding, then averaging over phrases.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::ModelHandle;
use crate::sae::{SaeManifest, SaeModel};

pub const REGISTRY_VERSION: u64 = 1;

/// One background factor and its descriptor phrases per category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub factor: String,
    pub categories: IndexMap<String, Vec<String>>,
}

impl FactorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(Error::schema(
                format!("$.{:?}", self.factor),
                "factor has no categories",
            ));
        }
        for (name, phrases) in &self.categories {
            if phrases.is_empty() || phrases.iter().any(|p| p.trim().is_empty()) {
                return Err(Error::schema(
                    format!("$.{:?}.{:?}", self.factor, name),
                    "category needs at least one non-empty phrase",
                ));
            }
        }
        Ok(())
    }

    /// Every phrase of every category, in file order.
    pub fn all_phrases(&self) -> Vec<String> {
        self.categories.values().flatten().cloned().collect()
    }
}

/// Splits a multi-line descriptor block into trimmed, non-empty phrases.
fn split_block(block: &str) -> Vec<String> {
    block
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

fn phrases_from(value: &Value, location: &str) -> Result<Vec<String>> {
    match value {
        Value::String(block) => Ok(split_block(block)),
        Value::Array(items) => {
            let mut out = Vec::new();
            for (i, item) in items.iter().enumerate() {
                let s = item
                    .as_str()
                    .ok_or_else(|| Error::schema(format!("{location}[{i}]"), "expected a string"))?;
                out.extend(split_block(s));
            }
            Ok(out)
        }
        _ => Err(Error::schema(location, "expected a phrase block or list of phrases")),
    }
}

/// Parses a factor file.
///
/// Two shapes are accepted per factor:
///
/// * a list of multi-line blocks, one block per category (categories are
///   named `category-0`, `category-1`, …);
/// * an object `category → block` (or `category → [phrases]`).
pub fn parse_factor_specs(text: &str) -> Result<Vec<FactorSpec>> {
    let root: Value = serde_json::from_str(text)?;
    let factors = root
        .as_object()
        .ok_or_else(|| Error::schema("$", "expected an object of factors"))?;
    let mut specs = Vec::with_capacity(factors.len());
    for (factor, body) in factors {
        let loc = format!("$.{factor:?}");
        let mut categories = IndexMap::new();
        match body {
            Value::Array(blocks) => {
                for (i, block) in blocks.iter().enumerate() {
                    let phrases = phrases_from(block, &format!("{loc}[{i}]"))?;
                    categories.insert(format!("category-{i}"), phrases);
                }
            }
            Value::Object(named) => {
                for (name, block) in named {
                    let phrases = phrases_from(block, &format!("{loc}.{name:?}"))?;
                    categories.insert(name.clone(), phrases);
                }
            }
            _ => return Err(Error::schema(loc, "expected a list or object of categories")),
        }
        let spec = FactorSpec {
            factor: factor.clone(),
            categories,
        };
        spec.validate()?;
        specs.push(spec);
    }
    Ok(specs)
}

/// Caches the pooled SAE encoding of each phrase.
pub struct PhraseEncoder<'a> {
    model: &'a ModelHandle,
    sae: &'a SaeModel,
    cache: HashMap<String, Vec<f64>>,
}

impl<'a> PhraseEncoder<'a> {
    pub fn new(model: &'a ModelHandle, sae: &'a SaeModel) -> Result<Self> {
        model.check_layer(sae.layer())?;
        if model.d_model() != sae.d() {
            return Err(Error::DimensionMismatch {
                context: "SAE input dimension vs d_model",
                expected: model.d_model(),
                actual: sae.d(),
            });
        }
        Ok(Self {
            model,
            sae,
            cache: HashMap::new(),
        })
    }

    pub fn sae(&self) -> &SaeModel {
        self.sae
    }

    /// Max over positions of the SAE encoding of `phrase` at the SAE's layer.
    pub fn pooled(&mut self, phrase: &str) -> Result<&[f64]> {
        if !self.cache.contains_key(phrase) {
            let tokens = self.model.tokenize(phrase)?;
            let layer = self.sae.layer();
            let captures = self
                .model
                .forward_with_capture(&tokens, &BTreeSet::from([layer]))?;
            let capture = &captures[&layer];
            let mut pooled = vec![0.0f64; self.sae.m()];
            for t in 0..tokens.len() {
                let code = self.sae.encode(capture.at(0, t))?;
                for (p, a) in pooled.iter_mut().zip(code) {
                    *p = p.max(a);
                }
            }
            self.cache.insert(phrase.to_string(), pooled);
        }
        Ok(&self.cache[phrase])
    }

    /// Mean of pooled encodings over `phrases`.
    pub fn profile(&mut self, phrases: &[String]) -> Result<Vec<f64>> {
        if phrases.is_empty() {
            return Err(Error::EmptyInput("phrase list"));
        }
        let mut sum = vec![0.0; self.sae.m()];
        for phrase in phrases {
            for (s, p) in sum.iter_mut().zip(self.pooled(phrase)?) {
                *s += p;
            }
        }
        let n = phrases.len() as f64;
        Ok(sum.into_iter().map(|s| s / n).collect())
    }
}

/// Mean (over phrases) of max-pooled (over positions) SAE activations.
pub fn activation_profile(phrases: &[String], sae: &SaeModel, model: &ModelHandle) -> Result<Vec<f64>> {
    PhraseEncoder::new(model, sae)?.profile(phrases)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchThresholds {
    /// Minimum profile on the home category.
    pub tau_on: f64,
    /// Maximum profile tolerated on contrast / other-factor phrases.
    pub tau_off: f64,
}

impl Default for SearchThresholds {
    fn default() -> Self {
        Self {
            tau_on: 0.1,
            tau_off: 1e-6,
        }
    }
}

impl SearchThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_off >= 0.0 && self.tau_on > self.tau_off) {
            return Err(Error::InvalidConfig(format!(
                "thresholds need tau_on > tau_off >= 0 (got {} / {})",
                self.tau_on, self.tau_off
            )));
        }
        Ok(())
    }
}

/// Ranks features active on `pos` and silent on `neg`, given precomputed
/// profiles. Ties in score go to the lower index.
pub fn rank_contrastive(pos: &[f64], neg: &[f64], thresholds: SearchThresholds, k: usize) -> Vec<usize> {
    let mut hits: Vec<(usize, f64)> = pos
        .iter()
        .zip(neg)
        .enumerate()
        .filter(|(_, (&p, &n))| p >= thresholds.tau_on && n <= thresholds.tau_off)
        .map(|(i, (p, n))| (i, p - n))
        .collect();
    hits.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    hits.into_iter().take(k).map(|(i, _)| i).collect()
}

/// Top-`k` SAE features highly active on `pos` phrases and inactive on
/// `neg` phrases.
pub fn contrastive_feature_search(
    pos: &[String],
    neg: &[String],
    sae: &SaeModel,
    model: &ModelHandle,
    thresholds: SearchThresholds,
    k: usize,
) -> Result<Vec<usize>> {
    thresholds.validate()?;
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let mut enc = PhraseEncoder::new(model, sae)?;
    let pos_profile = enc.profile(pos)?;
    let neg_profile = enc.profile(neg)?;
    Ok(rank_contrastive(&pos_profile, &neg_profile, thresholds, k))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonosemanticityReport {
    pub pass: bool,
    /// Other factors on which the feature exceeded `tau_off`, with the
    /// offending mean activation.
    pub violators: Vec<(String, f64)>,
}

fn check_monosemantic(
    enc: &mut PhraseEncoder<'_>,
    feature: usize,
    home_factor: &str,
    all_specs: &[FactorSpec],
    tau_off: f64,
) -> Result<MonosemanticityReport> {
    if feature >= enc.sae().m() {
        return Err(Error::FeatureOutOfRange {
            index: feature,
            m: enc.sae().m(),
        });
    }
    let mut violators = Vec::new();
    for spec in all_specs.iter().filter(|s| s.factor != home_factor) {
        let profile = enc.profile(&spec.all_phrases())?;
        if profile[feature] > tau_off {
            violators.push((spec.factor.clone(), profile[feature]));
        }
    }
    Ok(MonosemanticityReport {
        pass: violators.is_empty(),
        violators,
    })
}

/// Passes iff `feature` stays at or below `tau_off` on every factor other
/// than `home_factor`.
pub fn monosemanticity_check(
    feature: usize,
    home_factor: &str,
    all_specs: &[FactorSpec],
    sae: &SaeModel,
    model: &ModelHandle,
    tau_off: f64,
) -> Result<MonosemanticityReport> {
    let mut enc = PhraseEncoder::new(model, sae)?;
    check_monosemantic(&mut enc, feature, home_factor, all_specs, tau_off)
}

/// Produces the human-readable key a registry stores for a feature.
pub trait Explainer {
    fn explain(&self, factor: &str, category: &str, feature: usize) -> String;
}

/// Offline explainer emitting `feature-<idx>`.
#[derive(Debug, Clone, Copy, Default)]
pub struct PlaceholderExplainer;

impl Explainer for PlaceholderExplainer {
    fn explain(&self, _factor: &str, _category: &str, feature: usize) -> String {
        format!("feature-{feature}")
    }
}

/// factor → category → explanation → feature index, plus provenance.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FactorRegistry {
    pub sae_id: Option<String>,
    pub layer: Option<usize>,
    pub factors: IndexMap<String, IndexMap<String, IndexMap<String, usize>>>,
}

fn pretty(value: &impl Serialize) -> Result<String> {
    let mut buf = Vec::new();
    let fmt = serde_json::ser::PrettyFormatter::with_indent(b"    ");
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, fmt);
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json emits utf-8"))
}

#[derive(Serialize)]
struct RegistryEnvelope<'a> {
    schema_version: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    sae_id: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    layer: Option<usize>,
    factors: &'a IndexMap<String, IndexMap<String, IndexMap<String, usize>>>,
}

impl FactorRegistry {
    /// Number of (explanation, index) leaves.
    pub fn leaf_count(&self) -> usize {
        self.factors.values().flat_map(|c| c.values()).map(|e| e.len()).sum()
    }

    pub fn indices(&self) -> BTreeSet<usize> {
        self.factors
            .values()
            .flat_map(|c| c.values())
            .flat_map(|e| e.values().copied())
            .collect()
    }

    pub fn category(&self, factor: &str, category: &str) -> Option<&IndexMap<String, usize>> {
        self.factors.get(factor)?.get(category)
    }

    /// Bare `factor → category → {explanation: index}` JSON, 4-space indent.
    pub fn to_snippet_json(&self) -> Result<String> {
        pretty(&self.factors)
    }

    /// Versioned envelope with provenance around the bare factor map.
    pub fn to_json(&self) -> Result<String> {
        pretty(&RegistryEnvelope {
            schema_version: REGISTRY_VERSION,
            sae_id: self.sae_id.as_deref(),
            layer: self.layer,
            factors: &self.factors,
        })
    }

    /// Parses either the versioned envelope or a bare factor map.
    pub fn from_json(text: &str) -> Result<Self> {
        let root: Value = serde_json::from_str(text)?;
        let obj = root
            .as_object()
            .ok_or_else(|| Error::schema("$", "expected an object"))?;
        if obj.contains_key("schema_version") {
            crate::store::check_schema_version(&root, "registry", REGISTRY_VERSION)?;
            let sae_id = match obj.get("sae_id") {
                None | Some(Value::Null) => None,
                Some(Value::String(s)) => Some(s.clone()),
                Some(_) => return Err(Error::schema("$.sae_id", "expected a string")),
            };
            let layer = match obj.get("layer") {
                None | Some(Value::Null) => None,
                Some(v) => Some(
                    v.as_u64()
                        .ok_or_else(|| Error::schema("$.layer", "expected a non-negative integer"))?
                        as usize,
                ),
            };
            let factors = obj
                .get("factors")
                .ok_or_else(|| Error::schema("$.factors", "missing"))?;
            Ok(Self {
                sae_id,
                layer,
                factors: parse_factor_map(factors, "$.factors")?,
            })
        } else {
            Ok(Self {
                sae_id: None,
                layer: None,
                factors: parse_factor_map(&root, "$")?,
            })
        }
    }

    /// Checks indices (and layer, when both sides know it) against an SAE.
    pub fn validate_against(&self, sae: &SaeManifest) -> Result<()> {
        if let Some(layer) = self.layer {
            if layer != sae.layer {
                return Err(Error::schema(
                    "$.layer",
                    format!("registry layer {layer} does not match SAE layer {}", sae.layer),
                ));
            }
        }
        if let Some(id) = &self.sae_id {
            if id != &sae.sae_id {
                log::warn!("registry was built with SAE {id:?}, validating against {:?}", sae.sae_id);
            }
        }
        for (factor, cats) in &self.factors {
            for (cat, entries) in cats {
                for (explanation, &idx) in entries {
                    if idx >= sae.m {
                        return Err(Error::schema(
                            format!("$.factors.{factor:?}.{cat:?}.{explanation:?}"),
                            format!("feature index {idx} exceeds SAE feature count {}", sae.m),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

fn parse_factor_map(
    value: &Value,
    loc: &str,
) -> Result<IndexMap<String, IndexMap<String, IndexMap<String, usize>>>> {
    let factors = value
        .as_object()
        .ok_or_else(|| Error::schema(loc, "expected an object of factors"))?;
    let mut out = IndexMap::new();
    for (factor, cats) in factors {
        let floc = format!("{loc}.{factor:?}");
        let cats = cats
            .as_object()
            .ok_or_else(|| Error::schema(&floc, "expected an object of categories"))?;
        let mut cat_map = IndexMap::new();
        for (cat, entries) in cats {
            let cloc = format!("{floc}.{cat:?}");
            let entries = entries
                .as_object()
                .ok_or_else(|| Error::schema(&cloc, "expected an object of explanation: index"))?;
            let mut entry_map = IndexMap::new();
            for (explanation, idx) in entries {
                let idx = idx.as_u64().ok_or_else(|| {
                    Error::schema(format!("{cloc}.{explanation:?}"), "expected a non-negative integer index")
                })?;
                entry_map.insert(explanation.clone(), idx as usize);
            }
            cat_map.insert(cat.clone(), entry_map);
        }
        out.insert(factor.clone(), cat_map);
    }
    Ok(out)
}

/// Options for [`build_factor_registry`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistryBuildConfig {
    pub thresholds: SearchThresholds,
    /// Features kept per category.
    pub k: usize,
}

impl Default for RegistryBuildConfig {
    fn default() -> Self {
        Self {
            thresholds: SearchThresholds::default(),
            k: 2,
        }
    }
}

/// Runs contrastive search + monosemanticity filtering for every category
/// of every factor. Categories with no surviving feature are kept as empty
/// objects and reported through `log::warn!`.
pub fn build_factor_registry(
    specs: &[FactorSpec],
    sae: &SaeModel,
    model: &ModelHandle,
    config: &RegistryBuildConfig,
    explainer: &dyn Explainer,
) -> Result<FactorRegistry> {
    config.thresholds.validate()?;
    if config.k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    for spec in specs {
        spec.validate()?;
    }
    let mut enc = PhraseEncoder::new(model, sae)?;
    let tau = config.thresholds;
    let mut factors = IndexMap::new();
    for spec in specs {
        let mut cats = IndexMap::new();
        for (category, phrases) in &spec.categories {
            let pos = enc.profile(phrases)?;
            let contrast: Vec<String> = spec
                .categories
                .iter()
                .filter(|(name, _)| *name != category)
                .flat_map(|(_, p)| p.iter().cloned())
                .collect();
            // single-category factors rely on the cross-factor check alone
            let neg = if contrast.is_empty() {
                vec![0.0; sae.m()]
            } else {
                enc.profile(&contrast)?
            };
            // rank everything that passes the contrast, then filter
            let ranked = rank_contrastive(&pos, &neg, tau, sae.m());
            let mut kept = IndexMap::new();
            for idx in ranked {
                if kept.len() == config.k {
                    break;
                }
                if check_monosemantic(&mut enc, idx, &spec.factor, specs, tau.tau_off)?.pass {
                    kept.insert(explainer.explain(&spec.factor, category, idx), idx);
                }
            }
            if kept.is_empty() {
                log::warn!("no monosemantic feature found for {}/{}", spec.factor, category);
            }
            cats.insert(category.clone(), kept);
        }
        factors.insert(spec.factor.clone(), cats);
    }
    Ok(FactorRegistry {
        sae_id: Some(sae.id().to_string()),
        layer: Some(sae.layer()),
        factors,
    })
}

/// Human-readable summary, one line per leaf.
pub fn describe_registry(registry: &FactorRegistry) -> String {
    let mut out = String::new();
    for (factor, cats) in &registry.factors {
        for (cat, entries) in cats {
            if entries.is_empty() {
                let _ = writeln!(out, "{factor} / {cat}: (none)");
            }
            for (explanation, idx) in entries {
                let _ = writeln!(out, "{factor} / {cat}: {idx} ({explanation})");
            }
        }
    }
    out
}
