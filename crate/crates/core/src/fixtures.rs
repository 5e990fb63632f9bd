// SPDX-License-Identifier: MIT OR Apache-2.0

//! Bundled sample inputs: descriptor phrases, persona prompt pairs, a
//! registry excerpt, stand-in assessment items and text for repetition
//! checks.

use crate::assessment::{parse_items, AssessmentItem};
use crate::background::{parse_factor_specs, FactorSpec};
use crate::error::Result;
use crate::pressure::{parse_contrast_pairs, ContrastPair};

pub const FACTORS_JSON: &str = include_str!("../fixtures/factors.json");
pub const CONTRAST_PAIRS_JSON: &str = include_str!("../fixtures/contrast_pairs.json");
pub const REGISTRY_SNIPPET_JSON: &str = include_str!("../fixtures/registry_snippet.json");
pub const QUESTIONS_JSON: &str = include_str!("../fixtures/questions.json");
pub const PERSONALITY_ITEMS_JSONL: &str = include_str!("../fixtures/personality_items.jsonl");
pub const SAFETY_ITEMS_JSONL: &str = include_str!("../fixtures/safety_items.jsonl");
/// A degenerate steered answer: one word repeated dozens of times.
pub const OVERSTEER_WOMAN: &str = include_str!("../fixtures/oversteer_woman.txt");
/// 200 ordinary sentences, one per line.
pub const CLEAN_CORPUS: &str = include_str!("../fixtures/clean_corpus.txt");

pub fn factor_specs() -> Result<Vec<FactorSpec>> {
    parse_factor_specs(FACTORS_JSON)
}

/// Shipped pairs; Deliberation has none and must be supplied by the user.
pub fn contrast_pairs() -> Result<Vec<ContrastPair>> {
    parse_contrast_pairs(CONTRAST_PAIRS_JSON)
}

pub fn questions() -> Vec<String> {
    serde_json::from_str(QUESTIONS_JSON).expect("bundled questions parse")
}

pub fn personality_items() -> Result<Vec<AssessmentItem>> {
    parse_items(PERSONALITY_ITEMS_JSONL)
}

pub fn safety_items() -> Result<Vec<AssessmentItem>> {
    parse_items(SAFETY_ITEMS_JSONL)
}

pub fn clean_sentences() -> Vec<&'static str> {
    CLEAN_CORPUS.lines().filter(|l| !l.trim().is_empty()).collect()
}
