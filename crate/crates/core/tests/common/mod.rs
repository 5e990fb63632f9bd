// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use traitscope::background::FactorSpec;
use traitscope::experiment::{Experiment, Overrides, Request};
use traitscope::fixtures;
use traitscope::synthetic::{planted_background, PlantedBackground};
use traitscope::{ModelHandle, ToyModel, ToyModelConfig};

pub const HOME_FACTOR: &str = "Socioeconomic status";
pub const HOME_CATEGORY: &str = "rich";
pub const LAYER: usize = 1;
/// Prefixed to every home phrase; no fixture phrase contains it.
pub const MARKER: &str = "#";

pub fn toy(seed: u64) -> ToyModel {
    ToyModel::new(ToyModelConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        seed,
        ..ToyModelConfig::default()
    })
    .unwrap()
}

pub fn toy_model(seed: u64) -> ModelHandle {
    ModelHandle::new(toy(seed))
}

/// Fixture factors with the home category's phrases marked.
pub fn marked_specs() -> Vec<FactorSpec> {
    let mut specs = fixtures::factor_specs().unwrap();
    for spec in &mut specs {
        if spec.factor == HOME_FACTOR {
            for p in spec.categories.get_mut(HOME_CATEGORY).unwrap() {
                *p = format!("{MARKER}{p}");
            }
        }
    }
    specs
}

pub fn specs_json(specs: &[FactorSpec]) -> String {
    let map: serde_json::Map<String, serde_json::Value> = specs
        .iter()
        .map(|s| (s.factor.clone(), serde_json::to_value(&s.categories).unwrap()))
        .collect();
    serde_json::to_string_pretty(&map).unwrap()
}

/// Home phrases of the planted category and every other phrase.
pub fn planted_phrases(specs: &[FactorSpec]) -> (Vec<String>, Vec<String>) {
    let mut home = Vec::new();
    let mut others = Vec::new();
    for spec in specs {
        for (cat, phrases) in &spec.categories {
            if spec.factor == HOME_FACTOR && cat == HOME_CATEGORY {
                home.extend(phrases.iter().cloned());
            } else {
                others.extend(phrases.iter().cloned());
            }
        }
    }
    (home, others)
}

pub fn planted(model: &ModelHandle, m: usize) -> PlantedBackground {
    let (home, others) = planted_phrases(&marked_specs());
    planted_background(model, LAYER, &home, &others, m, 17).unwrap()
}

/// A self-contained project directory: toy checkpoint, planted SAE,
/// fixture inputs and a config, with the registry and two pressure
/// directions already extracted through the library.
pub struct ToyProject {
    pub dir: tempfile::TempDir,
    pub config: PathBuf,
}

impl ToyProject {
    pub fn root(&self) -> &Path {
        self.dir.path()
    }
}

fn config_text(extra: &str) -> String {
    format!(
        r#"seed = 3
output_dir = "out"

[model]
checkpoint = "model.json"

[profile]
name = "toy"
layer = {LAYER}
sae_coefficient = 6.0
pressure_coefficient = 3.0
sae_grid = {{ start = 0.0, stop = 12.0, step = 3.0 }}
pressure_grid = {{ start = 0.0, stop = 6.0, step = 1.5 }}

[items]
personality = "personality.jsonl"
safety = "safety.jsonl"

[background]
factors = "factors.json"

[pressure]
pairs = "pairs.json"
questions = "questions.json"

[scan]
max_tokens = 4
{extra}"#
    )
}

pub fn toy_project() -> ToyProject {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    toy(21).save(&root.join("model.json")).unwrap();
    let model = toy_model(21);
    planted(&model, 64).sae.save(&root.join("sae.json")).unwrap();
    for (name, text) in [
        ("personality.jsonl", fixtures::PERSONALITY_ITEMS_JSONL),
        ("safety.jsonl", fixtures::SAFETY_ITEMS_JSONL),
        ("factors.json", specs_json(&marked_specs()).as_str()),
        ("pairs.json", fixtures::CONTRAST_PAIRS_JSON),
        ("questions.json", fixtures::QUESTIONS_JSON),
    ] {
        fs::write(root.join(name), text).unwrap();
    }
    let config = root.join("traitscope.toml");

    fs::write(&config, format!("sae = \"sae.json\"\n{}", config_text(""))).unwrap();
    let mut exp = Experiment::load(&config, &Overrides::default()).unwrap();
    let bg = exp.execute(&Request::ExtractBackground).unwrap();
    let pr = exp.execute(&Request::ExtractPressure).unwrap();
    fs::rename(bg.run_dir.join("registry.json"), root.join("registry.json")).unwrap();
    fs::rename(pr.run_dir.join("directions"), root.join("directions")).unwrap();
    fs::remove_dir_all(root.join("out")).unwrap();

    let directions = r#"
[[directions]]
pressure = "Trust"
path = "directions/trust.json"

[[directions]]
pressure = "Activity"
path = "directions/activity.json"
"#;
    fs::write(
        &config,
        format!("sae = \"sae.json\"\nregistry = \"registry.json\"\n{}", config_text(directions)),
    )
    .unwrap();
    ToyProject { dir, config }
}
