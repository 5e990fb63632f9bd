// SPDX-License-Identifier: MIT OR Apache-2.0

//! Browser bindings. Every export takes plain numbers/strings and returns a
//! JSON string; errors come back as `{"error": "..."}`.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use traitscope::linalg;
use traitscope::model::{ModelHandle, ToyModel, ToyModelConfig};
use traitscope::sae::{SaeModel, SaeTrainConfig, SparsityInput};
use traitscope::steering::{coefficient_scan, linear_grid, OverSteerConfig, TokenUnit};
use traitscope::synthetic::{mean_l0, PlantedDictionary};
use traitscope::{FeatureKind, FeatureVector, Result};

fn respond(result: Result<Value>) -> String {
    match result {
        Ok(v) => v.to_string(),
        Err(e) => json!({"error": e.to_string()}).to_string(),
    }
}

/// Choice logits for A–D as a last-position hook pushes the final residual
/// toward A (`toward_a`) or along the B−C unembedding difference.
pub fn scan_json(seed: u64, prompt: &str, max_coefficient: f64, steps: usize, toward_a: bool) -> Result<Value> {
    let config = ToyModelConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        seed,
        ..ToyModelConfig::default()
    };
    let toy = ToyModel::new(config)?;
    let d = toy.config().d_model;
    let layer = toy.config().n_layers - 1;
    let values = if toward_a {
        let a = toy.unembedding(0);
        let mean = a.iter().sum::<f64>() / d as f64;
        a.iter().map(|x| x - mean).collect::<Vec<_>>()
    } else {
        let b = toy.unembedding(1);
        let c = toy.unembedding(2);
        b.iter().zip(c).map(|(x, y)| x - y).collect()
    };
    let n = linalg::norm(&values);
    let feature = FeatureVector::new(FeatureKind::Pressure, layer, values.iter().map(|x| x / n).collect());
    let model = ModelHandle::new(toy);
    let steps = steps.clamp(2, 200);
    let grid = linear_grid(0.0, max_coefficient.max(1e-3), max_coefficient.max(1e-3) / (steps - 1) as f64);
    let curve = coefficient_scan(&model, &feature, layer, &grid, prompt, &["A", "B", "C", "D"])?;
    Ok(serde_json::to_value(&curve)?)
}

#[wasm_bindgen]
pub fn scan(seed: u32, prompt: &str, max_coefficient: f64, steps: u32, toward_a: bool) -> String {
    respond(scan_json(seed as u64, prompt, max_coefficient, steps as usize, toward_a))
}

/// Trains an SAE on a planted sparse dictionary and reports, per planted
/// direction, the best decoder-row cosine.
pub fn train_planted_json(seed: u64, alpha: f64, steps: usize, samples: usize, centered: bool) -> Result<Value> {
    let planted = PlantedDictionary::generate(16, 8, samples.clamp(256, 20_000), 3, seed)?;
    let config = SaeTrainConfig {
        alpha,
        learning_rate: 0.1,
        steps: steps.clamp(1, 20_000),
        batch_size: 64,
        seed,
        n_features: 32,
        sparsity_input: if centered { SparsityInput::Centered } else { SparsityInput::Raw },
        ..SaeTrainConfig::default()
    };
    let (sae, report) = SaeModel::train(&planted.samples, &config)?;
    Ok(json!({
        "recovery": planted.recovery(&sae),
        "mean_l0": mean_l0(&sae, &planted.samples)?,
        "history": report.history,
        "heldout": [report.initial_heldout_loss, report.final_heldout_loss],
    }))
}

#[wasm_bindgen]
pub fn train_planted(seed: u32, alpha: f64, steps: u32, samples: u32, centered: bool) -> String {
    respond(train_planted_json(seed as u64, alpha, steps as usize, samples as usize, centered))
}

#[wasm_bindgen]
pub fn over_steer(text: &str, window: u32, max_repeat: u32, by_char: bool) -> String {
    let config = OverSteerConfig {
        window: window as usize,
        max_repeat: max_repeat as usize,
        unit: if by_char { TokenUnit::Char } else { TokenUnit::Word },
    };
    json!({"over_steered": config.detect(text)}).to_string()
}
