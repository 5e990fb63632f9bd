// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minibatch SGD on the SAE loss with hand-derived gradients.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

use super::{SaeModel, SparsityInput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaeTrainConfig {
    /// Sparsity weight α.
    pub alpha: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Dictionary size `m`.
    pub n_features: usize,
    /// Layer the training activations were captured at.
    #[serde(default)]
    pub layer: usize,
    #[serde(default)]
    pub sparsity_input: SparsityInput,
    /// Fraction of samples held out to measure generalization.
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
    /// Rescale decoder rows to unit norm after every step.
    #[serde(default)]
    pub normalize_decoder: bool,
}

fn default_holdout() -> f64 {
    0.1
}

impl Default for SaeTrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            learning_rate: 0.01,
            steps: 2000,
            batch_size: 64,
            seed: 0,
            n_features: 64,
            layer: 0,
            sparsity_input: SparsityInput::Raw,
            holdout_fraction: default_holdout(),
            normalize_decoder: false,
        }
    }
}

impl SaeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.alpha >= 0.0) {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.steps == 0 || self.batch_size == 0 || self.n_features == 0 {
            return bad("steps, batch_size and n_features must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad(format!("holdout_fraction must be in [0, 1), got {}", self.holdout_fraction));
        }
        Ok(())
    }
}

/// Gradient of the per-sample loss with respect to every SAE parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeGradients {
    pub w_enc: Matrix,
    pub w_dec: Matrix,
    pub b_enc: Vec<f64>,
    pub b_dec: Vec<f64>,
}

impl SaeGradients {
    fn zeros(d: usize, m: usize) -> Self {
        Self {
            w_enc: Matrix::zeros(d, m),
            w_dec: Matrix::zeros(m, d),
            b_enc: vec![0.0; m],
            b_dec: vec![0.0; d],
        }
    }
}

/// Accumulates `scale · ∂L(z)/∂θ` into `grad`.
fn accumulate_gradients(
    sae: &SaeModel,
    z: &[f64],
    alpha: f64,
    input: SparsityInput,
    scale: f64,
    grad: &mut SaeGradients,
) {
    let (d, m) = (sae.d(), sae.m());
    let centered: Vec<f64> = z.iter().zip(sae.b_dec()).map(|(a, b)| a - b).collect();
    let pre = sae.pre_activations(z);
    let act: Vec<f64> = pre.iter().map(|&p| super::relu(p)).collect();
    let recon = sae.decode(&act).expect("shape checked by caller");
    // ∂L/∂x̂ = 2 (x̂ - z)
    let d_recon: Vec<f64> = recon.iter().zip(z).map(|(r, zz)| 2.0 * (r - zz)).collect();

    for i in 0..m {
        if act[i] != 0.0 {
            for (g, dr) in grad.w_dec.row_mut(i).iter_mut().zip(&d_recon) {
                *g += scale * act[i] * dr;
            }
        }
    }
    for (g, dr) in grad.b_dec.iter_mut().zip(&d_recon) {
        *g += scale * dr;
    }

    // back through the encoder: ∂L/∂pre_i = (W_dec[i] · ∂L/∂x̂) 1[pre_i > 0]
    let mut d_pre = vec![0.0; m];
    for i in 0..m {
        if pre[i] > 0.0 {
            d_pre[i] = linalg::dot(sae.w_dec().row(i), &d_recon);
            if input == SparsityInput::Centered {
                d_pre[i] += alpha;
            }
        }
    }

    for k in 0..d {
        let row = grad.w_enc.row_mut(k);
        for i in 0..m {
            if d_pre[i] != 0.0 {
                row[i] += scale * centered[k] * d_pre[i];
            }
        }
        // pre depends on -b_dec through the centering
        grad.b_dec[k] -= scale * linalg::dot(sae.w_enc().row(k), &d_pre);
    }
    for (g, dp) in grad.b_enc.iter_mut().zip(&d_pre) {
        *g += scale * dp;
    }

    if input == SparsityInput::Raw && alpha != 0.0 {
        let raw = sae.w_enc().vec_mul(z);
        for i in 0..m {
            if raw[i] + sae.b_enc()[i] > 0.0 {
                grad.b_enc[i] += scale * alpha;
                for k in 0..d {
                    let v = grad.w_enc.get(k, i) + scale * alpha * z[k];
                    grad.w_enc.set(k, i, v);
                }
            }
        }
    }
}

/// Analytic gradient of the single-sample loss.
pub fn sae_gradients(sae: &SaeModel, z: &[f64], alpha: f64, input: SparsityInput) -> Result<SaeGradients> {
    if z.len() != sae.d() {
        return Err(Error::DimensionMismatch {
            context: "SAE input",
            expected: sae.d(),
            actual: z.len(),
        });
    }
    let mut grad = SaeGradients::zeros(sae.d(), sae.m());
    accumulate_gradients(sae, z, alpha, input, 1.0, &mut grad);
    Ok(grad)
}

/// Losses observed during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_heldout_loss: f64,
    pub final_heldout_loss: f64,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    /// Mean minibatch loss before each logged step.
    pub history: Vec<(usize, f64)>,
}

fn mean_loss(sae: &SaeModel, data: &[&[f64]], alpha: f64, input: SparsityInput) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for z in data {
        total += sae.loss(z, alpha, input)?.total;
    }
    Ok(total / data.len() as f64)
}

impl SaeModel {
    /// Random initialization: uniform encoder, uniform decoder with rows
    /// rescaled to unit norm, zero biases.
    pub fn init_random(d: usize, m: usize, layer: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (d as f64).sqrt();
        let w_enc = Matrix::from_fn(d, m, |_, _| rng.random_range(-bound..bound));
        let mut w_dec = Matrix::from_fn(m, d, |_, _| rng.random_range(-bound..bound));
        normalize_rows(&mut w_dec);
        SaeModel::new(layer, w_enc, w_dec, vec![0.0; m], vec![0.0; d])
    }

    /// Trains an SAE on `activations` (each of length `d`).
    pub fn train(activations: &[Vec<f64>], config: &SaeTrainConfig) -> Result<(SaeModel, TrainReport)> {
        config.validate()?;
        let first = activations.first().ok_or(Error::EmptyInput("SAE training set"))?;
        let d = first.len();
        if d == 0 {
            return Err(Error::EmptyInput("SAE training vectors"));
        }
        for v in activations {
            if v.len() != d {
                return Err(Error::DimensionMismatch {
                    context: "SAE training vector",
                    expected: d,
                    actual: v.len(),
                });
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut order: Vec<usize> = (0..activations.len()).collect();
        order.shuffle(&mut rng);
        let n_holdout = ((activations.len() as f64) * config.holdout_fraction).floor() as usize;
        let n_holdout = n_holdout.min(activations.len() - 1);
        let (holdout_idx, train_idx) = order.split_at(n_holdout);
        let holdout: Vec<&[f64]> = holdout_idx.iter().map(|&i| activations[i].as_slice()).collect();
        let train: Vec<&[f64]> = train_idx.iter().map(|&i| activations[i].as_slice()).collect();

        let mut sae = SaeModel::init_random(d, config.n_features, config.layer, config.seed ^ 0x5AE)?;
        let input = config.sparsity_input;
        let alpha = config.alpha;
        let initial_heldout_loss = mean_loss(&sae, &holdout, alpha, input)?;
        let initial_train_loss = mean_loss(&sae, &train, alpha, input)?;

        let log_every = (config.steps / 50).max(1);
        let mut history = Vec::new();
        let mut cursor = 0usize;
        let mut epoch_order: Vec<usize> = (0..train.len()).collect();
        epoch_order.shuffle(&mut rng);
        let batch = config.batch_size.min(train.len());
        let mut grad = SaeGradients::zeros(d, config.n_features);

        for step in 0..config.steps {
            grad.w_enc.as_mut_slice().fill(0.0);
            grad.w_dec.as_mut_slice().fill(0.0);
            grad.b_enc.fill(0.0);
            grad.b_dec.fill(0.0);
            let scale = 1.0 / batch as f64;
            let log_this = step % log_every == 0;
            let mut batch_loss = 0.0;
            for _ in 0..batch {
                if cursor == epoch_order.len() {
                    epoch_order.shuffle(&mut rng);
                    cursor = 0;
                }
                let z = train[epoch_order[cursor]];
                cursor += 1;
                if log_this {
                    batch_loss += sae.loss(z, alpha, input)?.total * scale;
                }
                accumulate_gradients(&sae, z, alpha, input, scale, &mut grad);
            }
            if log_this {
                history.push((step, batch_loss));
            }
            let lr = config.learning_rate;
            let (w_enc, w_dec, b_enc, b_dec) = sae.params_mut();
            sgd(w_enc.as_mut_slice(), grad.w_enc.as_slice(), lr);
            sgd(w_dec.as_mut_slice(), grad.w_dec.as_slice(), lr);
            sgd(b_enc, &grad.b_enc, lr);
            sgd(b_dec, &grad.b_dec, lr);
            if config.normalize_decoder {
                normalize_rows(w_dec);
            }
            if !(w_enc.is_finite() && w_dec.is_finite() && linalg::all_finite(b_enc) && linalg::all_finite(b_dec)) {
                return Err(Error::Diverged { step });
            }
        }

        let final_heldout_loss = mean_loss(&sae, &holdout, alpha, input)?;
        let final_train_loss = mean_loss(&sae, &train, alpha, input)?;
        if !final_train_loss.is_finite() {
            return Err(Error::Diverged { step: config.steps });
        }
        let sae = sae.with_training_meta(alpha, config.seed);
        Ok((
            sae,
            TrainReport {
                initial_heldout_loss,
                final_heldout_loss,
                initial_train_loss,
                final_train_loss,
                history,
            },
        ))
    }
}

fn normalize_rows(w: &mut Matrix) {
    for i in 0..w.rows() {
        let row = w.row_mut(i);
        let n = linalg::norm(row);
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
}

fn sgd(params: &mut [f64], grad: &[f64], lr: f64) {
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= lr * g;
    }
}
