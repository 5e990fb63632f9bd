// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic decoder-only toy transformer.
//!
//! Pre-norm blocks (causal multi-head attention + GELU MLP), learned
//! positional embeddings and an unembedding tied to the token embedding.
//! Weights are drawn from a ChaCha stream seeded by the config, so
//! `(config, seed)` fixes every activation bit for bit.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::steering::SteeringHook;

use super::{ActivationCapture, Backend, CharTokenizer, ForwardPass, LanguageModel, TokenId};

pub const TOY_CHECKPOINT_VERSION: u64 = 1;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
    /// Hidden width of each MLP; zero selects `4 · d_model`.
    #[serde(default)]
    pub d_mlp: usize,
    pub seed: u64,
}

fn default_max_seq_len() -> usize {
    1024
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 32,
            n_heads: 4,
            vocab_size: CharTokenizer::max_vocab(),
            max_seq_len: default_max_seq_len(),
            d_mlp: 0,
            seed: 0,
        }
    }
}

impl ToyModelConfig {
    pub fn mlp_width(&self) -> usize {
        if self.d_mlp == 0 {
            4 * self.d_model
        } else {
            self.d_mlp
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 {
            return Err(Error::InvalidConfig(
                "n_layers, d_model and n_heads must be at least 1".into(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 4 || self.vocab_size > CharTokenizer::max_vocab() {
            return Err(Error::InvalidConfig(format!(
                "vocab_size must be in 4..={} so that A-D are single tokens",
                CharTokenizer::max_vocab()
            )));
        }
        if self.max_seq_len == 0 {
            return Err(Error::InvalidConfig("max_seq_len must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerNorm {
    fn unit(d: usize) -> Self {
        Self {
            gain: vec![1.0; d],
            bias: vec![0.0; d],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        x.iter()
            .zip(self.gain.iter().zip(&self.bias))
            .map(|(v, (g, b))| (v - mean) * inv * g + b)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockWeights {
    pub ln_attn: LayerNorm,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ln_mlp: LayerNorm,
    pub w_in: Matrix,
    pub b_in: Vec<f64>,
    pub w_out: Matrix,
    pub b_out: Vec<f64>,
}

/// All trainable tensors of a toy model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyWeights {
    /// `vocab × d`; also the unembedding.
    pub token_embedding: Matrix,
    /// `max_seq_len × d`.
    pub pos_embedding: Matrix,
    pub blocks: Vec<BlockWeights>,
    pub ln_final: LayerNorm,
}

impl ToyWeights {
    pub fn random(config: &ToyModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let h = config.mlp_width();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut gauss = |rows: usize, cols: usize, std: f64| -> Matrix {
            let dist = Normal::new(0.0, std).expect("positive std");
            Matrix::from_fn(rows, cols, |_, _| dist.sample(&mut rng))
        };
        let resid_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let token_embedding = gauss(config.vocab_size, d, 1.0);
        let pos_embedding = gauss(config.max_seq_len, d, 0.5);
        let blocks = (0..config.n_layers)
            .map(|_| BlockWeights {
                ln_attn: LayerNorm::unit(d),
                w_q: gauss(d, d, 1.0 / (d as f64).sqrt()),
                w_k: gauss(d, d, 1.0 / (d as f64).sqrt()),
                w_v: gauss(d, d, 1.0 / (d as f64).sqrt()),
                w_o: gauss(d, d, resid_scale / (d as f64).sqrt()),
                ln_mlp: LayerNorm::unit(d),
                w_in: gauss(d, h, 1.0 / (d as f64).sqrt()),
                b_in: vec![0.0; h],
                w_out: gauss(h, d, resid_scale / (h as f64).sqrt()),
                b_out: vec![0.0; d],
            })
            .collect();
        Ok(Self {
            token_embedding,
            pos_embedding,
            blocks,
            ln_final: LayerNorm::unit(d),
        })
    }

    fn check(&self, config: &ToyModelConfig) -> Result<()> {
        let d = config.d_model;
        let h = config.mlp_width();
        let expect = |name: &str, m: &Matrix, rows: usize, cols: usize| -> Result<()> {
            if m.rows() != rows || m.cols() != cols {
                return Err(Error::schema(
                    format!("weights.{name}"),
                    format!("shape {}x{}, expected {rows}x{cols}", m.rows(), m.cols()),
                ));
            }
            if !m.is_finite() {
                return Err(Error::NonFinite("toy weights"));
            }
            Ok(())
        };
        let expect_vec = |name: &str, v: &[f64], len: usize| -> Result<()> {
            if v.len() != len {
                return Err(Error::schema(
                    format!("weights.{name}"),
                    format!("length {}, expected {len}", v.len()),
                ));
            }
            Ok(())
        };
        expect("token_embedding", &self.token_embedding, config.vocab_size, d)?;
        expect("pos_embedding", &self.pos_embedding, config.max_seq_len, d)?;
        if self.blocks.len() != config.n_layers {
            return Err(Error::schema(
                "weights.blocks",
                format!("{} blocks, expected {}", self.blocks.len(), config.n_layers),
            ));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, m) in [("w_q", &b.w_q), ("w_k", &b.w_k), ("w_v", &b.w_v), ("w_o", &b.w_o)] {
                expect(&format!("blocks[{i}].{name}"), m, d, d)?;
            }
            expect(&format!("blocks[{i}].w_in"), &b.w_in, d, h)?;
            expect(&format!("blocks[{i}].w_out"), &b.w_out, h, d)?;
            expect_vec(&format!("blocks[{i}].b_in"), &b.b_in, h)?;
            expect_vec(&format!("blocks[{i}].b_out"), &b.b_out, d)?;
            for (name, ln) in [("ln_attn", &b.ln_attn), ("ln_mlp", &b.ln_mlp)] {
                expect_vec(&format!("blocks[{i}].{name}.gain"), &ln.gain, d)?;
                expect_vec(&format!("blocks[{i}].{name}.bias"), &ln.bias, d)?;
            }
        }
        expect_vec("ln_final.gain", &self.ln_final.gain, d)?;
        expect_vec("ln_final.bias", &self.ln_final.bias, d)?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    schema_version: u64,
    config: ToyModelConfig,
    weights: ToyWeights,
}

/// In-process toy backend.
#[derive(Debug, Clone)]
pub struct ToyModel {
    model_id: String,
    config: ToyModelConfig,
    weights: ToyWeights,
    tokenizer: CharTokenizer,
}

impl ToyModel {
    pub fn new(config: ToyModelConfig) -> Result<Self> {
        let weights = ToyWeights::random(&config)?;
        Self::from_weights(config, weights)
    }

    pub fn from_weights(config: ToyModelConfig, weights: ToyWeights) -> Result<Self> {
        config.validate()?;
        weights.check(&config)?;
        let tokenizer = CharTokenizer::new(config.vocab_size)?;
        let model_id = format!(
            "toy-l{}-d{}-h{}-s{}",
            config.n_layers, config.d_model, config.n_heads, config.seed
        );
        Ok(Self {
            model_id,
            config,
            weights,
            tokenizer,
        })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ToyWeights {
        &self.weights
    }

    /// Unembedding row for a token (tied to its embedding).
    pub fn unembedding(&self, token: TokenId) -> &[f64] {
        self.weights.token_embedding.row(token as usize)
    }

    pub fn to_json(&self) -> Result<String> {
        let ckpt = Checkpoint {
            schema_version: TOY_CHECKPOINT_VERSION,
            config: self.config.clone(),
            weights: self.weights.clone(),
        };
        Ok(serde_json::to_string(&ckpt)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let version = value
            .get("schema_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::schema("$.schema_version", "missing or not an integer"))?;
        if version != TOY_CHECKPOINT_VERSION {
            return Err(Error::SchemaVersion {
                kind: "toy checkpoint",
                found: version,
                supported: TOY_CHECKPOINT_VERSION,
            });
        }
        let ckpt: Checkpoint = serde_json::from_value(value)?;
        Self::from_weights(ckpt.config, ckpt.weights)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::store::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    fn attention(&self, block: &BlockWeights, normed: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let d = self.config.d_model;
        let n_heads = self.config.n_heads;
        let head_dim = d / n_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let q: Vec<Vec<f64>> = normed.iter().map(|x| block.w_q.vec_mul(x)).collect();
        let k: Vec<Vec<f64>> = normed.iter().map(|x| block.w_k.vec_mul(x)).collect();
        let v: Vec<Vec<f64>> = normed.iter().map(|x| block.w_v.vec_mul(x)).collect();
        let t = normed.len();
        let mut mixed = vec![vec![0.0; d]; t];
        let mut scores = Vec::with_capacity(t);
        for head in 0..n_heads {
            let lo = head * head_dim;
            let hi = lo + head_dim;
            for i in 0..t {
                scores.clear();
                for j in 0..=i {
                    scores.push(crate::linalg::dot(&q[i][lo..hi], &k[j][lo..hi]) * scale);
                }
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                for (j, s) in scores.iter().enumerate() {
                    let w = s / total;
                    for (m, vv) in mixed[i][lo..hi].iter_mut().zip(&v[j][lo..hi]) {
                        *m += w * vv;
                    }
                }
            }
        }
        mixed.iter().map(|m| block.w_o.vec_mul(m)).collect()
    }

    fn mlp(block: &BlockWeights, x: &[f64]) -> Vec<f64> {
        let mut hidden = block.w_in.vec_mul(x);
        for (h, b) in hidden.iter_mut().zip(&block.b_in) {
            *h = gelu(*h + b);
        }
        let mut out = block.w_out.vec_mul(&hidden);
        for (o, b) in out.iter_mut().zip(&block.b_out) {
            *o += b;
        }
        out
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

impl LanguageModel for ToyModel {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn backend(&self) -> Backend {
        Backend::Toy
    }

    fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    fn d_model(&self) -> usize {
        self.config.d_model
    }

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        self.tokenizer.encode(text)
    }

    fn detokenize(&self, tokens: &[TokenId]) -> Result<String> {
        self.tokenizer.decode(tokens)
    }

    fn forward(
        &self,
        tokens: &[TokenId],
        hooks: &[SteeringHook],
        capture_layers: &BTreeSet<usize>,
    ) -> Result<ForwardPass> {
        let d = self.config.d_model;
        let t = tokens.len();
        if t > self.config.max_seq_len {
            return Err(Error::InvalidConfig(format!(
                "sequence of {t} tokens exceeds toy max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        let w = &self.weights;
        // flat (t, d) residual stream
        let mut resid: Vec<f64> = Vec::with_capacity(t * d);
        for (pos, &tok) in tokens.iter().enumerate() {
            if tok as usize >= self.config.vocab_size {
                return Err(Error::UnknownToken(tok));
            }
            let e = w.token_embedding.row(tok as usize);
            let p = w.pos_embedding.row(pos);
            resid.extend(e.iter().zip(p).map(|(a, b)| a + b));
        }

        let mut captures = BTreeMap::new();
        for (layer, block) in w.blocks.iter().enumerate() {
            let normed: Vec<Vec<f64>> = resid.chunks(d).map(|x| block.ln_attn.apply(x)).collect();
            let attn = self.attention(block, &normed);
            for (x, a) in resid.chunks_mut(d).zip(&attn) {
                for (xv, av) in x.iter_mut().zip(a) {
                    *xv += av;
                }
            }
            for x in resid.chunks_mut(d) {
                let m = Self::mlp(block, &block.ln_mlp.apply(x));
                for (xv, mv) in x.iter_mut().zip(&m) {
                    *xv += mv;
                }
            }

            if capture_layers.contains(&layer) {
                captures.insert(layer, ActivationCapture::new(layer, 1, t, d, resid.clone())?);
            }
            for hook in hooks.iter().filter(|h| h.layer == layer) {
                hook.apply(&mut resid, t, d)?;
            }
        }

        let last = w.ln_final.apply(&resid[(t - 1) * d..]);
        let last_logits = w.token_embedding.mul_vec(&last);
        if !crate::linalg::all_finite(&last_logits) {
            return Err(Error::NonFinite("logits"));
        }
        Ok(ForwardPass {
            captures,
            last_logits,
        })
    }
}
