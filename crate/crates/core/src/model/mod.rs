// SPDX-License-Identifier: MIT OR Apache-2.0

//! Uniform access to a causal language model's tokenizer, residual stream,
//! next-token logits and greedy generation.
//!
//! Residual stream "at layer `l`" is the output of decoder block `l`
//! (`resid_post`). Hooks for layer `l` rewrite that output before block
//! `l + 1` (or the final norm) reads it; captures record the value *before*
//! any hook at the same layer is applied.
//!
//! Backends implement [`LanguageModel`]. The crate ships [`ToyModel`], a
//! small deterministic decoder-only transformer; real checkpoints are
//! reached through an external bridge implementing the same trait.

mod tokenizer;
mod toy;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::steering::SteeringHook;

pub use tokenizer::CharTokenizer;
pub use toy::{ToyModel, ToyModelConfig, ToyWeights, TOY_CHECKPOINT_VERSION};

/// Token id in a model vocabulary.
pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    Toy,
    ExternalPort,
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Backend::Toy => f.write_str("toy"),
            Backend::ExternalPort => f.write_str("external-port"),
        }
    }
}

/// Residual-stream values captured at one layer, shaped `(batch, seq, d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCapture {
    pub layer: usize,
    batch: usize,
    seq_len: usize,
    d_model: usize,
    values: Vec<f64>,
}

impl ActivationCapture {
    pub fn new(
        layer: usize,
        batch: usize,
        seq_len: usize,
        d_model: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        if values.len() != batch * seq_len * d_model {
            return Err(Error::DimensionMismatch {
                context: "activation capture",
                expected: batch * seq_len * d_model,
                actual: values.len(),
            });
        }
        if !crate::linalg::all_finite(&values) {
            return Err(Error::NonFinite("activation capture"));
        }
        Ok(Self {
            layer,
            batch,
            seq_len,
            d_model,
            values,
        })
    }

    /// `(b, t, d)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.batch, self.seq_len, self.d_model)
    }

    /// Residual vector at batch element `b`, position `t`.
    pub fn at(&self, b: usize, t: usize) -> &[f64] {
        let start = (b * self.seq_len + t) * self.d_model;
        &self.values[start..start + self.d_model]
    }

    /// Vector at the final position of batch element `b`.
    pub fn last(&self, b: usize) -> &[f64] {
        self.at(b, self.seq_len - 1)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Result of one forward pass over a single sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub captures: BTreeMap<usize, ActivationCapture>,
    /// Next-token logits at the final position, after hooks.
    pub last_logits: Vec<f64>,
}

/// Contract every backend satisfies. The toy backend implements it in
/// process; an external bridge (e.g. to a served Gemma checkpoint) would
/// implement the same four capabilities: tokenize, capture, hooked forward
/// and logits.
pub trait LanguageModel: Send + Sync {
    fn model_id(&self) -> &str;
    fn backend(&self) -> Backend;
    fn n_layers(&self) -> usize;
    fn d_model(&self) -> usize;
    fn vocab_size(&self) -> usize;
    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>>;
    fn detokenize(&self, tokens: &[TokenId]) -> Result<String>;

    /// Runs one sequence through the model. Hooks rewrite `resid_post` of
    /// their layer; `capture_layers` are recorded before hooks are applied.
    fn forward(
        &self,
        tokens: &[TokenId],
        hooks: &[SteeringHook],
        capture_layers: &BTreeSet<usize>,
    ) -> Result<ForwardPass>;
}

/// Shared, immutable handle to a loaded model.
#[derive(Clone)]
pub struct ModelHandle {
    inner: Arc<dyn LanguageModel>,
}

impl fmt::Debug for ModelHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelHandle")
            .field("model_id", &self.model_id())
            .field("backend", &self.backend())
            .field("n_layers", &self.n_layers())
            .field("d_model", &self.d_model())
            .finish()
    }
}

impl ModelHandle {
    pub fn new(model: impl LanguageModel + 'static) -> Self {
        Self {
            inner: Arc::new(model),
        }
    }

    pub fn from_arc(model: Arc<dyn LanguageModel>) -> Self {
        Self { inner: model }
    }

    pub fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    pub fn backend(&self) -> Backend {
        self.inner.backend()
    }

    pub fn n_layers(&self) -> usize {
        self.inner.n_layers()
    }

    pub fn d_model(&self) -> usize {
        self.inner.d_model()
    }

    pub fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    pub fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.n_layers() {
            return Err(Error::LayerOutOfRange {
                layer,
                n_layers: self.n_layers(),
            });
        }
        Ok(())
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        if text.is_empty() {
            return Err(Error::EmptyInput("text to tokenize"));
        }
        self.inner.tokenize(text)
    }

    pub fn detokenize(&self, tokens: &[TokenId]) -> Result<String> {
        self.inner.detokenize(tokens)
    }

    /// Captures the residual stream at each requested layer without
    /// intervention.
    pub fn forward_with_capture(
        &self,
        tokens: &[TokenId],
        layers: &BTreeSet<usize>,
    ) -> Result<BTreeMap<usize, ActivationCapture>> {
        self.forward_hooked(tokens, &[], layers).map(|p| p.captures)
    }

    pub fn forward_hooked(
        &self,
        tokens: &[TokenId],
        hooks: &[SteeringHook],
        capture_layers: &BTreeSet<usize>,
    ) -> Result<ForwardPass> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("token sequence"));
        }
        for &layer in capture_layers {
            self.check_layer(layer)?;
        }
        self.check_hooks(hooks)?;
        self.inner.forward(tokens, hooks, capture_layers)
    }

    /// Full next-token logit vector at the final position of `prompt`.
    pub fn next_token_logits(&self, prompt: &str, hooks: &[SteeringHook]) -> Result<Vec<f64>> {
        let tokens = self.tokenize(prompt)?;
        Ok(self
            .forward_hooked(&tokens, hooks, &BTreeSet::new())?
            .last_logits)
    }

    /// Resolves an option string to its single vocabulary token.
    pub fn option_token(&self, option: &str) -> Result<TokenId> {
        let ids = self.tokenize(option)?;
        match ids.as_slice() {
            [id] => Ok(*id),
            _ => Err(Error::MultiTokenOption {
                option: option.to_string(),
                n_tokens: ids.len(),
            }),
        }
    }

    /// Next-token logit of each option's token at the end of `prompt`,
    /// after applying `hooks`.
    pub fn choice_logits(
        &self,
        prompt: &str,
        choices: &[&str],
        hooks: &[SteeringHook],
    ) -> Result<BTreeMap<String, f64>> {
        let ids = choices
            .iter()
            .map(|c| self.option_token(c))
            .collect::<Result<Vec<_>>>()?;
        let logits = self.next_token_logits(prompt, hooks)?;
        Ok(choices
            .iter()
            .zip(ids)
            .map(|(c, id)| (c.to_string(), logits[id as usize]))
            .collect())
    }

    /// Greedy decoding. Each step re-runs the full current sequence so the
    /// hooks' position rules apply to the sequence as it grows.
    pub fn generate_with_hooks(
        &self,
        prompt: &str,
        hooks: &[SteeringHook],
        max_tokens: usize,
    ) -> Result<String> {
        let ids = self.generate_tokens(prompt, hooks, max_tokens)?;
        self.detokenize(&ids)
    }

    /// Same as [`generate_with_hooks`](Self::generate_with_hooks) but
    /// returns the emitted token ids.
    pub fn generate_tokens(
        &self,
        prompt: &str,
        hooks: &[SteeringHook],
        max_tokens: usize,
    ) -> Result<Vec<TokenId>> {
        if max_tokens == 0 {
            return Err(Error::InvalidConfig("max_tokens must be at least 1".into()));
        }
        let mut seq = self.tokenize(prompt)?;
        let mut out = Vec::with_capacity(max_tokens);
        let none = BTreeSet::new();
        for _ in 0..max_tokens {
            let pass = self.forward_hooked(&seq, hooks, &none)?;
            let next = argmax(&pass.last_logits) as TokenId;
            seq.push(next);
            out.push(next);
        }
        Ok(out)
    }

    fn check_hooks(&self, hooks: &[SteeringHook]) -> Result<()> {
        for hook in hooks {
            self.check_layer(hook.layer)?;
            if hook.feature.dim() != self.d_model() {
                return Err(Error::DimensionMismatch {
                    context: "steering feature vs d_model",
                    expected: self.d_model(),
                    actual: hook.feature.dim(),
                });
            }
        }
        Ok(())
    }
}

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
