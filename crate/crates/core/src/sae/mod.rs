// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sparse autoencoder over residual-stream activations.
//!
//! ```text
//! encode(z) = ReLU((z - b_dec) W_enc + b_enc)
//! SAE(z)    = encode(z) W_dec + b_dec
//! L(z)      = ||z - SAE(z)||² + α ||ReLU(z W_enc + b_enc)||₁
//! ```
//!
//! The sparsity term is evaluated on the uncentered input by default; see
//! [`SparsityInput`].

mod train;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::{FeatureKind, FeatureVector};
use crate::linalg::{self, Matrix};

pub use train::{sae_gradients, SaeGradients, SaeTrainConfig, TrainReport};

pub const SAE_FILE_VERSION: u64 = 1;

/// Which pre-activation the L1 penalty is computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsityInput {
    /// `ReLU(z W_enc + b_enc)`, exactly as the loss is usually printed.
    #[default]
    Raw,
    /// `ReLU((z - b_dec) W_enc + b_enc)`, i.e. the encoder activations.
    Centered,
}

/// Per-sample loss split into its two terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaeLoss {
    pub recon: f64,
    pub sparsity: f64,
    pub total: f64,
}

/// Metadata stored next to the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeManifest {
    pub sae_id: String,
    pub d: usize,
    pub m: usize,
    pub layer: usize,
    pub alpha: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeModel {
    manifest: SaeManifest,
    /// `d × m`
    w_enc: Matrix,
    /// `m × d`; row `i` is feature `i`.
    w_dec: Matrix,
    b_enc: Vec<f64>,
    b_dec: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SaeFile {
    schema_version: u64,
    manifest: SaeManifest,
    w_enc: Vec<f64>,
    w_dec: Vec<f64>,
    b_enc: Vec<f64>,
    b_dec: Vec<f64>,
}

impl SaeModel {
    /// Builds an SAE, rejecting undercomplete shapes (`m < d`).
    pub fn new(
        layer: usize,
        w_enc: Matrix,
        w_dec: Matrix,
        b_enc: Vec<f64>,
        b_dec: Vec<f64>,
    ) -> Result<Self> {
        let (d, m) = (w_enc.rows(), w_enc.cols());
        if m < d {
            return Err(Error::InvalidConfig(format!(
                "SAE must be overcomplete: m = {m} < d = {d}"
            )));
        }
        let manifest = SaeManifest {
            sae_id: format!("sae-l{layer}-d{d}-m{m}"),
            d,
            m,
            layer,
            alpha: None,
            seed: None,
        };
        Self::from_parts(manifest, w_enc, w_dec, b_enc, b_dec)
    }

    fn from_parts(
        manifest: SaeManifest,
        w_enc: Matrix,
        w_dec: Matrix,
        b_enc: Vec<f64>,
        b_dec: Vec<f64>,
    ) -> Result<Self> {
        let (d, m) = (manifest.d, manifest.m);
        let check = |what: &'static str, expected: usize, actual: usize| {
            if expected == actual {
                Ok(())
            } else {
                Err(Error::DimensionMismatch {
                    context: what,
                    expected,
                    actual,
                })
            }
        };
        check("W_enc rows (d)", d, w_enc.rows())?;
        check("W_enc cols (m)", m, w_enc.cols())?;
        check("W_dec rows (m)", m, w_dec.rows())?;
        check("W_dec cols (d)", d, w_dec.cols())?;
        check("b_enc length (m)", m, b_enc.len())?;
        check("b_dec length (d)", d, b_dec.len())?;
        if !(w_enc.is_finite()
            && w_dec.is_finite()
            && linalg::all_finite(&b_enc)
            && linalg::all_finite(&b_dec))
        {
            return Err(Error::NonFinite("SAE weights"));
        }
        Ok(Self {
            manifest,
            w_enc,
            w_dec,
            b_enc,
            b_dec,
        })
    }

    pub fn with_id(mut self, sae_id: impl Into<String>) -> Self {
        self.manifest.sae_id = sae_id.into();
        self
    }

    pub(crate) fn with_training_meta(mut self, alpha: f64, seed: u64) -> Self {
        self.manifest.alpha = Some(alpha);
        self.manifest.seed = Some(seed);
        self
    }

    pub fn manifest(&self) -> &SaeManifest {
        &self.manifest
    }

    pub fn id(&self) -> &str {
        &self.manifest.sae_id
    }

    pub fn d(&self) -> usize {
        self.manifest.d
    }

    pub fn m(&self) -> usize {
        self.manifest.m
    }

    pub fn layer(&self) -> usize {
        self.manifest.layer
    }

    pub fn w_enc(&self) -> &Matrix {
        &self.w_enc
    }

    pub fn w_dec(&self) -> &Matrix {
        &self.w_dec
    }

    pub fn b_enc(&self) -> &[f64] {
        &self.b_enc
    }

    pub fn b_dec(&self) -> &[f64] {
        &self.b_dec
    }

    pub(crate) fn params_mut(&mut self) -> (&mut Matrix, &mut Matrix, &mut [f64], &mut [f64]) {
        (
            &mut self.w_enc,
            &mut self.w_dec,
            &mut self.b_enc,
            &mut self.b_dec,
        )
    }

    fn check_input(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.d() {
            return Err(Error::DimensionMismatch {
                context: "SAE input",
                expected: self.d(),
                actual: z.len(),
            });
        }
        Ok(())
    }

    /// Encoder pre-activations `(z - b_dec) W_enc + b_enc`.
    pub(crate) fn pre_activations(&self, z: &[f64]) -> Vec<f64> {
        let centered: Vec<f64> = z.iter().zip(&self.b_dec).map(|(a, b)| a - b).collect();
        let mut pre = self.w_enc.vec_mul(&centered);
        for (p, b) in pre.iter_mut().zip(&self.b_enc) {
            *p += b;
        }
        pre
    }

    /// Feature activations for one residual vector.
    pub fn encode(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_input(z)?;
        Ok(self.pre_activations(z).into_iter().map(relu).collect())
    }

    /// Reconstruction `a W_dec + b_dec`.
    pub fn decode(&self, a: &[f64]) -> Result<Vec<f64>> {
        if a.len() != self.m() {
            return Err(Error::DimensionMismatch {
                context: "SAE activations",
                expected: self.m(),
                actual: a.len(),
            });
        }
        let mut out = self.w_dec.vec_mul(a);
        for (o, b) in out.iter_mut().zip(&self.b_dec) {
            *o += b;
        }
        Ok(out)
    }

    /// `decode(encode(z))`.
    pub fn reconstruct(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.decode(&self.encode(z)?)
    }

    /// Activations the L1 penalty is computed on.
    pub fn sparsity_activations(&self, z: &[f64], input: SparsityInput) -> Result<Vec<f64>> {
        self.check_input(z)?;
        Ok(match input {
            SparsityInput::Centered => self.pre_activations(z).into_iter().map(relu).collect(),
            SparsityInput::Raw => {
                let mut pre = self.w_enc.vec_mul(z);
                for (p, b) in pre.iter_mut().zip(&self.b_enc) {
                    *p = relu(*p + b);
                }
                pre
            }
        })
    }

    pub fn loss(&self, z: &[f64], alpha: f64, input: SparsityInput) -> Result<SaeLoss> {
        if !(alpha >= 0.0) {
            return Err(Error::InvalidConfig(format!("alpha must be >= 0, got {alpha}")));
        }
        let recon_vec = self.reconstruct(z)?;
        let recon: f64 = z
            .iter()
            .zip(&recon_vec)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let sparsity: f64 = self.sparsity_activations(z, input)?.iter().sum();
        Ok(SaeLoss {
            recon,
            sparsity,
            total: recon + alpha * sparsity,
        })
    }

    /// Decoder row `index` as a background steering feature.
    pub fn feature_vector(&self, index: usize) -> Result<FeatureVector> {
        if index >= self.m() {
            return Err(Error::FeatureOutOfRange {
                index,
                m: self.m(),
            });
        }
        Ok(
            FeatureVector::new(FeatureKind::Background, self.layer(), self.w_dec.row(index).to_vec())
                .with_index(index),
        )
    }

    pub fn to_json(&self) -> Result<String> {
        let file = SaeFile {
            schema_version: SAE_FILE_VERSION,
            manifest: self.manifest.clone(),
            w_enc: self.w_enc.as_slice().to_vec(),
            w_dec: self.w_dec.as_slice().to_vec(),
            b_enc: self.b_enc.clone(),
            b_dec: self.b_dec.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        crate::store::check_schema_version(&value, "SAE", SAE_FILE_VERSION)?;
        let file: SaeFile = serde_json::from_value(value)?;
        let SaeManifest { d, m, .. } = file.manifest;
        if m < d {
            log::warn!("loaded SAE {} is undercomplete (m = {m} < d = {d})", file.manifest.sae_id);
        }
        let w_enc = Matrix::from_vec(d, m, file.w_enc)
            .map_err(|_| Error::schema("$.w_enc", format!("expected {d}x{m} = {} values", d * m)))?;
        let w_dec = Matrix::from_vec(m, d, file.w_dec)
            .map_err(|_| Error::schema("$.w_dec", format!("expected {m}x{d} = {} values", d * m)))?;
        Self::from_parts(file.manifest, w_enc, w_dec, file.b_enc, file.b_dec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::store::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[inline]
pub(crate) fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}
