// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic ground truth for exercising the pipelines without real
//! checkpoints: planted sparse dictionaries for SAE training, clustered
//! activations for direction extraction, and hand-built SAEs with a known
//! detector feature for background search.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::model::ModelHandle;
use crate::sae::SaeModel;

fn gauss(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn random_unit(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| gauss(rng)).collect();
        let n = linalg::norm(&v);
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Activations built as sparse non-negative combinations of `k` unit
/// directions.
#[derive(Debug, Clone)]
pub struct PlantedDictionary {
    pub directions: Vec<Vec<f64>>,
    pub samples: Vec<Vec<f64>>,
}

impl PlantedDictionary {
    /// Each sample mixes between 1 and `max_active` distinct directions
    /// with coefficients drawn from `[0.5, 1.5)`.
    pub fn generate(d: usize, k: usize, n: usize, max_active: usize, seed: u64) -> Result<Self> {
        if d == 0 || k == 0 || n == 0 || max_active == 0 || max_active > k {
            return Err(Error::InvalidConfig(format!(
                "planted dictionary needs d, k, n > 0 and 1 <= max_active <= k (got d={d} k={k} n={n} max_active={max_active})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let directions: Vec<Vec<f64>> = (0..k).map(|_| random_unit(d, &mut rng)).collect();
        let samples = (0..n)
            .map(|_| {
                let s = rng.random_range(1..=max_active);
                let mut x = vec![0.0; d];
                for j in sample(&mut rng, k, s) {
                    let c: f64 = rng.random_range(0.5..1.5);
                    for (xi, di) in x.iter_mut().zip(&directions[j]) {
                        *xi += c * di;
                    }
                }
                x
            })
            .collect();
        Ok(Self { directions, samples })
    }

    /// For each planted direction, the best cosine against any SAE decoder
    /// row.
    pub fn recovery(&self, sae: &SaeModel) -> Vec<f64> {
        self.directions
            .iter()
            .map(|u| {
                (0..sae.m())
                    .map(|i| linalg::cosine(u, sae.w_dec().row(i)))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect()
    }
}

/// Mean number of non-zero SAE activations over `samples`.
pub fn mean_l0(sae: &SaeModel, samples: &[Vec<f64>]) -> Result<f64> {
    let mut total = 0usize;
    for z in samples {
        total += sae.encode(z)?.iter().filter(|&&a| a > 0.0).count();
    }
    Ok(total as f64 / samples.len() as f64)
}

/// Matched pairs whose differences point along `axis` (scaled by
/// `separation`) plus isotropic noise of scale `noise`. Returns
/// `(pos, neg)`.
pub fn two_clusters(
    axis: &[f64],
    separation: f64,
    noise: f64,
    n: usize,
    seed: u64,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = axis.len();
    let mut pos = Vec::with_capacity(n);
    let mut neg = Vec::with_capacity(n);
    for _ in 0..n {
        // shared per-pair offset, as a question would contribute
        let base: Vec<f64> = (0..d).map(|_| 2.0 * gauss(&mut rng)).collect();
        let jitter = |rng: &mut ChaCha8Rng| noise * gauss(rng);
        pos.push(
            base.iter()
                .zip(axis)
                .map(|(b, a)| b + 0.5 * separation * a + jitter(&mut rng))
                .collect(),
        );
        neg.push(
            base.iter()
                .zip(axis)
                .map(|(b, a)| b - 0.5 * separation * a + jitter(&mut rng))
                .collect(),
        );
    }
    (pos, neg)
}

/// Random `d × d` orthogonal matrix (QR of a Gaussian matrix).
pub fn random_orthogonal(d: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = nalgebra::DMatrix::<f64>::from_fn(d, d, |_, _| gauss(&mut rng));
    let q = g.qr().q();
    Matrix::from_fn(d, d, |r, c| q[(r, c)])
}

/// An SAE whose features are known by construction.
#[derive(Debug, Clone)]
pub struct PlantedBackground {
    pub sae: SaeModel,
    /// Fires on the home phrases only.
    pub home_feature: usize,
    /// Fires on every input.
    pub always_on_feature: usize,
    /// Home-phrase pooled activation is at least this large.
    pub margin: f64,
}

fn max_projection(positions: &[Vec<f64>], w: &[f64]) -> f64 {
    positions
        .iter()
        .map(|z| linalg::dot(z, w))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Builds an `m`-feature SAE at `layer` with a detector for `home` phrases.
///
/// The detector direction is picked from the residuals of the home phrases
/// themselves (plus their mean difference from the rest), keeping whichever
/// best separates "some position of every home phrase" from "every
/// position of every other phrase". Its bias sits halfway across the gap,
/// so it is silent on everything else, and scaled to a margin of 1. One feature has a zero encoder
/// column and bias 1 (always on); all remaining features are switched off
/// by a large negative bias.
pub fn planted_background(
    model: &ModelHandle,
    layer: usize,
    home: &[String],
    others: &[String],
    m: usize,
    seed: u64,
) -> Result<PlantedBackground> {
    model.check_layer(layer)?;
    let d = model.d_model();
    if m < d.max(2) {
        return Err(Error::InvalidConfig(format!("need m >= d (m = {m}, d = {d})")));
    }
    if home.is_empty() || others.is_empty() {
        return Err(Error::EmptyInput("planted phrase sets"));
    }
    let layers = BTreeSet::from([layer]);
    let residuals = |phrase: &str| -> Result<Vec<Vec<f64>>> {
        let tokens = model.tokenize(phrase)?;
        let cap = model.forward_with_capture(&tokens, &layers)?;
        let cap = &cap[&layer];
        Ok((0..tokens.len()).map(|t| cap.at(0, t).to_vec()).collect())
    };
    let home_pos: Vec<Vec<Vec<f64>>> = home.iter().map(|p| residuals(p)).collect::<Result<_>>()?;
    let other_pos: Vec<Vec<f64>> = others
        .iter()
        .map(|p| residuals(p))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let mean = |vs: &mut dyn Iterator<Item = &Vec<f64>>| {
        let mut acc = vec![0.0; d];
        let mut n = 0.0;
        for v in vs {
            acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
            n += 1.0;
        }
        acc.into_iter().map(|a| a / n).collect::<Vec<f64>>()
    };
    let mh = mean(&mut home_pos.iter().flatten());
    let mo = mean(&mut other_pos.iter());
    let mut candidates: Vec<Vec<f64>> = vec![mh.iter().zip(&mo).map(|(a, b)| a - b).collect()];
    candidates.extend(home_pos.iter().flatten().cloned());

    let mut best: Option<(Vec<f64>, f64, f64)> = None;
    for c in candidates {
        let n = linalg::norm(&c);
        if n < 1e-12 {
            continue;
        }
        let w: Vec<f64> = c.iter().map(|x| x / n).collect();
        let lo = home_pos
            .iter()
            .map(|ps| max_projection(ps, &w))
            .fold(f64::INFINITY, f64::min);
        let hi = max_projection(&other_pos, &w);
        let gap = lo - hi;
        if best.as_ref().is_none_or(|b| gap > b.1) {
            best = Some((w, gap, -(lo + hi) / 2.0));
        }
    }
    let (w, gap, bias) = best.ok_or(Error::EmptyInput("candidate detector directions"))?;
    if gap <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "no linear detector separates the home phrases (best gap {gap:.4})"
        )));
    }

    // rescale so every home phrase activates the detector by at least 1
    let scale = 2.0 / gap;
    let (w_det, bias): (Vec<f64>, f64) = (w.iter().map(|x| x * scale).collect(), bias * scale);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let home_feature = rng.random_range(0..m);
    let always_on_feature = (home_feature + 1 + rng.random_range(0..m - 1)) % m;
    let mut w_enc = Matrix::zeros(d, m);
    let mut b_enc = vec![-1e6; m];
    for j in 0..m {
        let col = if j == home_feature {
            w_det.clone()
        } else if j == always_on_feature {
            vec![0.0; d]
        } else {
            random_unit(d, &mut rng)
        };
        for (i, x) in col.into_iter().enumerate() {
            w_enc.set(i, j, x);
        }
    }
    b_enc[home_feature] = bias;
    b_enc[always_on_feature] = 1.0;
    let mut w_dec = Matrix::zeros(m, d);
    for j in 0..m {
        let row = if j == home_feature { w.clone() } else { random_unit(d, &mut rng) };
        w_dec.row_mut(j).copy_from_slice(&row);
    }
    let sae = SaeModel::new(layer, w_enc, w_dec, b_enc, vec![0.0; d])?.with_id(format!("planted-l{layer}-m{m}"));
    Ok(PlantedBackground {
        sae,
        home_feature,
        always_on_feature,
        margin: 1.0,
    })
}
