// SPDX-License-Identifier: MIT OR Apache-2.0

//! Residual-stream interventions, coefficient scans and over-steer checks.
//!
//! A hook adds `c · f` to the residual stream of one layer:
//!
//! * [`PositionRule::AllButLast`]: `R[:, :t-1, :] += c·f` (background features)
//! * [`PositionRule::LastOnly`]: `R[:, t-1, :] += c·f` (pressure features)

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::{FeatureKind, FeatureVector};
use crate::model::ModelHandle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionRule {
    AllButLast,
    LastOnly,
}

impl PositionRule {
    pub fn default_for(kind: FeatureKind) -> Self {
        match kind {
            FeatureKind::Background => PositionRule::AllButLast,
            FeatureKind::Pressure => PositionRule::LastOnly,
        }
    }

    /// Positions of a length-`t` sequence this rule writes to.
    pub fn positions(self, t: usize) -> std::ops::Range<usize> {
        match self {
            PositionRule::AllButLast => 0..t.saturating_sub(1),
            PositionRule::LastOnly => t.saturating_sub(1)..t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringHook {
    pub feature: FeatureVector,
    pub coefficient: f64,
    pub layer: usize,
    pub position_rule: PositionRule,
}

impl SteeringHook {
    /// Hook with the position rule implied by the feature's kind.
    pub fn new(feature: FeatureVector, coefficient: f64, layer: usize) -> Result<Self> {
        let rule = PositionRule::default_for(feature.kind);
        Self::with_rule(feature, coefficient, layer, rule)
    }

    pub fn with_rule(
        feature: FeatureVector,
        coefficient: f64,
        layer: usize,
        position_rule: PositionRule,
    ) -> Result<Self> {
        if !coefficient.is_finite() {
            return Err(Error::NonFinite("steering coefficient"));
        }
        Ok(Self {
            feature,
            coefficient,
            layer,
            position_rule,
        })
    }

    /// Adds `c · f` to the rule's positions of a flat `(t, d)` residual.
    /// A zero coefficient leaves the buffer untouched.
    pub fn apply(&self, residual: &mut [f64], seq_len: usize, d_model: usize) -> Result<()> {
        if self.feature.dim() != d_model {
            return Err(Error::DimensionMismatch {
                context: "steering feature vs d_model",
                expected: d_model,
                actual: self.feature.dim(),
            });
        }
        if residual.len() != seq_len * d_model {
            return Err(Error::DimensionMismatch {
                context: "residual buffer",
                expected: seq_len * d_model,
                actual: residual.len(),
            });
        }
        if self.coefficient == 0.0 {
            return Ok(());
        }
        let c = self.coefficient;
        for pos in self.position_rule.positions(seq_len) {
            let row = &mut residual[pos * d_model..(pos + 1) * d_model];
            for (r, f) in row.iter_mut().zip(&self.feature.values) {
                *r += c * f;
            }
        }
        Ok(())
    }
}

/// Validated hook construction against a concrete model.
pub fn make_hook(
    model: &ModelHandle,
    feature: FeatureVector,
    coefficient: f64,
    layer: usize,
) -> Result<SteeringHook> {
    model.check_layer(layer)?;
    if feature.dim() != model.d_model() {
        return Err(Error::DimensionMismatch {
            context: "steering feature vs d_model",
            expected: model.d_model(),
            actual: feature.dim(),
        });
    }
    SteeringHook::new(feature, coefficient, layer)
}

/// Choice-token logits as a function of steering coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodCurve {
    pub grid: Vec<f64>,
    pub logits: BTreeMap<String, Vec<f64>>,
    /// Argmax option at each grid point (ties go to the first option key).
    pub chosen: Vec<String>,
}

impl LikelihoodCurve {
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// Canonical CSV: `coefficient,option,logit`, grid-major.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["coefficient", "option", "logit"])?;
        for (i, c) in self.grid.iter().enumerate() {
            for (option, values) in &self.logits {
                w.write_record([c.to_string(), option.clone(), values[i].to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::EmptyInput("coefficient grid"));
    }
    if grid.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("coefficient grid"));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig(
            "coefficient grid must be strictly increasing".into(),
        ));
    }
    Ok(())
}

/// Evenly spaced grid `start, start + step, …` up to and including `stop`.
pub fn linear_grid(start: f64, stop: f64, step: f64) -> Vec<f64> {
    let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
    (0..n).map(|i| start + step * i as f64).collect()
}

/// Probes `options` at the end of `probe_prompt` under a hook with each
/// coefficient in `grid`.
pub fn coefficient_scan(
    model: &ModelHandle,
    feature: &FeatureVector,
    layer: usize,
    grid: &[f64],
    probe_prompt: &str,
    options: &[&str],
) -> Result<LikelihoodCurve> {
    check_grid(grid)?;
    if options.is_empty() {
        return Err(Error::EmptyInput("scan options"));
    }
    let mut logits: BTreeMap<String, Vec<f64>> = options
        .iter()
        .map(|o| (o.to_string(), Vec::with_capacity(grid.len())))
        .collect();
    let mut chosen = Vec::with_capacity(grid.len());
    for &c in grid {
        let hook = make_hook(model, feature.clone(), c, layer)?;
        let point = model.choice_logits(probe_prompt, options, std::slice::from_ref(&hook))?;
        let mut best: Option<(&String, f64)> = None;
        for (option, &value) in &point {
            logits.get_mut(option).expect("same option set").push(value);
            if best.is_none_or(|(_, b)| value > b) {
                best = Some((option, value));
            }
        }
        chosen.push(best.expect("options non-empty").0.clone());
    }
    Ok(LikelihoodCurve {
        grid: grid.to_vec(),
        logits,
        chosen,
    })
}

/// How generated text is split into tokens for repetition counting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenUnit {
    /// Whitespace-separated words.
    #[default]
    Word,
    /// Unicode scalar values (matches the character-level toy tokenizer).
    Char,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct OverSteerConfig {
    /// Longest n-gram considered.
    pub window: usize,
    /// An n-gram repeated back-to-back more than this many times over-steers.
    pub max_repeat: usize,
    #[serde(default)]
    pub unit: TokenUnit,
}

impl Default for OverSteerConfig {
    fn default() -> Self {
        Self {
            window: 3,
            max_repeat: 5,
            unit: TokenUnit::Word,
        }
    }
}

impl OverSteerConfig {
    pub fn detect(&self, text: &str) -> bool {
        match self.unit {
            TokenUnit::Word => over_steer_detect(text, self.window, self.max_repeat),
            TokenUnit::Char => {
                let chars: Vec<char> = text.chars().collect();
                has_consecutive_repeat(&chars, self.window, self.max_repeat)
            }
        }
    }
}

/// True iff some n-gram (n ≤ `window`) occurs more than `max_repeat` times
/// back to back.
pub fn has_consecutive_repeat<T: PartialEq>(tokens: &[T], window: usize, max_repeat: usize) -> bool {
    let len = tokens.len();
    for n in 1..=window.max(1) {
        if n * (max_repeat + 1) > len {
            break;
        }
        let mut i = 0;
        while i + n <= len {
            let gram = &tokens[i..i + n];
            let mut reps = 1;
            while i + (reps + 1) * n <= len && tokens[i + reps * n..i + (reps + 1) * n] == *gram {
                reps += 1;
            }
            if reps > max_repeat {
                return true;
            }
            // the run starting at i + 1 cannot be longer unless it shifts phase
            i += if reps > 1 { (reps - 1) * n } else { 1 };
        }
    }
    false
}

/// Degenerate-generation check over whitespace-separated words.
pub fn over_steer_detect(text: &str, window: usize, max_repeat: usize) -> bool {
    let words: Vec<&str> = text.split_whitespace().collect();
    has_consecutive_repeat(&words, window, max_repeat)
}

/// Largest grid coefficient whose generation is clean and whose chosen
/// option has been constant over the last `stability_window` grid points
/// ending at it. `generations[i]` is the text produced at `curve.grid[i]`.
pub fn select_coefficient(
    curve: &LikelihoodCurve,
    generations: &[String],
    over_steer: &OverSteerConfig,
    stability_window: usize,
) -> Result<f64> {
    if curve.is_empty() {
        return Err(Error::EmptyInput("likelihood curve"));
    }
    if generations.len() != curve.len() {
        return Err(Error::DimensionMismatch {
            context: "generations per grid point",
            expected: curve.len(),
            actual: generations.len(),
        });
    }
    let window = stability_window.max(1);
    (0..curve.len())
        .rev()
        .find(|&j| {
            let lo = (j + 1).saturating_sub(window);
            let stable = curve.chosen[lo..=j].iter().all(|c| *c == curve.chosen[j]);
            stable && !over_steer.detect(&generations[j])
        })
        .map(|j| curve.grid[j])
        .ok_or(Error::NoAdmissibleCoefficient)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(d: usize, i: usize, kind: FeatureKind) -> FeatureVector {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        FeatureVector::new(kind, 0, v)
    }

    #[test]
    fn default_rules_follow_feature_kind() {
        let b = SteeringHook::new(unit(2, 0, FeatureKind::Background), 1.0, 0).unwrap();
        let p = SteeringHook::new(unit(2, 0, FeatureKind::Pressure), 1.0, 0).unwrap();
        assert_eq!(b.position_rule, PositionRule::AllButLast);
        assert_eq!(p.position_rule, PositionRule::LastOnly);
    }

    #[test]
    fn last_only_adds_to_final_position_only() {
        let hook = SteeringHook::new(unit(3, 0, FeatureKind::Pressure), 2.0, 0).unwrap();
        let mut r = vec![1.0; 6];
        hook.apply(&mut r, 2, 3).unwrap();
        assert_eq!(r, vec![1.0, 1.0, 1.0, 3.0, 1.0, 1.0]);
    }

    #[test]
    fn all_but_last_on_single_token_is_noop() {
        let hook = SteeringHook::new(unit(3, 1, FeatureKind::Background), 5.0, 0).unwrap();
        let mut r = vec![0.5, -0.5, 0.25];
        hook.apply(&mut r, 1, 3).unwrap();
        assert_eq!(r, vec![0.5, -0.5, 0.25]);
    }

    #[test]
    fn zero_coefficient_preserves_negative_zero() {
        let hook = SteeringHook::new(unit(2, 0, FeatureKind::Background), 0.0, 0).unwrap();
        let mut r = vec![-0.0, 1.0, -0.0, 2.0];
        hook.apply(&mut r, 2, 2).unwrap();
        assert!(r[0].is_sign_negative());
    }

    #[test]
    fn non_finite_coefficient_rejected() {
        assert!(SteeringHook::new(unit(2, 0, FeatureKind::Background), f64::NAN, 0).is_err());
    }

    #[test]
    fn dimension_mismatch_on_apply() {
        let hook = SteeringHook::new(unit(2, 0, FeatureKind::Background), 1.0, 0).unwrap();
        let mut r = vec![0.0; 6];
        assert!(matches!(hook.apply(&mut r, 2, 3), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn repetition_boundaries() {
        assert!(!over_steer_detect("ab ab ab", 3, 5));
        assert!(!over_steer_detect("x x x x x", 3, 5));
        assert!(over_steer_detect("x x x x x x", 3, 5));
        assert!(over_steer_detect("go on go on go on go on go on go on", 3, 5));
        assert!(!over_steer_detect("", 3, 5));
        assert!(!over_steer_detect("The quick brown fox jumps over the lazy dog.", 3, 5));
    }

    #[test]
    fn phase_shifted_runs_are_found() {
        // run of "b c" starts at an odd offset
        let toks = ["a", "b", "c", "b", "c", "b", "c", "b", "c"];
        assert!(has_consecutive_repeat(&toks, 2, 3));
        assert!(!has_consecutive_repeat(&toks, 2, 4));
    }

    #[test]
    fn grid_validation() {
        assert!(check_grid(&[]).is_err());
        assert!(check_grid(&[0.0, 0.0]).is_err());
        assert!(check_grid(&[1.0, 0.0]).is_err());
        assert!(check_grid(&[0.0]).is_ok());
    }

    #[test]
    fn linear_grid_includes_endpoint() {
        let g = linear_grid(0.0, 2000.0, 100.0);
        assert_eq!(g.len(), 21);
        assert_eq!(g[20], 2000.0);
        let p = linear_grid(0.0, 10.0, 0.2);
        assert_eq!(p.len(), 51);
        assert!((p[50] - 10.0).abs() < 1e-9);
    }

    fn curve(grid: &[f64], chosen: &[&str]) -> LikelihoodCurve {
        LikelihoodCurve {
            grid: grid.to_vec(),
            logits: BTreeMap::new(),
            chosen: chosen.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn select_single_point_grid() {
        let c = curve(&[0.0], &["A"]);
        let g = vec!["fine text".to_string()];
        assert_eq!(select_coefficient(&c, &g, &OverSteerConfig::default(), 3).unwrap(), 0.0);
    }

    #[test]
    fn select_errors_when_everything_repeats() {
        let c = curve(&[0.0, 1.0], &["A", "A"]);
        let g = vec!["a a a a a a a".to_string(); 2];
        assert!(matches!(
            select_coefficient(&c, &g, &OverSteerConfig::default(), 3),
            Err(Error::NoAdmissibleCoefficient)
        ));
    }
}
