// SPDX-License-Identifier: MIT OR Apache-2.0

//! Config-driven runs: feature extraction, coefficient scans, assessments
//! and steering sweeps, each written to `runs/<timestamp>/` with a manifest
//! that can replay it.
//!
//! The config is a single TOML document. Relative paths inside it resolve
//! against the directory holding the config file.
//!
//! ```toml
//! seed = 7
//! output_dir = "out"
//! sae = "saes/toy.json"
//! registry = "registries/toy.json"
//!
//! [model]
//! checkpoint = "toy.json"          # or a [model.toy] table
//!
//! [profile]
//! preset = "gemma-2-9b-it"          # optional; any field below overrides it
//! layer = 1
//! sae_coefficient = 4.0
//! pressure_coefficient = 1.8
//!
//! [items]
//! personality = "personality.jsonl"
//! safety = "safety.jsonl"
//!
//! [[directions]]
//! pressure = "Trust"
//! path = "directions/trust.json"
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assessment::{
    format_score, load_items, run_inventory, AssessmentItem, PromptTemplate, SafetyScores, Subscale,
    SubscaleReport, Suite,
};
use crate::background::{
    build_factor_registry, parse_factor_specs, FactorRegistry, PlaceholderExplainer, RegistryBuildConfig,
};
use crate::error::{Error, Result};
use crate::feature::FeatureVector;
use crate::model::{ModelHandle, ToyModel, ToyModelConfig};
use crate::pressure::{extract_pressure_direction, load_contrast_pairs, DirectionResult};
use crate::sae::{SaeModel, SaeTrainConfig};
use crate::steering::{
    coefficient_scan, linear_grid, select_coefficient, LikelihoodCurve, OverSteerConfig, PositionRule,
    SteeringHook,
};
use crate::store::{self, RunContext, RunManifest, StoreLayout};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl Grid {
    pub fn points(&self) -> Result<Vec<f64>> {
        if !(self.step > 0.0 && self.stop >= self.start) {
            return Err(Error::InvalidConfig(format!(
                "grid needs step > 0 and stop >= start (got {self:?})"
            )));
        }
        Ok(linear_grid(self.start, self.stop, self.step))
    }
}

/// Layer, coefficients and scan grids for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub name: String,
    pub layer: usize,
    pub sae_coefficient: f64,
    pub pressure_coefficient: f64,
    pub sae_grid: Grid,
    pub pressure_grid: Grid,
}

const SAE_GRID: Grid = Grid {
    start: 0.0,
    stop: 2000.0,
    step: 100.0,
};
const PRESSURE_GRID: Grid = Grid {
    start: 0.0,
    stop: 10.0,
    step: 0.2,
};

impl ModelProfile {
    pub fn gemma_2b_it() -> Self {
        Self {
            name: "gemma-2b-it".into(),
            layer: 12,
            sae_coefficient: 200.0,
            pressure_coefficient: 1.6,
            sae_grid: SAE_GRID,
            pressure_grid: PRESSURE_GRID,
        }
    }

    pub fn gemma_2_9b_it() -> Self {
        Self {
            name: "gemma-2-9b-it".into(),
            layer: 31,
            sae_coefficient: 800.0,
            pressure_coefficient: 1.8,
            sae_grid: SAE_GRID,
            pressure_grid: PRESSURE_GRID,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "gemma-2b-it" => Ok(Self::gemma_2b_it()),
            "gemma-2-9b-it" => Ok(Self::gemma_2_9b_it()),
            _ => Err(Error::Missing {
                kind: "profile preset",
                name: name.to_string(),
            }),
        }
    }
}

/// `[profile]` as written: a preset plus overrides.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSpec {
    pub preset: Option<String>,
    pub name: Option<String>,
    pub layer: Option<usize>,
    pub sae_coefficient: Option<f64>,
    pub pressure_coefficient: Option<f64>,
    pub sae_grid: Option<Grid>,
    pub pressure_grid: Option<Grid>,
}

impl ProfileSpec {
    pub fn resolve(&self) -> Result<ModelProfile> {
        let base = self.preset.as_deref().map(ModelProfile::preset).transpose()?;
        let missing = |field: &str| Error::InvalidConfig(format!("profile.{field} is required without a preset"));
        let pick = |v: Option<f64>, b: Option<f64>, field: &str| v.or(b).ok_or_else(|| missing(field));
        let profile = ModelProfile {
            name: self
                .name
                .clone()
                .or_else(|| base.as_ref().map(|b| b.name.clone()))
                .unwrap_or_else(|| "custom".into()),
            layer: self
                .layer
                .or(base.as_ref().map(|b| b.layer))
                .ok_or_else(|| missing("layer"))?,
            sae_coefficient: pick(self.sae_coefficient, base.as_ref().map(|b| b.sae_coefficient), "sae_coefficient")?,
            pressure_coefficient: pick(
                self.pressure_coefficient,
                base.as_ref().map(|b| b.pressure_coefficient),
                "pressure_coefficient",
            )?,
            sae_grid: self.sae_grid.unwrap_or(SAE_GRID),
            pressure_grid: self.pressure_grid.unwrap_or(PRESSURE_GRID),
        };
        if !(profile.sae_coefficient.is_finite() && profile.pressure_coefficient.is_finite()) {
            return Err(Error::NonFinite("profile coefficients"));
        }
        Ok(profile)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub checkpoint: Option<PathBuf>,
    pub toy: Option<ToyModelConfig>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItemFiles {
    pub personality: Option<PathBuf>,
    pub safety: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectionEntry {
    pub pressure: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepOptions {
    /// Registry features averaged per category; 1 steers with the top one.
    pub top_k: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self { top_k: 1 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundOptions {
    pub factors: Option<PathBuf>,
    #[serde(default)]
    pub search: RegistryBuildConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PressureOptions {
    pub pairs: Option<PathBuf>,
    /// JSON list of question strings.
    pub questions: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanOptions {
    pub max_tokens: usize,
    pub stability_window: usize,
    pub over_steer: OverSteerConfig,
    /// Item used as the probe; defaults to the first item by id.
    pub probe_item: Option<String>,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self {
            max_tokens: 16,
            stability_window: 3,
            over_steer: OverSteerConfig::default(),
            probe_item: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    /// Text files (one phrase per line) or JSON phrase lists whose
    /// residuals make up the training set; empty uses every configured
    /// factor phrase and question.
    #[serde(default)]
    pub corpus: Vec<PathBuf>,
    #[serde(default)]
    pub config: SaeTrainConfig,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            corpus: Vec::new(),
            config: SaeTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: ModelSection,
    pub profile: ProfileSpec,
    pub sae: Option<PathBuf>,
    pub registry: Option<PathBuf>,
    #[serde(default)]
    pub directions: Vec<DirectionEntry>,
    #[serde(default)]
    pub items: ItemFiles,
    #[serde(default)]
    pub template: PromptTemplate,
    #[serde(default)]
    pub sweep: SweepOptions,
    #[serde(default)]
    pub background: BackgroundOptions,
    #[serde(default)]
    pub pressure: PressureOptions,
    #[serde(default)]
    pub scan: ScanOptions,
    #[serde(default)]
    pub train: TrainOptions,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::schema("config", e.to_string()))
    }

    /// Parses `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        config.resolve_paths(&base);
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let fix_opt = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                fix(p);
            }
        };
        fix(&mut self.output_dir);
        fix_opt(&mut self.model.checkpoint);
        fix_opt(&mut self.sae);
        fix_opt(&mut self.registry);
        fix_opt(&mut self.items.personality);
        fix_opt(&mut self.items.safety);
        fix_opt(&mut self.background.factors);
        fix_opt(&mut self.pressure.pairs);
        fix_opt(&mut self.pressure.questions);
        self.directions.iter_mut().for_each(|d| fix(&mut d.path));
        self.train.corpus.iter_mut().for_each(fix);
    }

    pub fn item_file(&self, suite: Suite) -> Result<&Path> {
        let (path, name) = match suite {
            Suite::Personality => (&self.items.personality, "items.personality"),
            Suite::Safety => (&self.items.safety, "items.safety"),
        };
        path.as_deref().ok_or_else(|| Error::Missing {
            kind: "config entry",
            name: name.into(),
        })
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

/// One steered column of a sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub name: String,
    /// Aligned with [`SweepResult::rows`].
    pub scores: Vec<f64>,
}

/// Subscale × condition table plus the unsteered base column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub title: String,
    pub suite: Suite,
    pub profile: String,
    pub coefficient: f64,
    pub rows: Vec<String>,
    pub base: Vec<f64>,
    pub conditions: Vec<Condition>,
    /// Per row, the condition with the largest rounded |delta|; ties go to
    /// the earlier condition.
    pub highlight: Vec<Option<usize>>,
}

impl SweepResult {
    pub fn new(
        title: impl Into<String>,
        suite: Suite,
        profile: impl Into<String>,
        coefficient: f64,
        rows: Vec<String>,
        base: Vec<f64>,
        conditions: Vec<Condition>,
    ) -> Result<Self> {
        if base.len() != rows.len() {
            return Err(Error::DimensionMismatch {
                context: "base scores per row",
                expected: rows.len(),
                actual: base.len(),
            });
        }
        for c in &conditions {
            if c.scores.len() != rows.len() {
                return Err(Error::DimensionMismatch {
                    context: "condition scores per row",
                    expected: rows.len(),
                    actual: c.scores.len(),
                });
            }
        }
        let mut result = Self {
            title: title.into(),
            suite,
            profile: profile.into(),
            coefficient,
            rows,
            base,
            conditions,
            highlight: Vec::new(),
        };
        result.highlight = (0..result.rows.len())
            .map(|r| {
                let mut best: Option<(usize, i64)> = None;
                for c in 0..result.conditions.len() {
                    let d = result.cell(r, c).delta_tenths();
                    if best.is_none_or(|(_, b)| d > b) {
                        best = Some((c, d));
                    }
                }
                best.map(|(c, _)| c)
            })
            .collect();
        Ok(result)
    }

    pub fn cell(&self, row: usize, condition: usize) -> SubscaleReport {
        SubscaleReport::new(
            self.rows[row].clone(),
            self.base[row],
            self.conditions[condition].scores[row],
        )
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty() || self.conditions.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Markdown,
    Csv,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Markdown => "md",
            ReportFormat::Csv => "csv",
        }
    }
}

/// Markdown table (bolded highlights, delta-formatted cells) or CSV with
/// raw numerics.
pub fn emit_report(result: &SweepResult, format: ReportFormat) -> Result<String> {
    if result.is_empty() {
        return Err(Error::EmptyInput("sweep result"));
    }
    match format {
        ReportFormat::Markdown => {
            let mut out = format!("### {}\n\n| Subscales | Base |", result.title);
            for c in &result.conditions {
                let _ = write!(out, " {} |", c.name);
            }
            out.push_str("\n| --- | --- |");
            out.push_str(&" --- |".repeat(result.conditions.len()));
            out.push('\n');
            for (r, row) in result.rows.iter().enumerate() {
                let _ = write!(out, "| {row} | {} |", format_score(result.base[r]));
                for c in 0..result.conditions.len() {
                    let cell = result.cell(r, c).cell();
                    if result.highlight[r] == Some(c) {
                        let _ = write!(out, " **{cell}** |");
                    } else {
                        let _ = write!(out, " {cell} |");
                    }
                }
                out.push('\n');
            }
            Ok(out)
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["subscale", "condition", "base", "steered", "delta", "direction", "highlight"])?;
            for r in 0..result.rows.len() {
                for c in 0..result.conditions.len() {
                    let cell = result.cell(r, c);
                    let direction = serde_json::to_value(cell.direction)?;
                    w.write_record([
                        cell.subscale.clone(),
                        result.conditions[c].name.clone(),
                        cell.base_score.to_string(),
                        cell.steered_score.to_string(),
                        cell.delta.to_string(),
                        direction.as_str().unwrap_or_default().to_string(),
                        (result.highlight[r] == Some(c)).to_string(),
                    ])?;
                }
            }
            let bytes = w.into_inner().map_err(|e| Error::io("<csv>", e.into_error()))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
    }
}

/// What to steer with during a scan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanTarget {
    Background { factor: String, category: String },
    Pressure { pressure: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Factor,
    Pressure,
}

/// A re-runnable command, stored in each run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Request {
    ExtractBackground,
    ExtractPressure,
    TrainSae,
    Scan { target: ScanTarget, suite: Suite },
    Assess { suite: Suite },
    Sweep { kind: SweepKind, factor: Option<String>, suite: Suite },
}

impl Request {
    pub fn name(&self) -> &'static str {
        match self {
            Request::ExtractBackground => "extract-background",
            Request::ExtractPressure => "extract-pressure",
            Request::TrainSae => "train-sae",
            Request::Scan { .. } => "scan",
            Request::Assess { .. } => "assess",
            Request::Sweep { .. } => "sweep",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub target: ScanTarget,
    pub probe_item: String,
    pub curve: LikelihoodCurve,
    pub generations: Vec<String>,
    pub over_steered: Vec<bool>,
    /// `None` when no grid point is admissible.
    pub selected: Option<f64>,
}

/// Finished run: where it went and what it wrote.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub manifest: RunManifest,
}

/// Loaded config plus model and lazily loaded inputs.
pub struct Experiment {
    config: ExperimentConfig,
    config_path: PathBuf,
    profile: ModelProfile,
    model: ModelHandle,
    items: HashMap<PathBuf, Vec<AssessmentItem>>,
    base: HashMap<(String, PathBuf), BTreeMap<Subscale, f64>>,
    sae: Option<SaeModel>,
    registry: Option<FactorRegistry>,
    /// Files read so far, recorded in the manifest.
    inputs: Vec<PathBuf>,
}

impl std::fmt::Debug for Experiment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Experiment")
            .field("config_path", &self.config_path)
            .field("profile", &self.profile.name)
            .field("model", &self.model)
            .finish()
    }
}

impl Experiment {
    pub fn load(config_path: &Path, overrides: &Overrides) -> Result<Self> {
        let mut config = ExperimentConfig::load(config_path)?;
        if let Some(seed) = overrides.seed {
            config.seed = seed;
        }
        if let Some(dir) = &overrides.output_dir {
            config.output_dir = dir.clone();
        }
        Self::new(config, config_path.to_path_buf())
    }

    pub fn new(config: ExperimentConfig, config_path: PathBuf) -> Result<Self> {
        let profile = config.profile.resolve()?;
        let mut inputs = Vec::new();
        let toy = match (&config.model.checkpoint, &config.model.toy) {
            (Some(path), _) => {
                inputs.push(path.clone());
                ToyModel::load(path)?
            }
            (None, Some(toy)) => ToyModel::new(toy.clone())?,
            (None, None) => ToyModel::new(ToyModelConfig {
                seed: config.seed,
                ..ToyModelConfig::default()
            })?,
        };
        let model = ModelHandle::new(toy);
        model.check_layer(profile.layer)?;
        Ok(Self {
            config,
            config_path,
            profile,
            model,
            items: HashMap::new(),
            base: HashMap::new(),
            sae: None,
            registry: None,
            inputs,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn profile(&self) -> &ModelProfile {
        &self.profile
    }

    pub fn model(&self) -> &ModelHandle {
        &self.model
    }

    fn note_input(&mut self, path: &Path) {
        if !self.inputs.iter().any(|p| p == path) {
            self.inputs.push(path.to_path_buf());
        }
    }

    fn required<'a>(path: &'a Option<PathBuf>, name: &str) -> Result<&'a PathBuf> {
        path.as_ref().ok_or_else(|| Error::Missing {
            kind: "config entry",
            name: name.to_string(),
        })
    }

    pub fn sae(&mut self) -> Result<&SaeModel> {
        if self.sae.is_none() {
            let path = Self::required(&self.config.sae, "sae")?.clone();
            let sae = SaeModel::load(&path)?;
            if sae.layer() != self.profile.layer {
                return Err(Error::InvalidConfig(format!(
                    "SAE layer {} does not match profile layer {}",
                    sae.layer(),
                    self.profile.layer
                )));
            }
            self.note_input(&path);
            self.sae = Some(sae);
        }
        Ok(self.sae.as_ref().expect("just loaded"))
    }

    pub fn registry(&mut self) -> Result<&FactorRegistry> {
        if self.registry.is_none() {
            let manifest = self.sae()?.manifest().clone();
            let path = Self::required(&self.config.registry, "registry")?.clone();
            let registry = store::load_registry(&path, Some(&manifest))?;
            self.note_input(&path);
            self.registry = Some(registry);
        }
        Ok(self.registry.as_ref().expect("just loaded"))
    }

    pub fn items(&mut self, suite: Suite) -> Result<Vec<AssessmentItem>> {
        let path = self.config.item_file(suite)?.to_path_buf();
        if !self.items.contains_key(&path) {
            let items = load_items(&path)?;
            if let Some(bad) = items.iter().find(|i| i.subscale.suite() != suite) {
                return Err(Error::schema(
                    path.display().to_string(),
                    format!("item {:?} ({}) does not belong to the {suite:?} suite", bad.id, bad.subscale),
                ));
            }
            self.note_input(&path);
            self.items.insert(path.clone(), items);
        }
        Ok(self.items[&path].clone())
    }

    fn rows_for(suite: Suite, scores: &BTreeMap<Subscale, f64>) -> (Vec<String>, Vec<f64>) {
        let mut rows = Vec::new();
        let mut values = Vec::new();
        if suite == Suite::Safety {
            rows.push("Average".to_string());
            values.push(SafetyScores::from_categories(scores.clone()).average);
        }
        for (s, v) in scores {
            rows.push(s.name().to_string());
            values.push(*v);
        }
        (rows, values)
    }

    /// Per-subscale scores under `hooks`.
    pub fn scores(&mut self, suite: Suite, hooks: &[SteeringHook]) -> Result<BTreeMap<Subscale, f64>> {
        let items = self.items(suite)?;
        run_inventory(&self.model, &items, hooks, &self.config.template)
    }

    /// Unsteered scores, computed once per (profile, item file).
    pub fn base_scores(&mut self, suite: Suite) -> Result<BTreeMap<Subscale, f64>> {
        let key = (self.profile.name.clone(), self.config.item_file(suite)?.to_path_buf());
        if let Some(s) = self.base.get(&key) {
            return Ok(s.clone());
        }
        let s = self.scores(suite, &[])?;
        self.base.insert(key, s.clone());
        Ok(s)
    }

    /// Decoder direction for a registry category (top feature, or the mean
    /// of the top `k`). `None` when the category has no features.
    pub fn category_feature(&mut self, factor: &str, category: &str) -> Result<Option<FeatureVector>> {
        let top_k = self.config.sweep.top_k.max(1);
        let registry = self.registry()?;
        let cats = registry.factors.get(factor).ok_or_else(|| Error::Missing {
            kind: "factor",
            name: factor.to_string(),
        })?;
        let entries = cats.get(category).ok_or_else(|| Error::Missing {
            kind: "category",
            name: format!("{factor}/{category}"),
        })?;
        let picked: Vec<(String, usize)> = entries
            .iter()
            .take(top_k)
            .map(|(e, i)| (e.clone(), *i))
            .collect();
        if picked.is_empty() {
            return Ok(None);
        }
        let sae = self.sae()?;
        let mut feature = sae.feature_vector(picked[0].1)?.with_explanation(picked[0].0.clone());
        if picked.len() > 1 {
            for (_, idx) in &picked[1..] {
                let other = sae.feature_vector(*idx)?;
                feature.values.iter_mut().zip(&other.values).for_each(|(a, b)| *a += b);
            }
            let n = picked.len() as f64;
            feature.values.iter_mut().for_each(|a| *a /= n);
            feature.index = None;
        }
        Ok(Some(feature))
    }

    pub fn pressure_direction(&mut self, pressure: &str) -> Result<DirectionResult> {
        let entry = self
            .config
            .directions
            .iter()
            .find(|d| d.pressure == pressure)
            .ok_or_else(|| Error::Missing {
                kind: "direction for pressure",
                name: pressure.to_string(),
            })?
            .clone();
        if !entry.path.exists() {
            return Err(Error::Missing {
                kind: "direction file",
                name: entry.path.display().to_string(),
            });
        }
        let direction = store::load_direction(&entry.path)?;
        if direction.layer() != self.profile.layer {
            return Err(Error::InvalidConfig(format!(
                "direction for {pressure:?} was extracted at layer {} but the profile steers layer {}",
                direction.layer(),
                self.profile.layer
            )));
        }
        self.note_input(&entry.path);
        Ok(direction)
    }

    fn sweep(
        &mut self,
        title: String,
        suite: Suite,
        coefficient: f64,
        conditions: Vec<(String, SteeringHook)>,
    ) -> Result<SweepResult> {
        let base = self.base_scores(suite)?;
        let (rows, base_values) = Self::rows_for(suite, &base);
        let mut columns = Vec::with_capacity(conditions.len());
        for (name, hook) in conditions {
            let scores = self.scores(suite, std::slice::from_ref(&hook))?;
            let (steered_rows, values) = Self::rows_for(suite, &scores);
            debug_assert_eq!(steered_rows, rows);
            columns.push(Condition { name, scores: values });
        }
        SweepResult::new(title, suite, self.profile.name.clone(), coefficient, rows, base_values, columns)
    }

    /// One condition per category of `factor`, steering all but the last
    /// position with the category's registry feature.
    pub fn run_factor_sweep(&mut self, factor: &str, suite: Suite) -> Result<SweepResult> {
        let categories: Vec<String> = self
            .registry()?
            .factors
            .get(factor)
            .ok_or_else(|| Error::Missing {
                kind: "factor",
                name: factor.to_string(),
            })?
            .keys()
            .cloned()
            .collect();
        let (layer, c) = (self.profile.layer, self.profile.sae_coefficient);
        let mut conditions = Vec::new();
        for category in categories {
            match self.category_feature(factor, &category)? {
                Some(feature) => {
                    let hook = SteeringHook::with_rule(feature, c, layer, PositionRule::AllButLast)?;
                    conditions.push((category, hook));
                }
                None => log::warn!("{factor}/{category} has no registry feature; skipped"),
            }
        }
        if conditions.is_empty() {
            return Err(Error::Missing {
                kind: "registry features for factor",
                name: factor.to_string(),
            });
        }
        self.sweep(format!("{factor} ({suite:?})"), suite, c, conditions)
    }

    /// One condition per configured direction, steering the last position.
    pub fn run_pressure_sweep(&mut self, suite: Suite) -> Result<SweepResult> {
        let pressures: Vec<String> = self.config.directions.iter().map(|d| d.pressure.clone()).collect();
        if pressures.is_empty() {
            return Err(Error::Missing {
                kind: "config entry",
                name: "directions".into(),
            });
        }
        let (layer, c) = (self.profile.layer, self.profile.pressure_coefficient);
        let mut conditions = Vec::new();
        for p in pressures {
            let direction = self.pressure_direction(&p)?;
            let hook = SteeringHook::with_rule(direction.direction, c, layer, PositionRule::LastOnly)?;
            conditions.push((p, hook));
        }
        self.sweep(format!("Short-term pressures ({suite:?})"), suite, c, conditions)
    }

    fn scan_feature(&mut self, target: &ScanTarget) -> Result<(FeatureVector, Vec<f64>)> {
        match target {
            ScanTarget::Background { factor, category } => {
                let feature = self.category_feature(factor, category)?.ok_or_else(|| Error::Missing {
                    kind: "registry feature",
                    name: format!("{factor}/{category}"),
                })?;
                Ok((feature, self.profile.sae_grid.points()?))
            }
            ScanTarget::Pressure { pressure } => {
                let d = self.pressure_direction(pressure)?;
                Ok((d.direction, self.profile.pressure_grid.points()?))
            }
        }
    }

    /// Choice-logit curve and greedy generations over the profile grid,
    /// with the selected coefficient.
    pub fn scan(&mut self, target: &ScanTarget, suite: Suite) -> Result<ScanReport> {
        let (feature, grid) = self.scan_feature(target)?;
        let items = self.items(suite)?;
        let probe = match &self.config.scan.probe_item {
            Some(id) => items.iter().find(|i| &i.id == id).ok_or_else(|| Error::Missing {
                kind: "probe item",
                name: id.clone(),
            })?,
            None => &items[0],
        };
        let prompt = self.config.template.render(probe);
        let keys: Vec<&str> = probe.options.keys().map(String::as_str).collect();
        let layer = self.profile.layer;
        let curve = coefficient_scan(&self.model, &feature, layer, &grid, &prompt, &keys)?;
        let opts = self.config.scan.clone();
        let rule = PositionRule::default_for(feature.kind);
        let mut generations = Vec::with_capacity(grid.len());
        for &c in &grid {
            let hook = SteeringHook::with_rule(feature.clone(), c, layer, rule)?;
            generations.push(self.model.generate_with_hooks(&prompt, &[hook], opts.max_tokens)?);
        }
        let over_steered = generations.iter().map(|g| opts.over_steer.detect(g)).collect();
        let selected = match select_coefficient(&curve, &generations, &opts.over_steer, opts.stability_window) {
            Ok(c) => Some(c),
            Err(Error::NoAdmissibleCoefficient) => {
                log::warn!("no admissible coefficient on the grid");
                None
            }
            Err(e) => return Err(e),
        };
        Ok(ScanReport {
            target: target.clone(),
            probe_item: probe.id.clone(),
            curve,
            generations,
            over_steered,
            selected,
        })
    }

    pub fn extract_background(&mut self) -> Result<FactorRegistry> {
        let path = Self::required(&self.config.background.factors, "background.factors")?.clone();
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let specs = parse_factor_specs(&text)?;
        self.note_input(&path);
        let search = self.config.background.search;
        let model = self.model.clone();
        let sae = self.sae()?;
        build_factor_registry(&specs, sae, &model, &search, &PlaceholderExplainer)
    }

    pub fn load_questions(&mut self) -> Result<Vec<String>> {
        let path = Self::required(&self.config.pressure.questions, "pressure.questions")?.clone();
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let questions: Vec<String> =
            serde_json::from_str(&text).map_err(|e| Error::schema(path.display().to_string(), e.to_string()))?;
        self.note_input(&path);
        Ok(questions)
    }

    pub fn extract_pressure(&mut self) -> Result<Vec<DirectionResult>> {
        let path = Self::required(&self.config.pressure.pairs, "pressure.pairs")?.clone();
        let pairs = load_contrast_pairs(&path)?;
        self.note_input(&path);
        let questions = self.load_questions()?;
        pairs
            .iter()
            .map(|pair| extract_pressure_direction(pair, &questions, self.profile.layer, &self.model))
            .collect()
    }

    /// Residuals at the profile layer for every position of every corpus
    /// phrase.
    pub fn training_activations(&mut self) -> Result<Vec<Vec<f64>>> {
        let mut phrases = Vec::new();
        if self.config.train.corpus.is_empty() {
            if let Some(path) = self.config.background.factors.clone() {
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                phrases.extend(parse_factor_specs(&text)?.iter().flat_map(|s| s.all_phrases()));
                self.note_input(&path);
            }
            if self.config.pressure.questions.is_some() {
                phrases.extend(self.load_questions()?);
            }
        } else {
            for path in self.config.train.corpus.clone() {
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                match serde_json::from_str::<Vec<String>>(&text) {
                    Ok(list) => phrases.extend(list),
                    Err(_) => phrases.extend(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string)),
                }
                self.note_input(&path);
            }
        }
        if phrases.is_empty() {
            return Err(Error::EmptyInput("SAE training corpus"));
        }
        let layer = self.profile.layer;
        let layers = std::collections::BTreeSet::from([layer]);
        let mut out = Vec::new();
        for p in &phrases {
            let tokens = self.model.tokenize(p)?;
            let cap = self.model.forward_with_capture(&tokens, &layers)?;
            let cap = &cap[&layer];
            out.extend((0..tokens.len()).map(|t| cap.at(0, t).to_vec()));
        }
        Ok(out)
    }

    pub fn train_sae(&mut self) -> Result<SaeModel> {
        let acts = self.training_activations()?;
        let mut config = self.config.train.config.clone();
        config.layer = self.profile.layer;
        config.seed = self.config.seed;
        let (sae, report) = SaeModel::train(&acts, &config)?;
        log::info!(
            "trained SAE: held-out loss {:.6} -> {:.6}",
            report.initial_heldout_loss,
            report.final_heldout_loss
        );
        Ok(sae)
    }

    /// Runs `request` into a fresh `runs/<timestamp>/` directory and writes
    /// its manifest.
    pub fn execute(&mut self, request: &Request) -> Result<RunOutcome> {
        let layout = StoreLayout::new(&self.config.output_dir);
        let timestamp = store::timestamp_now();
        let run_dir = unique_dir(&layout.runs(), &timestamp);
        let mut artifacts = Vec::new();
        let mut put = |name: &str, bytes: &[u8]| -> Result<PathBuf> {
            let path = run_dir.join(name);
            store::write_atomic(&path, bytes)?;
            artifacts.push(path.clone());
            Ok(path)
        };
        match request {
            Request::ExtractBackground => {
                let registry = self.extract_background()?;
                put("registry.json", registry.to_json()?.as_bytes())?;
                let id = registry.sae_id.clone().unwrap_or_else(|| "registry".into());
                store::save_registry(&registry, &layout.registries().join(format!("{}.json", slug(&id))))?;
            }
            Request::ExtractPressure => {
                for d in self.extract_pressure()? {
                    let name = format!("{}.json", slug(d.pressure.as_deref().unwrap_or("direction")));
                    put(&format!("directions/{name}"), d.to_json()?.as_bytes())?;
                    store::save_direction(&d, &layout.directions().join(&name))?;
                }
            }
            Request::TrainSae => {
                let sae = self.train_sae()?;
                put("sae.json", sae.to_json()?.as_bytes())?;
                sae.save(&layout.saes().join(format!("{}.json", slug(sae.id()))))?;
            }
            Request::Scan { target, suite } => {
                let report = self.scan(target, *suite)?;
                put("scan_curve.csv", report.curve.to_csv_string()?.as_bytes())?;
                put("scan.json", pretty_json(&report)?.as_bytes())?;
            }
            Request::Assess { suite } => {
                let scores = self.base_scores(*suite)?;
                let (rows, values) = Self::rows_for(*suite, &scores);
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record(["subscale", "score"])?;
                for (r, v) in rows.iter().zip(&values) {
                    w.write_record([r.clone(), v.to_string()])?;
                }
                let bytes = w.into_inner().map_err(|e| Error::io("<csv>", e.into_error()))?;
                put("scores.csv", &bytes)?;
            }
            Request::Sweep { kind, factor, suite } => {
                let result = match kind {
                    SweepKind::Factor => {
                        let factor = factor.as_deref().ok_or_else(|| Error::Missing {
                            kind: "argument",
                            name: "factor".into(),
                        })?;
                        self.run_factor_sweep(factor, *suite)?
                    }
                    SweepKind::Pressure => self.run_pressure_sweep(*suite)?,
                };
                put("sweep.json", pretty_json(&result)?.as_bytes())?;
                put("report.md", emit_report(&result, ReportFormat::Markdown)?.as_bytes())?;
                put("report.csv", emit_report(&result, ReportFormat::Csv)?.as_bytes())?;
            }
        }
        let ctx = RunContext {
            command: request.name().to_string(),
            request: serde_json::to_value(request)?,
            config_path: self.config_path.clone(),
            seeds: BTreeMap::from([("seed".to_string(), self.config.seed)]),
            inputs: self.inputs.clone(),
            artifacts,
        };
        let manifest = store::write_manifest(&run_dir, &ctx, &timestamp)?;
        Ok(RunOutcome { run_dir, manifest })
    }
}

fn pretty_json(value: &impl Serialize) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Lower-case, dash-separated file stem.
pub fn slug(name: &str) -> String {
    let mut out = String::new();
    for c in name.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('-') && !out.is_empty() {
            out.push('-');
        }
    }
    while out.ends_with('-') {
        out.pop();
    }
    if out.is_empty() {
        out.push('x');
    }
    out
}

fn unique_dir(parent: &Path, stem: &str) -> PathBuf {
    let mut dir = parent.join(stem);
    let mut i = 1;
    while dir.exists() {
        dir = parent.join(format!("{stem}-{i}"));
        i += 1;
    }
    dir
}

/// Outcome of re-running a manifest.
#[derive(Debug, Clone)]
pub struct Replay {
    pub original: RunManifest,
    pub rerun: RunOutcome,
    /// Artifact file name → whether the re-run bytes match the recorded
    /// digest.
    pub artifacts: BTreeMap<String, bool>,
}

impl Replay {
    pub fn all_match(&self) -> bool {
        !self.artifacts.is_empty() && self.artifacts.values().all(|&m| m)
    }
}

/// Verifies a manifest's inputs, re-runs its request with the recorded
/// seed and compares every artifact by digest.
pub fn replay(manifest_path: &Path, output_dir: Option<&Path>) -> Result<Replay> {
    let original = store::load_manifest(manifest_path)?;
    original.verify_inputs()?;
    let request: Request = serde_json::from_value(original.request.clone())
        .map_err(|e| Error::schema("$.request", e.to_string()))?;
    let overrides = Overrides {
        seed: original.seeds.get("seed").copied(),
        output_dir: output_dir.map(Path::to_path_buf),
    };
    let mut exp = Experiment::load(&original.config_path, &overrides)?;
    let rerun = exp.execute(&request)?;
    let run_dir = manifest_path.parent().unwrap_or(Path::new(""));
    let mut artifacts = BTreeMap::new();
    for (path, digest) in &original.artifacts {
        let rel = path.strip_prefix(run_dir).unwrap_or(path);
        let key = rel.display().to_string();
        let fresh = rerun.run_dir.join(rel);
        let same = fresh.exists() && store::file_digest(&fresh)? == *digest;
        artifacts.insert(key, same);
    }
    Ok(Replay {
        original,
        rerun,
        artifacts,
    })
}

/// Loads a saved `sweep.json` and renders it.
pub fn render_report(sweep_json: &Path, format: ReportFormat) -> Result<String> {
    let text = fs::read_to_string(sweep_json).map_err(|e| Error::io(sweep_json, e))?;
    let result: SweepResult = serde_json::from_str(&text)?;
    emit_report(&result, format)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(base: Vec<f64>, conditions: Vec<(&str, Vec<f64>)>) -> SweepResult {
        let rows = (0..base.len()).map(|i| format!("row{i}")).collect();
        let conditions = conditions
            .into_iter()
            .map(|(n, s)| Condition {
                name: n.into(),
                scores: s,
            })
            .collect();
        SweepResult::new("t", Suite::Personality, "p", 1.0, rows, base, conditions).unwrap()
    }

    #[test]
    fn highlight_ties_go_to_first_condition() {
        let r = result(vec![50.0, 50.0], vec![("a", vec![49.0, 50.0]), ("b", vec![51.0, 50.0])]);
        assert_eq!(r.highlight, vec![Some(0), Some(0)]);
        let r = result(vec![50.0], vec![("a", vec![49.96]), ("b", vec![48.0])]);
        assert_eq!(r.highlight, vec![Some(1)]);
    }

    #[test]
    fn markdown_shape() {
        let r = result(vec![93.0], vec![("Female", vec![92.7]), ("Male", vec![93.0])]);
        let md = emit_report(&r, ReportFormat::Markdown).unwrap();
        assert!(md.contains("| row0 | 93.0 | **92.7 ↓ (0.3)** | 93.0 |"), "{md}");
        let csv = emit_report(&r, ReportFormat::Csv).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(1).unwrap().starts_with("row0,Female,93,92.7,0.3,down,true"));
    }

    #[test]
    fn empty_result_is_rejected() {
        let r = result(vec![1.0], vec![]);
        assert!(emit_report(&r, ReportFormat::Csv).is_err());
    }

    #[test]
    fn profile_presets_and_overrides() {
        let spec = ProfileSpec {
            preset: Some("gemma-2-9b-it".into()),
            layer: Some(1),
            ..Default::default()
        };
        let p = spec.resolve().unwrap();
        assert_eq!((p.layer, p.sae_coefficient, p.pressure_coefficient), (1, 800.0, 1.8));
        assert_eq!(p.sae_grid.points().unwrap().len(), 21);
        assert_eq!(p.pressure_grid.points().unwrap().len(), 51);
        assert_eq!(ModelProfile::gemma_2b_it().layer, 12);
        assert!(ProfileSpec::default().resolve().is_err());
    }

    #[test]
    fn slugs() {
        assert_eq!(slug("Achievement Striving"), "achievement-striving");
        assert_eq!(slug("  AI familiar degree!"), "ai-familiar-degree");
        assert_eq!(slug("***"), "x");
    }

    #[test]
    fn request_round_trips_through_json() {
        let r = Request::Sweep {
            kind: SweepKind::Factor,
            factor: Some("Gender".into()),
            suite: Suite::Safety,
        };
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["command"], "sweep");
        assert_eq!(serde_json::from_value::<Request>(v).unwrap(), r);
    }
}
