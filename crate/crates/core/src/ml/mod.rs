//! Feature encoding, train/test splitting and the three regressors.

mod linear;
mod mlp;
mod tree;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use linear::{fit_linear, LinearModel, RIDGE_FALLBACK};
pub use mlp::{mlp_train, AdamState, Mlp, MlpFit, MlpSpec, TrainParams};
pub use tree::{fit_tree, Node, TreeModel, TreeParams};

use crate::enrich::EnrichedSample;
use crate::error::{Error, Result};
use crate::road_network::RoadType;

pub trait Regressor {
    fn input_dim(&self) -> usize;

    /// Prediction for one row; the caller guarantees the dimension.
    fn predict_row(&self, x: &[f64]) -> f64;

    fn predict(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        rows.iter()
            .map(|r| {
                if r.len() != self.input_dim() {
                    return Err(Error::DimensionMismatch {
                        expected: self.input_dim(),
                        got: r.len(),
                    });
                }
                Ok(self.predict_row(r))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct WeatherSelection {
    pub temperature: bool,
    pub humidity: bool,
    pub visibility: bool,
    pub wind_speed: bool,
    pub precipitation: bool,
}

impl WeatherSelection {
    pub const ALL: WeatherSelection = WeatherSelection {
        temperature: true,
        humidity: true,
        visibility: true,
        wind_speed: true,
        precipitation: true,
    };

    pub fn flags(&self) -> [bool; 5] {
        [
            self.temperature,
            self.humidity,
            self.visibility,
            self.wind_speed,
            self.precipitation,
        ]
    }

    pub fn count(&self) -> usize {
        self.flags().iter().filter(|f| **f).count()
    }

    pub fn any(&self) -> bool {
        self.count() > 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrafficSelection {
    pub speed_ratio: bool,
    pub jam_factor: bool,
}

impl TrafficSelection {
    pub const ALL: TrafficSelection = TrafficSelection {
        speed_ratio: true,
        jam_factor: true,
    };

    pub fn count(&self) -> usize {
        self.speed_ratio as usize + self.jam_factor as usize
    }

    pub fn any(&self) -> bool {
        self.count() > 0
    }
}

const WEATHER_COLUMNS: [&str; 5] = ["temp", "humidity", "visibility", "wind_speed", "precip"];

/// Which predictor groups to encode, in this fixed column order: distance,
/// road-type one-hot, elevation change, weather, traffic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub distance: bool,
    pub road_type: bool,
    /// 14 named road types, or 15 with an explicit `unknown` slot.
    pub road_type_slots: usize,
    pub elevation: bool,
    pub weather: WeatherSelection,
    pub traffic: TrafficSelection,
    /// Standardise continuous columns with training-set statistics.
    pub standardize: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig::all()
    }
}

impl FeatureConfig {
    pub fn all() -> FeatureConfig {
        FeatureConfig {
            distance: true,
            road_type: true,
            road_type_slots: RoadType::NAMED.len(),
            elevation: true,
            weather: WeatherSelection::ALL,
            traffic: TrafficSelection::ALL,
            standardize: true,
        }
    }

    /// Distance, road type, elevation, temperature, visibility,
    /// precipitation, speed ratio and jam factor.
    pub fn diesel_best() -> FeatureConfig {
        FeatureConfig {
            weather: WeatherSelection {
                temperature: true,
                visibility: true,
                precipitation: true,
                ..WeatherSelection::default()
            },
            ..FeatureConfig::all()
        }
    }

    /// The diesel set plus humidity and wind speed.
    pub fn electric_best() -> FeatureConfig {
        FeatureConfig::all()
    }

    /// Only distance and road type; the base every ablation subset builds on.
    pub fn base() -> FeatureConfig {
        FeatureConfig {
            elevation: false,
            weather: WeatherSelection::default(),
            traffic: TrafficSelection::default(),
            ..FeatureConfig::all()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = RoadType::NAMED.len();
        if self.road_type_slots != named && self.road_type_slots != named + 1 {
            return Err(Error::Config(format!(
                "road_type_slots must be {named} or {}, got {}",
                named + 1,
                self.road_type_slots
            )));
        }
        if self.dimension() == 0 {
            return Err(Error::Config("feature config enables no groups".into()));
        }
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        self.distance as usize
            + if self.road_type { self.road_type_slots } else { 0 }
            + self.elevation as usize
            + self.weather.count()
            + self.traffic.count()
    }

    pub fn columns(&self) -> Vec<String> {
        let mut cols = Vec::with_capacity(self.dimension());
        if self.distance {
            cols.push("distance_m".to_string());
        }
        if self.road_type {
            cols.extend(RoadType::NAMED.iter().map(|t| format!("road_{t}")));
            if self.road_type_slots > RoadType::NAMED.len() {
                cols.push(format!("road_{}", RoadType::Unknown));
            }
        }
        if self.elevation {
            cols.push("elevation_delta_m".to_string());
        }
        for (name, on) in WEATHER_COLUMNS.iter().zip(self.weather.flags()) {
            if on {
                cols.push(name.to_string());
            }
        }
        if self.traffic.speed_ratio {
            cols.push("speed_ratio".to_string());
        }
        if self.traffic.jam_factor {
            cols.push("jam_factor".to_string());
        }
        cols
    }

    /// True for every column except the road-type one-hot block.
    pub fn continuous_mask(&self) -> Vec<bool> {
        let mut mask = vec![true; self.dimension()];
        if self.road_type {
            let start = self.distance as usize;
            for m in &mut mask[start..start + self.road_type_slots] {
                *m = false;
            }
        }
        mask
    }

    /// Range of the one-hot block within a row, if encoded.
    pub fn one_hot_range(&self) -> Option<std::ops::Range<usize>> {
        self.road_type.then(|| {
            let start = self.distance as usize;
            start..start + self.road_type_slots
        })
    }
}

/// What the regression target measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetUnit {
    #[default]
    Joules,
    /// State-of-charge drop in percentage points.
    DeltaSocPct,
    Gallons,
}

impl TargetUnit {
    pub fn as_str(self) -> &'static str {
        match self {
            TargetUnit::Joules => "joules",
            TargetUnit::DeltaSocPct => "delta_soc_pct",
            TargetUnit::Gallons => "gallons",
        }
    }
}

impl fmt::Display for TargetUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Encoded predictors and targets, one row per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    /// Sample keys, for diagnostics and exports.
    pub keys: Vec<String>,
    pub target_unit: TargetUnit,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            columns: self.columns.clone(),
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
            targets: idx.iter().map(|&i| self.targets[i]).collect(),
            keys: idx.iter().map(|&i| self.keys[i].clone()).collect(),
            target_unit: self.target_unit,
        }
    }

    /// CSV with a `sample` key column, the feature columns and `target`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["sample".to_string()];
        header.extend(self.columns.iter().cloned());
        header.push("target".to_string());
        w.write_record(&header)?;
        for ((key, row), t) in self.keys.iter().zip(&self.rows).zip(&self.targets) {
            let mut rec = vec![key.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            rec.push(t.to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<dataset writer>", e))?;
        Ok(())
    }
}

fn target_of(s: &EnrichedSample, unit: TargetUnit) -> Result<f64> {
    match unit {
        TargetUnit::Joules | TargetUnit::Gallons => Ok(s.sample.energy),
        TargetUnit::DeltaSocPct => s.sample.delta_soc.ok_or_else(|| Error::MissingEnrichment {
            sample: s.sample.key(),
            group: "delta_soc",
        }),
    }
}

/// Encodes samples into fixed-width rows in `cfg.columns()` order.
pub fn encode(samples: &[EnrichedSample], cfg: &FeatureConfig, unit: TargetUnit) -> Result<Dataset> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len());
    let mut keys = Vec::with_capacity(samples.len());
    for s in samples {
        let missing = |group| Error::MissingEnrichment {
            sample: s.sample.key(),
            group,
        };
        let mut row = Vec::with_capacity(cfg.dimension());
        if cfg.distance {
            row.push(s.sample.distance);
        }
        if cfg.road_type {
            let slot = s.road_type.slot();
            if slot >= cfg.road_type_slots {
                return Err(Error::InvalidInput(format!(
                    "sample {} has road type `{}` with no one-hot slot; enable the unknown slot",
                    s.sample.key(),
                    s.road_type
                )));
            }
            row.extend((0..cfg.road_type_slots).map(|k| if k == slot { 1.0 } else { 0.0 }));
        }
        if cfg.elevation {
            row.push(s.elevation_delta.ok_or_else(|| missing("elevation"))?);
        }
        if cfg.weather.any() {
            let w = s.weather.ok_or_else(|| missing("weather"))?.as_array();
            row.extend(w.iter().zip(cfg.weather.flags()).filter(|(_, on)| *on).map(|(v, _)| *v));
        }
        if cfg.traffic.any() {
            let t = s.traffic.ok_or_else(|| missing("traffic"))?;
            if cfg.traffic.speed_ratio {
                row.push(t.speed_ratio);
            }
            if cfg.traffic.jam_factor {
                row.push(t.jam_factor);
            }
        }
        let target = target_of(s, unit)?;
        if let Some(bad) = row.iter().chain(std::iter::once(&target)).find(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("sample {} encodes a non-finite value {bad}", s.sample.key())));
        }
        rows.push(row);
        targets.push(target);
        keys.push(s.sample.key());
    }
    Ok(Dataset {
        columns: cfg.columns(),
        rows,
        targets,
        keys,
        target_unit: unit,
    })
}

/// Seeded random partition of `0..n` into train and test index sets, both
/// returned in ascending order. The train side has `ceil(fraction * n)`
/// rows, kept within `1..n`.
pub fn split(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 rows to split, got {n}")));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction must lie in (0, 1), got {train_fraction}")));
    }
    let n_train = ((train_fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n - 1);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = perm[..n_train].to_vec();
    let mut test = perm[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Per-column centring and scaling fitted on training rows only; columns
/// outside the mask pass through unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub mask: Vec<bool>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>], mask: &[bool]) -> Standardizer {
        let d = mask.len();
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let mut scale: Vec<f64> = var.iter().map(|v| if *v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        for (k, on) in mask.iter().enumerate() {
            if !on {
                mean[k] = 0.0;
                scale[k] = 1.0;
            }
        }
        Standardizer {
            mean,
            scale,
            mask: mask.to_vec(),
        }
    }

    pub fn transform_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn transform(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| self.transform_row(r)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

pub fn evaluate(predictions: &[f64], targets: &[f64]) -> Result<Metrics> {
    if predictions.len() != targets.len() {
        return Err(Error::DimensionMismatch {
            expected: targets.len(),
            got: predictions.len(),
        });
    }
    if targets.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate on an empty test set".into()));
    }
    let n = targets.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (p, y) in predictions.iter().zip(targets) {
        se += (p - y).powi(2);
        ae += (p - y).abs();
    }
    Ok(Metrics {
        mse: se / n,
        mae: ae / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    Tree,
    Mlp,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Linear, ModelKind::Tree, ModelKind::Mlp];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Linear => "linear",
            ModelKind::Tree => "tree",
            ModelKind::Mlp => "mlp",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" | "lr" => Ok(ModelKind::Linear),
            "tree" | "dt" => Ok(ModelKind::Tree),
            "mlp" | "ann" => Ok(ModelKind::Mlp),
            other => Err(Error::Config(format!("unknown model kind `{other}`"))),
        }
    }
}

/// Model family plus the hyperparameters of every family, so one spec can
/// drive a model comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub tree: TreeParams,
    pub mlp: MlpSpec,
    pub train: TrainParams,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            tree: TreeParams::default(),
            mlp: MlpSpec::electric(),
            train: TrainParams::default(),
        }
    }
}

impl ModelSpec {
    pub fn with_kind(&self, kind: ModelKind) -> ModelSpec {
        ModelSpec { kind, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Model {
    Linear(LinearModel),
    Tree(TreeModel),
    Mlp(Mlp),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Linear(_) => ModelKind::Linear,
            Model::Tree(_) => ModelKind::Tree,
            Model::Mlp(_) => ModelKind::Mlp,
        }
    }
}

impl Regressor for Model {
    fn input_dim(&self) -> usize {
        match self {
            Model::Linear(m) => m.input_dim(),
            Model::Tree(m) => m.input_dim(),
            Model::Mlp(m) => m.input_dim(),
        }
    }

    fn predict_row(&self, x: &[f64]) -> f64 {
        match self {
            Model::Linear(m) => m.predict_row(x),
            Model::Tree(m) => m.predict_row(x),
            Model::Mlp(m) => m.predict_row(x),
        }
    }
}

/// Fits one model on already-transformed rows. Returns the model and the
/// per-epoch loss history (empty for closed-form fits).
pub fn fit_model(spec: &ModelSpec, x: &[Vec<f64>], y: &[f64], seed: u64) -> Result<(Model, Vec<f64>)> {
    if y.is_empty() {
        return Err(Error::InvalidInput("cannot train on an empty dataset".into()));
    }
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    Ok(match spec.kind {
        ModelKind::Linear => (Model::Linear(fit_linear(x, y)), Vec::new()),
        ModelKind::Tree => (Model::Tree(fit_tree(x, y, spec.tree)), Vec::new()),
        ModelKind::Mlp => {
            let fit = mlp_train(x, y, &spec.mlp, spec.train, seed)?;
            (Model::Mlp(fit.model), fit.loss_history)
        }
    })
}

/// A fitted model together with everything needed to reproduce its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub model: Model,
    pub feature_config: FeatureConfig,
    pub columns: Vec<String>,
    pub standardizer: Option<Standardizer>,
    pub target_unit: TargetUnit,
    pub config_hash: String,
    pub seed: u64,
    pub loss_history: Vec<f64>,
}

impl TrainedModel {
    /// Predictions for raw (unstandardised) encoded rows.
    pub fn predict(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        match &self.standardizer {
            Some(s) => self.model.predict(&s.transform(rows)),
            None => self.model.predict(rows),
        }
    }
}

/// Outcome of fitting on the train side of a split and scoring on the test
/// side.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub trained: TrainedModel,
    pub train_metrics: Metrics,
    pub test_metrics: Metrics,
    pub train_rows: usize,
    pub test_rows: usize,
}

/// Fits `spec` on `train` indices of `data` and evaluates on `test`.
pub fn fit_and_score(
    data: &Dataset,
    cfg: &FeatureConfig,
    spec: &ModelSpec,
    train: &[usize],
    test: &[usize],
    seed: u64,
    config_hash: &str,
) -> Result<Scored> {
    let tr = data.subset(train);
    let te = data.subset(test);
    let standardizer = cfg
        .standardize
        .then(|| Standardizer::fit(&tr.rows, &cfg.continuous_mask()));
    let x_train = match &standardizer {
        Some(s) => s.transform(&tr.rows),
        None => tr.rows.clone(),
    };
    let (model, loss_history) = fit_model(spec, &x_train, &tr.targets, seed)?;
    let trained = TrainedModel {
        model,
        feature_config: *cfg,
        columns: data.columns.clone(),
        standardizer,
        target_unit: data.target_unit,
        config_hash: config_hash.to_string(),
        seed,
        loss_history,
    };
    let train_metrics = evaluate(&trained.predict(&tr.rows)?, &tr.targets)?;
    let test_metrics = evaluate(&trained.predict(&te.rows)?, &te.targets)?;
    for m in [train_metrics, test_metrics] {
        if !m.mse.is_finite() || !m.mae.is_finite() {
            return Err(Error::Numerical(format!("{} produced non-finite metrics", spec.kind)));
        }
    }
    Ok(Scored {
        trained,
        train_metrics,
        test_metrics,
        train_rows: tr.len(),
        test_rows: te.len(),
    })
}
