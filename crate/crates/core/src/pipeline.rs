//! End-to-end batch run: ingest, match, sample, enrich, encode, train.
//!
//! Every stage writes its output into the run directory and the run ends
//! with a manifest recording the config hash, seed and per-stage counts.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::enrich::{
    build_hourly_traffic, build_hourly_weather, enrich_samples, load_dem, load_tmc_geometry, write_enriched,
    EnrichContext, EnrichedSample, SpeedRatioMode, TmcOsmMapping, NEAREST_NODES,
};
use crate::error::{Error, Result};
use crate::geo::GeoPoint;
use crate::ingest::{
    estimate_electric_energy, fuel_delta, parse_telemetry, parse_traffic, parse_weather, remove_charging_points,
    remove_garage_points, split_by_vehicle, write_telemetry, GarageZone, HumidityScale, TelemetryPoint, VehicleKind,
};
use crate::map_match::{match_locations, DEFAULT_RADIUS_M, DEFAULT_WINDOW};
use crate::ml::{encode, fit_and_score, split, Dataset, FeatureConfig, Metrics, ModelSpec, Scored, TargetUnit};
use crate::road_network::{load_map, RoadMap, RoutingGraph};
use crate::sampler::{
    assign_distances, filter_erroneous, segment_samples, write_samples, SampleSet, SegmentParams,
    DEFAULT_GAP_THRESHOLD_S, DEFAULT_MIN_DELTA_SOC,
};

/// Input files. Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub telemetry: PathBuf,
    pub map: PathBuf,
    pub dem: Option<PathBuf>,
    pub weather: Option<PathBuf>,
    pub traffic: Option<PathBuf>,
    pub tmc_geometry: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub kind: VehicleKind,
    /// Depot polygon as `[lat, lon]` vertices; empty disables the filter.
    pub garage: Vec<[f64; 2]>,
    pub clamp_negative_fuel: bool,
    pub humidity_scale: HumidityScale,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            kind: VehicleKind::Electric,
            garage: Vec::new(),
            clamp_negative_fuel: true,
            humidity_scale: HumidityScale::Fraction,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatcherConfig {
    pub window: usize,
    pub radius_m: f64,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig {
            window: DEFAULT_WINDOW,
            radius_m: DEFAULT_RADIUS_M,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub gap_threshold_s: f64,
    /// Samples whose SoC change falls below this (percentage points) are
    /// discarded.
    pub min_delta_soc: f64,
    pub battery_capacity_j: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            gap_threshold_s: DEFAULT_GAP_THRESHOLD_S,
            min_delta_soc: DEFAULT_MIN_DELTA_SOC,
            battery_capacity_j: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnrichConfig {
    /// Fixed offset of local time from UTC, used for hour-of-week buckets.
    pub utc_offset_s: i32,
    pub k_nearest: usize,
    pub speed_ratio_mode: SpeedRatioMode,
}

impl Default for EnrichConfig {
    fn default() -> Self {
        EnrichConfig {
            utc_offset_s: 0,
            k_nearest: NEAREST_NODES,
            speed_ratio_mode: SpeedRatioMode::MeanOfRatios,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub target: TargetUnit,
    pub train_fraction: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            target: TargetUnit::Joules,
            train_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    #[serde(default)]
    pub ingest: IngestConfig,
    #[serde(default)]
    pub matcher: MatcherConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub enrich: EnrichConfig,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub training: TrainingConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        let kind = self.ingest.kind;
        let target = self.training.target;
        match (kind, target) {
            (VehicleKind::Diesel, TargetUnit::Gallons) => {}
            (VehicleKind::Electric, TargetUnit::Joules | TargetUnit::DeltaSocPct) => {}
            _ => {
                return Err(Error::Config(format!(
                    "target `{target}` does not apply to {kind:?} telemetry"
                )))
            }
        }
        if target == TargetUnit::DeltaSocPct && self.sampler.battery_capacity_j.is_none() {
            return Err(Error::Config("delta_soc_pct target requires sampler.battery_capacity_j".into()));
        }
        if let Some(c) = self.sampler.battery_capacity_j {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("battery capacity must be positive, got {c}")));
            }
        }
        if !(self.matcher.radius_m > 0.0) {
            return Err(Error::Config(format!("matcher radius must be positive, got {}", self.matcher.radius_m)));
        }
        if !(self.sampler.gap_threshold_s > 0.0) {
            return Err(Error::Config("gap threshold must be positive".into()));
        }
        if self.enrich.k_nearest == 0 {
            return Err(Error::Config("k_nearest must be at least 1".into()));
        }
        if !(self.training.train_fraction > 0.0 && self.training.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        if self.model.mlp.hidden.contains(&0) {
            return Err(Error::Config("MLP hidden widths must be positive".into()));
        }
        if self.model.train.epochs == 0 || self.model.train.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        let (t, w, tr) = (self.features.elevation, self.features.weather.any(), self.features.traffic.any());
        for (on, path, group) in [
            (t, &self.paths.dem, "elevation"),
            (w, &self.paths.weather, "weather"),
            (tr, &self.paths.traffic, "traffic"),
        ] {
            if on && path.is_none() {
                return Err(Error::Config(format!("feature group `{group}` is enabled but has no input path")));
            }
        }
        if self.paths.traffic.is_some() != self.paths.tmc_geometry.is_some() {
            return Err(Error::Config("traffic and tmc_geometry paths must be given together".into()));
        }
        Ok(())
    }

    pub fn garage_zone(&self) -> Result<Option<GarageZone>> {
        if self.ingest.garage.is_empty() {
            return Ok(None);
        }
        let vertices = self.ingest.garage.iter().map(|[lat, lon]| GeoPoint::new(*lat, *lon)).collect();
        GarageZone::new(vertices)
            .map(Some)
            .map_err(|e| Error::Config(format!("garage polygon: {e}")))
    }

    /// SHA-256 over the canonical JSON form of the config.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        format!("{:x}", Sha256::digest(canonical.as_bytes()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }
}

/// A parsed config plus the directory its relative paths resolve against.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub config: PipelineConfig,
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<LoadedConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let config: PipelineConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(LoadedConfig { config, base_dir })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn hash(&self) -> String {
        self.config.hash()
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    fn required(&self, p: &Path, stage: Stage) -> Result<PathBuf> {
        let full = self.resolve(p);
        if !full.is_file() {
            return Err(Error::Config(format!("input file {} not found", full.display())).at_stage(stage.name()));
        }
        Ok(full)
    }

    /// Checks that every file read by stages up to `until` exists.
    pub fn preflight(&self, until: Stage) -> Result<()> {
        let p = &self.config.paths;
        self.required(&p.telemetry, Stage::Ingest)?;
        if until >= Stage::Match {
            self.required(&p.map, Stage::Match)?;
        }
        if until >= Stage::Enrich {
            for q in [&p.dem, &p.weather, &p.traffic, &p.tmc_geometry].into_iter().flatten() {
                self.required(q, Stage::Enrich)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Match,
    Samples,
    Enrich,
    Encode,
    Train,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Ingest,
        Stage::Match,
        Stage::Samples,
        Stage::Enrich,
        Stage::Encode,
        Stage::Train,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Match => "match",
            Stage::Samples => "samples",
            Stage::Enrich => "enrich",
            Stage::Encode => "encode",
            Stage::Train => "train",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestStats {
    pub rows: usize,
    pub rejected: usize,
    pub garage_removed: usize,
    pub charging_removed: usize,
    pub kept: usize,
    pub vehicles: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestOutput {
    /// Cleaned points, ordered by (vehicle, timestamp).
    pub points: Vec<TelemetryPoint>,
    pub stats: IngestStats,
}

/// Parses telemetry and removes garage and charging datapoints.
pub fn run_ingest(cfg: &LoadedConfig) -> Result<IngestOutput> {
    let c = &cfg.config;
    let path = cfg.required(&c.paths.telemetry, Stage::Ingest)?;
    let parsed = parse_telemetry(&path, c.ingest.kind)?;
    let mut stats = IngestStats {
        rows: parsed.rows,
        rejected: parsed.rejected.len(),
        ..IngestStats::default()
    };
    let mut points = parsed.items;
    if let Some(zone) = c.garage_zone()? {
        let before = points.len();
        points = remove_garage_points(&points, &zone);
        stats.garage_removed = before - points.len();
    }
    if c.ingest.kind == VehicleKind::Electric {
        let before = points.len();
        points = remove_charging_points(&points)?;
        stats.charging_removed = before - points.len();
    }
    stats.kept = points.len();
    stats.vehicles = split_by_vehicle(&points).len();
    Ok(IngestOutput { points, stats })
}

#[derive(Debug, Clone)]
pub struct MatchOutput {
    pub map: RoadMap,
    /// Matched feature id per cleaned point.
    pub features: Vec<Option<String>>,
    pub matched: usize,
}

/// Loads the map and matches each vehicle's points independently.
pub fn run_match(cfg: &LoadedConfig, ingest: &IngestOutput) -> Result<MatchOutput> {
    let c = &cfg.config;
    let map = load_map(&cfg.required(&c.paths.map, Stage::Match)?)?;
    if map.features.is_empty() {
        return Err(Error::InvalidInput("map has no usable features".into()));
    }
    let mut features = Vec::with_capacity(ingest.points.len());
    for run in split_by_vehicle(&ingest.points) {
        let locations: Vec<GeoPoint> = run.iter().map(|p| p.position).collect();
        let m = match_locations(&locations, &map.index, c.matcher.window, c.matcher.radius_m)?;
        features.extend(
            m.assignments
                .iter()
                .map(|a| a.map(|f| map.index.feature_id(f).to_string())),
        );
    }
    let matched = features.iter().filter(|f| f.is_some()).count();
    Ok(MatchOutput { map, features, matched })
}

/// Per-interval energy, segmentation into samples, travel distances and
/// the erroneous-sample filter.
pub fn run_samples(cfg: &LoadedConfig, ingest: &IngestOutput, matched: &MatchOutput) -> Result<SampleSet> {
    let c = &cfg.config;
    let params = SegmentParams {
        gap_threshold_s: c.sampler.gap_threshold_s,
        battery_capacity_j: c.sampler.battery_capacity_j,
    };
    let mut sets = Vec::new();
    let mut offset = 0;
    let mut negative_fuel = 0;
    for run in split_by_vehicle(&ingest.points) {
        let feats = &matched.features[offset..offset + run.len()];
        offset += run.len();
        let intervals: Vec<f64> = match c.ingest.kind {
            VehicleKind::Electric => estimate_electric_energy(run)?.iter().map(|v| v.value).collect(),
            VehicleKind::Diesel => {
                let d = fuel_delta(run, c.ingest.clamp_negative_fuel)?;
                negative_fuel += d.negative;
                d.intervals.iter().map(|v| v.value).collect()
            }
        };
        sets.push(segment_samples(run, feats, &intervals, params)?);
    }
    if negative_fuel > 0 {
        tracing::info!(count = negative_fuel, "negative fuel deltas encountered");
    }
    let mut set = SampleSet::merge(sets);
    assign_distances(&mut set, &matched.map)?;
    Ok(match c.ingest.kind {
        VehicleKind::Electric => filter_erroneous(set, c.sampler.min_delta_soc),
        VehicleKind::Diesel => set,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnrichOutput {
    pub samples: Vec<EnrichedSample>,
    pub tmc_mapping: Option<TmcOsmMapping>,
    pub elevation_flagged: usize,
}

/// Attaches elevation, weather and traffic for whichever inputs are
/// configured.
pub fn run_enrich(cfg: &LoadedConfig, map: &RoadMap, samples: &SampleSet) -> Result<EnrichOutput> {
    let c = &cfg.config;
    let p = &c.paths;
    let offset = c.enrich.utc_offset_s;
    let dem = p
        .dem
        .as_ref()
        .map(|d| cfg.required(d, Stage::Enrich).and_then(|f| load_dem(&f)))
        .transpose()?;
    let weather = p
        .weather
        .as_ref()
        .map(|w| {
            let f = cfg.required(w, Stage::Enrich)?;
            let parsed = parse_weather(&f, c.ingest.humidity_scale)?;
            if parsed.items.is_empty() {
                return Err(Error::InvalidInput(format!("{} has no usable weather rows", f.display())));
            }
            Ok(build_hourly_weather(&parsed.items, offset))
        })
        .transpose()?;
    let traffic = match (&p.traffic, &p.tmc_geometry) {
        (Some(t), Some(g)) => {
            let records = parse_traffic(&cfg.required(t, Stage::Enrich)?)?;
            let tmc = load_tmc_geometry(&cfg.required(g, Stage::Enrich)?)?;
            let graph = RoutingGraph::from_features(&map.features);
            let mapping = TmcOsmMapping::build(&tmc, &graph, c.enrich.k_nearest);
            let table = build_hourly_traffic(&records.items, c.enrich.speed_ratio_mode, offset);
            Some((mapping, table))
        }
        _ => None,
    };
    let ctx = EnrichContext {
        dem: dem.as_ref(),
        weather: weather.as_ref(),
        traffic: traffic.as_ref().map(|(m, t)| (m, t)),
    };
    let enriched = enrich_samples(&samples.samples, map, ctx)?;
    let elevation_flagged = enriched.iter().filter(|e| e.elevation_flagged).count();
    Ok(EnrichOutput {
        samples: enriched,
        tmc_mapping: traffic.map(|(m, _)| m),
        elevation_flagged,
    })
}

pub fn run_encode(cfg: &LoadedConfig, enriched: &[EnrichedSample]) -> Result<Dataset> {
    encode(enriched, &cfg.config.features, cfg.config.training.target)
}

/// Seeded train/test partition of `n` rows per the config.
pub fn config_split(cfg: &LoadedConfig, n: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    split(n, cfg.config.training.train_fraction, cfg.seed())
}

pub fn run_train(cfg: &LoadedConfig, data: &Dataset) -> Result<Scored> {
    let (train, test) = config_split(cfg, data.len())?;
    fit_and_score(
        data,
        &cfg.config.features,
        &cfg.config.model,
        &train,
        &test,
        cfg.seed(),
        &cfg.hash(),
    )
}

/// Metrics report written after training or evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub model: String,
    pub feature_config: FeatureConfig,
    pub mse: f64,
    pub mae: f64,
    pub train_rows: usize,
    pub test_rows: usize,
    pub seed: u64,
    pub target_unit: TargetUnit,
    pub config_hash: String,
}

impl Report {
    pub fn new(scored: &Scored, cfg: &LoadedConfig) -> Report {
        Report::from_metrics(cfg, scored.trained.model.kind().as_str(), scored.test_metrics, scored.train_rows, scored.test_rows)
    }

    pub fn from_metrics(cfg: &LoadedConfig, model: &str, m: Metrics, train_rows: usize, test_rows: usize) -> Report {
        Report {
            model: model.to_string(),
            feature_config: cfg.config.features,
            mse: m.mse,
            mae: m.mae,
            train_rows,
            test_rows,
            seed: cfg.seed(),
            target_unit: cfg.config.training.target,
            config_hash: cfg.hash(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub outputs: Vec<String>,
    pub counts: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
}

/// In-memory results of a run, for callers that continue with experiments.
#[derive(Debug, Clone, Default)]
pub struct RunArtifacts {
    pub ingest: Option<IngestOutput>,
    pub matched: Option<MatchOutput>,
    pub samples: Option<SampleSet>,
    pub enriched: Option<EnrichOutput>,
    pub dataset: Option<Dataset>,
    pub scored: Option<Scored>,
    pub manifest: Option<Manifest>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_matched(path: &Path, points: &[TelemetryPoint], features: &[Option<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["vehicle_id", "timestamp", "feature_id"])?;
    for (p, f) in points.iter().zip(features) {
        w.write_record([p.vehicle_id.as_str(), &p.timestamp.to_string(), f.as_deref().unwrap_or("")])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn counts<const N: usize>(pairs: [(&str, f64); N]) -> BTreeMap<String, f64> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// Runs stages up to and including `until`, persisting each stage's output
/// under `out_dir` together with `manifest.json`. Errors name the stage.
pub fn run_pipeline(cfg: &LoadedConfig, out_dir: &Path, until: Stage) -> Result<RunArtifacts> {
    cfg.config.validate()?;
    cfg.preflight(until)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::new();
    let mut art = RunArtifacts::default();
    let at = |s: Stage| move |e: Error| e.at_stage(s.name());

    let _span = tracing::info_span!("pipeline", config_hash = %cfg.hash()).entered();
    let ingest = run_ingest(cfg).map_err(at(Stage::Ingest))?;
    let kind = cfg.config.ingest.kind;
    let name = "telemetry_clean.csv";
    write_telemetry(create(&out_dir.join(name)).map_err(at(Stage::Ingest))?, kind, &ingest.points)
        .map_err(at(Stage::Ingest))?;
    let s = &ingest.stats;
    records.push(StageRecord {
        stage: Stage::Ingest,
        outputs: vec![name.into()],
        counts: counts([
            ("rows", s.rows as f64),
            ("rejected", s.rejected as f64),
            ("garage_removed", s.garage_removed as f64),
            ("charging_removed", s.charging_removed as f64),
            ("kept", s.kept as f64),
            ("vehicles", s.vehicles as f64),
        ]),
    });
    tracing::info!(kept = s.kept, rejected = s.rejected, "ingest done");

    let finish = |art: &mut RunArtifacts, records: Vec<StageRecord>| -> Result<()> {
        let manifest = Manifest {
            config_hash: cfg.hash(),
            seed: cfg.seed(),
            stages: records,
        };
        write_json(&out_dir.join("manifest.json"), &manifest)?;
        art.manifest = Some(manifest);
        Ok(())
    };
    if until == Stage::Ingest {
        art.ingest = Some(ingest);
        finish(&mut art, records)?;
        return Ok(art);
    }

    let matched = run_match(cfg, &ingest).map_err(at(Stage::Match))?;
    let name = "matched.csv";
    write_matched(&out_dir.join(name), &ingest.points, &matched.features).map_err(at(Stage::Match))?;
    records.push(StageRecord {
        stage: Stage::Match,
        outputs: vec![name.into()],
        counts: counts([
            ("points", matched.features.len() as f64),
            ("matched", matched.matched as f64),
            ("unmatched", (matched.features.len() - matched.matched) as f64),
            ("map_features", matched.map.features.len() as f64),
            ("map_rejected", matched.map.rejected.len() as f64),
        ]),
    });
    tracing::info!(matched = matched.matched, "match done");
    if until == Stage::Match {
        art.ingest = Some(ingest);
        art.matched = Some(matched);
        finish(&mut art, records)?;
        return Ok(art);
    }

    let samples = run_samples(cfg, &ingest, &matched).map_err(at(Stage::Samples))?;
    let name = "samples.csv";
    write_samples(create(&out_dir.join(name)).map_err(at(Stage::Samples))?, &samples.samples)
        .map_err(at(Stage::Samples))?;
    let pv = &samples.provenance;
    records.push(StageRecord {
        stage: Stage::Samples,
        outputs: vec![name.into()],
        counts: counts([
            ("samples", samples.len() as f64),
            ("dropped_short_runs", pv.dropped_short_runs as f64),
            ("excluded_intervals", pv.excluded_intervals as f64),
            ("excluded_energy", pv.excluded_energy),
            ("erroneous_removed", pv.erroneous_removed as f64),
        ]),
    });
    tracing::info!(samples = samples.len(), "sampling done");
    art.ingest = Some(ingest);
    if until == Stage::Samples {
        art.samples = Some(samples);
        art.matched = Some(matched);
        finish(&mut art, records)?;
        return Ok(art);
    }

    let enriched = run_enrich(cfg, &matched.map, &samples).map_err(at(Stage::Enrich))?;
    let name = "enriched.csv";
    write_enriched(create(&out_dir.join(name)).map_err(at(Stage::Enrich))?, &enriched.samples)
        .map_err(at(Stage::Enrich))?;
    let mut outputs = vec![name.to_string()];
    if let Some(m) = &enriched.tmc_mapping {
        let name = "tmc_osm.csv";
        m.write_csv(create(&out_dir.join(name)).map_err(at(Stage::Enrich))?)
            .map_err(at(Stage::Enrich))?;
        outputs.push(name.into());
    }
    records.push(StageRecord {
        stage: Stage::Enrich,
        outputs,
        counts: counts([
            ("samples", enriched.samples.len() as f64),
            ("elevation_flagged", enriched.elevation_flagged as f64),
            (
                "tmc_mapped_features",
                enriched.tmc_mapping.as_ref().map_or(0, |m| m.feature_to_tmc.len()) as f64,
            ),
        ]),
    });
    art.samples = Some(samples);
    art.matched = Some(matched);
    if until == Stage::Enrich {
        art.enriched = Some(enriched);
        finish(&mut art, records)?;
        return Ok(art);
    }

    let dataset = run_encode(cfg, &enriched.samples).map_err(at(Stage::Encode))?;
    let name = "dataset.csv";
    dataset
        .write_csv(create(&out_dir.join(name)).map_err(at(Stage::Encode))?)
        .map_err(at(Stage::Encode))?;
    records.push(StageRecord {
        stage: Stage::Encode,
        outputs: vec![name.into()],
        counts: counts([("rows", dataset.len() as f64), ("columns", dataset.columns.len() as f64)]),
    });
    art.enriched = Some(enriched);
    if until == Stage::Encode {
        art.dataset = Some(dataset);
        finish(&mut art, records)?;
        return Ok(art);
    }

    let scored = run_train(cfg, &dataset).map_err(at(Stage::Train))?;
    write_json(&out_dir.join("model.json"), &scored.trained).map_err(at(Stage::Train))?;
    let report = Report::new(&scored, cfg);
    write_json(&out_dir.join("report.json"), &report).map_err(at(Stage::Train))?;
    records.push(StageRecord {
        stage: Stage::Train,
        outputs: vec!["model.json".into(), "report.json".into()],
        counts: counts([
            ("train_rows", scored.train_rows as f64),
            ("test_rows", scored.test_rows as f64),
            ("train_mse", scored.train_metrics.mse),
            ("test_mse", scored.test_metrics.mse),
            ("test_mae", scored.test_metrics.mae),
        ]),
    });
    tracing::info!(mse = scored.test_metrics.mse, mae = scored.test_metrics.mae, "training done");
    art.dataset = Some(dataset);
    art.scored = Some(scored);
    finish(&mut art, records)?;
    Ok(art)
}

/// Writes a JSON value to `path` with a trailing newline.
pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_json(path, value)
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> PipelineConfig {
        toml::from_str(
            r#"
            seed = 3
            [paths]
            telemetry = "t.csv"
            map = "m.geojson"
            [features]
            elevation = false
            weather = {}
            traffic = {}
            "#,
        )
        .unwrap()
    }

    #[test]
    fn defaults_fill_in() {
        let c = minimal();
        assert_eq!(c.matcher.window, 10);
        assert_eq!(c.matcher.radius_m, 25.0);
        assert_eq!(c.enrich.k_nearest, 4);
        assert_eq!(c.training.train_fraction, 0.8);
        assert_eq!(c.features.dimension(), 15);
        c.validate().unwrap();
    }

    #[test]
    fn hash_tracks_content() {
        let a = minimal();
        let mut b = minimal();
        assert_eq!(a.hash(), b.hash());
        b.seed = 4;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn toml_round_trip() {
        let a = minimal();
        let back: PipelineConfig = toml::from_str(&a.to_toml().unwrap()).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn mismatched_target_is_config_error() {
        let mut c = minimal();
        c.training.target = TargetUnit::Gallons;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.training.target = TargetUnit::DeltaSocPct;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.sampler.battery_capacity_j = Some(1.8e9);
        c.validate().unwrap();
    }

    #[test]
    fn enabled_group_needs_path() {
        let mut c = minimal();
        c.features.elevation = true;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let r: std::result::Result<PipelineConfig, _> = toml::from_str(
            r#"
            seed = 1
            bogus = 2
            [paths]
            telemetry = "t.csv"
            map = "m.geojson"
            "#,
        );
        assert!(r.is_err());
    }
}
