//! Synthetic inputs: a street grid, benchmark routes, and a complete fleet
//! fixture (map, DEM, weather, traffic, telemetry, configs) produced by a
//! simple longitudinal vehicle-dynamics model.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::enrich::{to_ascii_grid, write_tmc_geometry, DemRaster, TmcSegment};
use crate::error::{Error, Result};
use crate::geo::{GeoPoint, LocalProjection};
use crate::ingest::{write_telemetry, Payload, TelemetryPoint, VehicleKind, TRAFFIC_HEADER, WEATHER_HEADER};
use crate::map_match::write_route;
use crate::ml::{FeatureConfig, MlpSpec, ModelKind, ModelSpec, TargetUnit};
use crate::pipeline::{
    EnrichConfig, IngestConfig, MatcherConfig, Paths, PipelineConfig, SamplerConfig, TrainingConfig,
};
use crate::road_network::{map_to_geojson, OsmFeature, RoadMap, RoadType};
use crate::sampler::Sample;

/// Downtown Chattanooga, roughly.
pub const DEFAULT_ORIGIN: GeoPoint = GeoPoint {
    lat: 35.0456,
    lon: -85.3097,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    /// Intersections per side.
    pub rows: usize,
    pub cols: usize,
    pub block_m: f64,
    /// Position of intersection (0, 0), the south-west corner.
    pub origin: GeoPoint,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            rows: 8,
            cols: 8,
            block_m: 200.0,
            origin: DEFAULT_ORIGIN,
        }
    }
}

pub type Node = (usize, usize);

/// Street grid whose blocks are individual features. Horizontal block
/// `h{r}_{c}` joins `(r, c)` and `(r, c + 1)`; vertical block `v{r}_{c}`
/// joins `(r, c)` and `(r + 1, c)`.
#[derive(Debug, Clone)]
pub struct Grid {
    pub spec: GridSpec,
    pub proj: LocalProjection,
    pub features: Vec<OsmFeature>,
}

fn horizontal_type(r: usize) -> RoadType {
    match r % 4 {
        0 => RoadType::Primary,
        2 => RoadType::Secondary,
        _ => RoadType::Residential,
    }
}

fn vertical_type(c: usize) -> RoadType {
    match c % 4 {
        1 => RoadType::Tertiary,
        3 => RoadType::Unclassified,
        _ if c == 0 => RoadType::Service,
        _ => RoadType::Residential,
    }
}

impl Grid {
    pub fn new(spec: GridSpec) -> Grid {
        let proj = LocalProjection::new(spec.origin);
        let mut grid = Grid {
            spec,
            proj,
            features: Vec::new(),
        };
        let mut features = Vec::new();
        for r in 0..spec.rows {
            for c in 0..spec.cols {
                if c + 1 < spec.cols {
                    features.push(grid.block_feature((r, c), (r, c + 1), horizontal_type(r)));
                }
                if r + 1 < spec.rows {
                    features.push(grid.block_feature((r, c), (r + 1, c), vertical_type(c)));
                }
            }
        }
        grid.features = features;
        grid
    }

    fn block_feature(&self, a: Node, b: Node, road_type: RoadType) -> OsmFeature {
        let (pa, pb) = (self.node_xy(a), self.node_xy(b));
        let mid = ((pa.0 + pb.0) / 2.0, (pa.1 + pb.1) / 2.0);
        OsmFeature {
            feature_id: Grid::block_id(a, b),
            polyline: [pa, mid, pb].iter().map(|p| self.proj.from_xy(p.0, p.1)).collect(),
            road_type,
            oneway: false,
            tunnel: false,
        }
    }

    pub fn node_xy(&self, n: Node) -> (f64, f64) {
        (n.1 as f64 * self.spec.block_m, n.0 as f64 * self.spec.block_m)
    }

    pub fn node(&self, n: Node) -> GeoPoint {
        let (x, y) = self.node_xy(n);
        self.proj.from_xy(x, y)
    }

    /// Feature id of the block between two adjacent intersections.
    pub fn block_id(a: Node, b: Node) -> String {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        if lo.0 == hi.0 {
            format!("h{}_{}", lo.0, lo.1)
        } else {
            format!("v{}_{}", lo.0, lo.1)
        }
    }

    pub fn road_type(&self, a: Node, b: Node) -> RoadType {
        if a.0 == b.0 {
            horizontal_type(a.0)
        } else {
            vertical_type(a.1)
        }
    }

    pub fn neighbours(&self, n: Node) -> Vec<Node> {
        let mut out = Vec::with_capacity(4);
        if n.0 > 0 {
            out.push((n.0 - 1, n.1));
        }
        if n.0 + 1 < self.spec.rows {
            out.push((n.0 + 1, n.1));
        }
        if n.1 > 0 {
            out.push((n.0, n.1 - 1));
        }
        if n.1 + 1 < self.spec.cols {
            out.push((n.0, n.1 + 1));
        }
        out
    }

    /// Next intersection of a walk that never reverses onto the block it
    /// just used (unless stuck in a dead end).
    pub fn step(&self, prev: Option<Node>, cur: Node, rng: &mut impl Rng) -> Node {
        let mut options = self.neighbours(cur);
        if options.len() > 1 {
            options.retain(|n| Some(*n) != prev);
        }
        options[rng.random_range(0..options.len())]
    }

    pub fn road_map(&self) -> RoadMap {
        RoadMap::from_features(self.features.clone())
    }
}

/// A noise-free route along grid blocks with its true feature per point.
#[derive(Debug, Clone)]
pub struct BenchRoute {
    pub points: Vec<GeoPoint>,
    pub feature_ids: Vec<String>,
}

impl BenchRoute {
    /// Ground truth as positions in `map`.
    pub fn truth(&self, map: &RoadMap) -> Result<Vec<usize>> {
        self.feature_ids
            .iter()
            .map(|id| {
                map.position(id)
                    .ok_or_else(|| Error::InvalidInput(format!("route feature {id} not in map")))
            })
            .collect()
    }
}

/// Random walk over the grid sampled every `step_m` meters. The first point
/// of each block sits `first_offset_m` past its start intersection, so no
/// point coincides with an intersection.
pub fn bench_route(grid: &Grid, n_points: usize, step_m: f64, first_offset_m: f64, seed: u64) -> BenchRoute {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut route = BenchRoute {
        points: Vec::with_capacity(n_points),
        feature_ids: Vec::with_capacity(n_points),
    };
    let mut prev = None;
    let mut cur = (rng.random_range(0..grid.spec.rows), rng.random_range(0..grid.spec.cols));
    while route.points.len() < n_points {
        let next = grid.step(prev, cur, &mut rng);
        let (a, b) = (grid.node_xy(cur), grid.node_xy(next));
        let id = Grid::block_id(cur, next);
        let mut s = first_offset_m;
        while s < grid.spec.block_m && route.points.len() < n_points {
            let t = s / grid.spec.block_m;
            route
                .points
                .push(grid.proj.from_xy(a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1)));
            route.feature_ids.push(id.clone());
            s += step_m;
        }
        prev = Some(cur);
        cur = next;
    }
    route
}

/// Smooth power demand with a closed-form integral:
/// `base + a1·sin(2πt/p1) + a2·sin(2πt/p2 + phase2)` watts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerProfile {
    pub base_w: f64,
    pub amp1_w: f64,
    pub period1_s: f64,
    pub amp2_w: f64,
    pub period2_s: f64,
    pub phase2: f64,
}

impl Default for PowerProfile {
    fn default() -> Self {
        PowerProfile {
            base_w: 45_000.0,
            amp1_w: 60_000.0,
            period1_s: 240.0,
            amp2_w: 20_000.0,
            period2_s: 37.0,
            phase2: 0.7,
        }
    }
}

impl PowerProfile {
    pub fn power(&self, t: f64) -> f64 {
        use std::f64::consts::TAU;
        self.base_w + self.amp1_w * (TAU * t / self.period1_s).sin() + self.amp2_w * (TAU * t / self.period2_s + self.phase2).sin()
    }
}

/// Telemetry of one electric vehicle drawing `profile` for `duration_s`
/// seconds. Each datapoint carries the mean power of the interval it
/// closes, split into current and a load-dependent voltage, with zero-mean
/// Gaussian noise of `current_noise_a` on the current reading.
pub fn power_trace(profile: &PowerProfile, duration_s: f64, dt: f64, current_noise_a: f64, seed: u64) -> Vec<TelemetryPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (duration_s / dt).round() as usize;
    let mut soc = 90.0;
    (0..=n)
        .map(|k| {
            let t = k as f64 * dt;
            // Interval mean by Simpson's rule on the smooth profile.
            let p = if k == 0 {
                profile.power(0.0)
            } else {
                let t0 = t - dt;
                (profile.power(t0) + 4.0 * profile.power(t0 + dt / 2.0) + profile.power(t)) / 6.0
            };
            let voltage = 650.0 - 0.05 * p / 650.0;
            let noise: f64 = rng.sample(StandardNormal);
            soc -= p * dt / 1.8e9 * 100.0;
            TelemetryPoint {
                vehicle_id: "sim".into(),
                timestamp: t,
                position: DEFAULT_ORIGIN,
                payload: Payload::Electric {
                    current: p / voltage + current_noise_a * noise,
                    voltage,
                    soc: (soc * 10.0).round() / 10.0,
                    cable_connected: false,
                },
            }
        })
        .collect()
}

/// Back-to-back samples for `vehicles` vehicles over `hours` hours each,
/// with durations of 15 to 45 s and positive lognormal energy.
pub fn trip_samples(vehicles: usize, hours: f64, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for v in 0..vehicles {
        let vehicle_id = format!("veh-{v:04}");
        let mut t = 1_678_104_000.0 + rng.random_range(0.0..3600.0);
        let end = t + hours * 3600.0;
        while t < end {
            let d: f64 = rng.random_range(15.0..45.0);
            let z: f64 = rng.sample(StandardNormal);
            let energy = 4.0e5 * (0.4 * z).exp() * d / 30.0;
            out.push(Sample {
                vehicle_id: vehicle_id.clone(),
                feature_id: format!("f{}", rng.random_range(0..100)),
                start_point: DEFAULT_ORIGIN,
                end_point: DEFAULT_ORIGIN,
                start_ts: t,
                end_ts: t + d,
                energy,
                delta_soc: None,
                distance: d * 10.0,
                points: d as usize + 1,
            });
            t += d;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct FleetSpec {
    pub seed: u64,
    pub grid: GridSpec,
    pub electric_vehicles: usize,
    pub diesel_vehicles: usize,
    pub hours_per_vehicle: f64,
    pub sample_period_s: f64,
    /// UTC start of the first shift.
    pub start_ts: f64,
    pub utc_offset_s: i32,
    pub battery_capacity_j: f64,
    pub gps_sigma_m: f64,
    /// Epochs written into the generated configs.
    pub epochs: usize,
}

impl Default for FleetSpec {
    fn default() -> Self {
        FleetSpec {
            seed: 42,
            grid: GridSpec::default(),
            electric_vehicles: 4,
            diesel_vehicles: 3,
            hours_per_vehicle: 3.0,
            sample_period_s: 1.0,
            // Monday 2023-03-06 12:00 UTC, 07:00 local.
            start_ts: 1_678_104_000.0,
            utc_offset_s: -5 * 3600,
            battery_capacity_j: 1.8e9,
            gps_sigma_m: 2.0,
            epochs: 200,
        }
    }
}

impl FleetSpec {
    /// A smaller fleet for quick tests.
    pub fn small() -> FleetSpec {
        FleetSpec {
            electric_vehicles: 2,
            diesel_vehicles: 1,
            hours_per_vehicle: 1.0,
            epochs: 20,
            ..FleetSpec::default()
        }
    }
}

/// Files written by [`write_fleet_fixture`].
#[derive(Debug, Clone, PartialEq)]
pub struct FleetFixture {
    pub dir: PathBuf,
    pub electric_config: PathBuf,
    pub diesel_config: PathBuf,
    pub electric_points: usize,
    pub diesel_points: usize,
}

#[derive(Debug, Clone, Copy)]
struct WeatherHour {
    temperature: f64,
    humidity: f64,
    visibility: f64,
    wind_speed: f64,
    precipitation: f64,
}

struct Station {
    id: &'static str,
    xy: (f64, f64),
    temp_offset: f64,
}

const STATIONS: [Station; 2] = [
    Station {
        id: "KCHA",
        xy: (-500.0, -500.0),
        temp_offset: 0.0,
    },
    Station {
        id: "KRMG",
        xy: (2000.0, 2000.0),
        temp_offset: -2.5,
    },
];

struct Tmc {
    id: &'static str,
    nodes: &'static [Node],
}

const TMCS: [Tmc; 3] = [
    Tmc {
        id: "104+04100",
        nodes: &[(0, 0), (0, 1), (0, 2), (0, 3), (0, 4)],
    },
    Tmc {
        id: "104+04101",
        nodes: &[(4, 2), (4, 3), (4, 4), (4, 5), (4, 6), (4, 7)],
    },
    Tmc {
        id: "104P04102",
        nodes: &[(0, 1), (1, 1), (2, 1), (3, 1), (4, 1), (5, 1)],
    },
];

/// Everything the vehicle model needs to know about its surroundings.
struct World {
    grid: Grid,
    dem: DemRaster,
    weather: BTreeMap<(usize, i64), WeatherHour>,
    traffic: BTreeMap<(usize, i64), f64>,
    block_tmc: BTreeMap<String, usize>,
}

impl World {
    fn elevation(&self, xy: (f64, f64)) -> f64 {
        self.dem
            .elevation_at(self.grid.proj.from_xy(xy.0, xy.1))
            .unwrap_or(200.0)
    }

    fn weather(&self, xy: (f64, f64), t: f64) -> WeatherHour {
        let station = STATIONS
            .iter()
            .enumerate()
            .min_by(|a, b| {
                let da = (a.1.xy.0 - xy.0).hypot(a.1.xy.1 - xy.1);
                let db = (b.1.xy.0 - xy.0).hypot(b.1.xy.1 - xy.1);
                da.total_cmp(&db)
            })
            .map_or(0, |(i, _)| i);
        let hour = (t / 3600.0).floor() as i64;
        self.weather[&(station, hour)]
    }

    fn speed_ratio(&self, block: &str, t: f64) -> f64 {
        match self.block_tmc.get(block) {
            Some(&k) => self
                .traffic
                .get(&(k, (t / 900.0).floor() as i64))
                .copied()
                .unwrap_or(1.0),
            None => 1.0,
        }
    }
}

fn cruise_speed(t: RoadType) -> f64 {
    match t {
        RoadType::Primary => 15.0,
        RoadType::Secondary => 13.0,
        RoadType::Tertiary => 11.0,
        RoadType::Unclassified => 10.0,
        RoadType::Service => 6.0,
        _ => 9.0,
    }
}

fn rush(local_hour: f64) -> f64 {
    let bump = |centre: f64| (-(local_hour - centre).powi(2) / 1.5).exp();
    bump(8.0).max(bump(17.0))
}

const MASS_KG: f64 = 13_500.0;
const CRR: f64 = 0.008;
const CDA: f64 = 6.5;
const RHO: f64 = 1.2;
const G: f64 = 9.81;
const DIESEL_J_PER_GAL: f64 = 1.456e8;

/// Power at the wheels over one step, in watts.
fn wheel_power(v0: f64, v1: f64, dt: f64, dz: f64, w: &WeatherHour) -> f64 {
    let v = 0.5 * (v0 + v1);
    let crr = if w.precipitation > 0.0 { CRR * 1.25 } else { CRR };
    let air = v + 0.3 * w.wind_speed;
    MASS_KG * (v1 - v0) / dt * v + MASS_KG * G * crr * v + MASS_KG * G * dz / dt + 0.5 * RHO * CDA * air * air * v
}

fn auxiliary_power(w: &WeatherHour) -> f64 {
    6_000.0 + 450.0 * (w.temperature - 20.0).abs() + 2_500.0 * w.humidity
}

struct Sim<'a> {
    world: &'a World,
    rng: ChaCha8Rng,
    kind: VehicleKind,
    id: String,
    dt: f64,
    t: f64,
    xy: (f64, f64),
    v: f64,
    soc: f64,
    total_fuel: f64,
    tank: f64,
    capacity: f64,
    gps_sigma: f64,
    out: Vec<TelemetryPoint>,
    /// Timestamps in this half-open range are simulated but not recorded.
    blackout: (f64, f64),
}

impl Sim<'_> {
    /// Advances one step with the given wheel power, grid power override
    /// (charging) and new position, recording a datapoint.
    fn tick(&mut self, wheel_w: f64, weather: &WeatherHour, charging_w: Option<f64>) {
        self.t += self.dt;
        let aux = auxiliary_power(weather);
        let payload = match self.kind {
            VehicleKind::Electric => {
                let battery_w = match charging_w {
                    Some(c) => -c,
                    None if wheel_w > 0.0 => wheel_w / 0.9 + aux,
                    None => wheel_w * 0.6 + aux,
                };
                self.soc = (self.soc - battery_w * self.dt / self.capacity * 100.0).clamp(0.0, 100.0);
                let voltage = 640.0 - 0.05 * battery_w / 640.0;
                Payload::Electric {
                    current: battery_w / voltage,
                    voltage,
                    soc: (self.soc * 10.0).round() / 10.0,
                    cable_connected: charging_w.is_some(),
                }
            }
            VehicleKind::Diesel => {
                let engine_w = wheel_w.max(0.0) + aux * 0.5;
                let idle_gal_s = 0.25 / 3600.0;
                self.total_fuel += engine_w / 0.33 / DIESEL_J_PER_GAL * self.dt + idle_gal_s * self.dt;
                Payload::Diesel {
                    fuel_level: ((self.tank - self.total_fuel) * 1e4).round() / 1e4,
                    total_fuel_used: (self.total_fuel * 1e5).round() / 1e5,
                }
            }
        };
        if self.t >= self.blackout.0 && self.t < self.blackout.1 {
            return;
        }
        let nx: f64 = self.rng.sample(StandardNormal);
        let ny: f64 = self.rng.sample(StandardNormal);
        let p = self.world.grid.proj.from_xy(
            self.xy.0 + self.gps_sigma * nx,
            self.xy.1 + self.gps_sigma * ny,
        );
        self.out.push(TelemetryPoint {
            vehicle_id: self.id.clone(),
            timestamp: self.t,
            position: GeoPoint::new((p.lat * 1e7).round() / 1e7, (p.lon * 1e7).round() / 1e7),
            payload,
        });
    }

    fn dwell(&mut self, seconds: f64, charging_w: Option<f64>) {
        let steps = (seconds / self.dt).round() as usize;
        for _ in 0..steps {
            let w = self.world.weather(self.xy, self.t);
            self.tick(0.0, &w, charging_w);
            self.v = 0.0;
        }
    }

    /// Straight-line move at walking pace, used between depot and grid.
    fn transfer(&mut self, to: (f64, f64), speed: f64) {
        let from = self.xy;
        let len = (to.0 - from.0).hypot(to.1 - from.1);
        let steps = (len / speed / self.dt).ceil().max(1.0) as usize;
        for k in 1..=steps {
            let f = k as f64 / steps as f64;
            let next = (from.0 + f * (to.0 - from.0), from.1 + f * (to.1 - from.1));
            let dz = self.world.elevation(next) - self.world.elevation(self.xy);
            self.xy = next;
            let w = self.world.weather(self.xy, self.t);
            let p = wheel_power(speed, speed, self.dt, dz, &w);
            self.tick(p, &w, None);
        }
        self.v = 0.0;
    }

    fn drive_block(&mut self, a: (f64, f64), b: (f64, f64), road: RoadType, block: &str, stop_at_end: bool, utc_offset_s: i32) {
        let len = (b.0 - a.0).hypot(b.1 - a.1);
        let mut s = 0.0;
        let decel = 1.2;
        while s < len - 1e-9 {
            let w = self.world.weather(self.xy, self.t);
            let local_hour = ((self.t + utc_offset_s as f64) / 3600.0).rem_euclid(24.0);
            let vis_factor = if w.visibility < 5.0 { 0.85 } else { 1.0 };
            let target = cruise_speed(road) * self.world.speed_ratio(block, self.t) * vis_factor * (1.0 - 0.1 * rush(local_hour));
            let remaining = len - s;
            let v0 = self.v;
            let mut v1 = if stop_at_end && v0 * v0 / (2.0 * decel) + v0 * self.dt >= remaining {
                (v0 - v0 * v0 / (2.0 * remaining.max(0.5)) * self.dt).max(0.0)
            } else {
                let a = ((target - v0) / self.dt).clamp(-1.5, 1.0);
                (v0 + a * self.dt).max(0.0)
            };
            let mut ds = 0.5 * (v0 + v1) * self.dt;
            if ds >= remaining || (stop_at_end && v1 < 0.3 && remaining < 3.0) {
                ds = remaining;
                if stop_at_end {
                    v1 = 0.0;
                }
            }
            if ds <= 0.0 && v1 <= 0.0 {
                // Creep forward rather than stall.
                v1 = 0.5;
                ds = 0.25 * self.dt;
            }
            s += ds;
            let f = (s / len).min(1.0);
            let next = (a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1));
            let dz = self.world.elevation(next) - self.world.elevation(self.xy);
            self.xy = next;
            let p = wheel_power(v0, v1, self.dt, dz, &w);
            self.v = v1;
            self.tick(p, &w, None);
        }
    }
}

fn build_world(spec: &FleetSpec, rng: &mut ChaCha8Rng) -> Result<World> {
    let grid = Grid::new(spec.grid);
    let span_x = (spec.grid.cols - 1) as f64 * spec.grid.block_m;
    let span_y = (spec.grid.rows - 1) as f64 * spec.grid.block_m;
    let margin = 600.0;
    let lower_left = grid.proj.from_xy(-margin, -margin);
    let upper_right = grid.proj.from_xy(span_x + margin, span_y + margin);
    let cell = 0.0005;
    let rows = ((upper_right.lat - lower_left.lat) / cell).ceil() as usize;
    let cols = ((upper_right.lon - lower_left.lon) / cell).ceil() as usize;
    let mut elevations = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let lat = lower_left.lat + (rows as f64 - 0.5 - r as f64) * cell;
            let lon = lower_left.lon + (c as f64 + 0.5) * cell;
            let (x, y) = grid.proj.to_xy(GeoPoint::new(lat, lon));
            let z = 210.0 + 25.0 * (x / 450.0).sin() + 18.0 * (y / 330.0).cos() + 0.012 * x;
            elevations.push((z * 100.0).round() / 100.0);
        }
    }
    let dem = DemRaster::from_lower_left(lower_left, cell, rows, cols, elevations, -9999.0)?;

    let first_hour = (spec.start_ts / 3600.0).floor() as i64 - 1;
    let hours = (spec.hours_per_vehicle + 0.25 * (spec.electric_vehicles + spec.diesel_vehicles) as f64).ceil() as i64 + 3;
    let mut weather = BTreeMap::new();
    for (si, st) in STATIONS.iter().enumerate() {
        for h in first_hour..first_hour + hours {
            let local = ((h * 3600 + spec.utc_offset_s as i64) as f64 / 3600.0).rem_euclid(24.0);
            let jitter = |rng: &mut ChaCha8Rng, s: f64| s * rng.sample::<f64, _>(StandardNormal);
            let wet = rng.random_bool(0.25);
            weather.insert(
                (si, h),
                WeatherHour {
                    temperature: 11.0 + st.temp_offset + 7.0 * (std::f64::consts::TAU * (local - 9.0) / 24.0).sin() + jitter(rng, 1.5),
                    humidity: (0.6 + 0.2 * (std::f64::consts::TAU * local / 24.0).cos() + jitter(rng, 0.05)).clamp(0.05, 1.0),
                    visibility: if wet { rng.random_range(2.0..6.0) } else { rng.random_range(8.0..16.0) },
                    wind_speed: rng.random_range(0.5..9.0),
                    precipitation: if wet { rng.random_range(0.5..4.0) } else { 0.0 },
                },
            );
        }
    }

    let mut traffic = BTreeMap::new();
    let mut block_tmc = BTreeMap::new();
    for (k, tmc) in TMCS.iter().enumerate() {
        for w in tmc.nodes.windows(2) {
            block_tmc.insert(Grid::block_id(w[0], w[1]), k);
        }
        for q in first_hour * 4..(first_hour + hours) * 4 {
            let local = ((q * 900 + spec.utc_offset_s as i64) as f64 / 3600.0).rem_euclid(24.0);
            let noise: f64 = rng.sample(StandardNormal);
            let ratio = (1.0 - 0.45 * rush(local) - 0.1 * k as f64 + 0.06 * noise).clamp(0.2, 1.0);
            traffic.insert((k, q), ratio);
        }
    }
    Ok(World {
        grid,
        dem,
        weather,
        traffic,
        block_tmc,
    })
}

fn simulate_vehicle(world: &World, spec: &FleetSpec, kind: VehicleKind, index: usize, seed: u64) -> Vec<TelemetryPoint> {
    let prefix = match kind {
        VehicleKind::Electric => "ebus",
        VehicleKind::Diesel => "dbus",
    };
    let start = spec.start_ts + 900.0 * index as f64;
    let mut sim = Sim {
        world,
        rng: ChaCha8Rng::seed_from_u64(seed),
        kind,
        id: format!("{prefix}-{index:02}"),
        dt: spec.sample_period_s,
        t: start,
        xy: DEPOT_XY,
        v: 0.0,
        soc: 95.0,
        total_fuel: 1000.0 + 37.0 * index as f64,
        tank: 1100.0 + 37.0 * index as f64,
        capacity: spec.battery_capacity_j,
        gps_sigma: spec.gps_sigma_m,
        out: Vec::new(),
        blackout: (
            start + 0.62 * spec.hours_per_vehicle * 3600.0,
            start + 0.62 * spec.hours_per_vehicle * 3600.0 + 120.0,
        ),
    };
    // Plugged in at the depot, then out onto the grid.
    let depot_charge = (kind == VehicleKind::Electric).then_some(120_000.0);
    sim.dwell(240.0, depot_charge);
    sim.transfer(world.grid.node_xy((0, 0)), 3.0);

    let end = start + spec.hours_per_vehicle * 3600.0;
    let charge_after = start + 0.4 * spec.hours_per_vehicle * 3600.0;
    let mut charged = kind == VehicleKind::Diesel;
    let mut prev = None;
    let mut cur = (0, 0);
    while sim.t < end {
        let next = world.grid.step(prev, cur, &mut sim.rng);
        let stop = sim.rng.random_bool(0.3);
        let road = world.grid.road_type(cur, next);
        let id = Grid::block_id(cur, next);
        sim.drive_block(world.grid.node_xy(cur), world.grid.node_xy(next), road, &id, stop, spec.utc_offset_s);
        if stop {
            if !charged && sim.t >= charge_after {
                charged = true;
                sim.dwell(180.0, Some(250_000.0));
            } else {
                let secs = sim.rng.random_range(10.0..35.0_f64).round();
                sim.dwell(secs, None);
            }
        }
        prev = Some(cur);
        cur = next;
    }
    sim.out
}

const DEPOT_XY: (f64, f64) = (-150.0, -150.0);

fn depot_polygon(grid: &Grid) -> Vec<[f64; 2]> {
    let (cx, cy) = DEPOT_XY;
    [(-40.0, -40.0), (40.0, -40.0), (40.0, 40.0), (-40.0, 40.0)]
        .iter()
        .map(|(dx, dy)| {
            let p = grid.proj.from_xy(cx + dx, cy + dy);
            [p.lat, p.lon]
        })
        .collect()
}

fn tmc_segments(grid: &Grid) -> Result<Vec<TmcSegment>> {
    TMCS.iter()
        .map(|t| {
            // Drawn a few meters off the street centreline, as provider
            // geometry usually is.
            let polyline = t
                .nodes
                .iter()
                .map(|n| {
                    let (x, y) = grid.node_xy(*n);
                    grid.proj.from_xy(x + 4.0, y + 6.0)
                })
                .collect();
            TmcSegment::new(t.id, polyline)
        })
        .collect()
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn fleet_config(spec: &FleetSpec, grid: &Grid, kind: VehicleKind) -> PipelineConfig {
    let (telemetry, target, mlp) = match kind {
        VehicleKind::Electric => ("electric.csv", TargetUnit::Joules, MlpSpec::electric()),
        VehicleKind::Diesel => ("diesel.csv", TargetUnit::Gallons, MlpSpec::diesel()),
    };
    let features = match kind {
        VehicleKind::Electric => FeatureConfig::electric_best(),
        VehicleKind::Diesel => FeatureConfig::diesel_best(),
    };
    let mut model = ModelSpec {
        kind: ModelKind::Mlp,
        mlp,
        ..ModelSpec::default()
    };
    model.train.epochs = spec.epochs;
    PipelineConfig {
        seed: spec.seed,
        paths: Paths {
            telemetry: telemetry.into(),
            map: "map.geojson".into(),
            dem: Some("dem.asc".into()),
            weather: Some("weather.csv".into()),
            traffic: Some("traffic.csv".into()),
            tmc_geometry: Some("tmc.csv".into()),
        },
        ingest: IngestConfig {
            kind,
            garage: depot_polygon(grid),
            ..IngestConfig::default()
        },
        matcher: MatcherConfig::default(),
        sampler: SamplerConfig {
            battery_capacity_j: (kind == VehicleKind::Electric).then_some(spec.battery_capacity_j),
            ..SamplerConfig::default()
        },
        enrich: EnrichConfig {
            utc_offset_s: spec.utc_offset_s,
            ..EnrichConfig::default()
        },
        features,
        model,
        training: TrainingConfig {
            target,
            ..TrainingConfig::default()
        },
    }
}

/// Writes a complete synthetic fleet into `dir`: `map.geojson`, `dem.asc`,
/// `weather.csv`, `traffic.csv`, `tmc.csv`, `electric.csv`, `diesel.csv`
/// `bench_route.csv` (a 500-point matching benchmark route on the same map)
/// and one pipeline config per fleet. Each telemetry file also carries one
/// malformed row and one duplicated timestamp.
pub fn write_fleet_fixture(dir: &Path, spec: &FleetSpec) -> Result<FleetFixture> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let world = build_world(spec, &mut rng)?;
    let grid = &world.grid;

    let map_json = serde_json::to_string_pretty(&map_to_geojson(&grid.features))?;
    write_file(&dir.join("map.geojson"), map_json.as_bytes())?;
    write_file(&dir.join("dem.asc"), to_ascii_grid(&world.dem).as_bytes())?;

    let path = dir.join("weather.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(WEATHER_HEADER)?;
    for (&(si, h), wh) in &world.weather {
        let st = &STATIONS[si];
        let p = grid.proj.from_xy(st.xy.0, st.xy.1);
        w.write_record([
            st.id.to_string(),
            (h * 3600).to_string(),
            p.lat.to_string(),
            p.lon.to_string(),
            format!("{:.2}", wh.temperature),
            format!("{:.3}", wh.humidity),
            format!("{:.2}", wh.visibility),
            format!("{:.2}", wh.wind_speed),
            format!("{:.2}", wh.precipitation),
        ])?;
    }
    w.flush().map_err(io_err(&path))?;

    let path = dir.join("traffic.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(TRAFFIC_HEADER)?;
    let free_flow = 56.0;
    for (&(k, q), ratio) in &world.traffic {
        let jam = (10.0 * (1.0 - ratio) * 0.9).clamp(0.0, 10.0);
        w.write_record([
            TMCS[k].id.to_string(),
            (q * 900).to_string(),
            format!("{:.2}", free_flow * ratio),
            format!("{free_flow:.1}"),
            format!("{jam:.2}"),
        ])?;
    }
    w.flush().map_err(io_err(&path))?;

    let path = dir.join("tmc.csv");
    let mut f = fs::File::create(&path).map_err(io_err(&path))?;
    write_tmc_geometry(&mut f, &tmc_segments(grid)?)?;

    let mut counts = [0usize; 2];
    for (slot, kind, n) in [
        (0, VehicleKind::Electric, spec.electric_vehicles),
        (1, VehicleKind::Diesel, spec.diesel_vehicles),
    ] {
        let mut points = Vec::new();
        for i in 0..n {
            let seed = spec.seed.wrapping_mul(1_000_003).wrapping_add((slot * 1000 + i) as u64);
            points.extend(simulate_vehicle(&world, spec, kind, i, seed));
        }
        counts[slot] = points.len();
        let mut buf = Vec::new();
        write_telemetry(&mut buf, kind, &points)?;
        if let Some(p) = points.get(points.len() / 2) {
            // A repeated record and a corrupt one, as field data has.
            let mut extra = Vec::new();
            write_telemetry(&mut extra, kind, std::slice::from_ref(p))?;
            let line = String::from_utf8_lossy(&extra).lines().nth(1).unwrap_or_default().to_string();
            writeln!(buf, "{line}").map_err(io_err(dir))?;
            writeln!(buf, "{},not-a-time,0,0,0,0{}", p.vehicle_id, if slot == 0 { ",0,0" } else { "" })
                .map_err(io_err(dir))?;
        }
        let name = if slot == 0 { "electric.csv" } else { "diesel.csv" };
        write_file(&dir.join(name), &buf)?;
    }

    let route = bench_route(grid, 500, 10.0, 4.0, spec.seed);
    let path = dir.join("bench_route.csv");
    let f = fs::File::create(&path).map_err(io_err(&path))?;
    write_route(f, &route.points, &route.feature_ids)?;

    let mut configs = Vec::new();
    for (kind, name) in [(VehicleKind::Electric, "electric.toml"), (VehicleKind::Diesel, "diesel.toml")] {
        let path = dir.join(name);
        write_file(&path, fleet_config(spec, grid, kind).to_toml()?.as_bytes())?;
        configs.push(path);
    }
    Ok(FleetFixture {
        dir: dir.to_path_buf(),
        electric_config: configs[0].clone(),
        diesel_config: configs[1].clone(),
        electric_points: counts[0],
        diesel_points: counts[1],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_size() {
        let g = Grid::new(GridSpec::default());
        assert_eq!(g.features.len(), 112);
        let map = g.road_map();
        assert_eq!(map.features.len(), 112);
        assert!(map.rejected.is_empty());
    }

    #[test]
    fn bench_route_never_touches_intersections() {
        let g = Grid::new(GridSpec::default());
        let r = bench_route(&g, 500, 10.0, 4.0, 3);
        assert_eq!(r.points.len(), 500);
        for p in &r.points {
            let (x, y) = g.proj.to_xy(*p);
            let dx = (x / 200.0 - (x / 200.0).round()).abs() * 200.0;
            let dy = (y / 200.0 - (y / 200.0).round()).abs() * 200.0;
            assert!(dx.max(dy) > 3.0);
        }
        assert!(r.truth(&g.road_map()).is_ok());
    }

    #[test]
    fn walk_avoids_u_turns() {
        let g = Grid::new(GridSpec::default());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut prev, mut cur) = (None, (3, 3));
        for _ in 0..200 {
            let next = g.step(prev, cur, &mut rng);
            assert_ne!(Some(next), prev);
            prev = Some(cur);
            cur = next;
        }
    }
}
