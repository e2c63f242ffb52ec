//! Raw telemetry, weather and traffic ingestion plus the first cleaning
//! passes: garage and charging removal, per-interval energy and fuel use.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{point_in_ring, ring_is_simple, GeoPoint};

pub const ELECTRIC_HEADER: &[&str] = &[
    "vehicle_id",
    "timestamp",
    "lat",
    "lon",
    "current_a",
    "voltage_v",
    "soc_pct",
    "cable",
];
pub const DIESEL_HEADER: &[&str] = &[
    "vehicle_id",
    "timestamp",
    "lat",
    "lon",
    "fuel_level_gal",
    "total_fuel_gal",
];
pub const WEATHER_HEADER: &[&str] = &[
    "station_id",
    "timestamp",
    "lat",
    "lon",
    "temp",
    "humidity",
    "visibility",
    "wind_speed",
    "precip",
];
pub const TRAFFIC_HEADER: &[&str] = &[
    "tmc_id",
    "timestamp",
    "speed_kmh",
    "freeflow_kmh",
    "jam_factor",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VehicleKind {
    Electric,
    Diesel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    Electric {
        current: f64,
        voltage: f64,
        soc: f64,
        cable_connected: bool,
    },
    Diesel {
        fuel_level: f64,
        total_fuel_used: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryPoint {
    pub vehicle_id: String,
    pub timestamp: f64,
    pub position: GeoPoint,
    pub payload: Payload,
}

impl TelemetryPoint {
    pub fn kind(&self) -> VehicleKind {
        match self.payload {
            Payload::Electric { .. } => VehicleKind::Electric,
            Payload::Diesel { .. } => VehicleKind::Diesel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeatherRecord {
    pub station_id: String,
    pub timestamp: f64,
    pub station_position: GeoPoint,
    pub temperature: f64,
    /// Always a fraction in `[0, 1]` after ingestion.
    pub humidity: f64,
    pub visibility: f64,
    pub wind_speed: f64,
    pub precipitation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficRecord {
    pub tmc_id: String,
    pub timestamp: f64,
    pub speed: f64,
    pub free_flow_speed: f64,
    pub jam_factor: f64,
}

/// How the humidity column of a weather file is expressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HumidityScale {
    #[default]
    Fraction,
    Percent,
}

/// A rejected input row and why.
#[derive(Debug, Clone, PartialEq)]
pub struct RowReject {
    /// 1-based line number in the source file (header is line 1).
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct Parsed<T> {
    pub items: Vec<T>,
    /// Data rows read, excluding the header.
    pub rows: usize,
    pub rejected: Vec<RowReject>,
}

/// Closed polygon delimiting a depot area.
#[derive(Debug, Clone, PartialEq)]
pub struct GarageZone {
    ring: Vec<GeoPoint>,
}

impl GarageZone {
    /// Accepts an open or explicitly closed ring of at least three distinct
    /// vertices that does not intersect itself.
    pub fn new(mut vertices: Vec<GeoPoint>) -> Result<Self> {
        if vertices.len() > 1 && vertices.first() == vertices.last() {
            vertices.pop();
        }
        if vertices.len() < 3 {
            return Err(Error::InvalidInput(format!(
                "garage polygon needs at least 3 vertices, got {}",
                vertices.len()
            )));
        }
        if let Some(bad) = vertices.iter().find(|p| !p.is_valid()) {
            return Err(Error::InvalidInput(format!(
                "garage vertex out of range: {bad:?}"
            )));
        }
        if !ring_is_simple(&vertices) {
            return Err(Error::InvalidInput(
                "garage polygon is self-intersecting".into(),
            ));
        }
        Ok(GarageZone { ring: vertices })
    }

    pub fn vertices(&self) -> &[GeoPoint] {
        &self.ring
    }

    pub fn contains(&self, p: GeoPoint) -> bool {
        point_in_ring(p, &self.ring)
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn check_header(path: &Path, headers: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    let found: Vec<&str> = headers.iter().map(str::trim).collect();
    if found != expected {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            expected: expected.join(","),
            found: found.join(","),
        });
    }
    Ok(())
}

fn field<'a>(rec: &'a csv::StringRecord, i: usize, name: &str) -> std::result::Result<&'a str, String> {
    rec.get(i)
        .map(str::trim)
        .ok_or_else(|| format!("missing column `{name}`"))
}

fn num(rec: &csv::StringRecord, i: usize, name: &str) -> std::result::Result<f64, String> {
    let raw = field(rec, i, name)?;
    let v: f64 = raw
        .parse()
        .map_err(|_| format!("column `{name}`: cannot parse `{raw}` as a number"))?;
    if !v.is_finite() {
        return Err(format!("column `{name}`: non-finite value"));
    }
    Ok(v)
}

fn position(rec: &csv::StringRecord, lat_i: usize) -> std::result::Result<GeoPoint, String> {
    let lat = num(rec, lat_i, "lat")?;
    let lon = num(rec, lat_i + 1, "lon")?;
    let p = GeoPoint::new(lat, lon);
    if !p.is_valid() {
        return Err(format!("coordinate out of range: lat={lat}, lon={lon}"));
    }
    Ok(p)
}

/// Reads a CSV with a fixed header, converting each row with `convert`.
/// Rows that fail conversion are collected as rejects.
fn read_rows<R: Read, T>(
    reader: R,
    path: &Path,
    expected: &[&str],
    mut convert: impl FnMut(&csv::StringRecord) -> std::result::Result<T, String>,
) -> Result<Parsed<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    check_header(path, rdr.headers()?, expected)?;
    let mut items = Vec::new();
    let mut rejected = Vec::new();
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        rows += 1;
        let line = i as u64 + 2;
        match rec {
            Ok(rec) if rec.len() != expected.len() => rejected.push(RowReject {
                line,
                reason: format!("expected {} fields, found {}", expected.len(), rec.len()),
            }),
            Ok(rec) => match convert(&rec) {
                Ok(item) => items.push(item),
                Err(reason) => rejected.push(RowReject { line, reason }),
            },
            Err(e) => rejected.push(RowReject {
                line,
                reason: e.to_string(),
            }),
        }
    }
    Ok(Parsed {
        items,
        rows,
        rejected,
    })
}

fn telemetry_row(
    rec: &csv::StringRecord,
    kind: VehicleKind,
) -> std::result::Result<TelemetryPoint, String> {
    let vehicle_id = field(rec, 0, "vehicle_id")?.to_string();
    if vehicle_id.is_empty() {
        return Err("empty vehicle_id".into());
    }
    let timestamp = num(rec, 1, "timestamp")?;
    let position = position(rec, 2)?;
    let payload = match kind {
        VehicleKind::Electric => {
            let soc = num(rec, 6, "soc_pct")?;
            if !(0.0..=100.0).contains(&soc) {
                return Err(format!("soc_pct {soc} outside [0, 100]"));
            }
            let cable = match field(rec, 7, "cable")? {
                "0" => false,
                "1" => true,
                other => return Err(format!("cable must be 0 or 1, found `{other}`")),
            };
            Payload::Electric {
                current: num(rec, 4, "current_a")?,
                voltage: num(rec, 5, "voltage_v")?,
                soc,
                cable_connected: cable,
            }
        }
        VehicleKind::Diesel => Payload::Diesel {
            fuel_level: num(rec, 4, "fuel_level_gal")?,
            total_fuel_used: num(rec, 5, "total_fuel_gal")?,
        },
    };
    Ok(TelemetryPoint {
        vehicle_id,
        timestamp,
        position,
        payload,
    })
}

/// Orders points by (vehicle, timestamp) and collapses duplicate
/// timestamps within a vehicle to the last record read.
pub fn normalize_series(points: Vec<TelemetryPoint>) -> Vec<TelemetryPoint> {
    let mut indexed: Vec<(usize, TelemetryPoint)> = points.into_iter().enumerate().collect();
    indexed.sort_by(|(ia, a), (ib, b)| {
        a.vehicle_id
            .cmp(&b.vehicle_id)
            .then(a.timestamp.total_cmp(&b.timestamp))
            .then(ia.cmp(ib))
    });
    let mut out: Vec<TelemetryPoint> = Vec::with_capacity(indexed.len());
    for (_, p) in indexed {
        match out.last_mut() {
            Some(last) if last.vehicle_id == p.vehicle_id && last.timestamp == p.timestamp => {
                *last = p;
            }
            _ => out.push(p),
        }
    }
    out
}

pub fn read_telemetry<R: Read>(reader: R, path: &Path, kind: VehicleKind) -> Result<Parsed<TelemetryPoint>> {
    let header = match kind {
        VehicleKind::Electric => ELECTRIC_HEADER,
        VehicleKind::Diesel => DIESEL_HEADER,
    };
    let mut parsed = read_rows(reader, path, header, |rec| telemetry_row(rec, kind))?;
    parsed.items = normalize_series(std::mem::take(&mut parsed.items));
    Ok(parsed)
}

/// Parses a telemetry CSV. Malformed rows are rejected individually; a
/// header that does not match the schema for `kind` is fatal.
pub fn parse_telemetry(path: &Path, kind: VehicleKind) -> Result<Parsed<TelemetryPoint>> {
    let parsed = read_telemetry(open(path)?, path, kind)?;
    for r in &parsed.rejected {
        tracing::warn!(file = %path.display(), line = r.line, reason = %r.reason, "rejected telemetry row");
    }
    tracing::info!(
        file = %path.display(),
        rows = parsed.rows,
        rejected = parsed.rejected.len(),
        "parsed telemetry"
    );
    Ok(parsed)
}

/// Writes points in the CSV schema matching their payload kind.
pub fn write_telemetry<W: Write>(writer: W, kind: VehicleKind, points: &[TelemetryPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    match kind {
        VehicleKind::Electric => w.write_record(ELECTRIC_HEADER)?,
        VehicleKind::Diesel => w.write_record(DIESEL_HEADER)?,
    }
    for (i, p) in points.iter().enumerate() {
        let mut rec = vec![
            p.vehicle_id.clone(),
            p.timestamp.to_string(),
            p.position.lat.to_string(),
            p.position.lon.to_string(),
        ];
        match (kind, p.payload) {
            (
                VehicleKind::Electric,
                Payload::Electric {
                    current,
                    voltage,
                    soc,
                    cable_connected,
                },
            ) => rec.extend([
                current.to_string(),
                voltage.to_string(),
                soc.to_string(),
                if cable_connected { "1" } else { "0" }.to_string(),
            ]),
            (
                VehicleKind::Diesel,
                Payload::Diesel {
                    fuel_level,
                    total_fuel_used,
                },
            ) => rec.extend([fuel_level.to_string(), total_fuel_used.to_string()]),
            (VehicleKind::Electric, _) => return Err(Error::NotElectric { index: i }),
            (VehicleKind::Diesel, _) => return Err(Error::NotDiesel { index: i }),
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<telemetry writer>", e))?;
    Ok(())
}

pub fn read_weather<R: Read>(reader: R, path: &Path, scale: HumidityScale) -> Result<Parsed<WeatherRecord>> {
    read_rows(reader, path, WEATHER_HEADER, |rec| {
        let station_id = field(rec, 0, "station_id")?.to_string();
        let raw_h = num(rec, 5, "humidity")?;
        let humidity = match scale {
            HumidityScale::Fraction => raw_h,
            HumidityScale::Percent => raw_h / 100.0,
        };
        if !(0.0..=1.0).contains(&humidity) {
            return Err(format!("humidity {raw_h} outside declared {scale:?} range"));
        }
        Ok(WeatherRecord {
            station_id,
            timestamp: num(rec, 1, "timestamp")?,
            station_position: position(rec, 2)?,
            temperature: num(rec, 4, "temp")?,
            humidity,
            visibility: num(rec, 6, "visibility")?,
            wind_speed: num(rec, 7, "wind_speed")?,
            precipitation: num(rec, 8, "precip")?,
        })
    })
}

pub fn parse_weather(path: &Path, scale: HumidityScale) -> Result<Parsed<WeatherRecord>> {
    read_weather(open(path)?, path, scale)
}

pub fn read_traffic<R: Read>(reader: R, path: &Path) -> Result<Parsed<TrafficRecord>> {
    read_rows(reader, path, TRAFFIC_HEADER, |rec| {
        let free_flow_speed = num(rec, 3, "freeflow_kmh")?;
        if free_flow_speed <= 0.0 {
            return Err(format!("freeflow_kmh must be positive, found {free_flow_speed}"));
        }
        let jam_factor = num(rec, 4, "jam_factor")?;
        if !(0.0..=10.0).contains(&jam_factor) {
            return Err(format!("jam_factor {jam_factor} outside [0, 10]"));
        }
        let speed = num(rec, 2, "speed_kmh")?;
        if speed < 0.0 {
            return Err(format!("negative speed {speed}"));
        }
        Ok(TrafficRecord {
            tmc_id: field(rec, 0, "tmc_id")?.to_string(),
            timestamp: num(rec, 1, "timestamp")?,
            speed,
            free_flow_speed,
            jam_factor,
        })
    })
}

pub fn parse_traffic(path: &Path) -> Result<Parsed<TrafficRecord>> {
    read_traffic(open(path)?, path)
}

/// Keeps the points lying outside the garage polygon, preserving order.
pub fn remove_garage_points(points: &[TelemetryPoint], zone: &GarageZone) -> Vec<TelemetryPoint> {
    points
        .iter()
        .filter(|p| !zone.contains(p.position))
        .cloned()
        .collect()
}

/// Drops points recorded while the charging cable was connected.
pub fn remove_charging_points(points: &[TelemetryPoint]) -> Result<Vec<TelemetryPoint>> {
    let mut out = Vec::with_capacity(points.len());
    for (index, p) in points.iter().enumerate() {
        match p.payload {
            Payload::Electric {
                cable_connected, ..
            } => {
                if !cable_connected {
                    out.push(p.clone());
                }
            }
            Payload::Diesel { .. } => return Err(Error::NotElectric { index }),
        }
    }
    Ok(out)
}

/// A quantity accumulated between two consecutive datapoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalValue {
    pub start_ts: f64,
    pub end_ts: f64,
    pub value: f64,
}

fn check_monotone(points: &[TelemetryPoint]) -> Result<()> {
    for (i, w) in points.windows(2).enumerate() {
        if w[1].timestamp <= w[0].timestamp {
            return Err(Error::NonMonotone {
                index: i + 1,
                previous: w[0].timestamp,
                current: w[1].timestamp,
            });
        }
    }
    Ok(())
}

/// Energy in joules drawn over each consecutive interval, using the current
/// and voltage recorded at the interval's closing datapoint. Negative values
/// (regeneration) are kept.
pub fn estimate_electric_energy(points: &[TelemetryPoint]) -> Result<Vec<IntervalValue>> {
    check_monotone(points)?;
    let mut out = Vec::with_capacity(points.len().saturating_sub(1));
    for (i, w) in points.windows(2).enumerate() {
        let (current, voltage) = match w[1].payload {
            Payload::Electric {
                current, voltage, ..
            } => (current, voltage),
            Payload::Diesel { .. } => return Err(Error::NotElectric { index: i + 1 }),
        };
        if let Payload::Diesel { .. } = w[0].payload {
            return Err(Error::NotElectric { index: i });
        }
        out.push(IntervalValue {
            start_ts: w[0].timestamp,
            end_ts: w[1].timestamp,
            value: current * voltage * (w[1].timestamp - w[0].timestamp),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FuelDeltas {
    pub intervals: Vec<IntervalValue>,
    /// Intervals where the cumulative fuel counter decreased.
    pub negative: usize,
}

/// Gallons consumed per interval from the cumulative fuel counter. Counter
/// decreases are counted and, when `clamp_negative` is set, replaced by 0.
pub fn fuel_delta(points: &[TelemetryPoint], clamp_negative: bool) -> Result<FuelDeltas> {
    check_monotone(points)?;
    let totals = points
        .iter()
        .enumerate()
        .map(|(index, p)| match p.payload {
            Payload::Diesel {
                total_fuel_used, ..
            } => Ok(total_fuel_used),
            Payload::Electric { .. } => Err(Error::NotDiesel { index }),
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut negative = 0;
    let intervals = points
        .windows(2)
        .zip(totals.windows(2))
        .map(|(pw, tw)| {
            let mut value = tw[1] - tw[0];
            if value < 0.0 {
                negative += 1;
                tracing::debug!(at = pw[1].timestamp, delta = value, "fuel counter decreased");
                if clamp_negative {
                    value = 0.0;
                }
            }
            IntervalValue {
                start_ts: pw[0].timestamp,
                end_ts: pw[1].timestamp,
                value,
            }
        })
        .collect();
    Ok(FuelDeltas {
        intervals,
        negative,
    })
}

/// Cross-check of current/voltage integration against the coarse SoC signal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SocCheck {
    pub estimated_j: f64,
    pub soc_implied_j: f64,
}

impl SocCheck {
    /// `(estimated - soc_implied) / soc_implied`.
    pub fn relative_bias(&self) -> f64 {
        (self.estimated_j - self.soc_implied_j) / self.soc_implied_j
    }
}

/// Compares total integrated energy with the SoC drop over the same series,
/// converting percent SoC to joules with the given battery capacity.
pub fn soc_energy_check(points: &[TelemetryPoint], capacity_j: f64) -> Result<SocCheck> {
    let energy = estimate_electric_energy(points)?;
    let soc = |p: &TelemetryPoint| match p.payload {
        Payload::Electric { soc, .. } => soc,
        Payload::Diesel { .. } => f64::NAN,
    };
    let (first, last) = match (points.first(), points.last()) {
        (Some(f), Some(l)) if points.len() >= 2 => (f, l),
        _ => {
            return Err(Error::InvalidInput(
                "SoC check needs at least two datapoints".into(),
            ))
        }
    };
    Ok(SocCheck {
        estimated_j: energy.iter().map(|e| e.value).sum(),
        soc_implied_j: (soc(first) - soc(last)) / 100.0 * capacity_j,
    })
}

/// Splits a normalized series into per-vehicle runs.
pub fn split_by_vehicle(points: &[TelemetryPoint]) -> Vec<&[TelemetryPoint]> {
    points
        .chunk_by(|a, b| a.vehicle_id == b.vehicle_id)
        .collect()
}
