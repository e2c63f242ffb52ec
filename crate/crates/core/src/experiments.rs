//! Desk-scale experiments: feature-group ablations, model comparison and
//! trip-level aggregation of per-sample predictions.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::enrich::EnrichedSample;
use crate::error::{Error, Result};
use crate::ml::{
    encode, fit_and_score, split, Dataset, FeatureConfig, ModelKind, ModelSpec, TargetUnit, TrafficSelection,
    WeatherSelection,
};
use crate::sampler::Sample;

/// Default trip lengths in minutes.
pub const DEFAULT_TRIP_MINUTES: [u32; 11] = [10, 20, 30, 40, 50, 60, 120, 180, 240, 300, 360];

/// Context groups added on top of the base features (distance, road type).
/// Written as `+`-joined tokens: `elevation`, `weather`, `traffic`, `all`,
/// `none`, a weather letter `T`, `H`, `V`, `W`, `P`, or `speed_ratio` /
/// `jam_factor`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureSubset {
    pub elevation: bool,
    pub weather: WeatherSelection,
    pub traffic: TrafficSelection,
}

impl FeatureSubset {
    pub const NONE: FeatureSubset = FeatureSubset {
        elevation: false,
        weather: WeatherSelection {
            temperature: false,
            humidity: false,
            visibility: false,
            wind_speed: false,
            precipitation: false,
        },
        traffic: TrafficSelection {
            speed_ratio: false,
            jam_factor: false,
        },
    };

    /// `base` with its context groups replaced by this subset.
    pub fn apply(&self, base: &FeatureConfig) -> FeatureConfig {
        FeatureConfig {
            elevation: self.elevation,
            weather: self.weather,
            traffic: self.traffic,
            ..*base
        }
    }
}

impl FromStr for FeatureSubset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut out = FeatureSubset::NONE;
        for token in s.split('+').map(str::trim) {
            let w = &mut out.weather;
            match token {
                "none" => {}
                "all" => {
                    out.elevation = true;
                    *w = WeatherSelection::ALL;
                    out.traffic = TrafficSelection::ALL;
                }
                "elevation" => out.elevation = true,
                "weather" => *w = WeatherSelection::ALL,
                "traffic" => out.traffic = TrafficSelection::ALL,
                "T" => w.temperature = true,
                "H" => w.humidity = true,
                "V" => w.visibility = true,
                "W" => w.wind_speed = true,
                "P" => w.precipitation = true,
                "speed_ratio" => out.traffic.speed_ratio = true,
                "jam_factor" => out.traffic.jam_factor = true,
                other => return Err(Error::Config(format!("unknown feature group `{other}` in subset `{s}`"))),
            }
        }
        Ok(out)
    }
}

impl fmt::Display for FeatureSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts: Vec<&str> = Vec::new();
        if self.elevation {
            parts.push("elevation");
        }
        if self.weather == WeatherSelection::ALL {
            parts.push("weather");
        } else {
            for (letter, on) in ["T", "H", "V", "W", "P"].iter().zip(self.weather.flags()) {
                if on {
                    parts.push(letter);
                }
            }
        }
        match (self.traffic.speed_ratio, self.traffic.jam_factor) {
            (true, true) => parts.push("traffic"),
            (true, false) => parts.push("speed_ratio"),
            (false, true) => parts.push("jam_factor"),
            (false, false) => {}
        }
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join("+"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub subset: String,
    pub dimension: usize,
    pub mse: f64,
    pub mae: f64,
}

/// Trains one model per subset on an identical split and reports test
/// metrics. The split depends only on the row count and seed, which every
/// subset shares.
pub fn ablation(
    samples: &[EnrichedSample],
    base: &FeatureConfig,
    subsets: &[FeatureSubset],
    spec: &ModelSpec,
    unit: TargetUnit,
    train_fraction: f64,
    seed: u64,
) -> Result<Vec<AblationRow>> {
    if subsets.is_empty() {
        return Err(Error::Config("ablation needs at least one subset".into()));
    }
    let (train, test) = split(samples.len(), train_fraction, seed)?;
    subsets
        .iter()
        .map(|subset| {
            let cfg = subset.apply(base);
            let data = encode(samples, &cfg, unit)?;
            let scored = fit_and_score(&data, &cfg, spec, &train, &test, seed, "")?;
            tracing::info!(subset = %subset, mse = scored.test_metrics.mse, "ablation subset done");
            Ok(AblationRow {
                subset: subset.to_string(),
                dimension: cfg.dimension(),
                mse: scored.test_metrics.mse,
                mae: scored.test_metrics.mae,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: ModelKind,
    pub train_mse: f64,
    pub mse: f64,
    pub mae: f64,
}

/// Linear regression, decision tree and MLP on the same split.
pub fn compare_models(
    data: &Dataset,
    cfg: &FeatureConfig,
    spec: &ModelSpec,
    train_fraction: f64,
    seed: u64,
) -> Result<Vec<ComparisonRow>> {
    let (train, test) = split(data.len(), train_fraction, seed)?;
    ModelKind::ALL
        .iter()
        .map(|&kind| {
            let scored = fit_and_score(data, cfg, &spec.with_kind(kind), &train, &test, seed, "")?;
            Ok(ComparisonRow {
                model: kind,
                train_mse: scored.train_metrics.mse,
                mse: scored.test_metrics.mse,
                mae: scored.test_metrics.mae,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripReport {
    pub duration_min: u32,
    /// Mean over trips of `|Σ predicted − Σ actual| / |Σ actual|`, in
    /// percent. `None` when no trip qualified.
    pub mean_relative_error_pct: Option<f64>,
    pub trips: usize,
    /// Trips with zero actual energy, left out of the mean.
    pub undefined: usize,
    /// Trailing windows cut short by the end of a vehicle's data, left out
    /// of the mean.
    pub partial: usize,
}

/// Splits each vehicle's samples into consecutive windows of each duration,
/// starting at its first sample, and compares summed predictions with
/// summed actual energy per window. A sample belongs to the window holding
/// its start time. Windows that extend past the vehicle's last sample are
/// reported as partial rather than averaged.
pub fn predict_trips(samples: &[Sample], predictions: &[f64], durations_min: &[u32]) -> Result<Vec<TripReport>> {
    if samples.len() != predictions.len() {
        return Err(Error::DimensionMismatch {
            expected: samples.len(),
            got: predictions.len(),
        });
    }
    if let Some(d) = durations_min.iter().find(|d| **d == 0) {
        return Err(Error::Config(format!("trip duration must be positive, got {d}")));
    }
    let mut by_vehicle: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_vehicle.entry(s.vehicle_id.as_str()).or_default().push(i);
    }
    for idx in by_vehicle.values_mut() {
        idx.sort_by(|&a, &b| samples[a].start_ts.total_cmp(&samples[b].start_ts));
    }
    Ok(durations_min
        .iter()
        .map(|&minutes| {
            let width = minutes as f64 * 60.0;
            let mut errors = Vec::new();
            let (mut undefined, mut partial) = (0, 0);
            for idx in by_vehicle.values() {
                let t0 = samples[idx[0]].start_ts;
                let t_end = idx.iter().map(|&i| samples[i].end_ts).fold(f64::MIN, f64::max);
                let mut windows: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
                for &i in idx {
                    let w = ((samples[i].start_ts - t0) / width).floor() as u64;
                    let e = windows.entry(w).or_default();
                    e.0 += predictions[i];
                    e.1 += samples[i].energy;
                }
                for (w, (pred, actual)) in windows {
                    if t0 + (w + 1) as f64 * width > t_end {
                        partial += 1;
                    } else if actual == 0.0 {
                        undefined += 1;
                    } else {
                        errors.push((pred - actual).abs() / actual.abs());
                    }
                }
            }
            TripReport {
                duration_min: minutes,
                mean_relative_error_pct: (!errors.is_empty())
                    .then(|| 100.0 * errors.iter().sum::<f64>() / errors.len() as f64),
                trips: errors.len(),
                undefined,
                partial,
            }
        })
        .collect())
}

/// Common trailer columns identifying the run that produced a table.
fn provenance(seed: u64, config_hash: &str) -> [String; 2] {
    [seed.to_string(), config_hash.to_string()]
}

pub fn write_ablation_csv<W: Write>(writer: W, rows: &[AblationRow], seed: u64, config_hash: &str) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["subset", "dimension", "mse", "mae", "seed", "config_hash"])?;
    for r in rows {
        let mut rec = vec![r.subset.clone(), r.dimension.to_string(), r.mse.to_string(), r.mae.to_string()];
        rec.extend(provenance(seed, config_hash));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<ablation writer>", e))?;
    Ok(())
}

pub fn write_comparison_csv<W: Write>(writer: W, rows: &[ComparisonRow], seed: u64, config_hash: &str) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["model", "train_mse", "mse", "mae", "seed", "config_hash"])?;
    for r in rows {
        let mut rec = vec![
            r.model.to_string(),
            r.train_mse.to_string(),
            r.mse.to_string(),
            r.mae.to_string(),
        ];
        rec.extend(provenance(seed, config_hash));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<comparison writer>", e))?;
    Ok(())
}

/// One row per (model, duration).
pub fn write_trips_csv<W: Write>(
    writer: W,
    rows: &[(ModelKind, Vec<TripReport>)],
    seed: u64,
    config_hash: &str,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "model",
        "duration_min",
        "mean_relative_error_pct",
        "trips",
        "undefined",
        "partial",
        "seed",
        "config_hash",
    ])?;
    for (model, reports) in rows {
        for r in reports {
            let mut rec = vec![
                model.to_string(),
                r.duration_min.to_string(),
                r.mean_relative_error_pct.map(|v| v.to_string()).unwrap_or_default(),
                r.trips.to_string(),
                r.undefined.to_string(),
                r.partial.to_string(),
            ];
            rec.extend(provenance(seed, config_hash));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io("<trips writer>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::GeoPoint;

    fn sample(vehicle: &str, start: f64, energy: f64) -> Sample {
        let p = GeoPoint::new(35.0, -85.0);
        Sample {
            vehicle_id: vehicle.into(),
            feature_id: "f".into(),
            start_point: p,
            end_point: p,
            start_ts: start,
            end_ts: start + 60.0,
            energy,
            delta_soc: None,
            distance: 100.0,
            points: 2,
        }
    }

    #[test]
    fn subset_grammar() {
        let s: FeatureSubset = "elevation+T+P".parse().unwrap();
        assert!(s.elevation && s.weather.temperature && s.weather.precipitation && !s.weather.humidity);
        assert_eq!(s.to_string(), "elevation+T+P");
        assert_eq!("all".parse::<FeatureSubset>().unwrap().to_string(), "elevation+weather+traffic");
        assert_eq!("none".parse::<FeatureSubset>().unwrap(), FeatureSubset::NONE);
        assert!("humidity".parse::<FeatureSubset>().is_err());
        let all = "all".parse::<FeatureSubset>().unwrap().apply(&FeatureConfig::base());
        assert_eq!(all.dimension(), 23);
    }

    #[test]
    fn identity_predictor_has_zero_error() {
        let samples: Vec<Sample> = (0..30).map(|i| sample("a", i as f64 * 60.0, 1.0 + i as f64)).collect();
        let preds: Vec<f64> = samples.iter().map(|s| s.energy).collect();
        let r = predict_trips(&samples, &preds, &[10]).unwrap();
        assert_eq!(r[0].mean_relative_error_pct, Some(0.0));
        assert_eq!(r[0].trips, 3);
    }

    #[test]
    fn single_sample_trip() {
        let samples = vec![sample("a", 0.0, 4.0)];
        let r = predict_trips(&samples, &[5.0], &[1]).unwrap();
        assert_eq!(r[0].trips, 1);
        assert!((r[0].mean_relative_error_pct.unwrap() - 25.0).abs() < 1e-12);
    }

    #[test]
    fn zero_actual_is_undefined_and_short_data_is_partial() {
        let samples = vec![sample("a", 0.0, 0.0), sample("a", 600.0, 1.0), sample("a", 900.0, 1.0)];
        let r = predict_trips(&samples, &[1.0, 1.0, 1.0], &[10, 60]).unwrap();
        assert_eq!((r[0].trips, r[0].undefined, r[0].partial), (0, 1, 1));
        assert_eq!(r[1].mean_relative_error_pct, None);
        assert_eq!(r[1].partial, 1);
    }
}
