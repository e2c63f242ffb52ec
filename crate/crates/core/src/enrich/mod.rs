//! Elevation, weather and traffic context attached to each sample.

mod dem;
mod traffic;
mod weather;

use std::io::Write;

use serde::{Deserialize, Serialize};

pub use dem::{elevation_delta, load_dem, parse_ascii_grid, to_ascii_grid, DemRaster, ElevationDelta};
pub use traffic::{
    attach_traffic, best_tmc_path, build_hourly_traffic, load_tmc_geometry, map_tmc_to_osm, path_features,
    read_tmc_geometry, write_tmc_geometry, HourlyTrafficTable, SpeedRatioMode, TmcOsmMapping, TmcSegment,
    TmcTraffic, TrafficFeatures, NEAREST_NODES, TMC_HEADER,
};
pub use weather::{
    attach_weather, build_hourly_weather, time_bucket, HourlyWeatherTable, StationWeather, TimeBucket,
    WeatherFeatures,
};

use crate::error::{Error, Result};
use crate::road_network::{RoadMap, RoadType};
use crate::sampler::Sample;

/// A sample with its road attributes and whichever context groups were
/// available.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichedSample {
    pub sample: Sample,
    pub road_type: RoadType,
    pub elevation_delta: Option<f64>,
    pub elevation_flagged: bool,
    pub weather: Option<WeatherFeatures>,
    pub traffic: Option<TrafficFeatures>,
}

/// Context sources; any may be absent.
#[derive(Debug, Clone, Copy, Default)]
pub struct EnrichContext<'a> {
    pub dem: Option<&'a DemRaster>,
    pub weather: Option<&'a HourlyWeatherTable>,
    pub traffic: Option<(&'a TmcOsmMapping, &'a HourlyTrafficTable)>,
}

pub fn enrich_samples(samples: &[Sample], map: &RoadMap, ctx: EnrichContext<'_>) -> Result<Vec<EnrichedSample>> {
    samples
        .iter()
        .map(|s| {
            let feature = map.feature(&s.feature_id).ok_or_else(|| {
                Error::InvalidInput(format!("sample {} references unknown feature {}", s.key(), s.feature_id))
            })?;
            let elev = ctx.dem.map(|d| elevation_delta(s, d));
            let weather = ctx.weather.map(|w| attach_weather(s, w)).transpose()?;
            Ok(EnrichedSample {
                sample: s.clone(),
                road_type: feature.road_type,
                elevation_delta: elev.map(|e| e.delta),
                elevation_flagged: elev.is_some_and(|e| e.flagged),
                weather,
                traffic: ctx.traffic.map(|(m, t)| attach_traffic(s, m, t)),
            })
        })
        .collect()
}

pub const ENRICHED_HEADER: &[&str] = &[
    "vehicle_id",
    "feature_id",
    "start_ts",
    "end_ts",
    "road_type",
    "distance_m",
    "energy_j_or_gal",
    "delta_soc",
    "elevation_delta_m",
    "temp",
    "humidity",
    "visibility",
    "wind_speed",
    "precip",
    "speed_ratio",
    "jam_factor",
];

pub fn write_enriched<W: Write>(writer: W, rows: &[EnrichedSample]) -> Result<()> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(ENRICHED_HEADER)?;
    for r in rows {
        let s = &r.sample;
        let weather = r.weather.map(|w| w.as_array());
        let mut rec = vec![
            s.vehicle_id.clone(),
            s.feature_id.clone(),
            s.start_ts.to_string(),
            s.end_ts.to_string(),
            r.road_type.to_string(),
            s.distance.to_string(),
            s.energy.to_string(),
            opt(s.delta_soc),
            opt(r.elevation_delta),
        ];
        rec.extend((0..5).map(|i| opt(weather.map(|w| w[i]))));
        rec.push(opt(r.traffic.map(|t| t.speed_ratio)));
        rec.push(opt(r.traffic.map(|t| t.jam_factor)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<enriched writer>", e))?;
    Ok(())
}
