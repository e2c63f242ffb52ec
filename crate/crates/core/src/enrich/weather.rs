use std::collections::BTreeMap;

use chrono::{DateTime, Datelike, FixedOffset, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{haversine, GeoPoint};
use crate::ingest::WeatherRecord;
use crate::sampler::Sample;

/// (day of week with Monday = 0, hour of day) in the configured local time.
pub type TimeBucket = (u8, u8);

/// Buckets an epoch timestamp at a fixed UTC offset.
pub fn time_bucket(ts: f64, utc_offset_s: i32) -> TimeBucket {
    let offset = FixedOffset::east_opt(utc_offset_s).unwrap_or(FixedOffset::east_opt(0).expect("zero offset"));
    let secs = ts.floor() as i64;
    let dt = DateTime::from_timestamp(secs, 0)
        .unwrap_or_default()
        .with_timezone(&offset);
    (dt.weekday().num_days_from_monday() as u8, dt.hour() as u8)
}

/// Mean temperature, humidity, visibility, wind speed and precipitation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeatherFeatures {
    pub temperature: f64,
    pub humidity: f64,
    pub visibility: f64,
    pub wind_speed: f64,
    pub precipitation: f64,
}

impl WeatherFeatures {
    pub fn as_array(&self) -> [f64; 5] {
        [
            self.temperature,
            self.humidity,
            self.visibility,
            self.wind_speed,
            self.precipitation,
        ]
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Accum {
    sums: [f64; 5],
    n: usize,
}

impl Accum {
    fn add(&mut self, r: &WeatherRecord) {
        let v = [r.temperature, r.humidity, r.visibility, r.wind_speed, r.precipitation];
        for (s, x) in self.sums.iter_mut().zip(v) {
            *s += x;
        }
        self.n += 1;
    }

    fn mean(&self) -> WeatherFeatures {
        let n = self.n as f64;
        WeatherFeatures {
            temperature: self.sums[0] / n,
            humidity: self.sums[1] / n,
            visibility: self.sums[2] / n,
            wind_speed: self.sums[3] / n,
            precipitation: self.sums[4] / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationWeather {
    pub position: GeoPoint,
    pub buckets: BTreeMap<TimeBucket, WeatherFeatures>,
    /// Station-wide means, used when a bucket has no history.
    pub fallback: WeatherFeatures,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourlyWeatherTable {
    pub stations: BTreeMap<String, StationWeather>,
    pub utc_offset_s: i32,
}

impl HourlyWeatherTable {
    /// Prediction for a station at a time: bucket mean, else station mean.
    pub fn predict(&self, station_id: &str, ts: f64) -> Option<WeatherFeatures> {
        let st = self.stations.get(station_id)?;
        let bucket = time_bucket(ts, self.utc_offset_s);
        Some(st.buckets.get(&bucket).copied().unwrap_or(st.fallback))
    }

    /// Closest station to `p`; equidistant stations resolve to the lower id.
    pub fn closest_station(&self, p: GeoPoint) -> Option<&str> {
        self.stations
            .iter()
            .map(|(id, st)| (haversine(p, st.position), id))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)))
            .map(|(_, id)| id.as_str())
    }
}

/// Historical means per station and (day of week, hour) bucket. A station's
/// position is taken from its first record.
pub fn build_hourly_weather(records: &[WeatherRecord], utc_offset_s: i32) -> HourlyWeatherTable {
    let mut per_station: BTreeMap<String, (GeoPoint, BTreeMap<TimeBucket, Accum>, Accum)> = BTreeMap::new();
    for r in records {
        let entry = per_station
            .entry(r.station_id.clone())
            .or_insert_with(|| (r.station_position, BTreeMap::new(), Accum::default()));
        entry
            .1
            .entry(time_bucket(r.timestamp, utc_offset_s))
            .or_default()
            .add(r);
        entry.2.add(r);
    }
    let stations = per_station
        .into_iter()
        .map(|(id, (position, buckets, all))| {
            (
                id,
                StationWeather {
                    position,
                    buckets: buckets.into_iter().map(|(k, a)| (k, a.mean())).collect(),
                    fallback: all.mean(),
                },
            )
        })
        .collect();
    HourlyWeatherTable {
        stations,
        utc_offset_s,
    }
}

/// Weather predicted for the sample at its end point and end time, from the
/// closest station.
pub fn attach_weather(sample: &Sample, table: &HourlyWeatherTable) -> Result<WeatherFeatures> {
    let station = table
        .closest_station(sample.end_point)
        .ok_or_else(|| Error::InvalidInput("weather table has no stations".into()))?;
    table
        .predict(station, sample.end_ts)
        .ok_or_else(|| Error::InvalidInput(format!("station {station} vanished")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(station: &str, pos: GeoPoint, ts: f64, t: f64) -> WeatherRecord {
        WeatherRecord {
            station_id: station.into(),
            timestamp: ts,
            station_position: pos,
            temperature: t,
            humidity: 0.5,
            visibility: 10.0,
            wind_speed: 2.0,
            precipitation: 0.0,
        }
    }

    fn sample_at(p: GeoPoint, ts: f64) -> Sample {
        Sample {
            vehicle_id: "v".into(),
            feature_id: "f".into(),
            start_point: p,
            end_point: p,
            start_ts: ts - 10.0,
            end_ts: ts,
            energy: 0.0,
            delta_soc: None,
            distance: 0.0,
            points: 2,
        }
    }

    #[test]
    fn epoch_bucket() {
        // 1970-01-01 was a Thursday.
        assert_eq!(time_bucket(0.0, 0), (3, 0));
        assert_eq!(time_bucket(3600.0 * 5.5, 0), (3, 5));
        // UTC-5 moves midnight back into Wednesday evening.
        assert_eq!(time_bucket(0.0, -5 * 3600), (2, 19));
    }

    #[test]
    fn single_record_fills_bucket_and_fallback() {
        let p = GeoPoint::new(35.0, -85.0);
        let t = build_hourly_weather(&[rec("s", p, 100.0, 21.0)], 0);
        let st = &t.stations["s"];
        assert_eq!(st.buckets.len(), 1);
        assert_eq!(st.buckets[&(3, 0)].temperature, 21.0);
        assert_eq!(st.fallback.temperature, 21.0);
    }

    #[test]
    fn bucket_mean_and_fallback() {
        let p = GeoPoint::new(35.0, -85.0);
        let t = build_hourly_weather(&[rec("s", p, 100.0, 10.0), rec("s", p, 200.0, 20.0), rec("s", p, 7200.0, 40.0)], 0);
        assert_eq!(t.predict("s", 50.0).unwrap().temperature, 15.0);
        // Empty bucket (hour 5) falls back to the station-wide mean.
        let fb = t.predict("s", 5.0 * 3600.0).unwrap().temperature;
        assert!((fb - 70.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn closest_station_wins_and_ties_use_id() {
        let here = GeoPoint::new(35.0, -85.0);
        let near = GeoPoint::new(35.009, -85.0);
        let far = GeoPoint::new(35.09, -85.0);
        let t = build_hourly_weather(&[rec("z-near", near, 0.0, 1.0), rec("a-far", far, 0.0, 2.0)], 0);
        assert_eq!(attach_weather(&sample_at(here, 0.0), &t).unwrap().temperature, 1.0);

        let east = GeoPoint::new(35.0, -84.99);
        let west = GeoPoint::new(35.0, -85.01);
        let t = build_hourly_weather(&[rec("b", east, 0.0, 1.0), rec("a", west, 0.0, 2.0)], 0);
        assert_eq!(t.closest_station(here), Some("a"));
        assert_eq!(attach_weather(&sample_at(here, 0.0), &t).unwrap().temperature, 2.0);

        let only = build_hourly_weather(&[rec("x", far, 0.0, 9.0)], 0);
        assert_eq!(attach_weather(&sample_at(here, 0.0), &only).unwrap().temperature, 9.0);
    }
}
