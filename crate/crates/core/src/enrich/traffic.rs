use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{polyline_length, GeoPoint};
use crate::ingest::TrafficRecord;
use crate::road_network::{k_nearest_nodes, shortest_path, RoutePath, RoutingGraph};
use crate::sampler::Sample;

use super::weather::{time_bucket, TimeBucket};

pub const TMC_HEADER: &[&str] = &["tmc_id", "seq", "lat", "lon"];
pub const NEAREST_NODES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TmcSegment {
    pub tmc_id: String,
    pub polyline: Vec<GeoPoint>,
    /// Geometric length in meters.
    pub length: f64,
}

impl TmcSegment {
    pub fn new(tmc_id: impl Into<String>, polyline: Vec<GeoPoint>) -> Result<Self> {
        let tmc_id = tmc_id.into();
        if polyline.len() < 2 {
            return Err(Error::InvalidInput(format!("TMC {tmc_id} has fewer than 2 points")));
        }
        let length = polyline_length(&polyline);
        if !(length > 0.0) {
            return Err(Error::InvalidInput(format!("TMC {tmc_id} has zero length")));
        }
        Ok(TmcSegment {
            tmc_id,
            polyline,
            length,
        })
    }
}

/// Reads `tmc_id,seq,lat,lon` rows into segments ordered by id, with
/// points ordered by `seq`.
pub fn read_tmc_geometry<R: Read>(reader: R) -> Result<Vec<TmcSegment>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if header != TMC_HEADER {
        return Err(Error::Schema {
            path: "<tmc geometry>".into(),
            expected: TMC_HEADER.join(","),
            found: header.join(","),
        });
    }
    let mut groups: BTreeMap<String, Vec<(i64, GeoPoint)>> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::InvalidInput(format!("TMC geometry line {}: bad {what}", i + 2));
        let seq: i64 = rec.get(1).and_then(|s| s.trim().parse().ok()).ok_or_else(|| bad("seq"))?;
        let lat: f64 = rec.get(2).and_then(|s| s.trim().parse().ok()).ok_or_else(|| bad("lat"))?;
        let lon: f64 = rec.get(3).and_then(|s| s.trim().parse().ok()).ok_or_else(|| bad("lon"))?;
        let p = GeoPoint::checked(lat, lon)?;
        groups
            .entry(rec.get(0).unwrap_or_default().trim().to_string())
            .or_default()
            .push((seq, p));
    }
    groups
        .into_iter()
        .map(|(id, mut pts)| {
            pts.sort_by_key(|(s, _)| *s);
            TmcSegment::new(id, pts.into_iter().map(|(_, p)| p).collect())
        })
        .collect()
}

pub fn load_tmc_geometry(path: &Path) -> Result<Vec<TmcSegment>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_tmc_geometry(f)
}

pub fn write_tmc_geometry<W: Write>(writer: W, segments: &[TmcSegment]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(TMC_HEADER)?;
    for s in segments {
        for (i, p) in s.polyline.iter().enumerate() {
            w.write_record([s.tmc_id.clone(), i.to_string(), p.lat.to_string(), p.lon.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io("<tmc writer>", e))?;
    Ok(())
}

/// Among shortest paths between the nearest nodes of the TMC start and end
/// points, the one whose length is closest to the TMC length. Candidate
/// pairs are scanned start-rank-major; the first best wins.
pub fn best_tmc_path(tmc: &TmcSegment, g: &RoutingGraph, k: usize) -> Option<RoutePath> {
    let first = *tmc.polyline.first()?;
    let last = *tmc.polyline.last()?;
    let starts = k_nearest_nodes(g, first, k);
    let ends = k_nearest_nodes(g, last, k);
    let mut best: Option<(f64, RoutePath)> = None;
    for &a in &starts {
        for &b in &ends {
            let Ok(path) = shortest_path(g, a, b) else {
                continue;
            };
            let mismatch = (path.length - tmc.length).abs();
            if best.as_ref().is_none_or(|(m, _)| mismatch < *m) {
                best = Some((mismatch, path));
            }
        }
    }
    best.map(|(_, p)| p)
}

/// Feature ids along the best-matching path, consecutive repeats removed.
pub fn path_features(path: &RoutePath, g: &RoutingGraph) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for &e in &path.edges {
        let id = &g.edges[e].feature_id;
        if out.last() != Some(id) {
            out.push(id.clone());
        }
    }
    out
}

/// OSM features covered by a TMC segment; empty when no candidate pair is
/// connected.
pub fn map_tmc_to_osm(tmc: &TmcSegment, g: &RoutingGraph) -> Vec<String> {
    best_tmc_path(tmc, g, NEAREST_NODES)
        .map(|p| path_features(&p, g))
        .unwrap_or_default()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TmcOsmMapping {
    pub feature_to_tmc: BTreeMap<String, String>,
    /// Features claimed by more than one TMC segment; the first (by TMC id)
    /// is kept.
    pub conflicts: usize,
}

impl TmcOsmMapping {
    /// Maps every segment using its `k` nearest graph nodes at each end.
    pub fn build(segments: &[TmcSegment], g: &RoutingGraph, k: usize) -> TmcOsmMapping {
        let mut sorted: Vec<&TmcSegment> = segments.iter().collect();
        sorted.sort_by(|a, b| a.tmc_id.cmp(&b.tmc_id));
        let mut mapping = TmcOsmMapping::default();
        for tmc in sorted {
            let features = best_tmc_path(tmc, g, k)
                .map(|p| path_features(&p, g))
                .unwrap_or_default();
            if features.is_empty() {
                tracing::warn!(tmc = %tmc.tmc_id, "TMC segment matched no OSM path");
            }
            for f in features {
                if mapping.feature_to_tmc.contains_key(&f) {
                    mapping.conflicts += 1;
                } else {
                    mapping.feature_to_tmc.insert(f, tmc.tmc_id.clone());
                }
            }
        }
        mapping
    }

    pub fn tmc_for(&self, feature_id: &str) -> Option<&str> {
        self.feature_to_tmc.get(feature_id).map(String::as_str)
    }

    /// Writes `feature_id,tmc_id`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["feature_id", "tmc_id"])?;
        for (f, t) in &self.feature_to_tmc {
            w.write_record([f, t])?;
        }
        w.flush().map_err(|e| Error::io("<mapping writer>", e))?;
        Ok(())
    }
}

/// How per-record speeds combine into a bucket speed ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeedRatioMode {
    /// Mean of `speed / free_flow_speed` over records.
    #[default]
    MeanOfRatios,
    /// `mean(speed) / mean(free_flow_speed)`.
    RatioOfMeans,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficFeatures {
    pub speed_ratio: f64,
    pub jam_factor: f64,
}

impl TrafficFeatures {
    /// Imputed for features with no TMC coverage: free flow, no jam.
    pub const FREE_FLOW: TrafficFeatures = TrafficFeatures {
        speed_ratio: 1.0,
        jam_factor: 0.0,
    };
}

#[derive(Debug, Clone, Copy, Default)]
struct TrafficAccum {
    ratio_sum: f64,
    speed_sum: f64,
    free_sum: f64,
    jam_sum: f64,
    n: usize,
}

impl TrafficAccum {
    fn add(&mut self, r: &TrafficRecord) {
        self.ratio_sum += r.speed / r.free_flow_speed;
        self.speed_sum += r.speed;
        self.free_sum += r.free_flow_speed;
        self.jam_sum += r.jam_factor;
        self.n += 1;
    }

    fn mean(&self, mode: SpeedRatioMode) -> TrafficFeatures {
        let n = self.n as f64;
        let speed_ratio = match mode {
            SpeedRatioMode::MeanOfRatios => self.ratio_sum / n,
            SpeedRatioMode::RatioOfMeans => self.speed_sum / self.free_sum,
        };
        TrafficFeatures {
            speed_ratio,
            jam_factor: self.jam_sum / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TmcTraffic {
    pub buckets: BTreeMap<TimeBucket, TrafficFeatures>,
    pub overall: TrafficFeatures,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourlyTrafficTable {
    pub segments: BTreeMap<String, TmcTraffic>,
    pub utc_offset_s: i32,
}

pub fn build_hourly_traffic(records: &[TrafficRecord], mode: SpeedRatioMode, utc_offset_s: i32) -> HourlyTrafficTable {
    let mut acc: BTreeMap<String, (BTreeMap<TimeBucket, TrafficAccum>, TrafficAccum)> = BTreeMap::new();
    for r in records {
        let e = acc.entry(r.tmc_id.clone()).or_default();
        e.0.entry(time_bucket(r.timestamp, utc_offset_s)).or_default().add(r);
        e.1.add(r);
    }
    let segments = acc
        .into_iter()
        .map(|(id, (buckets, all))| {
            (
                id,
                TmcTraffic {
                    buckets: buckets.into_iter().map(|(k, a)| (k, a.mean(mode))).collect(),
                    overall: all.mean(mode),
                },
            )
        })
        .collect();
    HourlyTrafficTable {
        segments,
        utc_offset_s,
    }
}

/// Predicted traffic for a sample at its end time: the bucket mean of its
/// TMC segment, the segment-wide mean when the bucket is empty, and free
/// flow when the feature has no TMC segment with data.
pub fn attach_traffic(sample: &Sample, mapping: &TmcOsmMapping, table: &HourlyTrafficTable) -> TrafficFeatures {
    let Some(seg) = mapping
        .tmc_for(&sample.feature_id)
        .and_then(|t| table.segments.get(t))
    else {
        return TrafficFeatures::FREE_FLOW;
    };
    let bucket = time_bucket(sample.end_ts, table.utc_offset_s);
    seg.buckets.get(&bucket).copied().unwrap_or(seg.overall)
}
