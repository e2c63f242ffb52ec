//! Per-feature sample generation, travel distance along the matched road,
//! and removal of implausible electric samples.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{point_to_segment_distance, GeoPoint, LocalProjection};
use crate::ingest::TelemetryPoint;
use crate::road_network::RoadMap;

pub const DEFAULT_GAP_THRESHOLD_S: f64 = 60.0;
pub const DEFAULT_MIN_DELTA_SOC: f64 = -0.2;

pub const SAMPLE_HEADER: &[&str] = &[
    "vehicle_id",
    "feature_id",
    "start_ts",
    "end_ts",
    "start_lat",
    "start_lon",
    "end_lat",
    "end_lon",
    "distance_m",
    "energy_j_or_gal",
    "delta_soc",
];

/// Maximal continuous travel of one vehicle on one feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub vehicle_id: String,
    pub feature_id: String,
    pub start_point: GeoPoint,
    pub end_point: GeoPoint,
    pub start_ts: f64,
    pub end_ts: f64,
    /// Joules for electric vehicles, gallons for diesel.
    pub energy: f64,
    /// State-of-charge drop in percentage points (electric only).
    pub delta_soc: Option<f64>,
    pub distance: f64,
    /// Datapoints covered by the sample.
    pub points: usize,
}

impl Sample {
    pub fn duration(&self) -> f64 {
        self.end_ts - self.start_ts
    }

    /// Stable identifier used in diagnostics.
    pub fn key(&self) -> String {
        format!("{}@{}", self.vehicle_id, self.start_ts)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Runs of a single datapoint, which carry no interval.
    pub dropped_short_runs: usize,
    /// Intervals not attributed to any sample (feature changes, unmatched
    /// points, time gaps).
    pub excluded_intervals: usize,
    pub excluded_energy: f64,
    pub erroneous_removed: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub samples: Vec<Sample>,
    pub provenance: Provenance,
}

impl SampleSet {
    /// Concatenates per-vehicle sets, re-sorting by (vehicle, start time).
    pub fn merge(sets: impl IntoIterator<Item = SampleSet>) -> SampleSet {
        let mut out = SampleSet::default();
        for s in sets {
            out.samples.extend(s.samples);
            out.provenance.dropped_short_runs += s.provenance.dropped_short_runs;
            out.provenance.excluded_intervals += s.provenance.excluded_intervals;
            out.provenance.excluded_energy += s.provenance.excluded_energy;
            out.provenance.erroneous_removed += s.provenance.erroneous_removed;
        }
        out.sort();
        out
    }

    fn sort(&mut self) {
        self.samples.sort_by(|a, b| {
            a.vehicle_id
                .cmp(&b.vehicle_id)
                .then(a.start_ts.total_cmp(&b.start_ts))
        });
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentParams {
    pub gap_threshold_s: f64,
    /// Battery capacity used to express energy as SoC percentage points.
    pub battery_capacity_j: Option<f64>,
}

impl Default for SegmentParams {
    fn default() -> Self {
        SegmentParams {
            gap_threshold_s: DEFAULT_GAP_THRESHOLD_S,
            battery_capacity_j: None,
        }
    }
}

/// Splits one vehicle's matched series into samples.
///
/// `intervals[k]` is the energy (or fuel) used between `points[k]` and
/// `points[k + 1]`. A run ends at a feature change, an unmatched point, or
/// a time gap above the threshold; intervals between runs are excluded.
pub fn segment_samples(
    points: &[TelemetryPoint],
    features: &[Option<String>],
    intervals: &[f64],
    params: SegmentParams,
) -> Result<SampleSet> {
    if features.len() != points.len() {
        return Err(Error::DimensionMismatch {
            expected: points.len(),
            got: features.len(),
        });
    }
    if intervals.len() != points.len().saturating_sub(1) {
        return Err(Error::DimensionMismatch {
            expected: points.len().saturating_sub(1),
            got: intervals.len(),
        });
    }
    if let Some(p) = points.iter().find(|p| p.vehicle_id != points[0].vehicle_id) {
        return Err(Error::InvalidInput(format!(
            "segment_samples expects one vehicle, found {} and {}",
            points[0].vehicle_id, p.vehicle_id
        )));
    }

    let mut set = SampleSet::default();
    let mut in_sample = vec![false; intervals.len()];
    let mut close = |start: usize, end: usize, set: &mut SampleSet| {
        if end == start {
            set.provenance.dropped_short_runs += 1;
            return;
        }
        let energy: f64 = intervals[start..end].iter().sum();
        in_sample[start..end].iter_mut().for_each(|f| *f = true);
        let (s, e) = (&points[start], &points[end]);
        set.samples.push(Sample {
            vehicle_id: s.vehicle_id.clone(),
            feature_id: features[start].clone().unwrap_or_default(),
            start_point: s.position,
            end_point: e.position,
            start_ts: s.timestamp,
            end_ts: e.timestamp,
            energy,
            delta_soc: params.battery_capacity_j.map(|c| energy / c * 100.0),
            distance: 0.0,
            points: end - start + 1,
        });
    };

    let mut run: Option<usize> = None;
    for k in 0..points.len() {
        if let Some(start) = run {
            let continues = features[k].is_some()
                && features[k] == features[start]
                && points[k].timestamp - points[k - 1].timestamp <= params.gap_threshold_s;
            if continues {
                continue;
            }
            close(start, k - 1, &mut set);
            run = None;
        }
        if features[k].is_some() {
            run = Some(k);
        }
    }
    if let Some(start) = run {
        close(start, points.len() - 1, &mut set);
    }

    for (v, used) in intervals.iter().zip(&in_sample) {
        if !used {
            set.provenance.excluded_intervals += 1;
            set.provenance.excluded_energy += v;
        }
    }
    set.sort();
    Ok(set)
}

/// Distance traveled along a feature between the sample's start and end
/// locations.
///
/// The segments nearest each location (lowest index on ties) bound the
/// traversal: the partial distance to the end of the first, the full length
/// of every segment strictly between, and the partial distance from the
/// start of the last. When both locations are nearest the same segment the
/// straight-line distance between them is used.
pub fn travel_distance(start: GeoPoint, end: GeoPoint, polyline: &[GeoPoint]) -> f64 {
    let proj = LocalProjection::new(start);
    let s = proj.to_xy(start);
    let e = proj.to_xy(end);
    let dist = |a: (f64, f64), b: (f64, f64)| (a.0 - b.0).hypot(a.1 - b.1);
    let xy: Vec<(f64, f64)> = polyline.iter().map(|p| proj.to_xy(*p)).collect();
    if xy.len() < 2 {
        return dist(s, e);
    }
    // Distances are measured around each location itself, so the chosen
    // segments do not depend on which end is the start.
    let nearest = |p: GeoPoint| {
        polyline
            .windows(2)
            .map(|w| point_to_segment_distance(p, w[0], w[1]))
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .map(|(i, _)| i)
            .unwrap_or(0)
    };
    let (index_s, index_e) = (nearest(start), nearest(end));
    let segment_len = |i: usize| dist(xy[i], xy[i + 1]);
    let span = |first_loc: (f64, f64), first: usize, last: usize, last_loc: (f64, f64)| {
        let head = dist(first_loc, xy[first + 1]);
        let middle: f64 = (first + 1..last).map(segment_len).sum();
        let tail = dist(xy[last], last_loc);
        head + middle + tail
    };
    match index_s.cmp(&index_e) {
        std::cmp::Ordering::Less => span(s, index_s, index_e, e),
        std::cmp::Ordering::Greater => span(e, index_e, index_s, s),
        std::cmp::Ordering::Equal => dist(s, e),
    }
}

/// Fills `distance` for every sample from its feature geometry.
pub fn assign_distances(set: &mut SampleSet, map: &RoadMap) -> Result<()> {
    for s in &mut set.samples {
        let f = map.feature(&s.feature_id).ok_or_else(|| {
            Error::InvalidInput(format!("sample {} references unknown feature {}", s.key(), s.feature_id))
        })?;
        s.distance = travel_distance(s.start_point, s.end_point, &f.polyline);
    }
    Ok(())
}

/// Removes electric samples whose SoC change is below `min_delta_soc`.
/// Samples without a SoC change (diesel) are kept.
pub fn filter_erroneous(set: SampleSet, min_delta_soc: f64) -> SampleSet {
    let before = set.samples.len();
    let samples: Vec<Sample> = set
        .samples
        .into_iter()
        .filter(|s| s.delta_soc.is_none_or(|d| d >= min_delta_soc))
        .collect();
    let mut provenance = set.provenance;
    provenance.erroneous_removed += before - samples.len();
    SampleSet {
        samples,
        provenance,
    }
}

pub fn write_samples<W: Write>(writer: W, samples: &[Sample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SAMPLE_HEADER)?;
    for s in samples {
        w.write_record([
            s.vehicle_id.clone(),
            s.feature_id.clone(),
            s.start_ts.to_string(),
            s.end_ts.to_string(),
            s.start_point.lat.to_string(),
            s.start_point.lon.to_string(),
            s.end_point.lat.to_string(),
            s.end_point.lon.to_string(),
            s.distance.to_string(),
            s.energy.to_string(),
            s.delta_soc.map(|d| d.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<sample writer>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Payload;

    fn pts(ts: &[f64]) -> Vec<TelemetryPoint> {
        ts.iter()
            .enumerate()
            .map(|(i, &t)| TelemetryPoint {
                vehicle_id: "v".into(),
                timestamp: t,
                position: GeoPoint::new(35.0, -85.0 + i as f64 * 1e-4),
                payload: Payload::Diesel {
                    fuel_level: 1.0,
                    total_fuel_used: 0.0,
                },
            })
            .collect()
    }

    fn feats(spec: &str) -> Vec<Option<String>> {
        spec.chars()
            .map(|c| if c == '_' { None } else { Some(c.to_string()) })
            .collect()
    }

    fn run(spec: &str) -> SampleSet {
        let n = spec.len();
        let p = pts(&(0..n).map(|i| i as f64).collect::<Vec<_>>());
        segment_samples(&p, &feats(spec), &vec![1.0; n - 1], SegmentParams::default()).unwrap()
    }

    #[test]
    fn runs_split_on_feature_change() {
        let s = run("AAABB");
        assert_eq!(s.samples.len(), 2);
        assert_eq!((s.samples[0].feature_id.as_str(), s.samples[0].energy), ("A", 2.0));
        assert_eq!((s.samples[1].feature_id.as_str(), s.samples[1].energy), ("B", 1.0));
        assert_eq!(s.provenance.excluded_intervals, 1);
    }

    #[test]
    fn maximality_and_single_point_runs() {
        let s = run("ABA");
        assert_eq!(s.samples.len(), 0);
        assert_eq!(s.provenance.dropped_short_runs, 3);
        let s = run("AABBAA");
        let ids: Vec<&str> = s.samples.iter().map(|s| s.feature_id.as_str()).collect();
        assert_eq!(ids, vec!["A", "B", "A"]);
    }

    #[test]
    fn unmatched_breaks_runs() {
        let s = run("AA_AA");
        assert_eq!(s.samples.len(), 2);
        assert_eq!(s.samples.iter().map(|s| s.energy).sum::<f64>(), 2.0);
        assert_eq!(s.provenance.excluded_energy, 2.0);
    }

    #[test]
    fn time_gap_breaks_runs() {
        let p = pts(&[0.0, 1.0, 2.0, 100.0, 101.0]);
        let s = segment_samples(&p, &feats("AAAAA"), &[1.0, 1.0, 5.0, 1.0], SegmentParams::default()).unwrap();
        assert_eq!(s.samples.len(), 2);
        assert_eq!(s.provenance.excluded_energy, 5.0);
    }

    #[test]
    fn delta_soc_from_capacity() {
        let p = pts(&[0.0, 1.0]);
        let s = segment_samples(
            &p,
            &feats("AA"),
            &[1.8e6],
            SegmentParams {
                battery_capacity_j: Some(1.8e9),
                ..Default::default()
            },
        )
        .unwrap();
        assert!((s.samples[0].delta_soc.unwrap() - 0.1).abs() < 1e-12);
    }

    fn with_soc(d: Option<f64>) -> Sample {
        Sample {
            vehicle_id: "v".into(),
            feature_id: "A".into(),
            start_point: GeoPoint::new(0.0, 0.0),
            end_point: GeoPoint::new(0.0, 0.0),
            start_ts: 0.0,
            end_ts: 1.0,
            energy: 0.0,
            delta_soc: d,
            distance: 0.0,
            points: 2,
        }
    }

    #[test]
    fn erroneous_filter_threshold() {
        let set = SampleSet {
            samples: vec![with_soc(Some(-0.3)), with_soc(Some(-0.1)), with_soc(Some(0.0)), with_soc(None), with_soc(Some(-0.2))],
            provenance: Provenance::default(),
        };
        let out = filter_erroneous(set, DEFAULT_MIN_DELTA_SOC);
        assert_eq!(out.samples.len(), 4);
        assert_eq!(out.provenance.erroneous_removed, 1);
        assert!(out.samples.iter().all(|s| s.delta_soc != Some(-0.3)));
    }

    #[test]
    fn distance_same_segment_is_straight_line() {
        let proj = LocalProjection::new(GeoPoint::new(35.0, -85.3));
        let line = vec![proj.from_xy(0.0, 0.0), proj.from_xy(100.0, 0.0), proj.from_xy(100.0, 100.0)];
        let a = proj.from_xy(10.0, 3.0);
        let b = proj.from_xy(60.0, -4.0);
        let expected = LocalProjection::new(a).distance(a, b);
        assert!((travel_distance(a, b, &line) - expected).abs() < 1e-9);
    }

    #[test]
    fn distance_full_polyline() {
        let proj = LocalProjection::new(GeoPoint::new(35.0, -85.3));
        let line = vec![
            proj.from_xy(0.0, 0.0),
            proj.from_xy(100.0, 0.0),
            proj.from_xy(100.0, 100.0),
            proj.from_xy(250.0, 100.0),
        ];
        let got = travel_distance(line[0], line[3], &line);
        assert!((got - 350.0).abs() / 350.0 < 1e-3, "{got}");
        let back = travel_distance(line[3], line[0], &line);
        // Each direction projects around its own start point.
        assert!((got - back).abs() / got < 1e-4, "{got} vs {back}");
    }

    #[test]
    fn export_header() {
        let mut out = Vec::new();
        write_samples(&mut out, &[with_soc(None)]).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with(&SAMPLE_HEADER.join(",")));
        assert!(text.trim_end().ends_with(",0,"));
    }
}
