//! Windowed frequency-vote map matching and its noise benchmark.
//!
//! Each location is assigned the nearby feature that appears most often in
//! the nearby-feature lists of the surrounding `window` locations on either
//! side. Ties go to the smaller mean distance over the window, then to the
//! smaller feature id.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{GeoPoint, EARTH_RADIUS_M};
use crate::road_network::{FeatureIndex, Nearby};

pub const DEFAULT_WINDOW: usize = 10;
pub const DEFAULT_RADIUS_M: f64 = 25.0;

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Feature position per input location; `None` when nothing was nearby.
    pub assignments: Vec<Option<usize>>,
    pub window: usize,
    pub radius: f64,
}

impl MatchResult {
    pub fn matched(&self) -> usize {
        self.assignments.iter().filter(|a| a.is_some()).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Per-axis standard deviation in meters.
    pub sigma: f64,
    pub seed: u64,
}

fn mean_window_distance(nearby: &[Vec<Nearby>], lo: usize, hi: usize, feature: usize) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for list in &nearby[lo..=hi] {
        if let Some(nb) = list.iter().find(|nb| nb.feature == feature) {
            sum += nb.distance;
            n += 1;
        }
    }
    sum / n as f64
}

/// Picks the winning feature among `candidates` given their window counts.
pub(crate) fn vote(
    index: &FeatureIndex,
    nearby: &[Vec<Nearby>],
    lo: usize,
    hi: usize,
    candidates: &[Nearby],
    count_of: impl Fn(usize) -> usize,
) -> Option<usize> {
    let top = candidates.iter().map(|c| count_of(c.feature)).max()?;
    let tied: Vec<usize> = candidates
        .iter()
        .map(|c| c.feature)
        .filter(|&f| count_of(f) == top)
        .collect();
    if tied.len() == 1 {
        return Some(tied[0]);
    }
    tied.into_iter()
        .map(|f| (mean_window_distance(nearby, lo, hi, f), f))
        .min_by(|a, b| {
            a.0.total_cmp(&b.0)
                .then_with(|| index.feature_id(a.1).cmp(index.feature_id(b.1)))
        })
        .map(|(_, f)| f)
}

/// Assigns each location to a feature by windowed frequency voting.
pub fn match_locations(
    locations: &[GeoPoint],
    index: &FeatureIndex,
    window: usize,
    radius: f64,
) -> Result<MatchResult> {
    if !(radius > 0.0) {
        return Err(Error::InvalidInput(format!("radius must be positive, got {radius}")));
    }
    let nearby: Vec<Vec<Nearby>> = locations.iter().map(|p| index.query(*p, radius)).collect();
    let n = nearby.len();
    let mut counts: HashMap<usize, usize> = HashMap::new();
    let mut assignments = Vec::with_capacity(n);
    // Sliding window [lo, hi] of location indices whose lists are counted.
    let mut hi_added = 0usize;
    for i in 0..n {
        let lo = i.saturating_sub(window);
        let hi = (i + window).min(n - 1);
        while hi_added <= hi {
            for nb in &nearby[hi_added] {
                *counts.entry(nb.feature).or_default() += 1;
            }
            hi_added += 1;
        }
        if i > window {
            for nb in &nearby[i - window - 1] {
                if let Some(c) = counts.get_mut(&nb.feature) {
                    *c -= 1;
                }
            }
        }
        let winner = vote(index, &nearby, lo, hi, &nearby[i], |f| {
            counts.get(&f).copied().unwrap_or(0)
        });
        assignments.push(winner);
    }
    Ok(MatchResult {
        assignments,
        window,
        radius,
    })
}

/// Displaces each point by independent zero-mean Gaussian offsets (meters)
/// in easting and northing.
pub fn add_gaussian_noise(locations: &[GeoPoint], spec: NoiseSpec) -> Result<Vec<GeoPoint>> {
    if !(spec.sigma >= 0.0) || !spec.sigma.is_finite() {
        return Err(Error::InvalidInput(format!("sigma must be >= 0, got {}", spec.sigma)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok(locations
        .iter()
        .map(|p| {
            let east: f64 = rng.sample::<f64, _>(StandardNormal) * spec.sigma;
            let north: f64 = rng.sample::<f64, _>(StandardNormal) * spec.sigma;
            GeoPoint {
                lat: p.lat + (north / EARTH_RADIUS_M).to_degrees(),
                lon: p.lon + (east / (EARTH_RADIUS_M * p.lat.to_radians().cos())).to_degrees(),
            }
        })
        .collect())
}

/// Percentage of locations whose assignment equals the ground truth.
pub fn matching_accuracy(truth: &[usize], predicted: &MatchResult) -> Result<f64> {
    if truth.len() != predicted.assignments.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: predicted.assignments.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::InvalidInput("accuracy of an empty trace is undefined".into()));
    }
    let correct = truth
        .iter()
        .zip(&predicted.assignments)
        .filter(|(t, p)| Some(**t) == **p)
        .count();
    Ok(100.0 * correct as f64 / truth.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepParams {
    pub window: usize,
    pub radius: f64,
    pub trials: usize,
    pub seed: u64,
}

impl Default for SweepParams {
    fn default() -> Self {
        SweepParams {
            window: DEFAULT_WINDOW,
            radius: DEFAULT_RADIUS_M,
            trials: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma_m: f64,
    pub mean_accuracy_pct: f64,
    pub trials: usize,
    pub trial_accuracies: Vec<f64>,
}

/// Seed for a trial. Shared across noise levels so that every sigma sees
/// the same standard-normal draws scaled differently.
pub fn trial_seed(base: u64, trial: usize) -> u64 {
    let mut z = base.wrapping_add((trial as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mean matching accuracy per noise level over `params.trials` noisy copies
/// of a ground-truth route.
pub fn noise_sweep(
    index: &FeatureIndex,
    route: &[GeoPoint],
    truth: &[usize],
    sigmas: &[f64],
    params: SweepParams,
) -> Result<Vec<SweepRow>> {
    if params.trials == 0 {
        return Err(Error::InvalidInput("trials must be at least 1".into()));
    }
    if route.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: route.len(),
            got: truth.len(),
        });
    }
    sigmas
        .iter()
        .map(|&sigma| {
            let trial_accuracies = (0..params.trials)
                .map(|t| {
                    let noisy = add_gaussian_noise(
                        route,
                        NoiseSpec {
                            sigma,
                            seed: trial_seed(params.seed, t),
                        },
                    )?;
                    let m = match_locations(&noisy, index, params.window, params.radius)?;
                    matching_accuracy(truth, &m)
                })
                .collect::<Result<Vec<f64>>>()?;
            let mean = trial_accuracies.iter().sum::<f64>() / params.trials as f64;
            Ok(SweepRow {
                sigma_m: sigma,
                mean_accuracy_pct: mean,
                trials: params.trials,
                trial_accuracies,
            })
        })
        .collect()
}

/// Writes `sigma_m,mean_accuracy_pct,trials`.
pub fn write_sweep_csv<W: Write>(writer: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["sigma_m", "mean_accuracy_pct", "trials"])?;
    for r in rows {
        w.write_record([
            r.sigma_m.to_string(),
            format!("{:.4}", r.mean_accuracy_pct),
            r.trials.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<sweep writer>", e))?;
    Ok(())
}

/// Ground-truth route for the benchmark: `lat,lon,feature_id` per point.
pub const ROUTE_HEADER: &[&str] = &["lat", "lon", "feature_id"];

pub fn write_route<W: Write>(writer: W, points: &[GeoPoint], feature_ids: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(ROUTE_HEADER)?;
    for (p, id) in points.iter().zip(feature_ids) {
        w.write_record([p.lat.to_string(), p.lon.to_string(), id.clone()])?;
    }
    w.flush().map_err(|e| Error::io("<route writer>", e))?;
    Ok(())
}

/// Reads a route file; any malformed row is an error since the benchmark
/// needs every point's truth.
pub fn read_route<R: Read>(reader: R) -> Result<(Vec<GeoPoint>, Vec<String>)> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header != ROUTE_HEADER {
        return Err(Error::Schema {
            path: "<route>".into(),
            expected: ROUTE_HEADER.join(","),
            found: header.join(","),
        });
    }
    let mut points = Vec::new();
    let mut ids = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |k: usize| -> Result<f64> {
            rec.get(k)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::InvalidInput(format!("route row {}: bad coordinate", i + 2)))
        };
        let p = GeoPoint::checked(num(0)?, num(1)?)?;
        points.push(p);
        ids.push(rec.get(2).unwrap_or_default().trim().to_string());
    }
    Ok((points, ids))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::LocalProjection;
    use crate::road_network::{OsmFeature, RoadType};

    fn feature(id: &str, pts: Vec<GeoPoint>) -> OsmFeature {
        OsmFeature {
            feature_id: id.into(),
            polyline: pts,
            road_type: RoadType::Primary,
            oneway: false,
            tunnel: false,
        }
    }

    fn two_roads() -> (LocalProjection, FeatureIndex) {
        let proj = LocalProjection::new(GeoPoint::new(35.0, -85.3));
        let fs = vec![
            feature("A", vec![proj.from_xy(-1000.0, 0.0), proj.from_xy(1000.0, 0.0)]),
            feature("B", vec![proj.from_xy(-1000.0, 40.0), proj.from_xy(1000.0, 40.0)]),
        ];
        (proj, FeatureIndex::build(&fs))
    }

    #[test]
    fn all_near_single_feature() {
        let (proj, idx) = two_roads();
        let locs: Vec<GeoPoint> = (0..5).map(|i| proj.from_xy(i as f64 * 10.0, -5.0)).collect();
        let m = match_locations(&locs, &idx, 2, 25.0).unwrap();
        assert_eq!(m.assignments, vec![Some(0); 5]);
    }

    #[test]
    fn neighbours_outvote_ambiguous_point() {
        let (proj, idx) = two_roads();
        let mut locs: Vec<GeoPoint> = (0..5).map(|i| proj.from_xy(i as f64 * 10.0, 2.0)).collect();
        // Point 2 sits closer to B but within range of both.
        locs[2] = proj.from_xy(20.0, 22.0);
        let m = match_locations(&locs, &idx, 2, 25.0).unwrap();
        assert_eq!(m.assignments, vec![Some(0); 5]);
        // Without a window it snaps to the nearest road.
        let m0 = match_locations(&locs, &idx, 0, 25.0).unwrap();
        assert_eq!(m0.assignments[2], Some(1));
    }

    #[test]
    fn far_points_are_unmatched() {
        let (proj, idx) = two_roads();
        let locs = vec![proj.from_xy(0.0, 500.0), proj.from_xy(0.0, 0.0)];
        let m = match_locations(&locs, &idx, 1, 25.0).unwrap();
        assert_eq!(m.assignments, vec![None, Some(0)]);
        assert_eq!(m.matched(), 1);
    }

    #[test]
    fn noise_is_deterministic_and_zero_sigma_is_identity() {
        let pts = vec![GeoPoint::new(35.0, -85.3), GeoPoint::new(35.01, -85.31)];
        let a = add_gaussian_noise(&pts, NoiseSpec { sigma: 14.0, seed: 3 }).unwrap();
        let b = add_gaussian_noise(&pts, NoiseSpec { sigma: 14.0, seed: 3 }).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, pts);
        assert_eq!(add_gaussian_noise(&pts, NoiseSpec { sigma: 0.0, seed: 3 }).unwrap(), pts);
        assert!(add_gaussian_noise(&pts, NoiseSpec { sigma: -1.0, seed: 3 }).is_err());
    }

    #[test]
    fn accuracy_counts_unmatched_as_wrong() {
        let m = MatchResult {
            assignments: vec![Some(0), None, Some(1), Some(2)],
            window: 0,
            radius: 25.0,
        };
        assert_eq!(matching_accuracy(&[0, 1, 1, 2], &m).unwrap(), 75.0);
        assert_eq!(matching_accuracy(&[0, 0, 0, 0], &m).unwrap(), 25.0);
        assert!(matching_accuracy(&[0], &m).is_err());
    }

    #[test]
    fn sweep_csv_layout() {
        let rows = vec![SweepRow {
            sigma_m: 14.0,
            mean_accuracy_pct: 84.5,
            trials: 2,
            trial_accuracies: vec![84.0, 85.0],
        }];
        let mut out = Vec::new();
        write_sweep_csv(&mut out, &rows).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "sigma_m,mean_accuracy_pct,trials\n14,84.5000,2\n"
        );
    }
}
