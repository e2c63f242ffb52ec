//! Sample generation and telemetry cleaning invariants.

use std::path::Path;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use transit_energy::geo::{polyline_length, GeoPoint, LocalProjection};
use transit_energy::ingest::{
    estimate_electric_energy, read_telemetry, remove_charging_points, remove_garage_points, write_telemetry,
    GarageZone, Payload, TelemetryPoint, VehicleKind,
};
use transit_energy::sampler::{filter_erroneous, segment_samples, travel_distance, Sample, SampleSet, SegmentParams};

const ORIGIN: GeoPoint = GeoPoint::new(35.0456, -85.3097);

fn electric_point(rng: &mut ChaCha8Rng, ts: f64) -> TelemetryPoint {
    let proj = LocalProjection::new(ORIGIN);
    TelemetryPoint {
        vehicle_id: "bus-7".into(),
        timestamp: ts,
        position: proj.from_xy(rng.random_range(-300.0..300.0), rng.random_range(-300.0..300.0)),
        payload: Payload::Electric {
            current: rng.random_range(-100.0..400.0),
            voltage: rng.random_range(600.0..700.0),
            soc: rng.random_range(10.0..100.0),
            cable_connected: rng.random_bool(0.2),
        },
    }
}

fn series(seed: u64, n: usize) -> Vec<TelemetryPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ts = 1_678_104_000.0;
    (0..n)
        .map(|_| {
            ts += if rng.random_bool(0.05) { rng.random_range(61.0..300.0) } else { rng.random_range(0.5..3.0) };
            electric_point(&mut rng, ts)
        })
        .collect()
}

fn labels(seed: u64, n: usize) -> Vec<Option<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut cur = Some("a".to_string());
    (0..n)
        .map(|_| {
            if rng.random_bool(0.15) {
                cur = match rng.random_range(0..4) {
                    0 => None,
                    1 => Some("a".into()),
                    2 => Some("b".into()),
                    _ => Some("c".into()),
                };
            }
            cur.clone()
        })
        .collect()
}

fn sample(delta_soc: Option<f64>) -> Sample {
    Sample {
        vehicle_id: "bus-1".into(),
        feature_id: "a".into(),
        start_point: ORIGIN,
        end_point: ORIGIN,
        start_ts: 0.0,
        end_ts: 10.0,
        energy: 1.0,
        delta_soc,
        distance: 0.0,
        points: 11,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn energy_is_conserved(seed in any::<u64>(), n in 2usize..300) {
        let points = series(seed, n);
        let features = labels(seed, n);
        let intervals: Vec<f64> = estimate_electric_energy(&points).unwrap().iter().map(|i| i.value).collect();
        let set = segment_samples(&points, &features, &intervals, SegmentParams::default()).unwrap();
        let total: f64 = intervals.iter().sum();
        let in_samples: f64 = set.samples.iter().map(|s| s.energy).sum();
        let scale = intervals.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
        prop_assert!((in_samples + set.provenance.excluded_energy - total).abs() <= 1e-9 * scale);
        let covered: usize = set.samples.iter().map(|s| s.points - 1).sum();
        prop_assert_eq!(covered + set.provenance.excluded_intervals, intervals.len());
    }

    #[test]
    fn runs_are_disjoint_and_uniform(seed in any::<u64>(), n in 2usize..300) {
        let points = series(seed, n);
        let features = labels(seed, n);
        let intervals = vec![1.0; n - 1];
        let set = segment_samples(&points, &features, &intervals, SegmentParams::default()).unwrap();
        for w in set.samples.windows(2) {
            prop_assert!(w[0].end_ts < w[1].start_ts);
        }
        for s in &set.samples {
            let lo = points.iter().position(|p| p.timestamp == s.start_ts).unwrap();
            let hi = points.iter().position(|p| p.timestamp == s.end_ts).unwrap();
            prop_assert_eq!(hi - lo + 1, s.points);
            prop_assert!(features[lo..=hi].iter().all(|f| f.as_deref() == Some(s.feature_id.as_str())));
            prop_assert!(points[lo..=hi].windows(2).all(|w| w[1].timestamp - w[0].timestamp <= 60.0));
        }
    }

    #[test]
    fn cleaning_filters_are_idempotent(seed in any::<u64>(), n in 1usize..200) {
        let points = series(seed, n);
        let proj = LocalProjection::new(ORIGIN);
        let zone = GarageZone::new(vec![
            proj.from_xy(-100.0, -100.0),
            proj.from_xy(100.0, -100.0),
            proj.from_xy(100.0, 100.0),
            proj.from_xy(-100.0, 100.0),
        ])
        .unwrap();
        let once = remove_garage_points(&points, &zone);
        prop_assert_eq!(remove_garage_points(&once, &zone), once.clone());
        prop_assert!(once.iter().all(|p| !zone.contains(p.position)));
        let charged = remove_charging_points(&points).unwrap();
        prop_assert_eq!(remove_charging_points(&charged).unwrap(), charged);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<Sample> = (0..n).map(|_| sample(rng.random_bool(0.8).then(|| rng.random_range(-0.5..0.5)))).collect();
        let set = SampleSet { samples, ..SampleSet::default() };
        let a = filter_erroneous(set, -0.2);
        let removed = a.provenance.erroneous_removed;
        let b = filter_erroneous(a.clone(), -0.2);
        prop_assert_eq!(&b.samples, &a.samples);
        prop_assert_eq!(b.provenance.erroneous_removed, removed);
    }

    #[test]
    fn telemetry_csv_round_trip(seed in any::<u64>(), n in 1usize..100) {
        let points = series(seed, n);
        let mut buf = Vec::new();
        write_telemetry(&mut buf, VehicleKind::Electric, &points).unwrap();
        let parsed = read_telemetry(buf.as_slice(), Path::new("mem.csv"), VehicleKind::Electric).unwrap();
        prop_assert!(parsed.rejected.is_empty());
        prop_assert_eq!(parsed.items, points);
    }

    #[test]
    fn travel_distance_is_nearly_symmetric_and_bounded(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proj = LocalProjection::new(ORIGIN);
        let mut x = 0.0;
        let polyline: Vec<GeoPoint> = (0..rng.random_range(2..12))
            .map(|_| {
                x += rng.random_range(10.0..60.0);
                proj.from_xy(x, rng.random_range(-30.0..30.0))
            })
            .collect();
        let on_road = |rng: &mut ChaCha8Rng| {
            let i = rng.random_range(0..polyline.len() - 1);
            let t = rng.random_range(0.0..1.0);
            let (a, b) = (proj.to_xy(polyline[i]), proj.to_xy(polyline[i + 1]));
            proj.from_xy(a.0 + t * (b.0 - a.0) + rng.random_range(-3.0..3.0), a.1 + t * (b.1 - a.1) + rng.random_range(-3.0..3.0))
        };
        let (s, e) = (on_road(&mut rng), on_road(&mut rng));
        let forward = travel_distance(s, e, &polyline);
        let backward = travel_distance(e, s, &polyline);
        // Each direction projects around its own start point.
        prop_assert!((forward - backward).abs() <= 1e-4 * forward.max(1.0));
        prop_assert!(forward <= polyline_length(&polyline) + 2.0 * 25.0);
    }
}

#[test]
fn runs_break_at_changes_gaps_and_unmatched() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let some = |s: &str| Some(s.to_string());
    let cases = [
        (vec![some("a"), some("a"), some("a"), some("b"), some("b")], 2, 1.0),
        (vec![some("a"), some("a"), some("b"), some("b"), some("a"), some("a")], 3, 2.0),
        (vec![some("a"), some("a"), None, some("a"), some("a")], 2, 2.0),
    ];
    for (features, want, excluded) in cases {
        let pts: Vec<TelemetryPoint> = (0..features.len()).map(|i| electric_point(&mut rng, i as f64)).collect();
        let intervals = vec![1.0; features.len() - 1];
        let set = segment_samples(&pts, &features, &intervals, SegmentParams::default()).unwrap();
        assert_eq!(set.len(), want, "{features:?}");
        assert_eq!(set.provenance.excluded_energy, excluded, "{features:?}");
    }

    // A single-point run covers no interval and yields no sample.
    let pts: Vec<TelemetryPoint> = (0..5).map(|i| electric_point(&mut rng, i as f64)).collect();
    let lone = vec![some("a"), some("b"), some("b"), some("b"), some("a")];
    let set = segment_samples(&pts, &lone, &[1.0; 4], SegmentParams::default()).unwrap();
    assert_eq!(set.len(), 1);
    assert_eq!(set.provenance.dropped_short_runs, 2);

    // A time gap above the threshold splits a run.
    let mut gapped = pts.clone();
    for p in &mut gapped[3..] {
        p.timestamp += 120.0;
    }
    let set = segment_samples(&gapped, &vec![some("a"); 5], &[1.0; 4], SegmentParams::default()).unwrap();
    assert_eq!(set.len(), 2);
    assert_eq!(set.provenance.excluded_intervals, 1);
}

#[test]
fn erroneous_threshold_boundaries() {
    let set = SampleSet {
        samples: vec![sample(Some(-0.3)), sample(Some(-0.1)), sample(Some(0.0)), sample(Some(-0.2)), sample(None)],
        ..SampleSet::default()
    };
    let kept = filter_erroneous(set, -0.2);
    let socs: Vec<Option<f64>> = kept.samples.iter().map(|s| s.delta_soc).collect();
    assert_eq!(socs, vec![Some(-0.1), Some(0.0), Some(-0.2), None]);
    assert_eq!(kept.provenance.erroneous_removed, 1);
}
