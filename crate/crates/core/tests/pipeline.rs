//! End-to-end runs on the reduced synthetic fleet, and experiment drivers.

mod common;

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use transit_energy::enrich::{EnrichedSample, TrafficFeatures, WeatherFeatures};
use transit_energy::experiments::{ablation, predict_trips, FeatureSubset};
use transit_energy::geo::GeoPoint;
use transit_energy::ml::{FeatureConfig, ModelKind, ModelSpec, TargetUnit};
use transit_energy::pipeline::{load_json, run_pipeline, LoadedConfig, Manifest, Report, Stage};
use transit_energy::road_network::RoadType;
use transit_energy::sampler::Sample;
use transit_energy::{Error, ErrorClass};

fn read(p: PathBuf) -> Vec<u8> {
    std::fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn repeated_runs_are_byte_identical() {
    let fx = common::small_fleet();
    let cfg = LoadedConfig::load(&fx.electric_config).unwrap();
    let (a, b) = (common::scratch("pipeline-det-a"), common::scratch("pipeline-det-b"));
    run_pipeline(&cfg, &a, Stage::Train).unwrap();
    run_pipeline(&cfg, &b, Stage::Train).unwrap();
    for f in [
        "telemetry_clean.csv",
        "matched.csv",
        "samples.csv",
        "enriched.csv",
        "dataset.csv",
        "model.json",
        "report.json",
        "manifest.json",
    ] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f}");
    }
    let report: Report = load_json(&a.join("report.json")).unwrap();
    assert_eq!(report.config_hash, cfg.hash());
    assert!(report.mse.is_finite() && report.train_rows > report.test_rows);
    let manifest: Manifest = load_json(&a.join("manifest.json")).unwrap();
    assert_eq!(manifest.stages.iter().map(|s| s.stage).collect::<Vec<_>>(), Stage::ALL.to_vec());
}

#[test]
fn seed_changes_the_split_not_the_samples() {
    let fx = common::small_fleet();
    let mut cfg = LoadedConfig::load(&fx.diesel_config).unwrap();
    let a = common::scratch("pipeline-seed-a");
    run_pipeline(&cfg, &a, Stage::Train).unwrap();
    cfg.config.seed += 1;
    let b = common::scratch("pipeline-seed-b");
    run_pipeline(&cfg, &b, Stage::Train).unwrap();
    assert_eq!(read(a.join("samples.csv")), read(b.join("samples.csv")));
    assert_eq!(read(a.join("dataset.csv")), read(b.join("dataset.csv")));
    assert_ne!(read(a.join("report.json")), read(b.join("report.json")));
}

#[test]
fn missing_dem_aborts_at_enrich() {
    let fx = common::small_fleet();
    let mut cfg = LoadedConfig::load(&fx.electric_config).unwrap();
    cfg.config.paths.dem = Some("no-such-dem.asc".into());
    let out = common::scratch("pipeline-missing-dem");
    // Stages before enrichment do not need the raster.
    run_pipeline(&cfg, &out, Stage::Samples).unwrap();
    let err = run_pipeline(&cfg, &out, Stage::Train).unwrap_err();
    assert_eq!(err.class(), ErrorClass::Config);
    assert!(matches!(err, Error::Stage { stage: "enrich", .. }), "{err}");
    assert!(err.to_string().contains("no-such-dem.asc"), "{err}");
}

#[test]
fn fleet_sample_counts_are_plausible() {
    let fx = common::small_fleet();
    let cfg = LoadedConfig::load(&fx.electric_config).unwrap();
    let out = common::scratch("pipeline-counts");
    let art = run_pipeline(&cfg, &out, Stage::Encode).unwrap();
    let ingest = art.ingest.unwrap();
    assert_eq!(ingest.stats.rejected, 1, "one malformed row is planted");
    assert!(ingest.stats.garage_removed > 0 && ingest.stats.charging_removed > 0);
    let matched = art.matched.unwrap();
    assert!(matched.matched as f64 > 0.95 * ingest.points.len() as f64);
    let samples = art.samples.unwrap();
    assert!(samples.len() > 100);
    assert!(samples.samples.iter().all(|s| s.distance > 0.0 && s.end_ts > s.start_ts));
    let data = art.dataset.unwrap();
    assert_eq!(data.columns.len(), cfg.config.features.dimension());
}

fn planted_sample(i: usize, rng: &mut ChaCha8Rng) -> EnrichedSample {
    let p = GeoPoint::new(35.0, -85.3);
    let distance = rng.random_range(20.0..200.0);
    let grade = rng.random_range(-4.0..4.0);
    let noise: f64 = rng.sample(StandardNormal);
    EnrichedSample {
        sample: Sample {
            vehicle_id: format!("bus-{}", i % 3),
            feature_id: format!("f{i}"),
            start_point: p,
            end_point: p,
            start_ts: 1_678_104_000.0 + 40.0 * i as f64,
            end_ts: 1_678_104_030.0 + 40.0 * i as f64,
            // Energy driven by distance and, strongly, by climb.
            energy: 1_000.0 * distance + 40_000.0 * grade + 500.0 * noise,
            delta_soc: None,
            distance,
            points: 31,
        },
        road_type: RoadType::NAMED[i % 14],
        elevation_delta: Some(grade),
        elevation_flagged: false,
        weather: Some(WeatherFeatures {
            temperature: rng.random_range(0.0..30.0),
            humidity: rng.random_range(0.2..0.9),
            visibility: rng.random_range(1.0..10.0),
            wind_speed: rng.random_range(0.0..10.0),
            precipitation: rng.random_range(0.0..1.0),
        }),
        traffic: Some(TrafficFeatures {
            speed_ratio: rng.random_range(0.5..1.0),
            jam_factor: rng.random_range(0.0..5.0),
        }),
    }
}

#[test]
fn ablation_finds_the_planted_group() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let samples: Vec<EnrichedSample> = (0..400).map(|i| planted_sample(i, &mut rng)).collect();
    let subsets: Vec<FeatureSubset> = ["none", "elevation", "weather", "traffic", "all"]
        .iter()
        .map(|s| s.parse().unwrap())
        .collect();
    let spec = ModelSpec::default().with_kind(ModelKind::Linear);
    let rows = ablation(&samples, &FeatureConfig::base(), &subsets, &spec, TargetUnit::Joules, 0.8, 4).unwrap();
    let [none, elevation, weather, traffic, all] = [0, 1, 2, 3, 4].map(|i| rows[i].mse);
    assert!(elevation < 0.01 * none, "{rows:?}");
    assert!(all < 0.01 * none, "{rows:?}");
    assert!(weather > 0.5 * none, "{rows:?}");
    assert!(traffic > 0.5 * none, "{rows:?}");
    assert_eq!(rows.iter().map(|r| r.dimension).collect::<Vec<_>>(), vec![15, 16, 20, 17, 23]);
}

#[test]
fn perfect_predictions_have_zero_trip_error() {
    let samples = transit_energy::synth::trip_samples(5, 2.5, 1);
    let actual: Vec<f64> = samples.iter().map(|s| s.energy).collect();
    let reports = predict_trips(&samples, &actual, &[10, 60, 120, 180]).unwrap();
    for r in &reports[..3] {
        assert_eq!(r.mean_relative_error_pct, Some(0.0));
        assert!(r.trips > 0);
    }
    // No vehicle has three full hours of data.
    assert_eq!(reports[3].trips, 0);
    assert_eq!(reports[3].mean_relative_error_pct, None);
    assert_eq!(reports[3].partial, 5);
    assert!(predict_trips(&samples, &actual[1..], &[10]).is_err());
}
