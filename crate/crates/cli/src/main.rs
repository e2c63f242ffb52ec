use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use transit_energy::experiments::{
    ablation, compare_models, predict_trips, write_ablation_csv, write_comparison_csv, write_trips_csv,
    FeatureSubset, DEFAULT_TRIP_MINUTES,
};
use transit_energy::map_match::{noise_sweep, read_route, write_sweep_csv, SweepParams, DEFAULT_RADIUS_M, DEFAULT_WINDOW};
use transit_energy::ml::{evaluate, fit_and_score, ModelKind, TrainedModel};
use transit_energy::pipeline::{config_split, load_json, run_pipeline, save_json, LoadedConfig, Report, Stage};
use transit_energy::road_network::load_map;
use transit_energy::synth::{bench_route, write_fleet_fixture, FleetSpec, Grid, GridSpec};
use transit_energy::{Error, ErrorClass, Result};

/// Energy-use prediction pipeline for mixed electric and diesel transit
/// fleets.
#[derive(Debug, Parser)]
#[command(name = "transit-energy", version)]
struct Cli {
    /// Pipeline config (TOML).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override the seed from the config.
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    /// More log output; repeat for debug detail.
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse telemetry and drop garage and charging datapoints.
    Ingest,
    /// Ingest, then match locations to map features.
    Match,
    /// Run through sample generation.
    Samples,
    /// Run through elevation, weather and traffic enrichment.
    Enrich,
    /// Run the full pipeline and train the configured model.
    Train,
    /// Score a saved model on the test split of the configured data.
    Evaluate {
        /// Model file written by `train`.
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
    },
    /// Train one model per feature-group subset on a shared split.
    Ablate {
        /// Comma-separated subsets, each a `+`-joined list of groups
        /// (elevation, weather, traffic, T, H, V, W, P, speed_ratio,
        /// jam_factor, all, none).
        #[arg(long, default_value = "none,elevation,weather,traffic,all")]
        subsets: String,
    },
    /// Compare linear regression, decision tree and MLP on one split.
    Compare,
    /// Relative error of summed predictions over fixed-length trips.
    Trips {
        /// Trip lengths in minutes.
        #[arg(long, value_delimiter = ',')]
        durations: Option<Vec<u32>>,
        /// Models to evaluate; defaults to all three.
        #[arg(long, value_delimiter = ',')]
        models: Option<Vec<String>>,
    },
    /// Matching accuracy under Gaussian location noise.
    BenchMatching(BenchArgs),
    /// Write a synthetic fleet fixture into the output directory.
    Synth {
        /// Smaller fleet for quick runs.
        #[arg(long)]
        small: bool,
    },
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Map GeoJSON; a synthetic grid when omitted.
    #[arg(long)]
    map: Option<PathBuf>,
    /// Route CSV (`lat,lon,feature_id`); a synthetic 500-point route when
    /// omitted.
    #[arg(long)]
    route: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0,7,14,28,55,110")]
    sigmas: Vec<f64>,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    window: usize,
    #[arg(long, default_value_t = DEFAULT_RADIUS_M)]
    radius: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_config(cli: &Cli) -> Result<LoadedConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("this command needs --config".into()))?;
    let mut cfg = LoadedConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.config.seed = seed;
    }
    Ok(cfg)
}

fn run_stage(cli: &Cli, until: Stage) -> Result<()> {
    let cfg = load_config(cli)?;
    let art = run_pipeline(&cfg, &cli.out, until)?;
    if let Some(s) = &art.scored {
        println!(
            "{} test mse={} mae={} ({} train / {} test rows)",
            s.trained.model.kind(),
            s.test_metrics.mse,
            s.test_metrics.mae,
            s.train_rows,
            s.test_rows
        );
    }
    println!("wrote {} stage outputs to {}", until.name(), cli.out.display());
    Ok(())
}

fn bench(args: &BenchArgs) -> Result<()> {
    let (map, points, ids) = match (&args.map, &args.route) {
        (Some(m), Some(r)) => {
            let map = load_map(m)?;
            let (points, ids) = read_route(File::open(r).map_err(|e| Error::io(r, e))?)?;
            (map, points, ids)
        }
        (None, None) => {
            let grid = Grid::new(GridSpec::default());
            let route = bench_route(&grid, 500, 10.0, 4.0, args.seed);
            (grid.road_map(), route.points, route.feature_ids)
        }
        _ => return Err(Error::Config("--map and --route must be given together".into())),
    };
    let truth = ids
        .iter()
        .map(|id| {
            map.position(id)
                .ok_or_else(|| Error::InvalidInput(format!("route feature {id} is not in the map")))
        })
        .collect::<Result<Vec<usize>>>()?;
    let params = SweepParams {
        window: args.window,
        radius: args.radius,
        trials: args.trials,
        seed: args.seed,
    };
    let rows = noise_sweep(&map.index, &points, &truth, &args.sigmas, params)?;
    match &args.out {
        Some(p) => write_sweep_csv(create(p)?, &rows)?,
        None => write_sweep_csv(std::io::stdout().lock(), &rows)?,
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Ingest => run_stage(cli, Stage::Ingest),
        Command::Match => run_stage(cli, Stage::Match),
        Command::Samples => run_stage(cli, Stage::Samples),
        Command::Enrich => run_stage(cli, Stage::Enrich),
        Command::Train => run_stage(cli, Stage::Train),
        Command::Evaluate { model } => {
            let cfg = load_config(cli)?;
            let trained: TrainedModel = load_json(model)?;
            let art = run_pipeline(&cfg, &cli.out, Stage::Encode)?;
            let data = art.dataset.expect("encode stage ran");
            if trained.columns != data.columns {
                return Err(Error::Config("model columns differ from the configured feature set".into()));
            }
            let (train, test) = config_split(&cfg, data.len())?;
            let te = data.subset(&test);
            let metrics = evaluate(&trained.predict(&te.rows)?, &te.targets)?;
            let report = Report::from_metrics(&cfg, trained.model.kind().as_str(), metrics, train.len(), test.len());
            save_json(&cli.out.join("evaluation.json"), &report)?;
            println!("{} test mse={} mae={}", report.model, report.mse, report.mae);
            Ok(())
        }
        Command::Ablate { subsets } => {
            let cfg = load_config(cli)?;
            let subsets = subsets
                .split(',')
                .map(str::parse)
                .collect::<Result<Vec<FeatureSubset>>>()?;
            let art = run_pipeline(&cfg, &cli.out, Stage::Enrich)?;
            let enriched = art.enriched.expect("enrich stage ran");
            let c = &cfg.config;
            let rows = ablation(
                &enriched.samples,
                &c.features,
                &subsets,
                &c.model,
                c.training.target,
                c.training.train_fraction,
                cfg.seed(),
            )?;
            write_ablation_csv(create(&cli.out.join("ablation.csv"))?, &rows, cfg.seed(), &cfg.hash())?;
            for r in &rows {
                println!("{:<32} dim={:>2} mse={} mae={}", r.subset, r.dimension, r.mse, r.mae);
            }
            Ok(())
        }
        Command::Compare => {
            let cfg = load_config(cli)?;
            let art = run_pipeline(&cfg, &cli.out, Stage::Encode)?;
            let data = art.dataset.expect("encode stage ran");
            let c = &cfg.config;
            let rows = compare_models(&data, &c.features, &c.model, c.training.train_fraction, cfg.seed())?;
            write_comparison_csv(create(&cli.out.join("models.csv"))?, &rows, cfg.seed(), &cfg.hash())?;
            for r in &rows {
                println!("{:<6} mse={} mae={}", r.model.as_str(), r.mse, r.mae);
            }
            Ok(())
        }
        Command::Trips { durations, models } => {
            let cfg = load_config(cli)?;
            let durations = durations.clone().unwrap_or_else(|| DEFAULT_TRIP_MINUTES.to_vec());
            let kinds = match models {
                Some(m) => m.iter().map(|s| s.parse()).collect::<Result<Vec<ModelKind>>>()?,
                None => ModelKind::ALL.to_vec(),
            };
            let art = run_pipeline(&cfg, &cli.out, Stage::Encode)?;
            let data = art.dataset.expect("encode stage ran");
            let samples = art.samples.expect("samples stage ran").samples;
            let (train, test) = config_split(&cfg, data.len())?;
            let mut table = Vec::new();
            for kind in kinds {
                let spec = cfg.config.model.with_kind(kind);
                let scored = fit_and_score(&data, &cfg.config.features, &spec, &train, &test, cfg.seed(), &cfg.hash())?;
                let predictions = scored.trained.predict(&data.rows)?;
                table.push((kind, predict_trips(&samples, &predictions, &durations)?));
            }
            write_trips_csv(create(&cli.out.join("trips.csv"))?, &table, cfg.seed(), &cfg.hash())?;
            for (kind, reports) in &table {
                for r in reports {
                    let err = r.mean_relative_error_pct.map_or("n/a".to_string(), |v| format!("{v:.3}%"));
                    println!("{:<6} {:>4} min  {:>10}  trips={}", kind.as_str(), r.duration_min, err, r.trips);
                }
            }
            Ok(())
        }
        Command::BenchMatching(args) => bench(args),
        Command::Synth { small } => {
            ensure_dir(&cli.out)?;
            let mut spec = if *small { FleetSpec::small() } else { FleetSpec::default() };
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            let fx = write_fleet_fixture(&cli.out, &spec)?;
            println!(
                "wrote fixture to {} ({} electric, {} diesel datapoints)",
                fx.dir.display(),
                fx.electric_points,
                fx.diesel_points
            );
            Ok(())
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numerical => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(level)))
        .with_writer(std::io::stderr)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
