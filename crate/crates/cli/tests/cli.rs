use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_transit-energy"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("spawn binary")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fixture() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["--out", ".", "synth", "--small"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    dir
}

#[test]
fn train_then_evaluate() {
    let dir = fixture();
    let o = run(&["--config", "diesel.toml", "--out", "run", "train"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("test mse="));
    for f in ["samples.csv", "dataset.csv", "model.json", "report.json", "manifest.json"] {
        assert!(dir.path().join("run").join(f).is_file(), "{f}");
    }
    let o = run(
        &["--config", "diesel.toml", "--out", "run", "evaluate", "--model", "run/model.json"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report = std::fs::read_to_string(dir.path().join("run/report.json")).unwrap();
    let evaluation = std::fs::read_to_string(dir.path().join("run/evaluation.json")).unwrap();
    assert_eq!(report, evaluation);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = fixture();
    let o = run(&["--config", "diesel.toml", "--seed", "9", "--out", "s", "samples"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = std::fs::read_to_string(dir.path().join("s/manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 9"), "{manifest}");
}

#[test]
fn experiments_write_tables() {
    let dir = fixture();
    let o = run(&["--config", "diesel.toml", "--out", "x", "ablate", "--subsets", "none,elevation+T"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(dir.path().join("x/ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 3, "{table}");
    let o = run(
        &["--config", "diesel.toml", "--out", "x", "trips", "--durations", "10,30", "--models", "lr,dt"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let trips = std::fs::read_to_string(dir.path().join("x/trips.csv")).unwrap();
    assert_eq!(trips.lines().count(), 5, "{trips}");
}

#[test]
fn bench_matching_prints_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["bench-matching", "--sigmas", "0,14", "--trials", "3"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "sigma_m,mean_accuracy_pct,trials");
    assert!(lines[1].starts_with("0,100"), "{out}");
    assert_eq!(lines.len(), 3);
}

#[test]
fn bench_matching_reads_route_files() {
    let dir = fixture();
    let o = run(
        &["bench-matching", "--map", "map.geojson", "--route", "bench_route.csv", "--trials", "2", "--out", "sweep.csv"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let sweep = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 7);
}

#[test]
fn config_errors_exit_2() {
    let dir = fixture();
    let o = run(&["--config", "absent.toml", "train"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let text = std::fs::read_to_string(dir.path().join("electric.toml")).unwrap();
    std::fs::write(dir.path().join("nodem.toml"), text.replace("dem.asc", "gone.asc")).unwrap();
    let o = run(&["--config", "nodem.toml", "--out", "n", "train"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("enrich"), "{}", stderr(&o));

    std::fs::write(dir.path().join("bad.toml"), format!("{text}\nsurprise = 1\n")).unwrap();
    let o = run(&["--config", "bad.toml", "ingest"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn data_errors_exit_3() {
    let dir = fixture();
    std::fs::write(dir.path().join("electric.csv"), "vehicle,when\nbus,1\n").unwrap();
    let o = run(&["--config", "electric.toml", "--out", "d", "ingest"], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}
