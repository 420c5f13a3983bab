use std::path::Path;
use std::process::{Command, Output};

fn jrsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jrsim"))
        .args(args)
        .env_remove("JRSIM_WORKERS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = r#"
[model]
n = 40

[propagator]
steps_per_period = 32
tolerance = 1e-4

[binning]
delta = 0.5

[sweep]
xi = [0.6, 1.0]
alpha = [0.0, 0.3]
lambda = [0.0, 0.2]

[output]
plots = false
"#;

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    std::fs::write(&path, SMALL).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn validate_prints_effective_config() {
    let o = jrsim(&["validate", "--set", "model.alpha=0.05"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("[model]"));
    assert!(text.contains("alpha = 0.05"));
}

#[test]
fn unknown_key_is_a_config_error_with_suggestion() {
    let o = jrsim(&["validate", "--set", "model.alpah=0.1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("alpha"), "{}", stderr(&o));
}

#[test]
fn domain_violations_are_listed() {
    let o = jrsim(&["validate", "--set", "model.n=1", "--set", "model.beta=-1"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("n"), "{err}");
    assert!(err.contains("beta"), "{err}");
}

#[test]
fn parse_errors_carry_a_position() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[model]\nalpha = = 3\n").unwrap();
    let o = jrsim(&["validate", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn dry_run_lists_the_preset_grid() {
    let o = jrsim(&["run", "heatmap", "--dry-run"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.starts_with("363 cells = 3 xi x 1 N x 11 alpha x 11 lambda"), "{text}");
    assert_eq!(text.lines().count(), 364);
}

#[test]
fn jr0_oracle_closes_to_machine_precision() {
    let dir = tempfile::tempdir().unwrap();
    let o = jrsim(&["run", "jr0-oracle", "-o", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let gap: f64 = stdout(&o)
        .lines()
        .find_map(|l| l.strip_prefix("gap: "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(gap < 1e-12);
}

#[test]
fn bath_check_reports_the_growth_rate() {
    let dir = tempfile::tempdir().unwrap();
    let o = jrsim(&["run", "bath-check", "-o", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("bath.csv").exists());
    assert!(dir.path().join("bath_fig.svg").exists());
    let slope: f64 = stdout(&o)
        .lines()
        .find_map(|l| l.strip_prefix("dos_slope: "))
        .unwrap()
        .parse()
        .unwrap();
    assert!((slope - 1.0).abs() < 0.01);
}

#[test]
fn sweeps_are_reproducible_and_independent_of_workers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = |name: &str, workers: &str| {
        let d = dir.path().join(name);
        let o = jrsim(&["run", "heatmap", "-c", &cfg, "-o", d.to_str().unwrap(), "-w", workers]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        (
            std::fs::read(d.join("heatmap.csv")).unwrap(),
            std::fs::read(d.join("heatmap.cells.csv")).unwrap(),
        )
    };
    let a = out("a", "1");
    assert_eq!(a, out("b", "1"));
    assert_eq!(a, out("c", "2"));

    // A second run over the same directory reuses every cell.
    let d = dir.path().join("a");
    let o = jrsim(&["run", "heatmap", "-c", &cfg, "-o", d.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("0 computed, 8 reused"), "{}", stdout(&o));
    assert_eq!(std::fs::read(d.join("heatmap.csv")).unwrap(), a.0);
}

#[test]
fn heatmap_csv_has_the_documented_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let d = dir.path().join("out");
    let o = jrsim(&["run", "heatmap", "-c", &cfg, "-o", d.to_str().unwrap(), "--set", "output.plots=true"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(d.join("heatmap.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("xi,alpha,lambda,N,seed,E0,D,form,dt_discrepancy"));
    // Two forms per cell.
    assert_eq!(lines.count(), 16);
    assert!(d.join("heatmap_fig.svg").exists());
}

#[test]
fn store_from_another_experiment_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let d = dir.path().join("out");
    std::fs::create_dir_all(&d).unwrap();
    std::fs::write(d.join("heatmap.csv"), "a,b\n1,2\n").unwrap();
    let o = jrsim(&["run", "heatmap", "-c", &cfg, "-o", d.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
}

#[test]
fn invalid_sweep_grid_is_a_config_error() {
    let o = jrsim(&["run", "heatmap", "--dry-run", "--set", "sweep.alpha=[]"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}
