//! `jrsim`: command-line front end for the work-statistics simulations.

mod config;
mod plot;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};

use clap::{Parser, Subcommand, ValueEnum};
use jrsim_core::model::{build_hamiltonian, model_rng, BathSpectrum};
use jrsim_core::propagator::propagate;
use jrsim_core::sweep::{self, curves, scaling_fits, ExperimentKind, SweepOptions, SweepOutcome};
use jrsim_core::theory::{free_energy_identities, jr0_check, SyntheticEnsemble};
use jrsim_core::workstats::{coarse_grain, transition_table, window_indices, EnergyBinning};
use jrsim_core::{fmt_float, Error};

use config::{ConfigError, RunConfig};
use plot::{Heatmap, LinePlot, Panel, Series};

/// Process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Exit {
    Success = 0,
    Config = 2,
    Partial = 3,
    Numerical = 4,
    Io = 5,
}

impl From<Exit> for ExitCode {
    fn from(e: Exit) -> Self {
        ExitCode::from(e as u8)
    }
}

#[derive(Parser)]
#[command(name = "jrsim", version, about = "Work statistics and Jarzynski-relation tests for a driven spin coupled to a random-matrix bath")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a configuration file and print the effective configuration.
    Validate {
        /// TOML configuration; omitted means all defaults.
        config: Option<PathBuf>,
        /// Override a value, e.g. `--set model.alpha=0.05`.
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run one experiment.
    Run {
        experiment: Experiment,
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Override a value, e.g. `--set model.alpha=0.05`.
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        set: Vec<String>,
        /// Output directory (overrides `output.dir`).
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Worker threads (overrides `output.workers` and the environment).
        #[arg(short, long)]
        workers: Option<usize>,
        /// Skip SVG figures.
        #[arg(long)]
        no_plots: bool,
        /// List the sweep cells without computing them.
        #[arg(long)]
        dry_run: bool,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Experiment {
    BathCheck,
    Pdf,
    Heatmap,
    Scaling,
    EnergyScan,
    Stiffness,
    Jr0Oracle,
}

impl Experiment {
    fn sweep_kind(self) -> Option<ExperimentKind> {
        match self {
            Experiment::Heatmap => Some(ExperimentKind::Heatmap),
            Experiment::Scaling => Some(ExperimentKind::Scaling),
            Experiment::EnergyScan => Some(ExperimentKind::EnergyScan),
            Experiment::Stiffness => Some(ExperimentKind::Stiffness),
            _ => None,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { config, set } => validate(config.as_deref(), &set).into(),
        Command::Run {
            experiment,
            config,
            set,
            out,
            workers,
            no_plots,
            dry_run,
        } => {
            let mut cfg = match load(config.as_deref(), &set) {
                Ok(c) => c,
                Err(code) => return code.into(),
            };
            if let Err(e) = cfg.apply_env() {
                eprintln!("{e}");
                return Exit::Config.into();
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            if let Some(w) = workers {
                cfg.workers = w;
            }
            if no_plots {
                cfg.plots = false;
            }
            run(experiment, &cfg, dry_run).into()
        }
    }
}

fn read_config(path: Option<&Path>) -> Result<String, ConfigError> {
    match path {
        None => Ok(String::new()),
        Some(p) => std::fs::read_to_string(p).map_err(|e| ConfigError::Io(format!("cannot read {}: {e}", p.display()))),
    }
}

fn load(path: Option<&Path>, set: &[String]) -> Result<RunConfig, Exit> {
    let text = read_config(path).map_err(|e| {
        eprintln!("{e}");
        Exit::Config
    })?;
    RunConfig::load(&text, set).map_err(|e| {
        match path {
            Some(p) => eprint!("{}: {e}", p.display()),
            None => eprint!("{e}"),
        }
        if !e.to_string().ends_with('\n') {
            eprintln!();
        }
        Exit::Config
    })
}

fn validate(path: Option<&Path>, set: &[String]) -> Exit {
    match load(path, set) {
        Ok(cfg) => {
            print!("{}", cfg.to_toml());
            Exit::Success
        }
        Err(code) => code,
    }
}

fn error_exit(e: &Error) -> Exit {
    eprintln!("error: {e}");
    match e {
        _ if e.is_numerical() => Exit::Numerical,
        Error::Io(_) | Error::Csv(_) | Error::StoreMismatch { .. } => Exit::Io,
        Error::InvalidParams(_) | Error::SampleTooSmall { .. } => Exit::Config,
        _ => Exit::Numerical,
    }
}

fn io_exit(e: std::io::Error) -> Exit {
    eprintln!("error: {e}");
    Exit::Io
}

fn run(experiment: Experiment, cfg: &RunConfig, dry_run: bool) -> Exit {
    if let Some(kind) = experiment.sweep_kind() {
        let spec = cfg.sweep_spec(kind);
        if dry_run {
            if let Err(e) = spec.validate() {
                return error_exit(&e);
            }
            // A closed pipe (e.g. `| head`) just ends the listing.
            let mut out = std::io::stdout().lock();
            let _ = writeln!(
                out,
                "{} cells = {} xi x {} N x {} alpha x {} lambda",
                spec.cell_count(),
                spec.xis.len(),
                spec.ns.len(),
                spec.alphas.len(),
                spec.lambdas.len()
            );
            for c in spec.cells() {
                if writeln!(out, "  {:>4}  {}", c.ordinal, c.label()).is_err() {
                    break;
                }
            }
            return Exit::Success;
        }
        return run_sweep(kind, cfg, &spec);
    }
    if dry_run {
        println!("{experiment:?} has no sweep cells; nothing to list");
        return Exit::Success;
    }
    if let Err(e) = std::fs::create_dir_all(&cfg.out_dir) {
        return io_exit(e);
    }
    let result = match experiment {
        Experiment::BathCheck => bath_check(cfg),
        Experiment::Pdf => work_pdf(cfg),
        Experiment::Jr0Oracle => jr0_oracle(cfg),
        _ => unreachable!("sweeps handled above"),
    };
    result.unwrap_or_else(|e| error_exit(&e))
}

/// `(N, count, mean_D, std_D)`.
type ScalingPoint = (usize, usize, f64, f64);

static CANCEL: AtomicBool = AtomicBool::new(false);

fn run_sweep(kind: ExperimentKind, cfg: &RunConfig, spec: &sweep::SweepSpec) -> Exit {
    let _ = ctrlc::set_handler(|| {
        if CANCEL.swap(true, Ordering::SeqCst) {
            std::process::exit(Exit::Partial as i32);
        }
        eprintln!("interrupt: finishing running cells, then saving (press again to abort)");
    });
    let log = |line: &str| eprintln!("{line}");
    let opts = SweepOptions {
        workers: cfg.workers,
        cancel: Some(&CANCEL),
        log: Some(&log),
    };
    eprintln!(
        "{}: {} cells -> {}",
        kind.name(),
        spec.cell_count(),
        spec.output.display()
    );
    let outcome = match sweep::run(spec, opts) {
        Ok(o) => o,
        Err(e) => return error_exit(&e),
    };
    report(kind, &outcome);
    if cfg.plots {
        if let Err(e) = figures(kind, &outcome, &cfg.out_dir) {
            return io_exit(e);
        }
    }
    for f in &outcome.failures {
        eprintln!("failed cell {} ({}): {}", f.ordinal, f.label, f.message);
    }
    println!(
        "cells: {} total, {} computed, {} reused, {} failed{}",
        outcome.total_cells,
        outcome.computed,
        outcome.reused,
        outcome.failures.len(),
        if outcome.cancelled { ", interrupted" } else { "" }
    );
    if outcome.is_complete() {
        Exit::Success
    } else if outcome.completed() == 0 && !outcome.failures.is_empty() && outcome.failures.iter().all(|f| f.numerical) {
        Exit::Numerical
    } else {
        Exit::Partial
    }
}

fn report(kind: ExperimentKind, outcome: &SweepOutcome) {
    match kind {
        ExperimentKind::Scaling => {
            for s in scaling_fits(&outcome.store) {
                match &s.fit {
                    Some(f) => println!(
                        "xi={} alpha={} lambda={}: log-log slope of std(D_es) vs N = {} (stderr {}), max mean drift = {} std errors",
                        s.xi,
                        s.alpha,
                        s.lambda,
                        fmt_float(f.slope),
                        fmt_float(f.slope_stderr),
                        fmt_float(s.max_mean_drift())
                    ),
                    None => println!("xi={} alpha={} lambda={}: single N, no fit", s.xi, s.alpha, s.lambda),
                }
            }
        }
        ExperimentKind::EnergyScan => {
            for c in curves(&outcome.store, "D", None) {
                let z: Vec<String> = c.zero_crossings().into_iter().map(fmt_float).collect();
                println!(
                    "xi={} alpha={} lambda={} N={}: zero crossings at E = [{}]",
                    c.xi,
                    c.alpha,
                    c.lambda,
                    c.n,
                    z.join(", ")
                );
            }
        }
        ExperimentKind::Stiffness => {
            for c in curves(&outcome.store, "P0", Some("window")) {
                println!(
                    "xi={} alpha={} lambda={} N={}: slope of P_E(0) vs E = {}",
                    c.xi,
                    c.alpha,
                    c.lambda,
                    c.n,
                    fmt_float(c.slope().slope)
                );
            }
        }
        ExperimentKind::Heatmap => {}
    }
}

fn figures(kind: ExperimentKind, outcome: &SweepOutcome, dir: &Path) -> std::io::Result<()> {
    let store = &outcome.store;
    match kind {
        ExperimentKind::Heatmap => {
            let rows = sweep::parse_rows(store);
            let num = |r: &std::collections::BTreeMap<String, String>, k: &str| -> f64 {
                r[k].parse().unwrap_or(f64::NAN)
            };
            let mut keys: Vec<(f64, usize)> = Vec::new();
            let (mut alphas, mut lambdas): (Vec<f64>, Vec<f64>) = (Vec::new(), Vec::new());
            for r in &rows {
                let key = (num(r, "xi"), num(r, "N") as usize);
                if !keys.contains(&key) {
                    keys.push(key);
                }
                for (list, v) in [(&mut alphas, num(r, "alpha")), (&mut lambdas, num(r, "lambda"))] {
                    if !list.contains(&v) {
                        list.push(v);
                    }
                }
            }
            alphas.sort_by(f64::total_cmp);
            lambdas.sort_by(f64::total_cmp);
            let multi_n = keys.iter().map(|k| k.1).collect::<std::collections::BTreeSet<_>>().len() > 1;
            let panels = keys
                .iter()
                .map(|&(xi, n)| {
                    let mut values = vec![vec![f64::NAN; alphas.len()]; lambdas.len()];
                    for r in rows.iter().filter(|r| r["form"] == "exact" && num(r, "xi") == xi && num(r, "N") as usize == n) {
                        let ia = alphas.iter().position(|&a| a == num(r, "alpha")).expect("alpha listed");
                        let il = lambdas.iter().position(|&l| l == num(r, "lambda")).expect("lambda listed");
                        values[il][ia] = num(r, "D");
                    }
                    Panel {
                        title: if multi_n { format!("xi = {xi}, N = {n}") } else { format!("xi = {xi}") },
                        xs: alphas.clone(),
                        ys: lambdas.clone(),
                        values,
                    }
                })
                .collect();
            Heatmap {
                title: "D_mc at the spectrum center".into(),
                x_label: "alpha".into(),
                y_label: "lambda".into(),
                value_label: "D".into(),
                panels,
            }
            .write(dir, "heatmap_fig")
        }
        ExperimentKind::Scaling => {
            let fits = scaling_fits(store);
            let series = |f: &dyn Fn(&ScalingPoint) -> f64| -> Vec<Series> {
                fits.iter()
                    .map(|s| Series {
                        name: format!("xi={} a={} l={}", s.xi, s.alpha, s.lambda),
                        points: s.points.iter().map(|p| (p.0 as f64, f(p))).collect(),
                    })
                    .collect()
            };
            LinePlot {
                title: "Spread of D_es over eigenstates".into(),
                x_label: "N".into(),
                y_label: "std D_es".into(),
                series: series(&|p| p.3),
                log_x: true,
                log_y: true,
            }
            .write(dir, "scaling_std_fig")?;
            LinePlot {
                title: "Mean of D_es over eigenstates".into(),
                x_label: "N".into(),
                y_label: "mean D_es".into(),
                series: series(&|p| p.2),
                log_x: true,
                log_y: false,
            }
            .write(dir, "scaling_mean_fig")
        }
        ExperimentKind::EnergyScan | ExperimentKind::Stiffness => {
            let (col, variant, title, ylabel, stem) = if kind == ExperimentKind::EnergyScan {
                ("D", None, "D_mc versus window energy", "D", "energy-scan_fig")
            } else {
                ("P0", Some("window"), "Zero-work density versus energy", "P_E(0)", "stiffness_fig")
            };
            let series = curves(store, col, variant)
                .into_iter()
                .map(|c| Series {
                    name: format!("xi={} a={} l={} N={}", c.xi, c.alpha, c.lambda, c.n),
                    points: c.points,
                })
                .collect();
            LinePlot {
                title: title.into(),
                x_label: "E".into(),
                y_label: ylabel.into(),
                series,
                log_x: false,
                log_y: false,
            }
            .write(dir, stem)
        }
    }
}

/// Level-count bin width in units of `1 / beta`.
const DOS_BIN_WIDTH: f64 = 0.25;

fn bath_check(cfg: &RunConfig) -> Result<Exit, Error> {
    let p = &cfg.model;
    let bath = BathSpectrum::from_params(p)?;
    let path = cfg.out_dir.join("bath.csv");
    bath.write_csv(std::fs::File::create(&path)?)?;
    let slope = bath.dos_slope(DOS_BIN_WIDTH / p.beta);
    let rel = (slope - p.beta).abs() / p.beta;
    println!("levels: {}", bath.len());
    println!("dos_slope: {}", fmt_float(slope));
    println!("cumulative_slope: {}", fmt_float(bath.cumulative_slope()));
    println!("beta: {}", fmt_float(p.beta));
    println!("relative_deviation: {}", fmt_float(rel));
    if cfg.plots {
        let pts = bath
            .energies()
            .iter()
            .enumerate()
            .map(|(j, &e)| (e, ((j + 1) as f64).ln()))
            .collect();
        LinePlot {
            title: "Cumulative bath level count".into(),
            x_label: "E".into(),
            y_label: "ln count".into(),
            series: vec![Series {
                name: format!("N={}", p.n),
                points: pts,
            }],
            ..Default::default()
        }
        .write(&cfg.out_dir, "bath_fig")?;
    }
    if p.n >= 500 && rel > 0.01 {
        eprintln!("density-of-states slope deviates from beta by more than 1%");
        return Ok(Exit::Numerical);
    }
    Ok(Exit::Success)
}

fn work_pdf(cfg: &RunConfig) -> Result<Exit, Error> {
    let p = &cfg.model;
    let hs = build_hamiltonian(p)?;
    let binning = EnergyBinning::new(cfg.delta)?;
    let e0 = hs.spectrum_center();
    if let Some(w) = binning.resolution_warning(&hs, e0) {
        eprintln!("warning: {w}");
    }
    let (bin, window) = window_indices(&hs, &binning, e0)?;
    let pset = propagate(&hs, p, &cfg.propagator, &window)?;
    let tt = transition_table(&pset, &hs)?;
    let cg = coarse_grain(&tt, &binning, &hs)?;
    let pdf = cg.pdf(bin).expect("window bin is covered");
    pdf.write_csv(std::fs::File::create(cfg.out_dir.join("pdf.csv"))?)?;

    println!("E0: {}", fmt_float(e0));
    println!("initial_bin: {bin}");
    println!("window_states: {}", window.len());
    if let Some(d) = pset.discrepancy() {
        println!("dt_discrepancy: {}", fmt_float(d));
    }
    for (k, (w, dens)) in pdf.peaks().iter().take(2).enumerate() {
        println!("peak_{}: W = {} P = {}", k + 1, fmt_float(*w), fmt_float(*dens));
    }
    println!("support_width: {}", fmt_float(pdf.support_width(0.01)));
    if cfg.plots {
        LinePlot {
            title: format!("Work distribution, alpha = {}, lambda = {}", p.alpha, p.lambda),
            x_label: "W".into(),
            y_label: "P_E(W)".into(),
            series: vec![Series {
                name: format!("xi={}", p.xi),
                points: pdf.rows().map(|r| (r.1, r.2)).collect(),
            }],
            ..Default::default()
        }
        .write(&cfg.out_dir, "pdf_fig")?;
    }
    Ok(Exit::Success)
}

fn jr0_oracle(cfg: &RunConfig) -> Result<Exit, Error> {
    let p = &cfg.model;
    let mut rng = model_rng(p.seed);
    let ens = SyntheticEnsemble::<f64>::consistent(p.beta, cfg.delta, 1.0, 1.0, 201, 25, &mut rng)?;
    let r = jr0_check(&ens)?;
    println!("lhs: {}", fmt_float(r.lhs));
    println!("rhs: {}", fmt_float(r.rhs));
    println!("gap: {}", fmt_float(r.gap()));
    println!("balance_residual: {}", fmt_float(r.balance_residual));
    let fe = free_energy_identities(2.5, p.beta, 1.75)?;
    println!("free_energy_residual: {}", fmt_float(fe.residual));
    if r.gap() < 1e-12 && fe.residual.abs() < 1e-12 {
        Ok(Exit::Success)
    } else {
        Ok(Exit::Numerical)
    }
}
