//! Run configuration: a TOML file, `--set` overrides, and validation.
//!
//! Precedence, lowest first: built-in defaults, the config file, the
//! `JRSIM_WORKERS` environment variable (worker count only), command-line
//! flags.

use std::fmt;
use std::path::PathBuf;

use jrsim_core::propagator::{PropagatorConfig, Scheme};
use jrsim_core::sweep::{EnergyGrid, ExperimentKind, SeedPolicy, SweepSpec};
use jrsim_core::ModelParams64;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

pub const WORKERS_ENV: &str = "JRSIM_WORKERS";

/// Keys accepted in each table.
const SCHEMA: &[(&str, &[&str])] = &[
    (
        "model",
        &[
            "n",
            "b_z",
            "beta",
            "e_bath_min",
            "e_bath_max",
            "sigma_int_sq",
            "xi",
            "alpha",
            "lambda",
            "omega_prot",
            "n_periods",
            "seed",
        ],
    ),
    ("propagator", &["steps_per_period", "richardson_check", "tolerance", "scheme"]),
    ("binning", &["delta"]),
    (
        "sweep",
        &[
            "xi",
            "alpha",
            "lambda",
            "n",
            "energies",
            "energy_count",
            "energy_quantile",
            "eigenstate_count",
            "seed_policy",
        ],
    ),
    ("output", &["dir", "workers", "plots"]),
];

/// Problems found while reading a configuration.
#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    /// Malformed TOML.
    Parse { line: usize, column: usize, message: String },
    /// Unknown keys or wrongly typed values.
    Schema(Vec<String>),
    /// Well-formed but physically or numerically invalid values.
    Domain(Vec<String>),
    Io(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Parse { line, column, message } => {
                write!(f, "parse error at line {line}, column {column}: {message}")
            }
            ConfigError::Schema(v) | ConfigError::Domain(v) => {
                let kind = if matches!(self, ConfigError::Schema(_)) {
                    "invalid configuration"
                } else {
                    "invalid values"
                };
                writeln!(f, "{kind} ({} problem{}):", v.len(), if v.len() == 1 { "" } else { "s" })?;
                for m in v {
                    writeln!(f, "  - {m}")?;
                }
                Ok(())
            }
            ConfigError::Io(m) => write!(f, "{m}"),
        }
    }
}

#[derive(Debug, Default, Deserialize)]
struct FileConfig {
    model: Option<ModelSection>,
    propagator: Option<PropagatorSection>,
    binning: Option<BinningSection>,
    sweep: Option<SweepSection>,
    output: Option<OutputSection>,
}

#[derive(Debug, Default, Deserialize)]
struct ModelSection {
    n: Option<usize>,
    b_z: Option<f64>,
    beta: Option<f64>,
    e_bath_min: Option<f64>,
    e_bath_max: Option<f64>,
    sigma_int_sq: Option<f64>,
    xi: Option<f64>,
    alpha: Option<f64>,
    lambda: Option<f64>,
    omega_prot: Option<f64>,
    n_periods: Option<f64>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
struct PropagatorSection {
    steps_per_period: Option<usize>,
    richardson_check: Option<bool>,
    tolerance: Option<f64>,
    scheme: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
struct BinningSection {
    delta: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
struct SweepSection {
    xi: Option<Vec<f64>>,
    alpha: Option<Vec<f64>>,
    lambda: Option<Vec<f64>>,
    n: Option<Vec<usize>>,
    energies: Option<Vec<f64>>,
    energy_count: Option<usize>,
    energy_quantile: Option<f64>,
    eigenstate_count: Option<usize>,
    seed_policy: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
struct OutputSection {
    dir: Option<PathBuf>,
    workers: Option<usize>,
    plots: Option<bool>,
}

/// Sweep grids; `None` means the experiment's preset.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SweepOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub xi: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub energies: Option<Vec<f64>>,
    pub energy_count: usize,
    pub energy_quantile: f64,
    pub eigenstate_count: usize,
    pub seed_policy: String,
}

/// Fully resolved configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelParams64,
    pub propagator: PropagatorConfig,
    pub delta: f64,
    pub sweep: SweepOverrides,
    pub out_dir: PathBuf,
    /// 0 means one worker per CPU.
    pub workers: usize,
    pub plots: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let grid = EnergyGrid::default();
        let (energy_count, energy_quantile) = match grid {
            EnergyGrid::Bulk { count, quantile } => (count, quantile),
            EnergyGrid::Explicit(_) => unreachable!("default grid is a bulk grid"),
        };
        Self {
            model: ModelParams64::desk(),
            propagator: PropagatorConfig::default(),
            delta: 0.06,
            sweep: SweepOverrides {
                energy_count,
                energy_quantile,
                eigenstate_count: 100,
                seed_policy: "per-xi".into(),
                ..Default::default()
            },
            out_dir: PathBuf::from("results"),
            workers: 0,
            plots: true,
        }
    }
}

fn scheme_name(s: Scheme) -> &'static str {
    match s {
        Scheme::Strang => "strang",
        Scheme::Suzuki4 => "suzuki4",
    }
}

impl RunConfig {
    /// Parses config text, applies `key=value` overrides (dotted keys), and
    /// validates the result. Every problem of a stage is reported together.
    pub fn load(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: Table = text.parse::<Table>().map_err(|e| parse_error(text, &e))?;
        let mut problems = Vec::new();
        for o in overrides {
            if let Err(m) = apply_override(&mut table, o) {
                problems.push(m);
            }
        }
        problems.extend(unknown_keys(&table));
        if !problems.is_empty() {
            return Err(ConfigError::Schema(problems));
        }
        let file: FileConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Schema(vec![e.message().trim().to_string()]))?;
        let cfg = Self::from_file(file)?;
        let v = cfg.violations();
        if v.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigError::Domain(v))
        }
    }

    fn from_file(f: FileConfig) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        let mut problems = Vec::new();
        if let Some(m) = f.model {
            let p = &mut c.model;
            macro_rules! set {
                ($($field:ident),*) => { $( if let Some(v) = m.$field { p.$field = v; } )* };
            }
            set!(n, b_z, beta, e_bath_min, e_bath_max, sigma_int_sq, xi, alpha, lambda, omega_prot, n_periods, seed);
        }
        if let Some(pr) = f.propagator {
            if let Some(v) = pr.steps_per_period {
                c.propagator.steps_per_period = v;
            }
            if let Some(v) = pr.richardson_check {
                c.propagator.richardson_check = v;
            }
            if let Some(v) = pr.tolerance {
                c.propagator.tolerance = v;
            }
            if let Some(s) = pr.scheme {
                match s.as_str() {
                    "strang" => c.propagator.scheme = Scheme::Strang,
                    "suzuki4" => c.propagator.scheme = Scheme::Suzuki4,
                    other => problems.push(format!(
                        "propagator.scheme: unknown scheme `{other}` (expected `strang` or `suzuki4`)"
                    )),
                }
            }
        }
        if let Some(b) = f.binning {
            if let Some(d) = b.delta {
                c.delta = d;
            }
        }
        if let Some(s) = f.sweep {
            let o = &mut c.sweep;
            o.xi = s.xi.or(o.xi.take());
            o.alpha = s.alpha.or(o.alpha.take());
            o.lambda = s.lambda.or(o.lambda.take());
            o.n = s.n.or(o.n.take());
            o.energies = s.energies.or(o.energies.take());
            if let Some(v) = s.energy_count {
                o.energy_count = v;
            }
            if let Some(v) = s.energy_quantile {
                o.energy_quantile = v;
            }
            if let Some(v) = s.eigenstate_count {
                o.eigenstate_count = v;
            }
            if let Some(v) = s.seed_policy {
                if v == "per-xi" || v == "fixed" {
                    o.seed_policy = v;
                } else {
                    problems.push(format!(
                        "sweep.seed_policy: unknown policy `{v}` (expected `per-xi` or `fixed`)"
                    ));
                }
            }
        }
        if let Some(o) = f.output {
            if let Some(d) = o.dir {
                c.out_dir = d;
            }
            if let Some(w) = o.workers {
                c.workers = w;
            }
            if let Some(p) = o.plots {
                c.plots = p;
            }
        }
        if problems.is_empty() {
            Ok(c)
        } else {
            Err(ConfigError::Schema(problems))
        }
    }

    /// Domain violations of every section.
    pub fn violations(&self) -> Vec<String> {
        let mut v: Vec<String> = self.model.violations().into_iter().map(|m| format!("model.{m}")).collect();
        v.extend(self.propagator.violations().into_iter().map(|m| format!("propagator.{m}")));
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            v.push(format!("binning.delta must be positive (got {})", self.delta));
        }
        let s = &self.sweep;
        for (name, grid) in [("xi", &s.xi), ("alpha", &s.alpha), ("lambda", &s.lambda), ("energies", &s.energies)] {
            if let Some(g) = grid {
                if g.is_empty() {
                    v.push(format!("sweep.{name} must not be empty"));
                }
                if g.iter().any(|x| !x.is_finite()) {
                    v.push(format!("sweep.{name} contains a non-finite value"));
                }
            }
        }
        if let Some(ns) = &s.n {
            if ns.is_empty() {
                v.push("sweep.n must not be empty".into());
            }
            if ns.iter().any(|&n| n < 2) {
                v.push("sweep.n entries must be at least 2".into());
            }
        }
        if s.energy_count == 0 {
            v.push("sweep.energy_count must be positive".into());
        }
        if !(s.energy_quantile >= 0.0 && s.energy_quantile < 0.5) {
            v.push(format!("sweep.energy_quantile must lie in [0, 0.5) (got {})", s.energy_quantile));
        }
        if s.eigenstate_count < 2 {
            v.push(format!(
                "sweep.eigenstate_count must be at least 2 for a spread estimate (got {})",
                s.eigenstate_count
            ));
        }
        v
    }

    /// Worker count after the environment override; flags are applied by the caller.
    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        if let Ok(w) = std::env::var(WORKERS_ENV) {
            self.workers = w
                .trim()
                .parse()
                .map_err(|_| ConfigError::Domain(vec![format!("{WORKERS_ENV} must be a non-negative integer (got `{w}`)")]))?;
        }
        Ok(())
    }

    /// The sweep this configuration describes for `kind`.
    pub fn sweep_spec(&self, kind: ExperimentKind) -> SweepSpec {
        let output = self.out_dir.join(format!("{}.csv", kind.name()));
        let mut spec = SweepSpec::preset(kind, self.model.clone(), output);
        spec.propagator = self.propagator.clone();
        spec.delta = self.delta;
        let s = &self.sweep;
        if let Some(v) = &s.xi {
            spec.xis = v.clone();
        }
        if let Some(v) = &s.alpha {
            spec.alphas = v.clone();
        }
        if let Some(v) = &s.lambda {
            spec.lambdas = v.clone();
        }
        if let Some(v) = &s.n {
            spec.ns = v.clone();
        }
        spec.energies = match &s.energies {
            Some(e) => EnergyGrid::Explicit(e.clone()),
            None => EnergyGrid::Bulk {
                count: s.energy_count,
                quantile: s.energy_quantile,
            },
        };
        spec.eigenstate_count = s.eigenstate_count;
        spec.seed_policy = if s.seed_policy == "fixed" {
            SeedPolicy::Fixed
        } else {
            SeedPolicy::PerXi
        };
        spec
    }

    /// The effective configuration as TOML.
    pub fn to_toml(&self) -> String {
        #[derive(Serialize)]
        struct Prop {
            steps_per_period: usize,
            richardson_check: bool,
            tolerance: f64,
            scheme: &'static str,
        }
        #[derive(Serialize)]
        struct Bin {
            delta: f64,
        }
        #[derive(Serialize)]
        struct Out {
            dir: String,
            workers: usize,
            plots: bool,
        }
        #[derive(Serialize)]
        struct Effective<'a> {
            model: &'a ModelParams64,
            propagator: Prop,
            binning: Bin,
            sweep: &'a SweepOverrides,
            output: Out,
        }
        let e = Effective {
            model: &self.model,
            propagator: Prop {
                steps_per_period: self.propagator.steps_per_period,
                richardson_check: self.propagator.richardson_check,
                tolerance: self.propagator.tolerance,
                scheme: scheme_name(self.propagator.scheme),
            },
            binning: Bin { delta: self.delta },
            sweep: &self.sweep,
            output: Out {
                dir: self.out_dir.display().to_string(),
                workers: self.workers,
                plots: self.plots,
            },
        };
        toml::to_string(&e).expect("configuration serializes")
    }
}

fn parse_error(text: &str, e: &toml::de::Error) -> ConfigError {
    let (line, column) = match e.span() {
        Some(span) => line_column(text, span.start),
        None => (1, 1),
    };
    ConfigError::Parse {
        line,
        column,
        message: e.message().trim().to_string(),
    }
}

/// 1-based line and column of a byte offset.
fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let offset = offset.min(text.len());
    let before = &text[..offset];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, col)
}

fn apply_override(table: &mut Table, assignment: &str) -> Result<(), String> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| format!("override `{assignment}` is not of the form section.key=value"))?;
    let key = key.trim();
    let (section, field) = key
        .split_once('.')
        .ok_or_else(|| format!("override key `{key}` must be section.key"))?;
    // Parse the value as TOML; bare words become strings.
    let value = format!("v = {}", raw.trim())
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.trim().to_string()));
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| Value::Table(Table::new()));
    match entry {
        Value::Table(t) => {
            t.insert(field.to_string(), value);
            Ok(())
        }
        _ => Err(format!("`{section}` is not a table")),
    }
}

fn unknown_keys(table: &Table) -> Vec<String> {
    let mut out = Vec::new();
    let all: Vec<String> = SCHEMA
        .iter()
        .flat_map(|(s, keys)| keys.iter().map(move |k| format!("{s}.{k}")))
        .collect();
    for (name, value) in table {
        match SCHEMA.iter().find(|(s, _)| s == name) {
            Some((section, keys)) => match value {
                Value::Table(t) => {
                    for k in t.keys() {
                        if !keys.contains(&k.as_str()) {
                            let hint = suggest(k, keys.iter().copied())
                                .map(|s| format!("; did you mean `{s}`?"))
                                .unwrap_or_default();
                            out.push(format!("unknown key `{k}` in [{section}]{hint}"));
                        }
                    }
                }
                _ => out.push(format!("`{name}` must be a table ([{name}])")),
            },
            None => {
                let sections = SCHEMA.iter().map(|(s, _)| *s);
                let hint = suggest(name, sections)
                    .or_else(|| suggest(name, SCHEMA.iter().flat_map(|(_, k)| k.iter().copied())).and_then(|k| all.iter().find(|q| q.ends_with(&format!(".{k}"))).map(String::as_str)))
                    .map(|s| format!("; did you mean `{s}`?"))
                    .unwrap_or_default();
                out.push(format!("unknown key `{name}`{hint}"));
            }
        }
    }
    out
}

/// Closest known name by Jaro-Winkler similarity, if reasonably close.
fn suggest<'a>(unknown: &str, known: impl Iterator<Item = &'a str>) -> Option<&'a str> {
    known
        .map(|k| (strsim::jaro_winkler(unknown, k), k))
        .filter(|(score, _)| *score >= 0.8)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, k)| k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_desk_defaults() {
        let c = RunConfig::load("", &[]).unwrap();
        assert_eq!(c.model, ModelParams64::desk());
        assert_eq!(c.model.n, 500);
        assert_eq!(c.delta, 0.06);
    }

    #[test]
    fn sigma_suggests_sigma_int_sq() {
        let err = RunConfig::load("[model]\nsigma = 0.5\n", &[]).unwrap_err();
        let ConfigError::Schema(v) = err else { panic!("{err:?}") };
        assert!(v[0].contains("`sigma_int_sq`"), "{v:?}");
    }

    #[test]
    fn parse_error_has_position() {
        let err = RunConfig::load("[model]\nbeta = = 1\n", &[]).unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 2, .. }), "{err:?}");
    }

    #[test]
    fn violations_are_exhaustive() {
        let err = RunConfig::load("[model]\nbeta = -1.0\nb_z = 0.0\n[binning]\ndelta = 0\n", &[]).unwrap_err();
        let ConfigError::Domain(v) = err else { panic!("{err:?}") };
        assert!(v.iter().any(|m| m.contains("beta")));
        assert!(v.iter().any(|m| m.contains("b_z")));
        assert!(v.iter().any(|m| m.contains("delta")));
    }

    #[test]
    fn overrides_win_over_file() {
        let c = RunConfig::load("[model]\nalpha = 0.1\n", &["model.alpha=0.05".into(), "sweep.xi=[1.0]".into()]).unwrap();
        assert_eq!(c.model.alpha, 0.05);
        assert_eq!(c.sweep.xi, Some(vec![1.0]));
    }

    #[test]
    fn wrong_type_is_a_schema_error() {
        assert!(matches!(
            RunConfig::load("[model]\nn = \"many\"\n", &[]),
            Err(ConfigError::Schema(_))
        ));
    }

    #[test]
    fn effective_config_roundtrips() {
        let c = RunConfig::load("[sweep]\nalpha = [0.1, 0.2]\n", &[]).unwrap();
        let again = RunConfig::load(&c.to_toml(), &[]).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn line_column_counts_from_one() {
        assert_eq!(line_column("ab\ncd", 4), (2, 2));
        assert_eq!(line_column("ab", 0), (1, 1));
    }
}
