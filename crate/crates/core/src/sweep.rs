//! Parameter sweeps over `(xi, N, alpha, lambda)` grids.
//!
//! Cells are enumerated in grid order (`xi` outermost, then `N`, `alpha`,
//! `lambda`). All cells sharing `(xi, N, alpha)` form one task: they share the
//! Hamiltonian and are propagated together, each column carrying its own drive
//! amplitude. A task always recomputes its whole group, so resuming a sweep
//! reproduces the numbers of an uninterrupted run. Tasks run on a bounded
//! worker pool; every finished cell is committed to the [`ResultStore`]
//! under a lock.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

use faer::Mat;
use rayon::prelude::*;

use crate::fit::{linear_fit, log_log_fit, mean_std, LinearFit};
use crate::fmt_float;
use crate::model::{CoupledBath, HamiltonianSet, ModelParams};
use crate::propagator::{propagate_with_amplitudes, PropagatedSet, PropagatorConfig};
use crate::store::{CellEntry, KeyHasher, ResultStore};
use crate::workstats::{
    eigenstate_deviations, microcanonical_from_table, stiffness_from_table, window_indices, windows_union,
    EigenReference, EnergyBinning, TransitionTable,
};
use crate::{Error, Result};

pub const HEATMAP_HEADER: [&str; 9] = ["xi", "alpha", "lambda", "N", "seed", "E0", "D", "form", "dt_discrepancy"];
pub const SCALING_HEADER: [&str; 8] = ["xi", "alpha", "lambda", "N", "seed", "count", "mean_D", "std_D"];
pub const ENERGY_SCAN_HEADER: [&str; 7] = ["xi", "alpha", "lambda", "N", "seed", "E", "D"];
pub const STIFFNESS_HEADER: [&str; 9] = ["xi", "alpha", "lambda", "N", "seed", "E", "P0", "variant", "eigen_index"];

/// The four sweep experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentKind {
    /// `D_mc` at the spectrum center over the `(xi, alpha, lambda)` grid.
    Heatmap,
    /// Mean and spread of `D_es` over mid-spectrum eigenstates versus `N`.
    Scaling,
    /// `D_mc` as a function of the window energy.
    EnergyScan,
    /// Zero-work density `P_E(0)` as a function of energy.
    Stiffness,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Heatmap => "heatmap",
            ExperimentKind::Scaling => "scaling",
            ExperimentKind::EnergyScan => "energy-scan",
            ExperimentKind::Stiffness => "stiffness",
        }
    }

    pub fn header(self) -> &'static [&'static str] {
        match self {
            ExperimentKind::Heatmap => &HEATMAP_HEADER,
            ExperimentKind::Scaling => &SCALING_HEADER,
            ExperimentKind::EnergyScan => &ENERGY_SCAN_HEADER,
            ExperimentKind::Stiffness => &STIFFNESS_HEADER,
        }
    }
}

/// How each cell's disorder seed follows from the base seed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SeedPolicy {
    /// `hash(base seed, xi)`: one disorder realization per `xi`, shared by
    /// every `alpha`, `lambda`, and redrawn at every `N`.
    #[default]
    PerXi,
    /// The base seed everywhere.
    Fixed,
}

impl SeedPolicy {
    pub fn seed(self, base: u64, xi: f64) -> u64 {
        match self {
            SeedPolicy::PerXi => KeyHasher::new("cell-seed").u64(base).f64(xi).finish_u64(),
            SeedPolicy::Fixed => base,
        }
    }
}

/// Energies at which windows are evaluated.
#[derive(Clone, Debug, PartialEq)]
pub enum EnergyGrid {
    /// Fixed energies.
    Explicit(Vec<f64>),
    /// `count` uniformly spaced energies between the eigenvalues at the
    /// `quantile` and `1 - quantile` positions of the spectrum.
    Bulk { count: usize, quantile: f64 },
}

impl Default for EnergyGrid {
    fn default() -> Self {
        EnergyGrid::Bulk {
            count: 25,
            quantile: 0.05,
        }
    }
}

impl EnergyGrid {
    pub fn resolve(&self, eigenvalues: &[f64]) -> Vec<f64> {
        match self {
            EnergyGrid::Explicit(e) => e.clone(),
            EnergyGrid::Bulk { count, quantile } => {
                let d = eigenvalues.len();
                let pick = |q: f64| eigenvalues[((q * (d - 1) as f64).round() as usize).min(d - 1)];
                let (lo, hi) = (pick(*quantile), pick(1.0 - quantile));
                if *count == 1 {
                    return vec![(lo + hi) / 2.0];
                }
                (0..*count)
                    .map(|k| lo + (hi - lo) * k as f64 / (*count - 1) as f64)
                    .collect()
            }
        }
    }

    fn hash_into(&self, h: &mut KeyHasher) {
        match self {
            EnergyGrid::Explicit(e) => {
                h.str("explicit").u64(e.len() as u64);
                for &x in e {
                    h.f64(x);
                }
            }
            EnergyGrid::Bulk { count, quantile } => {
                h.str("bulk").u64(*count as u64).f64(*quantile);
            }
        }
    }
}

/// `alpha in {0, 0.05, ..., 0.5}`.
pub fn preset_alphas() -> Vec<f64> {
    (0..=10).map(|k| k as f64 / 20.0).collect()
}

/// `lambda in {0, 0.025, ..., 0.25}`.
pub fn preset_lambdas() -> Vec<f64> {
    (0..=10).map(|k| k as f64 / 40.0).collect()
}

pub fn preset_xis() -> Vec<f64> {
    vec![0.6, 1.0, 2.0]
}

/// A complete sweep description.
#[derive(Clone, Debug)]
pub struct SweepSpec {
    pub kind: ExperimentKind,
    /// Values of every parameter not swept. Its `seed` is the base seed.
    pub base: ModelParams<f64>,
    pub propagator: PropagatorConfig,
    /// Energy bin width.
    pub delta: f64,
    pub xis: Vec<f64>,
    pub alphas: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub ns: Vec<usize>,
    pub energies: EnergyGrid,
    /// Eigenstates per scaling sample.
    pub eigenstate_count: usize,
    pub seed_policy: SeedPolicy,
    pub output: PathBuf,
}

impl SweepSpec {
    fn with_kind(kind: ExperimentKind, base: ModelParams<f64>, output: PathBuf) -> Self {
        Self {
            kind,
            ns: vec![base.n],
            xis: preset_xis(),
            alphas: vec![base.alpha],
            lambdas: vec![base.lambda],
            base,
            propagator: PropagatorConfig::default(),
            delta: 0.06,
            energies: EnergyGrid::default(),
            eigenstate_count: 100,
            seed_policy: SeedPolicy::default(),
            output,
        }
    }

    /// Full `3 x 11 x 11` grid at `base.n`.
    pub fn heatmap_preset(base: ModelParams<f64>, output: impl Into<PathBuf>) -> Self {
        Self {
            alphas: preset_alphas(),
            lambdas: preset_lambdas(),
            ..Self::with_kind(ExperimentKind::Heatmap, base, output.into())
        }
    }

    /// 100 mid-spectrum eigenstates at `alpha = 0.4`, `lambda = 0.25`,
    /// `N in {250, 500, 1000}`.
    pub fn scaling_preset(base: ModelParams<f64>, output: impl Into<PathBuf>) -> Self {
        Self {
            alphas: vec![0.4],
            lambdas: vec![0.25],
            ns: vec![250, 500, 1000],
            ..Self::with_kind(ExperimentKind::Scaling, base, output.into())
        }
    }

    /// `xi in {1, 2}` at `alpha = 0.45`, `lambda = 0.15` over the spectral bulk.
    pub fn energy_scan_preset(base: ModelParams<f64>, output: impl Into<PathBuf>) -> Self {
        Self {
            xis: vec![1.0, 2.0],
            alphas: vec![0.45],
            lambdas: vec![0.15],
            ..Self::with_kind(ExperimentKind::EnergyScan, base, output.into())
        }
    }

    /// All three `xi` at `alpha = 0.4`, `lambda = 0.25` over the spectral bulk.
    pub fn stiffness_preset(base: ModelParams<f64>, output: impl Into<PathBuf>) -> Self {
        Self {
            alphas: vec![0.4],
            lambdas: vec![0.25],
            ..Self::with_kind(ExperimentKind::Stiffness, base, output.into())
        }
    }

    pub fn preset(kind: ExperimentKind, base: ModelParams<f64>, output: impl Into<PathBuf>) -> Self {
        match kind {
            ExperimentKind::Heatmap => Self::heatmap_preset(base, output),
            ExperimentKind::Scaling => Self::scaling_preset(base, output),
            ExperimentKind::EnergyScan => Self::energy_scan_preset(base, output),
            ExperimentKind::Stiffness => Self::stiffness_preset(base, output),
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, empty) in [
            ("xi", self.xis.is_empty()),
            ("alpha", self.alphas.is_empty()),
            ("lambda", self.lambdas.is_empty()),
            ("N", self.ns.is_empty()),
        ] {
            if empty {
                out.push(format!("{name} grid is empty"));
            }
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            out.push(format!("delta must be positive (got {})", self.delta));
        }
        match &self.energies {
            EnergyGrid::Explicit(e) if e.is_empty() => out.push("energy list is empty".into()),
            EnergyGrid::Explicit(e) if e.iter().any(|x| !x.is_finite()) => {
                out.push("energy list contains a non-finite value".into())
            }
            EnergyGrid::Bulk { count, quantile } => {
                if *count == 0 {
                    out.push("energy grid count must be positive".into());
                }
                if !(*quantile >= 0.0 && *quantile < 0.5) {
                    out.push(format!("energy grid quantile must lie in [0, 0.5) (got {quantile})"));
                }
            }
            _ => {}
        }
        out.extend(self.propagator.violations());
        // Every combination must be a valid model.
        let mut seen = Vec::new();
        for p in self.cells().map(|c| c.params) {
            for v in p.violations() {
                if !seen.contains(&v) {
                    seen.push(v);
                }
            }
        }
        out.extend(seen);
        if self.kind == ExperimentKind::Scaling {
            for &n in &self.ns {
                if self.eigenstate_count > 2 * n {
                    out.push(format!(
                        "eigenstate_count {} exceeds the dimension {} at N = {n}",
                        self.eigenstate_count,
                        2 * n
                    ));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParams(v))
        }
    }

    pub fn cell_count(&self) -> usize {
        self.xis.len() * self.ns.len() * self.alphas.len() * self.lambdas.len()
    }

    /// Cells in grid order.
    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        let mut ordinal = 0;
        let mut out = Vec::with_capacity(self.cell_count());
        for &xi in &self.xis {
            let seed = self.seed_policy.seed(self.base.seed, xi);
            for &n in &self.ns {
                for &alpha in &self.alphas {
                    for &lambda in &self.lambdas {
                        out.push(Cell {
                            ordinal,
                            params: ModelParams {
                                n,
                                xi,
                                alpha,
                                lambda,
                                seed,
                                ..self.base.clone()
                            },
                        });
                        ordinal += 1;
                    }
                }
            }
        }
        out.into_iter()
    }

    fn tasks(&self) -> Vec<Vec<Cell>> {
        let per = self.lambdas.len();
        let cells: Vec<Cell> = self.cells().collect();
        cells.chunks(per).map(|c| c.to_vec()).collect()
    }

    /// Digest of everything that determines the numbers of `task`'s cells.
    fn task_key(&self, task: &[Cell]) -> String {
        let p = &task[0].params;
        let mut h = KeyHasher::new(self.kind.name());
        h.u64(p.n as u64)
            .f64(p.b_z)
            .f64(p.beta)
            .f64(p.e_bath_min)
            .f64(p.e_bath_max)
            .f64(p.sigma_int_sq)
            .f64(p.xi)
            .f64(p.alpha)
            .f64(p.omega_prot)
            .f64(p.n_periods)
            .u64(p.seed);
        for c in task {
            h.f64(c.params.lambda);
        }
        let cfg = &self.propagator;
        h.u64(cfg.steps_per_period as u64)
            .u64(cfg.richardson_check as u64)
            .f64(cfg.tolerance)
            .str(&format!("{:?}", cfg.scheme))
            .f64(self.delta);
        match self.kind {
            ExperimentKind::Heatmap => {}
            ExperimentKind::Scaling => {
                h.u64(self.eigenstate_count as u64);
            }
            ExperimentKind::EnergyScan | ExperimentKind::Stiffness => self.energies.hash_into(&mut h),
        }
        h.finish_hex()
    }
}

/// One point of the sweep grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub ordinal: usize,
    pub params: ModelParams<f64>,
}

impl Cell {
    pub fn label(&self) -> String {
        let p = &self.params;
        format!("xi={} N={} alpha={} lambda={}", p.xi, p.n, p.alpha, p.lambda)
    }
}

/// Execution controls that do not affect any number.
#[derive(Clone, Copy, Default)]
pub struct SweepOptions<'a> {
    /// Worker threads; 0 picks the number of CPUs.
    pub workers: usize,
    /// Set to stop after the tasks already running.
    pub cancel: Option<&'a AtomicBool>,
    /// Receives one line per finished cell.
    pub log: Option<&'a (dyn Fn(&str) + Sync)>,
}

/// A cell that could not be computed.
#[derive(Clone, Debug, PartialEq)]
pub struct CellFailure {
    pub ordinal: usize,
    pub label: String,
    pub message: String,
    pub numerical: bool,
}

/// What a sweep run did.
#[derive(Debug)]
pub struct SweepOutcome {
    pub store: ResultStore,
    pub total_cells: usize,
    /// Cells computed by this run.
    pub computed: usize,
    /// Cells found complete from an earlier run.
    pub reused: usize,
    pub failures: Vec<CellFailure>,
    pub cancelled: bool,
}

impl SweepOutcome {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty() && !self.cancelled
    }

    /// Completed cells, whether computed now or earlier.
    pub fn completed(&self) -> usize {
        self.store.cells().filter(|(_, c)| c.is_done()).count()
    }
}

/// Runs any experiment kind.
pub fn run(spec: &SweepSpec, opts: SweepOptions<'_>) -> Result<SweepOutcome> {
    spec.validate()?;
    if spec.kind == ExperimentKind::Scaling && spec.eigenstate_count < 2 {
        return Err(Error::SampleTooSmall {
            count: spec.eigenstate_count,
        });
    }
    let store = ResultStore::open(&spec.output, spec.kind.header())?;
    let tasks = spec.tasks();
    let mut pending = Vec::new();
    let mut reused = 0;
    for task in tasks {
        let key = spec.task_key(&task);
        if task.iter().all(|c| store.is_current(c.ordinal, &key)) {
            reused += task.len();
        } else {
            pending.push((task, key));
        }
    }
    let total = spec.cell_count();
    let shared = Mutex::new((store, Vec::<CellFailure>::new(), 0usize));
    let io_error: Mutex<Option<Error>> = Mutex::new(None);
    let cancelled = AtomicBool::new(false);

    let body = || {
        pending.par_iter().with_max_len(1).for_each(|(task, key)| {
            if opts.cancel.is_some_and(|c| c.load(Ordering::SeqCst)) {
                cancelled.store(true, Ordering::SeqCst);
                return;
            }
            if io_error.lock().unwrap().is_some() {
                return;
            }
            let results = compute_task(spec, task);
            let mut guard = shared.lock().unwrap();
            let (store, failures, computed) = &mut *guard;
            for (cell, result) in task.iter().zip(results) {
                let entry = match result {
                    Ok(done) => {
                        *computed += 1;
                        CellEntry::done(key.clone(), done.rows, done.steps, done.dt, done.dt_discrepancy)
                    }
                    Err(e) => {
                        failures.push(CellFailure {
                            ordinal: cell.ordinal,
                            label: cell.label(),
                            message: e.message.clone(),
                            numerical: e.numerical,
                        });
                        CellEntry::failed(key.clone(), e.message)
                    }
                };
                let ok = entry.is_done();
                if let Err(e) = store.insert(cell.ordinal, entry) {
                    *io_error.lock().unwrap() = Some(e);
                    return;
                }
                if let Some(log) = opts.log {
                    log(&format!("{} {}", if ok { "done  " } else { "failed" }, cell.label()));
                }
            }
            if let Err(e) = store.save() {
                *io_error.lock().unwrap() = Some(e);
            }
        });
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    pool.install(body);

    if let Some(e) = io_error.into_inner().unwrap() {
        return Err(e);
    }
    let (store, mut failures, computed) = shared.into_inner().unwrap();
    // The store always exists on disk after a run, even when nothing was pending.
    store.save()?;
    failures.sort_by_key(|f| f.ordinal);
    Ok(SweepOutcome {
        store,
        total_cells: total,
        computed,
        reused,
        failures,
        cancelled: cancelled.into_inner(),
    })
}

pub fn run_heatmap(spec: &SweepSpec, opts: SweepOptions<'_>) -> Result<SweepOutcome> {
    expect_kind(spec, ExperimentKind::Heatmap)?;
    run(spec, opts)
}

pub fn run_scaling(spec: &SweepSpec, opts: SweepOptions<'_>) -> Result<SweepOutcome> {
    expect_kind(spec, ExperimentKind::Scaling)?;
    run(spec, opts)
}

pub fn run_energy_scan(spec: &SweepSpec, opts: SweepOptions<'_>) -> Result<SweepOutcome> {
    expect_kind(spec, ExperimentKind::EnergyScan)?;
    run(spec, opts)
}

pub fn run_stiffness(spec: &SweepSpec, opts: SweepOptions<'_>) -> Result<SweepOutcome> {
    expect_kind(spec, ExperimentKind::Stiffness)?;
    run(spec, opts)
}

fn expect_kind(spec: &SweepSpec, kind: ExperimentKind) -> Result<()> {
    if spec.kind == kind {
        Ok(())
    } else {
        Err(Error::InvalidParams(vec![format!(
            "expected a {} sweep, got {}",
            kind.name(),
            spec.kind.name()
        )]))
    }
}

struct CellRows {
    rows: Vec<Vec<String>>,
    steps: usize,
    dt: String,
    dt_discrepancy: String,
}

/// Columns of one cell within a batched propagation.
struct Slice<'a> {
    pset: &'a PropagatedSet<f64>,
    start: usize,
    indices: &'a [usize],
}

impl Slice<'_> {
    fn table(&self) -> Result<TransitionTable<f64>> {
        let k = self.indices.len();
        let dim = self.pset.dim();
        let states = self.pset.states();
        let probs = Mat::from_fn(dim, k, |f, c| states.probability(f, self.start + c));
        TransitionTable::from_probabilities(self.indices.to_vec(), probs)
    }

    fn discrepancy(&self) -> Option<f64> {
        self.pset.column_discrepancies().map(|d| {
            d[self.start..self.start + self.indices.len()]
                .iter()
                .fold(0.0, |a: f64, &b| a.max(b))
        })
    }

    fn meta(&self) -> (usize, String, String) {
        (
            self.pset.steps(),
            fmt_float(self.pset.dt_used()),
            self.discrepancy().map(fmt_float).unwrap_or_default(),
        )
    }
}

/// Failure of one cell, detached from the error value so a task-wide
/// failure can be reported for each of its cells.
#[derive(Clone, Debug)]
struct CellError {
    message: String,
    numerical: bool,
}

impl From<&Error> for CellError {
    fn from(e: &Error) -> Self {
        Self {
            message: e.to_string(),
            numerical: e.is_numerical(),
        }
    }
}

impl From<Error> for CellError {
    fn from(e: Error) -> Self {
        Self::from(&e)
    }
}

type CellResult = std::result::Result<CellRows, CellError>;

fn compute_task(spec: &SweepSpec, task: &[Cell]) -> Vec<CellResult> {
    match build_task(spec, task) {
        Ok(r) => r,
        Err(e) => {
            let err = CellError::from(e);
            task.iter().map(|_| Err(err.clone())).collect()
        }
    }
}

/// Builds the shared Hamiltonian, propagates the task's columns and splits
/// the result per cell. An error here fails every cell of the task.
fn build_task(spec: &SweepSpec, task: &[Cell]) -> Result<Vec<CellResult>> {
    let p0 = &task[0].params;
    let hs = CoupledBath::draw(p0)?.hamiltonian(p0)?;
    let binning = EnergyBinning::new(spec.delta)?;
    let energies = spec.energies.resolve(hs.eigenvalues());
    let indices: Vec<usize> = match spec.kind {
        ExperimentKind::Heatmap => window_indices(&hs, &binning, hs.spectrum_center())?.1,
        ExperimentKind::Scaling => mid_spectrum_sample(hs.dim(), spec.eigenstate_count),
        ExperimentKind::EnergyScan | ExperimentKind::Stiffness => windows_union(&hs, &binning, &energies)?,
    };
    // Undriven cells are exact phases; keeping them out of the driven batch
    // lets them skip time stepping.
    let (idle, driven): (Vec<&Cell>, Vec<&Cell>) = task.iter().partition(|c| c.params.lambda == 0.0);
    let mut psets: BTreeMap<usize, (usize, &PropagatedSet<f64>)> = BTreeMap::new();
    let mut owned = Vec::new();
    for group in [idle, driven] {
        if group.is_empty() {
            continue;
        }
        let mut cols = Vec::new();
        let mut amps = Vec::new();
        for c in &group {
            cols.extend_from_slice(&indices);
            amps.extend(std::iter::repeat_n(c.params.lambda, indices.len()));
        }
        let pset = propagate_with_amplitudes(&hs, p0, &spec.propagator, &cols, &amps);
        owned.push((group, pset));
    }
    let mut out: BTreeMap<usize, CellResult> = BTreeMap::new();
    for (group, pset) in &owned {
        match pset {
            Ok(pset) => {
                for (k, c) in group.iter().enumerate() {
                    psets.insert(c.ordinal, (k * indices.len(), pset));
                }
            }
            Err(e) => {
                for c in group {
                    out.insert(c.ordinal, Err(CellError::from(e)));
                }
            }
        }
    }
    for cell in task {
        if out.contains_key(&cell.ordinal) {
            continue;
        }
        let (start, pset) = psets[&cell.ordinal];
        let slice = Slice {
            pset,
            start,
            indices: &indices,
        };
        out.insert(
            cell.ordinal,
            cell_rows(spec, cell, &hs, &binning, &energies, &slice).map_err(CellError::from),
        );
    }
    Ok(task.iter().map(|c| out.remove(&c.ordinal).expect("every cell evaluated")).collect())
}

/// `count` consecutive indices centered on the middle of `0..dim`.
pub fn mid_spectrum_sample(dim: usize, count: usize) -> Vec<usize> {
    let count = count.min(dim);
    let start = dim / 2 - count / 2;
    (start..start + count).collect()
}

fn prefix(p: &ModelParams<f64>) -> Vec<String> {
    vec![
        fmt_float(p.xi),
        fmt_float(p.alpha),
        fmt_float(p.lambda),
        p.n.to_string(),
        p.seed.to_string(),
    ]
}

fn cell_rows(
    spec: &SweepSpec,
    cell: &Cell,
    hs: &HamiltonianSet<f64>,
    binning: &EnergyBinning<f64>,
    energies: &[f64],
    slice: &Slice<'_>,
) -> Result<CellRows> {
    let p = &cell.params;
    let tt = slice.table()?;
    let (steps, dt, disc) = slice.meta();
    let mut rows = Vec::new();
    match spec.kind {
        ExperimentKind::Heatmap => {
            let e0 = hs.spectrum_center();
            let mc = microcanonical_from_table(&tt, hs, p, e0, binning, slice.discrepancy())?;
            for rec in [&mc.exact, &mc.binned] {
                let mut row = prefix(p);
                row.extend([fmt_float(e0), fmt_float(rec.value), rec.form.to_string(), disc.clone()]);
                rows.push(row);
            }
        }
        ExperimentKind::Scaling => {
            let d = eigenstate_deviations(&tt, hs, p.beta, EigenReference::Own);
            let (mean, std) = mean_std(&d).ok_or(Error::SampleTooSmall { count: d.len() })?;
            let mut row = prefix(p);
            row.extend([d.len().to_string(), fmt_float(mean), fmt_float(std)]);
            rows.push(row);
        }
        ExperimentKind::EnergyScan => {
            for &e in energies {
                let mc = microcanonical_from_table(&tt, hs, p, e, binning, slice.discrepancy())?;
                let mut row = prefix(p);
                row.extend([fmt_float(e), fmt_float(mc.exact.value)]);
                rows.push(row);
            }
        }
        ExperimentKind::Stiffness => {
            for point in stiffness_from_table(&tt, hs, binning, energies)? {
                let mut row = prefix(p);
                row.extend([
                    fmt_float(point.energy),
                    fmt_float(point.window_p0),
                    "window".into(),
                    String::new(),
                ]);
                rows.push(row);
            }
            // Per-eigenstate values, once per state even if windows repeat.
            let mut states: Vec<(usize, f64, f64)> = stiffness_from_table(&tt, hs, binning, energies)?
                .into_iter()
                .flat_map(|pt| pt.per_state)
                .collect();
            states.sort_by_key(|s| s.0);
            states.dedup_by_key(|s| s.0);
            for (i, e, p0) in states {
                let mut row = prefix(p);
                row.extend([fmt_float(e), fmt_float(p0), "state".into(), i.to_string()]);
                rows.push(row);
            }
        }
    }
    Ok(CellRows {
        rows,
        steps,
        dt,
        dt_discrepancy: disc,
    })
}

/// A stored row parsed back into numbers by column name.
pub fn parse_rows(store: &ResultStore) -> Vec<BTreeMap<String, String>> {
    store
        .rows()
        .map(|r| store.header().iter().cloned().zip(r.iter().cloned()).collect())
        .collect()
}

fn num(row: &BTreeMap<String, String>, col: &str) -> f64 {
    row.get(col).and_then(|s| s.parse().ok()).unwrap_or(f64::NAN)
}

/// Log-log fit of `std_D` against `N` for one `(xi, alpha, lambda)` series.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalingFit {
    pub xi: f64,
    pub alpha: f64,
    pub lambda: f64,
    /// `(N, count, mean_D, std_D)` in increasing `N`.
    pub points: Vec<(usize, usize, f64, f64)>,
    /// `None` with fewer than two sizes.
    pub fit: Option<LinearFit>,
}

impl ScalingFit {
    /// Largest `|mean(N_a) - mean(N_b)|` over the combined standard error
    /// `sqrt(s_a^2/n_a + s_b^2/n_b)`, across all pairs of sizes.
    pub fn max_mean_drift(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (a, pa) in self.points.iter().enumerate() {
            for pb in &self.points[a + 1..] {
                let se = (pa.3 * pa.3 / pa.1 as f64 + pb.3 * pb.3 / pb.1 as f64).sqrt();
                worst = worst.max((pa.2 - pb.2).abs() / se);
            }
        }
        worst
    }
}

/// Groups scaling rows by `(xi, alpha, lambda)` and fits `ln std` against `ln N`.
pub fn scaling_fits(store: &ResultStore) -> Vec<ScalingFit> {
    let mut series: Vec<ScalingFit> = Vec::new();
    for row in parse_rows(store) {
        let (xi, alpha, lambda) = (num(&row, "xi"), num(&row, "alpha"), num(&row, "lambda"));
        let point = (
            num(&row, "N") as usize,
            num(&row, "count") as usize,
            num(&row, "mean_D"),
            num(&row, "std_D"),
        );
        match series
            .iter_mut()
            .find(|s| s.xi == xi && s.alpha == alpha && s.lambda == lambda)
        {
            Some(s) => s.points.push(point),
            None => series.push(ScalingFit {
                xi,
                alpha,
                lambda,
                points: vec![point],
                fit: None,
            }),
        }
    }
    for s in &mut series {
        s.points.sort_by_key(|p| p.0);
        if s.points.len() >= 2 {
            let ns: Vec<f64> = s.points.iter().map(|p| p.0 as f64).collect();
            let stds: Vec<f64> = s.points.iter().map(|p| p.3).collect();
            s.fit = Some(log_log_fit(&ns, &stds));
        }
    }
    series
}

/// One `(E, value)` curve of a scan.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub xi: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub n: usize,
    pub points: Vec<(f64, f64)>,
}

impl Curve {
    /// Energies where the curve changes sign, by linear interpolation.
    pub fn zero_crossings(&self) -> Vec<f64> {
        self.points
            .windows(2)
            .filter_map(|w| {
                let ((e0, d0), (e1, d1)) = (w[0], w[1]);
                if d0 == 0.0 {
                    Some(e0)
                } else if d0 * d1 < 0.0 {
                    Some(e0 + (e1 - e0) * d0 / (d0 - d1))
                } else {
                    None
                }
            })
            .collect()
    }

    /// Least-squares slope of value against energy.
    pub fn slope(&self) -> LinearFit {
        let (xs, ys): (Vec<f64>, Vec<f64>) = self.points.iter().copied().unzip();
        linear_fit(&xs, &ys)
    }
}

/// Splits energy-scan or stiffness rows into curves. For stiffness rows only
/// the `variant` given is kept.
pub fn curves(store: &ResultStore, value_col: &str, variant: Option<&str>) -> Vec<Curve> {
    let mut out: Vec<Curve> = Vec::new();
    for row in parse_rows(store) {
        if let Some(v) = variant {
            if row.get("variant").map(String::as_str) != Some(v) {
                continue;
            }
        }
        let (xi, alpha, lambda, n) = (
            num(&row, "xi"),
            num(&row, "alpha"),
            num(&row, "lambda"),
            num(&row, "N") as usize,
        );
        let pt = (num(&row, "E"), num(&row, value_col));
        match out
            .iter_mut()
            .find(|c| c.xi == xi && c.alpha == alpha && c.lambda == lambda && c.n == n)
        {
            Some(c) => c.points.push(pt),
            None => out.push(Curve {
                xi,
                alpha,
                lambda,
                n,
                points: vec![pt],
            }),
        }
    }
    for c in &mut out {
        c.points.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: ExperimentKind, dir: &std::path::Path) -> SweepSpec {
        let base = ModelParams {
            n: 40,
            ..ModelParams::desk()
        };
        let mut s = SweepSpec::preset(kind, base, dir.join(format!("{}.csv", kind.name())));
        s.propagator.steps_per_period = 32;
        s.propagator.tolerance = 1e-4;
        // Wide bins keep the few-level windows populated.
        s.delta = 0.5;
        s
    }

    #[test]
    fn preset_grids() {
        let a = preset_alphas();
        assert_eq!(a.len(), 11);
        assert_eq!(a[3], 0.15);
        assert_eq!(a[10], 0.5);
        let l = preset_lambdas();
        assert_eq!(l.len(), 11);
        assert_eq!(l[10], 0.25);
        let s = SweepSpec::heatmap_preset(ModelParams::desk(), "x.csv");
        assert_eq!(s.cell_count(), 363);
    }

    #[test]
    fn cells_are_in_grid_order() {
        let mut s = SweepSpec::heatmap_preset(ModelParams::desk(), "x.csv");
        s.alphas = vec![0.1, 0.2];
        s.lambdas = vec![0.0, 0.1];
        s.xis = vec![1.0, 2.0];
        let labels: Vec<_> = s.cells().map(|c| (c.ordinal, c.params.xi, c.params.alpha, c.params.lambda)).collect();
        assert_eq!(labels[0], (0, 1.0, 0.1, 0.0));
        assert_eq!(labels[1], (1, 1.0, 0.1, 0.1));
        assert_eq!(labels[2], (2, 1.0, 0.2, 0.0));
        assert_eq!(labels[4], (4, 2.0, 0.1, 0.0));
        // Seeds depend on xi only.
        let seeds: Vec<u64> = s.cells().map(|c| c.params.seed).collect();
        assert_eq!(seeds[0], seeds[3]);
        assert_ne!(seeds[0], seeds[4]);
    }

    #[test]
    fn empty_grid_is_rejected() {
        let mut s = SweepSpec::heatmap_preset(ModelParams::desk(), "x.csv");
        s.alphas.clear();
        s.delta = 0.0;
        let v = s.violations();
        assert!(v.iter().any(|m| m.contains("alpha grid")));
        assert!(v.iter().any(|m| m.contains("delta")));
    }

    #[test]
    fn single_state_sample_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = small(ExperimentKind::Scaling, dir.path());
        s.eigenstate_count = 1;
        assert!(matches!(
            run_scaling(&s, SweepOptions::default()),
            Err(Error::SampleTooSmall { count: 1 })
        ));
    }

    #[test]
    fn heatmap_undriven_column_is_trivial() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = small(ExperimentKind::Heatmap, dir.path());
        s.xis = vec![1.0];
        s.alphas = vec![0.3];
        s.lambdas = vec![0.0, 0.2];
        let out = run_heatmap(&s, SweepOptions::default()).unwrap();
        assert!(out.is_complete());
        assert_eq!(out.computed, 2);
        let rows = parse_rows(&out.store);
        assert_eq!(rows.len(), 4);
        let bound = (s.delta).exp() - 1.0;
        for r in rows.iter().filter(|r| num(r, "lambda") == 0.0) {
            assert!(num(r, "D").abs() <= bound);
        }
    }

    #[test]
    fn rerun_reuses_and_reproduces() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = small(ExperimentKind::Heatmap, dir.path());
        s.xis = vec![0.6];
        s.alphas = vec![0.2, 0.4];
        s.lambdas = vec![0.25];
        let first = run(&s, SweepOptions::default()).unwrap();
        assert!(first.is_complete(), "{:?}", first.failures);
        let bytes = std::fs::read(&s.output).unwrap();
        let second = run(&s, SweepOptions::default()).unwrap();
        assert_eq!(first.computed, 2);
        assert_eq!(second.computed, 0);
        assert_eq!(second.reused, 2);
        assert_eq!(std::fs::read(&s.output).unwrap(), bytes);
    }

    #[test]
    fn crossings_interpolate() {
        let c = Curve {
            xi: 1.0,
            alpha: 0.0,
            lambda: 0.0,
            n: 2,
            points: vec![(0.0, -1.0), (1.0, 1.0), (2.0, 3.0), (3.0, -1.0)],
        };
        let z = c.zero_crossings();
        assert_eq!(z.len(), 2);
        assert!((z[0] - 0.5).abs() < 1e-15);
        assert!((z[1] - 2.75).abs() < 1e-15);
    }

    #[test]
    fn mid_sample_is_centered() {
        assert_eq!(mid_spectrum_sample(10, 4), vec![3, 4, 5, 6]);
        assert_eq!(mid_spectrum_sample(1000, 100).first(), Some(&450));
    }
}
