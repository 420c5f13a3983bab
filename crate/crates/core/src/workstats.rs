//! Two-point-measurement statistics: transition probabilities, coarse-grained
//! work distributions, Jarzynski deviations and the stiffness/smoothness
//! diagnostics.
//!
//! The protocol is cyclic, so the final measurement basis is the eigenbasis of
//! `H(0)` and the work of a transition `i -> f` is `eps_f - eps_i`.

use std::cmp::Ordering;
use std::fmt;
use std::io::Write;

use faer::Mat;

use crate::model::{HamiltonianSet, ModelParams};
use crate::propagator::PropagatedSet;
use crate::{Error, Real, Result};

/// Energy bins `[I delta, (I + 1) delta)` anchored at zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyBinning<T> {
    delta: T,
}

impl<T: Real> EnergyBinning<T> {
    pub fn new(delta: T) -> Result<Self> {
        if delta > T::zero() && delta.is_finite() {
            Ok(Self { delta })
        } else {
            Err(Error::InvalidParams(vec![format!("delta must be positive (got {delta})")]))
        }
    }

    pub fn delta(&self) -> T {
        self.delta
    }

    /// `floor(E / delta)`.
    pub fn bin(&self, e: T) -> i64 {
        (e / self.delta).floor().to_i64().expect("energy bin out of range")
    }

    /// Representative energy `I delta` of bin `I`.
    pub fn bin_energy(&self, bin: i64) -> T {
        T::of(bin as f64) * self.delta
    }

    /// Ratio of `delta` to the mean level spacing among the eigenvalues within
    /// ten bins of `e`.
    pub fn resolution_ratio(&self, hs: &HamiltonianSet<T>, e: T) -> T {
        let half = self.delta * T::of(10.0);
        let count = hs.eigenvalues().iter().filter(|&&x| (x - e).abs() <= half).count();
        if count < 2 {
            return T::zero();
        }
        let spacing = (half + half) / T::of(count as f64);
        self.delta / spacing
    }

    /// A warning when `delta` is less than five mean level spacings near `e`.
    pub fn resolution_warning(&self, hs: &HamiltonianSet<T>, e: T) -> Option<String> {
        let r = self.resolution_ratio(hs, e);
        (r < T::of(5.0)).then(|| {
            format!(
                "bin width {} is only {:.2} mean level spacings near E = {}",
                self.delta, r, e
            )
        })
    }
}

/// Contiguous range of bins covering a spectrum.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BinLayout {
    pub first: i64,
    pub count: usize,
}

impl BinLayout {
    pub fn covering<T: Real>(binning: &EnergyBinning<T>, eigenvalues: &[T]) -> Self {
        let first = binning.bin(eigenvalues[0]);
        let last = binning.bin(eigenvalues[eigenvalues.len() - 1]);
        Self {
            first,
            count: (last - first + 1) as usize,
        }
    }

    pub fn slot(&self, bin: i64) -> usize {
        (bin - self.first) as usize
    }

    pub fn bin(&self, slot: usize) -> i64 {
        self.first + slot as i64
    }

    pub fn bins(&self) -> impl Iterator<Item = i64> + '_ {
        (0..self.count).map(|s| self.bin(s))
    }
}

/// `p_{f <- i} = |<f|U|i>|^2` for the propagated columns.
#[derive(Clone, Debug)]
pub struct TransitionTable<T> {
    initial_indices: Vec<usize>,
    probs: Mat<T>,
}

impl<T: Real> TransitionTable<T> {
    /// Builds a table from explicit probabilities (`dim x k`, column `c`
    /// belonging to `initial_indices[c]`).
    pub fn from_probabilities(initial_indices: Vec<usize>, probs: Mat<T>) -> Result<Self> {
        if probs.ncols() != initial_indices.len() {
            return Err(Error::DimensionMismatch {
                expected: initial_indices.len(),
                found: probs.ncols(),
            });
        }
        if let Some(&bad) = initial_indices.iter().find(|&&i| i >= probs.nrows()) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                dim: probs.nrows(),
            });
        }
        Ok(Self { initial_indices, probs })
    }

    pub fn initial_indices(&self) -> &[usize] {
        &self.initial_indices
    }

    pub fn dim(&self) -> usize {
        self.probs.nrows()
    }

    pub fn cols(&self) -> usize {
        self.initial_indices.len()
    }

    /// Probabilities out of the `c`-th listed initial state.
    pub fn column(&self, c: usize) -> &[T] {
        self.probs.col_as_slice(c)
    }

    pub fn get(&self, f: usize, c: usize) -> T {
        self.probs[(f, c)]
    }

    /// Column position of eigenstate `i`, if listed.
    pub fn position(&self, i: usize) -> Option<usize> {
        self.initial_indices.iter().position(|&x| x == i)
    }

    /// `max_c |sum_f p_{f <- i_c} - 1|`.
    pub fn stochasticity_defect(&self) -> T {
        (0..self.cols())
            .map(|c| (sum(self.column(c)) - T::one()).abs())
            .fold(T::zero(), |a, b| a.max(b))
    }

    /// Writes the listed columns as `i,f,p` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["i", "f", "p"])?;
        for (c, &i) in self.initial_indices.iter().enumerate() {
            for (f, p) in self.column(c).iter().enumerate() {
                out.write_record([i.to_string(), f.to_string(), crate::fmt_float(p.to_f64_lossy())])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

fn sum<T: Real>(xs: &[T]) -> T {
    xs.iter().fold(T::zero(), |a, &b| a + b)
}

/// Squares the propagated amplitudes.
pub fn transition_table<T: Real>(pset: &PropagatedSet<T>, hs: &HamiltonianSet<T>) -> Result<TransitionTable<T>> {
    if pset.dim() != hs.dim() {
        return Err(Error::DimensionMismatch {
            expected: hs.dim(),
            found: pset.dim(),
        });
    }
    let k = pset.initial_indices().len();
    let probs = Mat::from_fn(hs.dim(), k, |f, c| pset.probability(f, c));
    Ok(TransitionTable {
        initial_indices: pset.initial_indices().to_vec(),
        probs,
    })
}

/// `p_{F <- i}` for one initial eigenstate.
#[derive(Clone, Debug)]
pub struct BinnedColumn<T> {
    pub index: usize,
    pub initial_bin: i64,
    /// Indexed by [`BinLayout::slot`].
    pub p_final: Vec<T>,
}

/// Coarse-grained transition probabilities `p_{F <- I}` out of one initial bin;
/// the work density is `P_E(W) = p_{F <- I} / delta` at `W = (F - I) delta`.
#[derive(Clone, Debug)]
pub struct WorkPdf<T> {
    pub initial_bin: i64,
    /// Number of `H(0)` eigenstates in the initial bin.
    pub omega: usize,
    pub delta: T,
    pub layout: BinLayout,
    /// `p_{F <- I}` indexed by [`BinLayout::slot`].
    pub p_final: Vec<T>,
}

impl<T: Real> WorkPdf<T> {
    pub fn work(&self, final_bin: i64) -> T {
        T::of((final_bin - self.initial_bin) as f64) * self.delta
    }

    pub fn density(&self, final_bin: i64) -> T {
        self.p_final[self.layout.slot(final_bin)] / self.delta
    }

    /// `delta * sum_F P_E(W)`, which is 1 for a complete table.
    pub fn normalization(&self) -> T {
        sum(&self.p_final)
    }

    /// `(F, W, P)` triples over the layout.
    pub fn rows(&self) -> impl Iterator<Item = (i64, T, T)> + '_ {
        self.layout.bins().map(|f| (f, self.work(f), self.density(f)))
    }

    /// Local maxima of the density at nonzero work as `(W, P)`, highest first.
    /// A bin counts as a maximum when no neighbour is higher. The `W = 0` bin
    /// is treated as empty.
    pub fn peaks(&self) -> Vec<(T, T)> {
        let rows: Vec<(i64, T, T)> = self
            .rows()
            .map(|(f, w, p)| (f, w, if f == self.initial_bin { T::zero() } else { p }))
            .collect();
        let mut out: Vec<(T, T)> = (0..rows.len())
            .filter(|&k| rows[k].0 != self.initial_bin && rows[k].2 > T::zero())
            .filter(|&k| {
                let left = k.checked_sub(1).map_or(T::zero(), |j| rows[j].2);
                let right = rows.get(k + 1).map_or(T::zero(), |r| r.2);
                rows[k].2 >= left && rows[k].2 >= right
            })
            .map(|k| (rows[k].1, rows[k].2))
            .collect();
        out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal)));
        out
    }

    /// `delta` times the number of bins whose density exceeds `fraction` of
    /// the largest density.
    pub fn support_width(&self, fraction: T) -> T {
        let max = self.rows().fold(T::zero(), |m, r| m.max(r.2));
        let count = self.rows().filter(|r| r.2 > fraction * max).count();
        T::of(count as f64) * self.delta
    }

    /// Writes `I,F,W,P` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["I", "F", "W", "P"])?;
        for (f, work, p) in self.rows() {
            out.write_record([
                self.initial_bin.to_string(),
                f.to_string(),
                crate::fmt_float(work.to_f64_lossy()),
                crate::fmt_float(p.to_f64_lossy()),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Both granularities of the coarse-grained statistics.
#[derive(Clone, Debug)]
pub struct CoarseGrained<T> {
    pub layout: BinLayout,
    pub per_state: Vec<BinnedColumn<T>>,
    /// One distribution per initial bin whose eigenstates were all propagated.
    pub per_bin: Vec<WorkPdf<T>>,
    /// Initial bins only partly covered by the table.
    pub incomplete_bins: Vec<i64>,
}

impl<T: Real> CoarseGrained<T> {
    pub fn pdf(&self, initial_bin: i64) -> Option<&WorkPdf<T>> {
        self.per_bin.iter().find(|p| p.initial_bin == initial_bin)
    }
}

/// Number of `H(0)` eigenstates per bin over the layout.
pub fn bin_populations<T: Real>(binning: &EnergyBinning<T>, eigenvalues: &[T], layout: &BinLayout) -> Vec<usize> {
    let mut omega = vec![0usize; layout.count];
    for &e in eigenvalues {
        omega[layout.slot(binning.bin(e))] += 1;
    }
    omega
}

/// Sums `p_{f <- i}` into final bins and averages complete initial bins.
pub fn coarse_grain<T: Real>(
    tt: &TransitionTable<T>,
    binning: &EnergyBinning<T>,
    hs: &HamiltonianSet<T>,
) -> Result<CoarseGrained<T>> {
    if tt.dim() != hs.dim() {
        return Err(Error::DimensionMismatch {
            expected: hs.dim(),
            found: tt.dim(),
        });
    }
    let eps = hs.eigenvalues();
    let layout = BinLayout::covering(binning, eps);
    let omega = bin_populations(binning, eps, &layout);
    let final_slot: Vec<usize> = eps.iter().map(|&e| layout.slot(binning.bin(e))).collect();

    let per_state: Vec<BinnedColumn<T>> = tt
        .initial_indices()
        .iter()
        .enumerate()
        .map(|(c, &i)| {
            let mut p_final = vec![T::zero(); layout.count];
            for (f, &p) in tt.column(c).iter().enumerate() {
                p_final[final_slot[f]] += p;
            }
            BinnedColumn {
                index: i,
                initial_bin: binning.bin(eps[i]),
                p_final,
            }
        })
        .collect();

    let mut covered = vec![0usize; layout.count];
    for col in &per_state {
        covered[layout.slot(col.initial_bin)] += 1;
    }
    let mut per_bin = Vec::new();
    let mut incomplete_bins = Vec::new();
    for slot in 0..layout.count {
        if covered[slot] == 0 {
            continue;
        }
        let bin = layout.bin(slot);
        if covered[slot] < omega[slot] {
            incomplete_bins.push(bin);
            continue;
        }
        let w = T::one() / T::of(omega[slot] as f64);
        let mut p_final = vec![T::zero(); layout.count];
        for col in per_state.iter().filter(|c| c.initial_bin == bin) {
            for (acc, &p) in p_final.iter_mut().zip(&col.p_final) {
                *acc += p * w;
            }
        }
        per_bin.push(WorkPdf {
            initial_bin: bin,
            omega: omega[slot],
            delta: binning.delta(),
            layout,
            p_final,
        });
    }
    Ok(CoarseGrained {
        layout,
        per_state,
        per_bin,
        incomplete_bins,
    })
}

/// Initial-state preparation a deviation refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeviationKind {
    Microcanonical,
    Eigenstate,
}

/// How the Jarzynski average was evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum DeviationForm {
    /// Uses the exact eigenvalues, `Tr(U rho U^dagger e^{-beta (H - E0)})`.
    Exact,
    /// Uses bin energies `I delta` for initial and final states.
    Binned,
}

impl fmt::Display for DeviationForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Exact => "exact",
            Self::Binned => "binned",
        })
    }
}

/// One deviation `<e^{-beta W}> - e^{-beta dF}` with its provenance. For the
/// cyclic protocol `dF = 0`, so the reference value is 1.
#[derive(Clone, Debug, PartialEq)]
pub struct DeviationRecord<T> {
    pub kind: DeviationKind,
    pub form: DeviationForm,
    pub params: ModelParams<T>,
    pub seed: u64,
    /// Reference energy: `E0` for a window, `eps_i` for an eigenstate.
    pub energy: T,
    pub eigen_index: Option<usize>,
    /// Number of eigenstates averaged over.
    pub window_size: usize,
    pub value: T,
    pub dt_discrepancy: Option<T>,
}

/// Exact and binned deviations of one microcanonical window.
#[derive(Clone, Debug, PartialEq)]
pub struct MicrocanonicalDeviation<T> {
    pub initial_bin: i64,
    pub exact: DeviationRecord<T>,
    pub binned: DeviationRecord<T>,
}

/// Eigenstates of `H(0)` in bin `floor(e0 / delta)`.
pub fn window_indices<T: Real>(hs: &HamiltonianSet<T>, binning: &EnergyBinning<T>, e0: T) -> Result<(i64, Vec<usize>)> {
    let eps = hs.eigenvalues();
    let (lo, hi) = (eps[0], eps[eps.len() - 1]);
    if !(e0 >= lo && e0 <= hi) {
        return Err(Error::WindowOffSpectrum {
            energy: e0.to_f64_lossy(),
            min: lo.to_f64_lossy(),
            max: hi.to_f64_lossy(),
        });
    }
    let bin = binning.bin(e0);
    let idx: Vec<usize> = (0..eps.len()).filter(|&i| binning.bin(eps[i]) == bin).collect();
    if idx.is_empty() {
        return Err(Error::EmptyWindow {
            bin,
            energy: e0.to_f64_lossy(),
        });
    }
    Ok((bin, idx))
}

/// Microcanonical deviation from an already propagated table that contains
/// every eigenstate of the window around `e0`.
pub fn microcanonical_from_table<T: Real>(
    tt: &TransitionTable<T>,
    hs: &HamiltonianSet<T>,
    params: &ModelParams<T>,
    e0: T,
    binning: &EnergyBinning<T>,
    dt_discrepancy: Option<T>,
) -> Result<MicrocanonicalDeviation<T>> {
    let (bin, window) = window_indices(hs, binning, e0)?;
    let eps = hs.eigenvalues();
    let beta = params.beta;
    let weights: Vec<T> = eps.iter().map(|&e| (-(beta * (e - e0))).exp()).collect();
    let mut exact = T::zero();
    for &i in &window {
        let c = tt.position(i).ok_or(Error::IndexOutOfRange { index: i, dim: tt.cols() })?;
        exact += dot(tt.column(c), &weights);
    }
    let omega = T::of(window.len() as f64);
    let exact = exact / omega - T::one();

    let cg = coarse_grain(tt, binning, hs)?;
    let pdf = cg.pdf(bin).ok_or(Error::EmptyWindow {
        bin,
        energy: e0.to_f64_lossy(),
    })?;
    let mut binned = T::zero();
    for (f, work, _) in pdf.rows() {
        binned += pdf.p_final[pdf.layout.slot(f)] * (-(beta * work)).exp();
    }
    let binned = binned - T::one();

    let record = |form, value| DeviationRecord {
        kind: DeviationKind::Microcanonical,
        form,
        params: params.clone(),
        seed: params.seed,
        energy: e0,
        eigen_index: None,
        window_size: window.len(),
        value,
        dt_discrepancy,
    };
    Ok(MicrocanonicalDeviation {
        initial_bin: bin,
        exact: record(DeviationForm::Exact, exact),
        binned: record(DeviationForm::Binned, binned),
    })
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `D_mc` for the window `floor(e0 / delta)`; `propagate_fn` is handed the
/// window's eigenstate indices.
pub fn d_microcanonical<T, F>(
    hs: &HamiltonianSet<T>,
    params: &ModelParams<T>,
    e0: T,
    binning: &EnergyBinning<T>,
    propagate_fn: F,
) -> Result<MicrocanonicalDeviation<T>>
where
    T: Real,
    F: FnOnce(&[usize]) -> Result<PropagatedSet<T>>,
{
    let (_, window) = window_indices(hs, binning, e0)?;
    let pset = propagate_fn(&window)?;
    let tt = transition_table(&pset, hs)?;
    microcanonical_from_table(&tt, hs, params, e0, binning, pset.discrepancy())
}

/// Reference energy used for an eigenstate deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EigenReference<T> {
    /// `eps_i`, the energy found by the first measurement.
    Own,
    /// A common energy such as a window center.
    Shared(T),
}

/// `sum_f p_{f <- i} e^{-beta (eps_f - E_ref)} - 1` for every listed column.
pub fn eigenstate_deviations<T: Real>(
    tt: &TransitionTable<T>,
    hs: &HamiltonianSet<T>,
    beta: T,
    reference: EigenReference<T>,
) -> Vec<T> {
    let eps = hs.eigenvalues();
    tt.initial_indices()
        .iter()
        .enumerate()
        .map(|(c, &i)| {
            let e_ref = match reference {
                EigenReference::Own => eps[i],
                EigenReference::Shared(e) => e,
            };
            let mut acc = T::zero();
            for (f, &p) in tt.column(c).iter().enumerate() {
                acc += p * (-(beta * (eps[f] - e_ref))).exp();
            }
            acc - T::one()
        })
        .collect()
}

/// `D_es` for eigenstate `i` referenced to its own energy.
pub fn d_eigenstate<T, F>(hs: &HamiltonianSet<T>, params: &ModelParams<T>, i: usize, propagate_fn: F) -> Result<DeviationRecord<T>>
where
    T: Real,
    F: FnOnce(&[usize]) -> Result<PropagatedSet<T>>,
{
    d_eigenstate_with_reference(hs, params, i, EigenReference::Own, propagate_fn)
}

pub fn d_eigenstate_with_reference<T, F>(
    hs: &HamiltonianSet<T>,
    params: &ModelParams<T>,
    i: usize,
    reference: EigenReference<T>,
    propagate_fn: F,
) -> Result<DeviationRecord<T>>
where
    T: Real,
    F: FnOnce(&[usize]) -> Result<PropagatedSet<T>>,
{
    if i >= hs.dim() {
        return Err(Error::IndexOutOfRange { index: i, dim: hs.dim() });
    }
    let pset = propagate_fn(&[i])?;
    let tt = transition_table(&pset, hs)?;
    let value = eigenstate_deviations(&tt, hs, params.beta, reference)[0];
    let energy = match reference {
        EigenReference::Own => hs.eigenvalues()[i],
        EigenReference::Shared(e) => e,
    };
    Ok(DeviationRecord {
        kind: DeviationKind::Eigenstate,
        form: DeviationForm::Exact,
        params: params.clone(),
        seed: params.seed,
        energy,
        eigen_index: Some(i),
        window_size: 1,
        value,
        dt_discrepancy: pset.discrepancy(),
    })
}

/// Probability density of zero work around one energy.
#[derive(Clone, Debug, PartialEq)]
pub struct StiffnessPoint<T> {
    pub energy: T,
    pub bin: i64,
    /// `P_E(0) = p_{I <- I} / delta` of the window.
    pub window_p0: T,
    /// `(i, eps_i, p_{I(i) <- i} / delta)` for each eigenstate of the window.
    pub per_state: Vec<(usize, T, T)>,
}

/// Eigenstates of every window, deduplicated and sorted.
pub fn windows_union<T: Real>(hs: &HamiltonianSet<T>, binning: &EnergyBinning<T>, energies: &[T]) -> Result<Vec<usize>> {
    let mut all = Vec::new();
    for &e in energies {
        all.extend(window_indices(hs, binning, e)?.1);
    }
    all.sort_unstable();
    all.dedup();
    Ok(all)
}

/// Zero-work densities from a table covering every requested window.
pub fn stiffness_from_table<T: Real>(
    tt: &TransitionTable<T>,
    hs: &HamiltonianSet<T>,
    binning: &EnergyBinning<T>,
    energies: &[T],
) -> Result<Vec<StiffnessPoint<T>>> {
    let cg = coarse_grain(tt, binning, hs)?;
    let eps = hs.eigenvalues();
    let delta = binning.delta();
    energies
        .iter()
        .map(|&e| {
            let (bin, window) = window_indices(hs, binning, e)?;
            let pdf = cg.pdf(bin).ok_or(Error::EmptyWindow {
                bin,
                energy: e.to_f64_lossy(),
            })?;
            let slot = cg.layout.slot(bin);
            let per_state = window
                .iter()
                .map(|&i| {
                    let col = cg.per_state.iter().find(|c| c.index == i).expect("window state present");
                    (i, eps[i], col.p_final[slot] / delta)
                })
                .collect();
            Ok(StiffnessPoint {
                energy: e,
                bin,
                window_p0: pdf.p_final[slot] / delta,
                per_state,
            })
        })
        .collect()
}

/// `P_E(0)` for each energy; `propagate_fn` receives the union of all windows.
pub fn stiffness_profile<T, F>(
    hs: &HamiltonianSet<T>,
    binning: &EnergyBinning<T>,
    energies: &[T],
    propagate_fn: F,
) -> Result<Vec<StiffnessPoint<T>>>
where
    T: Real,
    F: FnOnce(&[usize]) -> Result<PropagatedSet<T>>,
{
    let all = windows_union(hs, binning, energies)?;
    let pset = propagate_fn(&all)?;
    let tt = transition_table(&pset, hs)?;
    stiffness_from_table(&tt, hs, binning, energies)
}

/// Spread of `p_{F <- i}` over the eigenstates of bin `I`.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothnessEntry<T> {
    pub initial_bin: i64,
    pub final_bin: i64,
    pub mean: T,
    /// Population standard deviation across the bin's eigenstates.
    pub std: T,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmoothnessProfile<T> {
    /// Entries for final bins reached with nonzero probability.
    pub entries: Vec<SmoothnessEntry<T>>,
    /// `(I, sqrt(sum_F std^2))`: root-mean-square distance of a column from the
    /// bin average.
    pub per_bin_defect: Vec<(i64, T)>,
}

impl<T: Real> SmoothnessProfile<T> {
    pub fn mean_defect(&self) -> T {
        let n = T::of(self.per_bin_defect.len() as f64);
        self.per_bin_defect.iter().fold(T::zero(), |a, &(_, d)| a + d) / n
    }
}

/// Smoothness statistics over every fully propagated bin holding at least two
/// eigenstates.
pub fn smoothness_profile<T: Real>(
    tt: &TransitionTable<T>,
    binning: &EnergyBinning<T>,
    hs: &HamiltonianSet<T>,
) -> Result<SmoothnessProfile<T>> {
    let cg = coarse_grain(tt, binning, hs)?;
    let mut entries = Vec::new();
    let mut per_bin_defect = Vec::new();
    for pdf in cg.per_bin.iter().filter(|p| p.omega >= 2) {
        let cols: Vec<&BinnedColumn<T>> = cg.per_state.iter().filter(|c| c.initial_bin == pdf.initial_bin).collect();
        let n = T::of(cols.len() as f64);
        let mut total_var = T::zero();
        for slot in 0..cg.layout.count {
            let mean = pdf.p_final[slot];
            let var = cols
                .iter()
                .map(|c| (c.p_final[slot] - mean) * (c.p_final[slot] - mean))
                .fold(T::zero(), |a, b| a + b)
                / n;
            if cols.iter().all(|c| c.p_final[slot] == T::zero()) {
                continue;
            }
            total_var += var;
            entries.push(SmoothnessEntry {
                initial_bin: pdf.initial_bin,
                final_bin: cg.layout.bin(slot),
                mean,
                std: var.sqrt(),
                count: cols.len(),
            });
        }
        per_bin_defect.push((pdf.initial_bin, total_var.sqrt()));
    }
    if per_bin_defect.is_empty() {
        return Err(Error::UnderpopulatedBin { required: 2 });
    }
    Ok(SmoothnessProfile { entries, per_bin_defect })
}

fn check_weights<T: Real>(weights: &[T]) -> Result<()> {
    let s = sum(weights);
    if weights.iter().any(|w| *w < T::zero()) || (s - T::one()).abs() > T::tolerance(1e-9) {
        return Err(Error::UnnormalizedWeights { sum: s.to_f64_lossy() });
    }
    Ok(())
}

/// `<h(W)>` at eigenstate granularity: `sum_c w_c sum_f p_{f <- i_c} h(eps_f - eps_{i_c})`.
pub fn average_over_states<T: Real>(
    tt: &TransitionTable<T>,
    hs: &HamiltonianSet<T>,
    h: impl Fn(T) -> T,
    weights: &[T],
) -> Result<T> {
    if weights.len() != tt.cols() {
        return Err(Error::DimensionMismatch {
            expected: tt.cols(),
            found: weights.len(),
        });
    }
    check_weights(weights)?;
    let eps = hs.eigenvalues();
    let mut acc = T::zero();
    for (c, &i) in tt.initial_indices().iter().enumerate() {
        let inner = tt
            .column(c)
            .iter()
            .enumerate()
            .fold(T::zero(), |a, (f, &p)| a + p * h(eps[f] - eps[i]));
        acc += weights[c] * inner;
    }
    Ok(acc)
}

/// `<h(W)>` at bin granularity: `sum_I w_I sum_F p_{F <- I} h((F - I) delta)`.
pub fn average_over_bins<T: Real>(pdfs: &[WorkPdf<T>], h: impl Fn(T) -> T, weights: &[T]) -> Result<T> {
    if weights.len() != pdfs.len() {
        return Err(Error::DimensionMismatch {
            expected: pdfs.len(),
            found: weights.len(),
        });
    }
    check_weights(weights)?;
    let mut acc = T::zero();
    for (pdf, &w) in pdfs.iter().zip(weights) {
        let inner = pdf
            .layout
            .bins()
            .fold(T::zero(), |a, f| a + pdf.p_final[pdf.layout.slot(f)] * h(pdf.work(f)));
        acc += w * inner;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_hamiltonian;
    use crate::propagator::{propagate, PropagatorConfig};

    fn undriven() -> (ModelParams<f64>, HamiltonianSet<f64>) {
        let p = ModelParams {
            n: 60,
            lambda: 0.0,
            seed: 9,
            ..ModelParams::desk()
        };
        let hs = build_hamiltonian(&p).unwrap();
        (p, hs)
    }

    #[test]
    fn binning_floor_convention() {
        let b = EnergyBinning::new(0.06).unwrap();
        assert_eq!(b.bin(0.0), 0);
        assert_eq!(b.bin(0.059), 0);
        assert_eq!(b.bin(-0.001), -1);
        assert_eq!(b.bin(2.25), 37);
        assert!(EnergyBinning::new(0.0).is_err());
    }

    #[test]
    fn peaks_and_support() {
        let pdf = WorkPdf {
            initial_bin: 2,
            omega: 1,
            delta: 0.5,
            layout: BinLayout { first: 0, count: 6 },
            p_final: vec![0.1, 0.05, 0.5, 0.2, 0.15, 0.0],
        };
        // The W = 0 bin is the tallest but is not reported.
        let peaks = pdf.peaks();
        assert_eq!(peaks, vec![(0.5, 0.4), (-1.0, 0.2)]);
        assert_eq!(pdf.support_width(0.01), 2.5);
        assert_eq!(pdf.support_width(0.5), 0.5);
    }

    #[test]
    fn undriven_table_is_identity() {
        let (p, hs) = undriven();
        let idx: Vec<usize> = (50..60).collect();
        let ps = propagate(&hs, &p, &PropagatorConfig::default(), &idx).unwrap();
        let tt = transition_table(&ps, &hs).unwrap();
        for (c, &i) in idx.iter().enumerate() {
            for f in 0..hs.dim() {
                let expect = if f == i { 1.0 } else { 0.0 };
                assert!((tt.get(f, c) - expect).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn undriven_deviations() {
        let (p, hs) = undriven();
        let binning = EnergyBinning::new(0.06).unwrap();
        let e0 = hs.spectrum_center();
        let cfg = PropagatorConfig::default();
        let mc = d_microcanonical(&hs, &p, e0, &binning, |idx| propagate(&hs, &p, &cfg, idx)).unwrap();
        let bound = (p.beta * binning.delta()).exp() - 1.0;
        assert!(mc.exact.value.abs() <= bound, "{}", mc.exact.value);
        assert!(mc.binned.value.abs() < 1e-12);
        let es = d_eigenstate(&hs, &p, 61, |idx| propagate(&hs, &p, &cfg, idx)).unwrap();
        assert!(es.value.abs() < 1e-12);
    }

    #[test]
    fn undriven_pdf_is_a_spike_at_zero_work() {
        let (p, hs) = undriven();
        let binning = EnergyBinning::new(0.06).unwrap();
        let (bin, idx) = window_indices(&hs, &binning, hs.spectrum_center()).unwrap();
        let ps = propagate(&hs, &p, &PropagatorConfig::default(), &idx).unwrap();
        let tt = transition_table(&ps, &hs).unwrap();
        let cg = coarse_grain(&tt, &binning, &hs).unwrap();
        let pdf = cg.pdf(bin).unwrap();
        for (f, w, dens) in pdf.rows() {
            if f == bin {
                assert_eq!(w, 0.0);
                assert!((dens - 1.0 / 0.06).abs() < 1e-9);
            } else {
                assert!(dens.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_window_is_an_error() {
        let (_, hs) = undriven();
        // Far below the spectrum.
        let binning = EnergyBinning::new(0.06).unwrap();
        assert!(matches!(
            window_indices(&hs, &binning, -10.0),
            Err(Error::WindowOffSpectrum { .. })
        ));
        // Tiny bins leave gaps between levels.
        let fine = EnergyBinning::new(1e-7).unwrap();
        let e = (hs.eigenvalues()[0] + hs.eigenvalues()[1]) / 2.0;
        assert!(matches!(window_indices(&hs, &fine, e), Err(Error::EmptyWindow { .. })));
    }

    #[test]
    fn weights_must_be_normalized() {
        let (p, hs) = undriven();
        let ps = propagate(&hs, &p, &PropagatorConfig::default(), &[3, 4]).unwrap();
        let tt = transition_table(&ps, &hs).unwrap();
        assert!(average_over_states(&tt, &hs, |_| 1.0, &[0.5, 0.6]).is_err());
        assert!((average_over_states(&tt, &hs, |_| 1.0, &[0.5, 0.5]).unwrap() - 1.0).abs() < 1e-12);
    }
}
