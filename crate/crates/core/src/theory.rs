//! Simulation-free checks of the analytic chain: stiff kernels on an
//! exponential density of states satisfy a Jarzynski-type relation, and the
//! free-energy and entropy identifications that go with it.

use rand::Rng;

use crate::model::HamiltonianSet;
use crate::workstats::{bin_populations, coarse_grain, BinLayout, EnergyBinning, TransitionTable};
use crate::{Error, Real, Result};

/// How bin populations `Omega = delta Z e^{beta E}` are represented.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum OmegaMode {
    /// Real-valued populations; the algebra is exact.
    #[default]
    Real,
    /// Rounded to integers, as state counts would be.
    Rounded,
}

/// A stiff transition kernel `p(F - I)` on `bins` energy bins whose initial and
/// final densities of states are exactly exponential.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticEnsemble<T> {
    pub beta: T,
    pub delta: T,
    pub z_ini: T,
    pub z_fin: T,
    pub bins: usize,
    /// Shift `F - I` of `kernel[0]`.
    pub kernel_lo: i64,
    pub kernel: Vec<T>,
    pub mode: OmegaMode,
}

impl<T: Real> SyntheticEnsemble<T> {
    /// Wraps a user kernel. It must be nonnegative and sum to 1; it need not
    /// satisfy the population balance (see [`Self::consistency_defect`]).
    pub fn new(beta: T, delta: T, z_ini: T, z_fin: T, bins: usize, kernel_lo: i64, kernel: Vec<T>) -> Result<Self> {
        let mut bad = Vec::new();
        if !(beta > T::zero()) {
            bad.push(format!("beta must be positive (got {beta})"));
        }
        if !(delta > T::zero()) {
            bad.push(format!("delta must be positive (got {delta})"));
        }
        if !(z_ini > T::zero() && z_fin > T::zero()) {
            bad.push("partition constants must be positive".to_string());
        }
        if kernel.is_empty() || kernel.iter().any(|p| *p < T::zero()) {
            bad.push("kernel must be nonempty and nonnegative".to_string());
        }
        let total = kernel.iter().fold(T::zero(), |a, &b| a + b);
        if (total - T::one()).abs() > T::tolerance(1e-12) {
            bad.push(format!("kernel sums to {total}, expected 1"));
        }
        if !bad.is_empty() {
            return Err(Error::InvalidParams(bad));
        }
        Ok(Self {
            beta,
            delta,
            z_ini,
            z_fin,
            bins,
            kernel_lo,
            kernel,
            mode: OmegaMode::Real,
        })
    }

    /// Draws a random kernel on shifts `-half_width..=half_width` that obeys
    /// `sum_I Omega_I p(F - I) = Omega_F`, i.e.
    /// `sum_d p(d) e^{-beta delta d} = z_fin / z_ini`.
    ///
    /// A random nonnegative profile is mixed with a point mass at one end of the
    /// support so that the exponential moment hits the target exactly.
    pub fn consistent<R: Rng + ?Sized>(
        beta: T,
        delta: T,
        z_ini: T,
        z_fin: T,
        bins: usize,
        half_width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let k = half_width as i64;
        let len = 2 * half_width + 1;
        let target = z_fin / z_ini;
        let weight = |d: i64| (-(beta * delta * T::of(d as f64))).exp();
        let (w_hi, w_lo) = (weight(-k), weight(k));
        if !(target < w_hi && target > w_lo) {
            return Err(Error::InvalidParams(vec![format!(
                "z_fin / z_ini = {target} is not reachable with shifts up to {half_width}"
            )]));
        }
        let mut base: Vec<T> = (0..len).map(|_| T::of(rng.random::<f64>())).collect();
        let s = base.iter().fold(T::zero(), |a, &b| a + b);
        base.iter_mut().for_each(|p| *p /= s);
        let moment = base
            .iter()
            .enumerate()
            .fold(T::zero(), |a, (j, &p)| a + p * weight(j as i64 - k));
        // Mix towards the end of the support on the far side of the target.
        let (end, w_end) = if moment > target { (len - 1, w_lo) } else { (0, w_hi) };
        let t = (moment - target) / (moment - w_end);
        let mut kernel: Vec<T> = base.iter().map(|&p| (T::one() - t) * p).collect();
        kernel[end] += t;
        Self::new(beta, delta, z_ini, z_fin, bins, -k, kernel)
    }

    pub fn with_mode(mut self, mode: OmegaMode) -> Self {
        self.mode = mode;
        self
    }

    /// `p(d)`, zero outside the support.
    pub fn kernel_at(&self, d: i64) -> T {
        let j = d - self.kernel_lo;
        if j < 0 || j as usize >= self.kernel.len() {
            T::zero()
        } else {
            self.kernel[j as usize]
        }
    }

    pub fn kernel_hi(&self) -> i64 {
        self.kernel_lo + self.kernel.len() as i64 - 1
    }

    pub fn bin_energy(&self, bin: i64) -> T {
        T::of(bin as f64) * self.delta
    }

    fn omega(&self, z: T, bin: i64) -> T {
        let v = self.delta * z * (self.beta * self.bin_energy(bin)).exp();
        match self.mode {
            OmegaMode::Real => v,
            OmegaMode::Rounded => v.round(),
        }
    }

    pub fn omega_ini(&self, bin: i64) -> T {
        self.omega(self.z_ini, bin)
    }

    pub fn omega_fin(&self, bin: i64) -> T {
        self.omega(self.z_fin, bin)
    }

    /// `sum_d p(d) e^{-beta delta d} - z_fin / z_ini`; zero for kernels that
    /// respect the population balance.
    pub fn consistency_defect(&self) -> T {
        let moment = (self.kernel_lo..=self.kernel_hi()).fold(T::zero(), |a, d| {
            a + self.kernel_at(d) * (-(self.beta * self.delta * T::of(d as f64))).exp()
        });
        moment - self.z_fin / self.z_ini
    }

    pub fn is_consistent(&self, tol: T) -> bool {
        self.consistency_defect().abs() <= tol
    }

    /// Bin around which the relation is evaluated.
    pub fn reference_bin(&self) -> i64 {
        (self.bins / 2) as i64
    }
}

/// Both sides of the relation plus the intermediate quantities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jr0Report<T> {
    /// Microcanonical average of `e^{-beta W}` from the full bin table.
    pub lhs: T,
    /// `z_fin / z_ini`.
    pub rhs: T,
    /// `(z_fin / z_ini) / Omega_F' * sum_I' p(F' - I') Omega_I'`, the step that
    /// trades Boltzmann factors for population ratios.
    pub chain: T,
    /// Largest relative violation of `sum_I Omega_I p(F - I) = Omega_F` over
    /// final bins whose sum is untruncated.
    pub balance_residual: T,
}

impl<T: Real> Jr0Report<T> {
    pub fn gap(&self) -> T {
        (self.lhs - self.rhs).abs()
    }
}

/// Evaluates the microcanonical average of `e^{-beta W}` for the stiff kernel
/// and compares it with `z_fin / z_ini`.
pub fn jr0_check<T: Real>(ens: &SyntheticEnsemble<T>) -> Result<Jr0Report<T>> {
    let bins = ens.bins as i64;
    let r = ens.reference_bin();
    let (lo, hi) = (ens.kernel_lo, ens.kernel_hi());
    if r + lo < 0 || r + hi >= bins || r - hi < 0 || r - lo >= bins {
        return Err(Error::TruncatedKernel {
            lo,
            hi,
            bins: ens.bins,
        });
    }
    let beta = ens.beta;
    let boltz = |from: i64, to: i64| (-(beta * (ens.bin_energy(to) - ens.bin_energy(from)))).exp();

    // <e^{-beta W}> = sum_{I', F} Tr(rho Pi_I') p_{F <- I'} e^{-beta (E_F - E_I')}
    // with the microcanonical state of bin r.
    let mut lhs = T::zero();
    for i_prime in 0..bins {
        let occupation = if i_prime == r { T::one() } else { T::zero() };
        if occupation == T::zero() {
            continue;
        }
        for f in 0..bins {
            lhs += occupation * ens.kernel_at(f - i_prime) * boltz(i_prime, f);
        }
    }

    let ratio = ens.z_fin / ens.z_ini;
    let f_fixed = r;
    let feed = (0..bins).fold(T::zero(), |a, ip| a + ens.kernel_at(f_fixed - ip) * ens.omega_ini(ip));
    let chain = ratio / ens.omega_fin(f_fixed) * feed;

    let mut balance_residual = T::zero();
    for f in (hi.max(0))..(bins + lo.min(0)) {
        let inflow = (0..bins).fold(T::zero(), |a, i| a + ens.omega_ini(i) * ens.kernel_at(f - i));
        let target = ens.omega_fin(f);
        if target > T::zero() {
            balance_residual = balance_residual.max(((inflow - target) / target).abs());
        }
    }

    Ok(Jr0Report {
        lhs,
        rhs: ratio,
        chain,
        balance_residual,
    })
}

/// Thermodynamic reading of an exponential density of states `Z e^{beta U}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FreeEnergy<T> {
    /// `-ln(Z) / beta`.
    pub free_energy: T,
    /// Boltzmann entropy `ln(Z e^{beta U}) = ln Z + beta U`.
    pub entropy: T,
    /// `F - (U - S / beta)`.
    pub residual: T,
}

pub fn boltzmann_entropy<T: Real>(z: T, beta: T, u: T) -> T {
    z.ln() + beta * u
}

pub fn free_energy_identities<T: Real>(z: T, beta: T, u: T) -> Result<FreeEnergy<T>> {
    if !(z > T::zero() && beta > T::zero()) {
        return Err(Error::InvalidParams(vec![format!(
            "Z and beta must be positive (got {z}, {beta})"
        )]));
    }
    let free_energy = -z.ln() / beta;
    let entropy = boltzmann_entropy(z, beta, u);
    Ok(FreeEnergy {
        free_energy,
        entropy,
        residual: free_energy - (u - entropy / beta),
    })
}

/// Residuals of the summed-probability identities over a complete table.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateResiduals<T> {
    pub layout: BinLayout,
    /// `sum_i p_{F <- i} - Omega_F` per final bin.
    pub per_state: Vec<T>,
    /// `sum_I Omega_I p_{F <- I} - Omega_F` per final bin.
    pub per_bin: Vec<T>,
    /// `max_f |sum_i p_{f <- i} - 1|`.
    pub row_sum_defect: T,
}

impl<T: Real> AggregateResiduals<T> {
    pub fn max_abs(&self) -> T {
        self.per_state
            .iter()
            .chain(&self.per_bin)
            .fold(self.row_sum_defect, |a, b| a.max(b.abs()))
    }
}

/// Checks the double stochasticity of `p_{f <- i}` after coarse graining. The
/// table has to contain every eigenstate as an initial state.
pub fn doubly_stochastic_aggregate<T: Real>(
    tt: &TransitionTable<T>,
    binning: &EnergyBinning<T>,
    hs: &HamiltonianSet<T>,
) -> Result<AggregateResiduals<T>> {
    let dim = hs.dim();
    let mut seen = vec![false; dim];
    for &i in tt.initial_indices() {
        if i < dim {
            seen[i] = true;
        }
    }
    let covered = seen.iter().filter(|s| **s).count();
    let cg = coarse_grain(tt, binning, hs)?;
    if covered < dim {
        return Err(Error::PartialTable {
            covered,
            dim,
            checkable: cg.per_bin.iter().map(|p| p.initial_bin).collect(),
        });
    }
    let layout = cg.layout;
    let omega = bin_populations(binning, hs.eigenvalues(), &layout);
    let mut per_state = vec![T::zero(); layout.count];
    for col in &cg.per_state {
        for (acc, &p) in per_state.iter_mut().zip(&col.p_final) {
            *acc += p;
        }
    }
    let mut per_bin = vec![T::zero(); layout.count];
    for pdf in &cg.per_bin {
        let w = T::of(pdf.omega as f64);
        for (acc, &p) in per_bin.iter_mut().zip(&pdf.p_final) {
            *acc += w * p;
        }
    }
    for s in 0..layout.count {
        let o = T::of(omega[s] as f64);
        per_state[s] -= o;
        per_bin[s] -= o;
    }
    let mut row_sum_defect = T::zero();
    for f in 0..dim {
        let row = (0..tt.cols()).fold(T::zero(), |a, c| a + tt.get(f, c));
        row_sum_defect = row_sum_defect.max((row - T::one()).abs());
    }
    Ok(AggregateResiduals {
        layout,
        per_state,
        per_bin,
        row_sum_defect,
    })
}
