//! Spin plus random-matrix bath model.
//!
//! The full Hilbert space is the product of a two-level system and an
//! `N`-level bath. States are ordered sys-major: product index `m * N + n`
//! for sys level `m in {0, 1}` and bath level `n in 0..N`. With that layout the
//! drive operator `(|1><2| + h.c.) (x) I` simply pairs index `i` with `i + N`.

use std::io::Write;
use std::sync::OnceLock;

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, MatRef, Par, Side};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::fit::{linear_fit, weighted_linear_fit};
use crate::{Error, Real, Result};

/// Every physical and numerical knob of the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<T> {
    /// Bath dimension.
    pub n: usize,
    /// Two-level splitting.
    pub b_z: T,
    /// Growth rate of the bath density of states; also the inverse temperature
    /// entering the Jarzynski weight.
    pub beta: T,
    pub e_bath_min: T,
    pub e_bath_max: T,
    /// Variance of the Gaussian band envelope `f`.
    pub sigma_int_sq: T,
    /// Stiffness control exponent in the envelope `g`.
    pub xi: T,
    /// Interaction strength.
    pub alpha: T,
    /// Drive strength.
    pub lambda: T,
    /// Drive angular frequency.
    pub omega_prot: T,
    /// Protocol length in drive periods.
    pub n_periods: T,
    /// Seed of the random coupling matrix.
    pub seed: u64,
}

impl<T: Real> ModelParams<T> {
    /// Reference parameter set at full size (`N = 4000`).
    pub fn full() -> Self {
        Self {
            n: 4000,
            b_z: T::of(0.5),
            beta: T::one(),
            e_bath_min: T::zero(),
            e_bath_max: T::of(4.5),
            sigma_int_sq: T::of(0.5),
            xi: T::one(),
            alpha: T::of(0.4),
            lambda: T::of(0.25),
            omega_prot: T::of(0.5),
            n_periods: T::of(3.5),
            seed: 1,
        }
    }

    /// Reference parameter set at desk scale (`N = 500`).
    pub fn desk() -> Self {
        Self {
            n: 500,
            ..Self::full()
        }
    }

    /// Hilbert-space dimension `2N`.
    pub fn dim(&self) -> usize {
        2 * self.n
    }

    /// Protocol duration `T = n_periods * 2 pi / omega_prot`.
    pub fn duration(&self) -> T {
        self.n_periods * T::TAU() / self.omega_prot
    }

    /// Lists every violated constraint, in field order.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let all_finite = [
            ("b_z", self.b_z),
            ("beta", self.beta),
            ("e_bath_min", self.e_bath_min),
            ("e_bath_max", self.e_bath_max),
            ("sigma_int_sq", self.sigma_int_sq),
            ("xi", self.xi),
            ("alpha", self.alpha),
            ("lambda", self.lambda),
            ("omega_prot", self.omega_prot),
            ("n_periods", self.n_periods),
        ];
        for (name, v) in all_finite {
            if !v.is_finite() {
                out.push(format!("{name} must be finite (got {v})"));
            }
        }
        if self.n < 2 {
            out.push(format!("n must be at least 2 (got {})", self.n));
        }
        if !(self.b_z > T::zero()) {
            out.push(format!("b_z must be positive (got {})", self.b_z));
        }
        if !(self.beta > T::zero()) {
            out.push(format!("beta must be positive (got {})", self.beta));
        }
        if !(self.e_bath_max > self.e_bath_min) {
            out.push(format!(
                "e_bath_max must exceed e_bath_min (got {} <= {})",
                self.e_bath_max, self.e_bath_min
            ));
        }
        if !(self.sigma_int_sq > T::zero()) {
            out.push(format!("sigma_int_sq must be positive (got {})", self.sigma_int_sq));
        }
        if !(self.omega_prot > T::zero()) {
            out.push(format!("omega_prot must be positive (got {})", self.omega_prot));
        }
        if !(self.n_periods > T::zero()) {
            out.push(format!("n_periods must be positive (got {})", self.n_periods));
        } else {
            let twice = self.n_periods.to_f64_lossy() * 2.0;
            if (twice - twice.round()).abs() > 1e-9 {
                out.push(format!(
                    "n_periods must be a multiple of 1/2 so that the protocol is cyclic (got {})",
                    self.n_periods
                ));
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

    /// Casts every field to another scalar type.
    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let c = |x: T| U::of(x.to_f64_lossy());
        ModelParams {
            n: self.n,
            b_z: c(self.b_z),
            beta: c(self.beta),
            e_bath_min: c(self.e_bath_min),
            e_bath_max: c(self.e_bath_max),
            sigma_int_sq: c(self.sigma_int_sq),
            xi: c(self.xi),
            alpha: c(self.alpha),
            lambda: c(self.lambda),
            omega_prot: c(self.omega_prot),
            n_periods: c(self.n_periods),
            seed: self.seed,
        }
    }

    /// Two-level energies `-B_z/2` and `+B_z/2`.
    pub fn sys_energies(&self) -> [T; 2] {
        let half = self.b_z / T::of(2.0);
        [-half, half]
    }
}

/// Energy of bath level `j` (1-based) out of `n`:
/// `(1/beta) ln{(j/n) e^(beta e_max) + (1 - j/n) e^(beta e_min)}`.
///
/// Evaluated relative to `e_max` so that large `beta * e_max` cannot overflow.
pub fn bath_level<T: Real>(j: usize, n: usize, beta: T, e_min: T, e_max: T) -> T {
    let x = T::of(j as f64) / T::of(n as f64);
    let tail = (-(beta * (e_max - e_min))).exp();
    e_max + (x + (T::one() - x) * tail).ln() / beta
}

/// Bath levels with an exponentially growing density of states.
#[derive(Clone, Debug, PartialEq)]
pub struct BathSpectrum<T> {
    energies: Vec<T>,
}

impl<T: Real> BathSpectrum<T> {
    /// Levels `j = 1..=n`; the top level sits exactly at `e_max`.
    pub fn new(n: usize, beta: T, e_min: T, e_max: T) -> Result<Self> {
        let mut bad = Vec::new();
        if n < 2 {
            bad.push(format!("bath dimension must be at least 2 (got {n})"));
        }
        if !(e_max > e_min) {
            bad.push(format!("e_bath_max must exceed e_bath_min (got {e_max} <= {e_min})"));
        }
        if !(beta > T::zero()) {
            bad.push(format!("beta must be positive (got {beta})"));
        }
        if !bad.is_empty() {
            return Err(Error::InvalidParams(bad));
        }
        let energies = (1..=n).map(|j| bath_level(j, n, beta, e_min, e_max)).collect();
        Ok(Self { energies })
    }

    pub fn from_params(p: &ModelParams<T>) -> Result<Self> {
        Self::new(p.n, p.beta, p.e_bath_min, p.e_bath_max)
    }

    pub fn energies(&self) -> &[T] {
        &self.energies
    }

    pub fn len(&self) -> usize {
        self.energies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energies.is_empty()
    }

    /// Slope of `ln(levels per bin)` against the bin center. The bins tile the
    /// band from the lowest to the highest level with a width close to
    /// `bin_width`. Each bin is weighted by its count, the inverse Poisson
    /// variance of the log; empty bins are skipped.
    pub fn dos_slope(&self, bin_width: T) -> T {
        let e: Vec<f64> = self.energies.iter().map(|e| e.to_f64_lossy()).collect();
        let (lo, hi) = (e[0], e[e.len() - 1]);
        let bins = (((hi - lo) / bin_width.to_f64_lossy()).round() as usize).max(1);
        let w = (hi - lo) / bins as f64;
        let mut counts = vec![0usize; bins];
        for &x in &e {
            counts[(((x - lo) / w) as usize).min(bins - 1)] += 1;
        }
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut ws = Vec::new();
        for (k, &c) in counts.iter().enumerate().filter(|(_, &c)| c > 0) {
            xs.push(lo + (k as f64 + 0.5) * w);
            ys.push((c as f64).ln());
            ws.push(c as f64);
        }
        if xs.len() < 2 {
            return T::nan();
        }
        T::of(weighted_linear_fit(&xs, &ys, &ws).slope)
    }

    /// Least-squares slope of `ln(#levels <= E)` against `E`. The count is
    /// `C (e^{beta E} - e^{beta E_min})`, so this exceeds `beta` unless
    /// `beta (E - E_min)` is large over most of the band.
    pub fn cumulative_slope(&self) -> T {
        let xs: Vec<f64> = self.energies.iter().map(|e| e.to_f64_lossy()).collect();
        let ys: Vec<f64> = (1..=self.energies.len()).map(|j| (j as f64).ln()).collect();
        T::of(linear_fit(&xs, &ys).slope)
    }

    /// Writes `j,energy` rows, `j` 1-based.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["j", "energy"])?;
        for (j, e) in self.energies.iter().enumerate() {
            out.write_record([(j + 1).to_string(), crate::fmt_float(e.to_f64_lossy())])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Interaction envelopes `g` (bath-energy weight) and `f` (band shape).
#[derive(Clone, Copy, Debug)]
pub struct Envelopes<T> {
    beta: T,
    xi: T,
    e_bath_max: T,
    sigma_int_sq: T,
}

impl<T: Real> Envelopes<T> {
    pub fn new(p: &ModelParams<T>) -> Self {
        Self {
            beta: p.beta,
            xi: p.xi,
            e_bath_max: p.e_bath_max,
            sigma_int_sq: p.sigma_int_sq,
        }
    }

    /// `g(E) = exp(-beta xi (E - E_max) / 4)`, `E` being a sum of two bath energies.
    pub fn g(&self, e_sum: T) -> T {
        (-(self.beta * self.xi * (e_sum - self.e_bath_max)) / T::of(4.0)).exp()
    }

    /// `f(w) = exp(-w^2 / (2 sigma^2))`.
    pub fn f(&self, omega: T) -> T {
        (-(omega * omega) / (T::of(2.0) * self.sigma_int_sq)).exp()
    }
}

/// Deterministic generator for the coupling disorder.
pub fn model_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Draws the symmetric Gaussian matrix `R` (unit variance, diagonal included),
/// consuming the stream row by row over the upper triangle `n <= l`.
pub fn draw_disorder<T: Real, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Mat<T> {
    let mut r = Mat::<T>::zeros(n, n);
    for a in 0..n {
        for b in a..n {
            let x: f64 = rng.sample(StandardNormal);
            r[(a, b)] = T::of(x);
            r[(b, a)] = T::of(x);
        }
    }
    r
}

/// Bath block `M_nl = g(E_n + E_l) f(|E_n - E_l|) R_nl`; the full interaction
/// is `sigma_x (x) M`.
pub fn bath_coupling<T: Real, R: Rng + ?Sized>(
    params: &ModelParams<T>,
    bath: &BathSpectrum<T>,
    rng: &mut R,
) -> Mat<T> {
    let env = Envelopes::new(params);
    let e = bath.energies();
    let mut m = draw_disorder::<T, R>(e.len(), rng);
    for a in 0..e.len() {
        for b in a..e.len() {
            let w = env.g(e[a] + e[b]) * env.f((e[a] - e[b]).abs());
            let v = m[(a, b)] * w;
            m[(a, b)] = v;
            m[(b, a)] = v;
        }
    }
    m
}

/// Dense `2N x 2N` interaction matrix in the product basis.
pub fn build_interaction<T: Real, R: Rng + ?Sized>(
    params: &ModelParams<T>,
    bath: &BathSpectrum<T>,
    rng: &mut R,
) -> Mat<T> {
    let m = bath_coupling(params, bath, rng);
    let n = bath.len();
    let mut h = Mat::<T>::zeros(2 * n, 2 * n);
    for a in 0..n {
        for b in 0..n {
            h[(a, n + b)] = m[(a, b)];
            h[(n + a, b)] = m[(a, b)];
        }
    }
    h
}

/// The drive `V = (|1><2| + h.c.) (x) I_bath`, stored structurally.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DriveOperator {
    bath_dim: usize,
}

impl DriveOperator {
    pub fn new(bath_dim: usize) -> Self {
        Self { bath_dim }
    }

    pub fn dim(&self) -> usize {
        2 * self.bath_dim
    }

    /// The product index coupled to `i`.
    pub fn partner(&self, i: usize) -> usize {
        if i < self.bath_dim {
            i + self.bath_dim
        } else {
            i - self.bath_dim
        }
    }

    /// Dense matrix, for tests and small systems.
    pub fn to_dense<T: Real>(&self) -> Mat<T> {
        Mat::from_fn(self.dim(), self.dim(), |i, j| {
            if self.partner(i) == j {
                T::one()
            } else {
                T::zero()
            }
        })
    }
}

/// Bath levels and the disorder-weighted coupling block, independent of `alpha`
/// and `lambda` so one draw can serve a whole `(alpha, lambda)` grid.
#[derive(Clone, Debug)]
pub struct CoupledBath<T> {
    bath: BathSpectrum<T>,
    coupling: Mat<T>,
}

impl<T: Real> CoupledBath<T> {
    /// Builds the bath and draws `R` from `params.seed`.
    pub fn draw(params: &ModelParams<T>) -> Result<Self> {
        params.validate()?;
        let bath = BathSpectrum::from_params(params)?;
        let mut rng = model_rng(params.seed);
        let coupling = bath_coupling(params, &bath, &mut rng);
        Ok(Self { bath, coupling })
    }

    pub fn bath(&self) -> &BathSpectrum<T> {
        &self.bath
    }

    pub fn coupling(&self) -> MatRef<'_, T> {
        self.coupling.as_ref()
    }

    /// Assembles `H(0) = H_sys + H_bath + alpha H_int` and diagonalizes it.
    ///
    /// Only `params.alpha` (and the non-disorder fields used for validation)
    /// is read; the bath and coupling come from `self`.
    pub fn hamiltonian(&self, params: &ModelParams<T>) -> Result<HamiltonianSet<T>> {
        params.validate()?;
        if params.n != self.bath.len() {
            return Err(Error::DimensionMismatch {
                expected: self.bath.len(),
                found: params.n,
            });
        }
        let n = self.bath.len();
        let e = self.bath.energies();
        let sys = params.sys_energies();
        let alpha = params.alpha;
        let mut h0 = Mat::<T>::zeros(2 * n, 2 * n);
        for m in 0..2 {
            for a in 0..n {
                h0[(m * n + a, m * n + a)] = sys[m] + e[a];
            }
        }
        for a in 0..n {
            for b in 0..n {
                let v = alpha * self.coupling[(a, b)];
                h0[(a, n + b)] = v;
                h0[(n + b, a)] = v;
            }
        }
        HamiltonianSet::diagonalize(params.clone(), self.bath.clone(), h0)
    }
}

/// Static Hamiltonian `H(0)`, the drive, and the spectral decomposition.
#[derive(Debug)]
pub struct HamiltonianSet<T> {
    params: ModelParams<T>,
    bath: BathSpectrum<T>,
    h0: Mat<T>,
    drive: DriveOperator,
    eigenvalues: Vec<T>,
    eigenvectors: Mat<T>,
    drive_eigenbasis: OnceLock<Mat<T>>,
}

/// Residual norms of a decomposition.
#[derive(Clone, Copy, Debug)]
pub struct SpectralResiduals<T> {
    /// `max |Q diag(eps) Q^T - h0| / max |h0|`.
    pub reconstruction: T,
    /// `max |Q^T Q - I|`.
    pub orthonormality: T,
}

impl<T: Real> HamiltonianSet<T> {
    fn diagonalize(params: ModelParams<T>, bath: BathSpectrum<T>, h0: Mat<T>) -> Result<Self> {
        let evd = h0.self_adjoint_eigen(Side::Lower).map_err(|e| Error::Eigensolver {
            reason: format!("{e:?}"),
            residual: f64::NAN,
        })?;
        let eigenvalues: Vec<T> = evd.S().column_vector().iter().copied().collect();
        let eigenvectors = evd.U().to_owned();
        let drive = DriveOperator::new(bath.len());
        let set = Self {
            params,
            bath,
            h0,
            drive,
            eigenvalues,
            eigenvectors,
            drive_eigenbasis: OnceLock::new(),
        };
        let res = set.residuals();
        let worst = res.reconstruction.max(res.orthonormality);
        if !(res.reconstruction <= T::tolerance(1e-9)) || !(res.orthonormality <= T::tolerance(1e-10)) {
            return Err(Error::Eigensolver {
                reason: "residual check failed".into(),
                residual: worst.to_f64_lossy(),
            });
        }
        Ok(set)
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn bath(&self) -> &BathSpectrum<T> {
        &self.bath
    }

    pub fn h0(&self) -> MatRef<'_, T> {
        self.h0.as_ref()
    }

    pub fn drive(&self) -> DriveOperator {
        self.drive
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Eigenvalues of `H(0)` in ascending order.
    pub fn eigenvalues(&self) -> &[T] {
        &self.eigenvalues
    }

    /// Columns are the eigenvectors in the product basis.
    pub fn eigenvectors(&self) -> MatRef<'_, T> {
        self.eigenvectors.as_ref()
    }

    /// `(max eps + min eps) / 2`.
    pub fn spectrum_center(&self) -> T {
        let lo = self.eigenvalues[0];
        let hi = self.eigenvalues[self.eigenvalues.len() - 1];
        (lo + hi) / T::of(2.0)
    }

    /// The drive expressed in the eigenbasis, `Q^T V Q`. Computed on first use.
    pub fn drive_in_eigenbasis(&self) -> MatRef<'_, T> {
        self.drive_eigenbasis
            .get_or_init(|| {
                let q = self.eigenvectors.as_ref();
                let n = self.bath.len();
                // V Q swaps the two sys halves of every column.
                let vq = Mat::from_fn(2 * n, 2 * n, |i, j| q[(self.drive.partner(i), j)]);
                let mut out = Mat::<T>::zeros(2 * n, 2 * n);
                matmul(out.as_mut(), Accum::Replace, q.transpose(), vq.as_ref(), T::one(), Par::Seq);
                // Symmetrize away rounding so the matrix is exactly symmetric.
                for i in 0..2 * n {
                    for j in 0..i {
                        let v = (out[(i, j)] + out[(j, i)]) / T::of(2.0);
                        out[(i, j)] = v;
                        out[(j, i)] = v;
                    }
                }
                out
            })
            .as_ref()
    }

    pub fn residuals(&self) -> SpectralResiduals<T> {
        let q = self.eigenvectors.as_ref();
        let d = self.dim();
        let scaled = Mat::from_fn(d, d, |i, j| q[(i, j)] * self.eigenvalues[j]);
        let mut recon = Mat::<T>::zeros(d, d);
        matmul(recon.as_mut(), Accum::Replace, scaled.as_ref(), q.transpose(), T::one(), Par::Seq);
        let mut gram = Mat::<T>::zeros(d, d);
        matmul(gram.as_mut(), Accum::Replace, q.transpose(), q, T::one(), Par::Seq);
        let mut h_max = T::zero();
        let mut r_max = T::zero();
        let mut o_max = T::zero();
        for j in 0..d {
            for i in 0..d {
                h_max = h_max.max(self.h0[(i, j)].abs());
                r_max = r_max.max((recon[(i, j)] - self.h0[(i, j)]).abs());
                let id = if i == j { T::one() } else { T::zero() };
                o_max = o_max.max((gram[(i, j)] - id).abs());
            }
        }
        SpectralResiduals {
            reconstruction: if h_max > T::zero() { r_max / h_max } else { r_max },
            orthonormality: o_max,
        }
    }

    /// Largest relative elementwise asymmetry of `h0`.
    pub fn hermiticity_defect(&self) -> T {
        let d = self.dim();
        let mut worst = T::zero();
        for i in 0..d {
            for j in 0..i {
                let a = self.h0[(i, j)];
                let b = self.h0[(j, i)];
                let scale = a.abs().max(b.abs());
                if scale > T::zero() {
                    worst = worst.max((a - b).abs() / scale);
                }
            }
        }
        worst
    }
}

/// Draws the disorder from `params.seed` and builds the full decomposition.
pub fn build_hamiltonian<T: Real>(params: &ModelParams<T>) -> Result<HamiltonianSet<T>> {
    CoupledBath::draw(params)?.hamiltonian(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small(n: usize, alpha: f64) -> ModelParams<f64> {
        ModelParams {
            n,
            alpha,
            seed: 7,
            ..ModelParams::desk()
        }
    }

    #[test]
    fn top_bath_level_is_e_max() {
        for n in [2, 3, 500, 4000] {
            assert_eq!(bath_level(n, n, 1.0, 0.0, 4.5), 4.5);
        }
    }

    #[test]
    fn degenerate_range_formula_is_constant() {
        for j in 1..=5 {
            assert_relative_eq!(bath_level(j, 5, 1.0, 2.0, 2.0), 2.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn lowest_of_two_levels() {
        // ln(0.5 (e^4.5 - 1) + 1), evaluated with 40-digit arithmetic: 3.8179005642886485...
        let e1 = bath_level(1, 2, 1.0, 0.0, 4.5);
        assert_relative_eq!(e1, 3.817_900_564_288_648_5, epsilon = 1e-12);
    }

    #[test]
    fn spectrum_rejects_bad_input() {
        assert!(BathSpectrum::<f64>::new(1, 1.0, 0.0, 4.5).is_err());
        assert!(BathSpectrum::<f64>::new(10, 1.0, 2.0, 2.0).is_err());
        assert!(BathSpectrum::<f64>::new(10, 1.0, 3.0, 2.0).is_err());
    }

    #[test]
    fn spectrum_is_strictly_increasing() {
        let b = BathSpectrum::<f64>::new(500, 1.0, 0.0, 4.5).unwrap();
        assert!(b.energies().windows(2).all(|w| w[0] < w[1]));
        assert!(b.energies()[0] >= 0.0);
        assert_eq!(*b.energies().last().unwrap(), 4.5);
    }

    #[test]
    fn level_density_grows_at_rate_beta() {
        for n in [500, 1000, 4000] {
            let b = BathSpectrum::<f64>::new(n, 1.0, 0.0, 4.5).unwrap();
            assert!((b.dos_slope(0.25) - 1.0).abs() < 0.01, "N={n}: {}", b.dos_slope(0.25));
            // The cumulative count bends near E_min and overstates the rate.
            assert!(b.cumulative_slope() > 1.1);
        }
        let steep = BathSpectrum::<f64>::new(2000, 2.0, 0.0, 4.5).unwrap();
        assert!((steep.dos_slope(0.125) - 2.0).abs() < 0.02);
    }

    #[test]
    fn envelopes() {
        let mut p = ModelParams::<f64>::desk();
        let env = Envelopes::new(&p);
        assert_eq!(env.f(0.0), 1.0);
        assert_eq!(env.g(4.5), 1.0);
        assert_relative_eq!(env.g(9.0), (-4.5f64 / 4.0).exp(), epsilon = 1e-15);
        assert_relative_eq!(env.g(9.0), 0.324_652_467_358_349_9, epsilon = 1e-14);
        p.xi = 0.0;
        let flat = Envelopes::new(&p);
        for e in [-3.0, 0.0, 2.0, 9.0] {
            assert_eq!(flat.g(e), 1.0);
        }
    }

    #[test]
    fn interaction_has_zero_sys_diagonal_blocks() {
        let p = small(6, 0.3);
        let bath = BathSpectrum::from_params(&p).unwrap();
        let h = build_interaction(&p, &bath, &mut model_rng(3));
        for a in 0..6 {
            for b in 0..6 {
                assert_eq!(h[(a, b)], 0.0);
                assert_eq!(h[(6 + a, 6 + b)], 0.0);
                assert_eq!(h[(a, 6 + b)], h[(6 + a, b)]);
                assert_eq!(h[(a, 6 + b)], h[(6 + b, a)]);
            }
        }
    }

    #[test]
    fn flat_envelope_diagonal_is_raw_disorder() {
        let mut p = small(5, 0.3);
        p.xi = 0.0;
        let bath = BathSpectrum::from_params(&p).unwrap();
        let h = build_interaction(&p, &bath, &mut model_rng(11));
        let r: Mat<f64> = draw_disorder(5, &mut model_rng(11));
        for a in 0..5 {
            assert_eq!(h[(a, 5 + a)], r[(a, a)]);
        }
    }

    #[test]
    fn decoupled_spectrum_is_sorted_union() {
        let p = small(40, 0.0);
        let hs = build_hamiltonian(&p).unwrap();
        let mut expected: Vec<f64> = hs
            .bath()
            .energies()
            .iter()
            .flat_map(|&e| [e - 0.25, e + 0.25])
            .collect();
        expected.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (a, b) in hs.eigenvalues().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn trace_is_twice_bath_sum() {
        let p = small(30, 0.45);
        let hs = build_hamiltonian(&p).unwrap();
        let tr: f64 = (0..hs.dim()).map(|i| hs.h0()[(i, i)]).sum();
        let bath: f64 = hs.bath().energies().iter().sum();
        assert_relative_eq!(tr, 2.0 * bath, epsilon = 1e-11);
        let ev: f64 = hs.eigenvalues().iter().sum();
        assert_relative_eq!(ev, 2.0 * bath, epsilon = 1e-9);
    }

    #[test]
    fn decomposition_residuals() {
        let p = small(60, 0.4);
        let hs = build_hamiltonian(&p).unwrap();
        let r = hs.residuals();
        assert!(r.reconstruction <= 1e-9);
        assert!(r.orthonormality <= 1e-10);
        assert!(hs.hermiticity_defect() <= 1e-12);
        assert!(hs.eigenvalues().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn drive_in_eigenbasis_is_an_involution() {
        let p = small(20, 0.4);
        let hs = build_hamiltonian(&p).unwrap();
        let v = hs.drive_in_eigenbasis();
        let sq = v * v;
        for i in 0..hs.dim() {
            for j in 0..hs.dim() {
                let id = if i == j { 1.0 } else { 0.0 };
                assert!((sq[(i, j)] - id).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_seed_same_matrix() {
        let p = small(25, 0.4);
        let a = build_hamiltonian(&p).unwrap();
        let b = build_hamiltonian(&p).unwrap();
        assert_eq!(a.h0(), b.h0());
        assert_eq!(a.eigenvalues(), b.eigenvalues());
    }

    #[test]
    fn validation_lists_all_violations() {
        let mut p = ModelParams::<f64>::desk();
        p.beta = -1.0;
        p.n = 1;
        p.n_periods = 3.3;
        let v = p.violations();
        assert_eq!(v.len(), 3, "{v:?}");
        assert!(v.iter().any(|s| s.starts_with("beta")));
    }

    #[test]
    fn f32_model_builds() {
        let p = small(16, 0.4).cast::<f32>();
        let hs = build_hamiltonian(&p).unwrap();
        assert_eq!(hs.dim(), 32);
    }
}
