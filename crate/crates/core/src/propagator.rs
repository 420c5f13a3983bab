//! Time-ordered propagation of `H(0)` eigenstates through the drive
//! `H(t) = H(0) + lambda sin(omega t) V`.
//!
//! Each step of length `dt` is the symmetric splitting
//! `exp(-i H0 dt/2) exp(-i theta V) exp(-i H0 dt/2)` with
//! `theta = lambda sin(omega t_mid) dt`. The `H0` factors are phases in the
//! eigenbasis. `V` squares to the identity, so its exponential is
//! `cos(theta) - i sin(theta) V`; in the eigenbasis that costs one product with
//! the dense matrix `Q^T V Q`. Neighbouring half-step phases are merged.
//!
//! The default [`Scheme::Suzuki4`] composes five such split steps with Suzuki's
//! weights into a fourth-order step. [`Scheme::Strang`] is the plain
//! second-order step.

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, Par};

use crate::model::{HamiltonianSet, ModelParams};
use crate::{Error, Real, Result};

/// Discretization controls.
#[derive(Clone, Debug, PartialEq)]
pub struct PropagatorConfig {
    /// Time steps per drive period.
    pub steps_per_period: usize,
    /// Repeat at half the step and compare.
    pub richardson_check: bool,
    /// Largest accepted 2-norm difference between the `dt` and `dt/2` states.
    pub tolerance: f64,
    pub scheme: Scheme,
}

impl Default for PropagatorConfig {
    fn default() -> Self {
        Self {
            steps_per_period: 128,
            richardson_check: true,
            tolerance: 1e-6,
            scheme: Scheme::default(),
        }
    }
}

impl PropagatorConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.steps_per_period < 16 {
            out.push(format!(
                "steps_per_period must be at least 16 (got {})",
                self.steps_per_period
            ));
        }
        if !(self.tolerance > 0.0) || !self.tolerance.is_finite() {
            out.push(format!("tolerance must be positive (got {})", self.tolerance));
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

    /// Number of steps covering the protocol at this resolution.
    pub fn steps_for<T: Real>(&self, params: &ModelParams<T>) -> usize {
        let s = params.n_periods.to_f64_lossy() * self.steps_per_period as f64;
        (s.ceil() as usize).max(1)
    }
}

/// Sense of time evolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Applies `U`.
    Forward,
    /// Applies `U^dagger`: the reversed protocol with conjugated phases.
    Backward,
}

/// `k` complex state vectors in the `H(0)` eigenbasis, stored as one real
/// `dim x 2k` matrix `[Re | Im]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StateBlock<T> {
    data: Mat<T>,
    cols: usize,
}

impl<T: Real> StateBlock<T> {
    /// Basis vectors `|i>` for each listed eigenstate index.
    pub fn eigenstates(dim: usize, indices: &[usize]) -> Result<Self> {
        let k = indices.len();
        let mut data = Mat::<T>::zeros(dim, 2 * k);
        for (c, &i) in indices.iter().enumerate() {
            if i >= dim {
                return Err(Error::IndexOutOfRange { index: i, dim });
            }
            data[(i, c)] = T::one();
        }
        Ok(Self { data, cols: k })
    }

    /// Builds a block from real and imaginary parts of equal shape.
    pub fn from_parts(re: &Mat<T>, im: &Mat<T>) -> Self {
        assert_eq!(re.nrows(), im.nrows());
        assert_eq!(re.ncols(), im.ncols());
        let k = re.ncols();
        let data = Mat::from_fn(re.nrows(), 2 * k, |i, j| if j < k { re[(i, j)] } else { im[(i, j - k)] });
        Self { data, cols: k }
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Amplitude `<f|psi_c>` as `(re, im)`.
    pub fn amplitude(&self, f: usize, c: usize) -> (T, T) {
        (self.data[(f, c)], self.data[(f, self.cols + c)])
    }

    pub fn probability(&self, f: usize, c: usize) -> T {
        let (re, im) = self.amplitude(f, c);
        re * re + im * im
    }

    pub fn norm(&self, c: usize) -> T {
        (0..self.dim())
            .map(|f| self.probability(f, c))
            .fold(T::zero(), |a, b| a + b)
            .sqrt()
    }

    /// 2-norm of `self - other` per column.
    pub fn distances(&self, other: &Self) -> Vec<T> {
        assert_eq!(self.cols, other.cols);
        (0..self.cols)
            .map(|c| {
                (0..self.dim())
                    .map(|f| {
                        let (a, b) = self.amplitude(f, c);
                        let (x, y) = other.amplitude(f, c);
                        (a - x) * (a - x) + (b - y) * (b - y)
                    })
                    .fold(T::zero(), |a, b| a + b)
                    .sqrt()
            })
            .collect()
    }

    /// Largest column-wise 2-norm of `self - other`.
    pub fn max_distance(&self, other: &Self) -> T {
        self.distances(other).into_iter().fold(T::zero(), |a, b| a.max(b))
    }

    fn apply_phases(&mut self, energies: &[T], tau: T) {
        let k = self.cols;
        let (cos, sin): (Vec<T>, Vec<T>) = energies.iter().map(|&e| ((e * tau).cos(), (e * tau).sin())).unzip();
        for c in 0..k {
            let (re, im) = self.data.two_cols_mut(c, k + c);
            let re = re.try_as_col_major_mut().unwrap().as_slice_mut();
            let im = im.try_as_col_major_mut().unwrap().as_slice_mut();
            for f in 0..re.len() {
                let (a, b) = (re[f], im[f]);
                re[f] = a * cos[f] + b * sin[f];
                im[f] = b * cos[f] - a * sin[f];
            }
        }
    }

    /// `psi_c <- (cos t_c - i sin t_c Vt) psi_c` with per-column angles.
    fn apply_drive(&mut self, vt: faer::MatRef<'_, T>, angles: &[T], scratch: &mut Mat<T>) {
        if angles.iter().all(|a| *a == T::zero()) {
            return;
        }
        let k = self.cols;
        matmul(scratch.as_mut(), Accum::Replace, vt, self.data.as_ref(), T::one(), Par::Seq);
        for (c, a) in angles.iter().enumerate() {
            let (cs, sn) = (a.cos(), a.sin());
            let w_re = scratch.col_as_slice(c);
            let w_im = scratch.col_as_slice(k + c);
            let (re, im) = self.data.two_cols_mut(c, k + c);
            let re = re.try_as_col_major_mut().unwrap().as_slice_mut();
            let im = im.try_as_col_major_mut().unwrap().as_slice_mut();
            for f in 0..re.len() {
                let (a, b) = (re[f], im[f]);
                re[f] = cs * a + sn * w_im[f];
                im[f] = cs * b - sn * w_re[f];
            }
        }
    }
}

/// Drive schedule shared by all columns except for its amplitude.
#[derive(Clone, Copy, Debug)]
pub struct Schedule<T> {
    pub omega: T,
    pub duration: T,
    pub steps: usize,
}

impl<T: Real> Schedule<T> {
    pub fn from_params(params: &ModelParams<T>, steps: usize) -> Self {
        Self {
            omega: params.omega_prot,
            duration: params.duration(),
            steps,
        }
    }

    pub fn dt(&self) -> T {
        self.duration / T::of(self.steps as f64)
    }
}

/// Composition of symmetric split steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Scheme {
    /// One symmetric split step per time step (second order).
    Strang,
    /// Suzuki's five-stage fourth-order composition of split steps.
    #[default]
    Suzuki4,
}

impl Scheme {
    /// Substep lengths in units of the time step.
    pub fn weights(self) -> Vec<f64> {
        match self {
            Scheme::Strang => vec![1.0],
            Scheme::Suzuki4 => {
                let p = 1.0 / (4.0 - 4f64.powf(1.0 / 3.0));
                vec![p, p, 1.0 - 4.0 * p, p, p]
            }
        }
    }

    /// Drive applications per time step.
    pub fn stages(self) -> usize {
        self.weights().len()
    }

    pub fn order(self) -> usize {
        match self {
            Scheme::Strang => 2,
            Scheme::Suzuki4 => 4,
        }
    }
}

/// Evolves every column of `block` over the schedule, column `c` being driven
/// with amplitude `amplitudes[c]`.
pub fn evolve<T: Real>(
    hs: &HamiltonianSet<T>,
    block: &mut StateBlock<T>,
    amplitudes: &[T],
    schedule: Schedule<T>,
    scheme: Scheme,
    direction: Direction,
) -> Result<()> {
    if block.dim() != hs.dim() {
        return Err(Error::DimensionMismatch {
            expected: hs.dim(),
            found: block.dim(),
        });
    }
    if amplitudes.len() != block.cols() {
        return Err(Error::DimensionMismatch {
            expected: block.cols(),
            found: amplitudes.len(),
        });
    }
    let eps = hs.eigenvalues();
    let dt = schedule.dt();
    let sign = match direction {
        Direction::Forward => T::one(),
        Direction::Backward => -T::one(),
    };
    if amplitudes.iter().all(|a| *a == T::zero()) {
        // Without drive U is diagonal; the phases are applied in one go.
        block.apply_phases(eps, sign * schedule.duration);
        return Ok(());
    }
    let weights: Vec<T> = scheme.weights().into_iter().map(T::of).collect();
    // Start of each substep within a step, in units of dt.
    let offsets: Vec<T> = weights
        .iter()
        .scan(T::zero(), |acc, &w| {
            let start = *acc;
            *acc += w;
            Some(start)
        })
        .collect();
    let vt = hs.drive_in_eigenbasis();
    let mut scratch = Mat::<T>::zeros(block.dim(), 2 * block.cols());
    let mut angles = vec![T::zero(); block.cols()];
    let two = T::of(2.0);
    // Half-step phases of neighbouring substeps are merged into one rotation.
    let mut pending = T::zero();
    for s in 0..schedule.steps {
        let step = match direction {
            Direction::Forward => s,
            Direction::Backward => schedule.steps - 1 - s,
        };
        for j in 0..weights.len() {
            let sub = match direction {
                Direction::Forward => j,
                Direction::Backward => weights.len() - 1 - j,
            };
            let h = weights[sub] * dt;
            let t_mid = (T::of(step as f64) + offsets[sub]) * dt + h / two;
            pending += h / two;
            block.apply_phases(eps, sign * pending);
            let env = (schedule.omega * t_mid).sin() * h * sign;
            for (a, amp) in angles.iter_mut().zip(amplitudes) {
                *a = *amp * env;
            }
            block.apply_drive(vt, &angles, &mut scratch);
            pending = h / two;
        }
    }
    block.apply_phases(eps, sign * pending);
    Ok(())
}

/// Final states `U|i>` for a set of initial eigenstates.
#[derive(Clone, Debug)]
pub struct PropagatedSet<T> {
    initial_indices: Vec<usize>,
    states: StateBlock<T>,
    dt_used: T,
    steps: usize,
    discrepancies: Option<Vec<T>>,
}

impl<T: Real> PropagatedSet<T> {
    pub fn initial_indices(&self) -> &[usize] {
        &self.initial_indices
    }

    /// Column `c` holds `U|initial_indices[c]>` in the `H(0)` eigenbasis.
    pub fn states(&self) -> &StateBlock<T> {
        &self.states
    }

    pub fn dim(&self) -> usize {
        self.states.dim()
    }

    pub fn dt_used(&self) -> T {
        self.dt_used
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Largest 2-norm difference between the last two resolutions, when checked.
    pub fn discrepancy(&self) -> Option<T> {
        self.discrepancies
            .as_ref()
            .map(|d| d.iter().fold(T::zero(), |a, &b| a.max(b)))
    }

    /// Per-column discrepancy, when checked.
    pub fn column_discrepancies(&self) -> Option<&[T]> {
        self.discrepancies.as_deref()
    }

    /// `|<f|U|i_c>|^2`.
    pub fn probability(&self, f: usize, c: usize) -> T {
        self.states.probability(f, c)
    }
}

fn run<T: Real>(
    hs: &HamiltonianSet<T>,
    indices: &[usize],
    amplitudes: &[T],
    params: &ModelParams<T>,
    steps: usize,
    scheme: Scheme,
) -> Result<StateBlock<T>> {
    let mut block = StateBlock::eigenstates(hs.dim(), indices)?;
    evolve(
        hs,
        &mut block,
        amplitudes,
        Schedule::from_params(params, steps),
        scheme,
        Direction::Forward,
    )?;
    Ok(block)
}

/// Propagates columns that may carry different drive amplitudes. With the
/// Richardson check enabled the step is halved once, and once more if the
/// first comparison misses the tolerance; the finest result is returned.
pub fn propagate_with_amplitudes<T: Real>(
    hs: &HamiltonianSet<T>,
    params: &ModelParams<T>,
    config: &PropagatorConfig,
    initial_indices: &[usize],
    amplitudes: &[T],
) -> Result<PropagatedSet<T>> {
    config.validate()?;
    params.validate()?;
    if params.dim() != hs.dim() {
        return Err(Error::DimensionMismatch {
            expected: hs.dim(),
            found: params.dim(),
        });
    }
    let base = config.steps_for(params);
    let coarse = run(hs, initial_indices, amplitudes, params, base, config.scheme)?;
    if !config.richardson_check {
        return Ok(PropagatedSet {
            initial_indices: initial_indices.to_vec(),
            states: coarse,
            dt_used: params.duration() / T::of(base as f64),
            steps: base,
            discrepancies: None,
        });
    }
    let tol = T::of(config.tolerance);
    let mut prev = coarse;
    let mut steps = base;
    for attempt in 0..2 {
        steps *= 2;
        let fine = run(hs, initial_indices, amplitudes, params, steps, config.scheme)?;
        let dist = prev.distances(&fine);
        let d = dist.iter().fold(T::zero(), |a, &b| a.max(b));
        if d <= tol {
            return Ok(PropagatedSet {
                initial_indices: initial_indices.to_vec(),
                states: fine,
                dt_used: params.duration() / T::of(steps as f64),
                steps,
                discrepancies: Some(dist),
            });
        }
        if attempt == 1 {
            return Err(Error::NonConvergence {
                discrepancy: d.to_f64_lossy(),
                tolerance: config.tolerance,
            });
        }
        prev = fine;
    }
    unreachable!()
}

/// Propagates the listed eigenstates of `H(0)` (0-based indices) with the drive
/// strength `params.lambda`.
pub fn propagate<T: Real>(
    hs: &HamiltonianSet<T>,
    params: &ModelParams<T>,
    config: &PropagatorConfig,
    initial_indices: &[usize],
) -> Result<PropagatedSet<T>> {
    let amplitudes = vec![params.lambda; initial_indices.len()];
    propagate_with_amplitudes(hs, params, config, initial_indices, &amplitudes)
}
