//! Independent dense reference for tiny systems: the interaction assembled
//! entry by entry from the same random stream, a cyclic Jacobi eigensolver and
//! a complex RK4 integrator.

#![allow(dead_code, clippy::needless_range_loop)]

use jrsim_core::model::{build_hamiltonian, model_rng, ModelParams};
use jrsim_core::propagator::{propagate, PropagatorConfig};
use jrsim_core::workstats::{
    eigenstate_deviations, microcanonical_from_table, transition_table, window_indices, EigenReference,
    EnergyBinning,
};
use num_complex::Complex64 as C;
use rand::Rng;
use rand_distr::StandardNormal;

pub type Dense = Vec<Vec<f64>>;
pub type CDense = Vec<Vec<C>>;

pub fn levels(p: &ModelParams<f64>) -> Vec<f64> {
    (1..=p.n)
        .map(|j| {
            let x = j as f64 / p.n as f64;
            ((x * (p.beta * p.e_bath_max).exp() + (1.0 - x) * (p.beta * p.e_bath_min).exp()).ln()) / p.beta
        })
        .collect()
}

/// `H(0)` written out entry by entry.
pub fn reference_h0(p: &ModelParams<f64>) -> Dense {
    let n = p.n;
    let e = levels(p);
    let mut rng = model_rng(p.seed);
    let mut r = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in a..n {
            let x: f64 = rng.sample(StandardNormal);
            r[a][b] = x;
            r[b][a] = x;
        }
    }
    let mut h = vec![vec![0.0; 2 * n]; 2 * n];
    for s in 0..2 {
        let sys = if s == 0 { -p.b_z / 2.0 } else { p.b_z / 2.0 };
        for a in 0..n {
            h[s * n + a][s * n + a] = sys + e[a];
        }
    }
    for a in 0..n {
        for b in 0..n {
            let g = (-p.beta * p.xi * (e[a] + e[b] - p.e_bath_max) / 4.0).exp();
            let w = e[a] - e[b];
            let f = (-w * w / (2.0 * p.sigma_int_sq)).exp();
            let m = p.alpha * g * f * r[a][b];
            h[a][n + b] = m;
            h[n + a][b] = m;
        }
    }
    h
}

/// Cyclic Jacobi diagonalization; returns ascending eigenvalues and the
/// eigenvectors as columns.
pub fn jacobi(a: &Dense) -> (Vec<f64>, Dense) {
    let d = a.len();
    let mut a = a.clone();
    let mut v: Dense = (0..d).map(|i| (0..d).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..d).flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let (vkp, vkq) = (v[k][p], v[k][q]);
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| a[i][i].total_cmp(&a[j][j]));
    let vals = order.iter().map(|&i| a[i][i]).collect();
    let vecs = (0..d).map(|k| order.iter().map(|&i| v[k][i]).collect()).collect();
    (vals, vecs)
}

/// Full propagator in the product basis from RK4 with `steps` steps.
pub fn rk4_propagator(p: &ModelParams<f64>, h0: &Dense, steps: usize) -> CDense {
    let d = h0.len();
    let n = p.n;
    let t_end = p.n_periods * 2.0 * std::f64::consts::PI / p.omega_prot;
    let h = t_end / steps as f64;
    let deriv = |t: f64, psi: &[C]| -> Vec<C> {
        let drive = p.lambda * (p.omega_prot * t).sin();
        (0..d)
            .map(|i| {
                let mut acc = C::new(0.0, 0.0);
                for j in 0..d {
                    acc += psi[j] * h0[i][j];
                }
                let partner = if i < n { i + n } else { i - n };
                acc += psi[partner] * drive;
                acc * C::new(0.0, -1.0)
            })
            .collect()
    };
    let mut u = vec![vec![C::new(0.0, 0.0); d]; d];
    for col in 0..d {
        let mut psi = vec![C::new(0.0, 0.0); d];
        psi[col] = C::new(1.0, 0.0);
        for k in 0..steps {
            let t = k as f64 * h;
            let axpy = |a: &[C], b: &[C], s: f64| a.iter().zip(b).map(|(x, y)| x + y * s).collect::<Vec<C>>();
            let k1 = deriv(t, &psi);
            let k2 = deriv(t + h / 2.0, &axpy(&psi, &k1, h / 2.0));
            let k3 = deriv(t + h / 2.0, &axpy(&psi, &k2, h / 2.0));
            let k4 = deriv(t + h, &axpy(&psi, &k3, h));
            for i in 0..d {
                psi[i] += (k1[i] + k2[i] * 2.0 + k3[i] * 2.0 + k4[i]) * (h / 6.0);
            }
        }
        for i in 0..d {
            u[i][col] = psi[i];
        }
    }
    u
}

pub fn max_diff(a: &CDense, b: &CDense) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).norm()))
        .fold(0.0, f64::max)
}

/// Largest deviations between the library and the dense reference.
#[derive(Debug, Default)]
pub struct OracleErrors {
    pub h0: f64,
    pub eigenvalues: f64,
    pub propagator: f64,
    pub probabilities: f64,
    pub d_es: f64,
    pub d_mc: f64,
    /// RK4 self-consistency between `ref_steps` and `2 ref_steps`.
    pub reference: f64,
}

impl OracleErrors {
    pub fn max(&self) -> f64 {
        [self.h0, self.eigenvalues, self.propagator, self.probabilities, self.d_es, self.d_mc]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

pub fn tiny(n: usize, alpha: f64, lambda: f64, seed: u64) -> ModelParams<f64> {
    ModelParams {
        n,
        alpha,
        lambda,
        seed,
        ..ModelParams::desk()
    }
}

/// The fixed small cases: `(params, delta)`.
pub fn cases() -> Vec<(ModelParams<f64>, f64)> {
    vec![
        (tiny(2, 0.5, 0.25, 3), 1.0),
        (tiny(4, 0.5, 0.25, 11), 1.0),
        (tiny(4, 0.0, 0.25, 11), 1.0),
        (ModelParams { xi: 2.0, ..tiny(4, 0.3, 0.1, 7) }, 1.0),
    ]
}

/// Runs the library on every eigenstate and compares against the reference.
pub fn compare(p: &ModelParams<f64>, delta: f64, check_reference: bool) -> OracleErrors {
    let mut err = OracleErrors::default();
    let d = p.dim();
    let hs = build_hamiltonian(p).unwrap();
    let h = reference_h0(p);
    for (i, row) in h.iter().enumerate() {
        for (j, &x) in row.iter().enumerate() {
            err.h0 = err.h0.max((hs.h0()[(i, j)] - x).abs());
        }
    }
    let (eps, q) = jacobi(&h);
    for (a, b) in eps.iter().zip(hs.eigenvalues()) {
        err.eigenvalues = err.eigenvalues.max((a - b).abs());
    }

    let all: Vec<usize> = (0..d).collect();
    let pset = propagate(&hs, p, &PropagatorConfig::default(), &all).unwrap();
    // At least 10x finer than the finest step the propagator used.
    let ref_steps = (pset.steps() * 100).max(40_000);
    let u_ref = rk4_propagator(p, &h, ref_steps);
    if check_reference {
        err.reference = max_diff(&u_ref, &rk4_propagator(p, &h, 2 * ref_steps));
    }

    // Library propagator in the product basis: Q U_eig Q^T.
    let ql = hs.eigenvectors();
    let mut u = vec![vec![C::new(0.0, 0.0); d]; d];
    for a in 0..d {
        for b in 0..d {
            let mut acc = C::new(0.0, 0.0);
            for f in 0..d {
                for i in 0..d {
                    let (re, im) = pset.states().amplitude(f, i);
                    acc += C::new(re, im) * (ql[(a, f)] * ql[(b, i)]);
                }
            }
            u[a][b] = acc;
        }
    }
    err.propagator = max_diff(&u, &u_ref);

    let mut p_ref = vec![vec![0.0; d]; d];
    for f in 0..d {
        for i in 0..d {
            let mut acc = C::new(0.0, 0.0);
            for a in 0..d {
                for b in 0..d {
                    acc += u_ref[a][b] * (q[a][f] * q[b][i]);
                }
            }
            p_ref[f][i] = acc.norm_sqr();
        }
    }
    let tt = transition_table(&pset, &hs).unwrap();
    for f in 0..d {
        for i in 0..d {
            err.probabilities = err.probabilities.max((tt.get(f, i) - p_ref[f][i]).abs());
        }
    }

    let des = eigenstate_deviations(&tt, &hs, p.beta, EigenReference::Own);
    for i in 0..d {
        let want: f64 = (0..d).map(|f| p_ref[f][i] * (-p.beta * (eps[f] - eps[i])).exp()).sum::<f64>() - 1.0;
        err.d_es = err.d_es.max((des[i] - want).abs());
    }

    // D_mc from the trace Tr(U rho U^dag e^{-beta (H - E0)}) - 1.
    let binning = EnergyBinning::new(delta).unwrap();
    let e0 = (eps[0] + eps[d - 1]) / 2.0;
    let bin = (e0 / delta).floor() as i64;
    let window: Vec<usize> = (0..d).filter(|&i| (eps[i] / delta).floor() as i64 == bin).collect();
    let (_, lib_window) = window_indices(&hs, &binning, e0).unwrap();
    assert_eq!(lib_window, window, "window membership differs");
    let mut rho = vec![vec![C::new(0.0, 0.0); d]; d];
    for &i in &window {
        for a in 0..d {
            for b in 0..d {
                rho[a][b] += C::new(q[a][i] * q[b][i] / window.len() as f64, 0.0);
            }
        }
    }
    let mul = |x: &CDense, y: &CDense| -> CDense {
        (0..d)
            .map(|i| (0..d).map(|j| (0..d).map(|k| x[i][k] * y[k][j]).sum()).collect())
            .collect()
    };
    let dag: CDense = (0..d).map(|i| (0..d).map(|j| u_ref[j][i].conj()).collect()).collect();
    let evolved = mul(&mul(&u_ref, &rho), &dag);
    let weight: CDense = (0..d)
        .map(|a| {
            (0..d)
                .map(|b| C::new((0..d).map(|f| q[a][f] * q[b][f] * (-p.beta * (eps[f] - e0)).exp()).sum(), 0.0))
                .collect()
        })
        .collect();
    let prod = mul(&evolved, &weight);
    let trace: C = (0..d).map(|i| prod[i][i]).sum();
    let mc = microcanonical_from_table(&tt, &hs, p, e0, &binning, None).unwrap();
    err.d_mc = (mc.exact.value - (trace.re - 1.0)).abs();
    err
}
