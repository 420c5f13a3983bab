use jrsim_core::model::{bath_level, build_hamiltonian, model_rng, BathSpectrum, ModelParams};
use jrsim_core::propagator::{propagate, PropagatorConfig};
use jrsim_core::theory::{free_energy_identities, jr0_check, SyntheticEnsemble};
use jrsim_core::workstats::{
    coarse_grain, eigenstate_deviations, transition_table, EigenReference, EnergyBinning,
};
use proptest::prelude::*;

fn small_params() -> impl Strategy<Value = ModelParams<f64>> {
    (2usize..10, 0.0..0.6f64, 0.0..0.3f64, 0.3..2.5f64, any::<u64>()).prop_map(|(n, alpha, lambda, xi, seed)| {
        ModelParams {
            n,
            alpha,
            lambda,
            xi,
            seed,
            ..ModelParams::desk()
        }
    })
}

fn fast() -> PropagatorConfig {
    PropagatorConfig {
        steps_per_period: 48,
        tolerance: 1e-5,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bath_levels_are_ordered_and_bounded(
        n in 2usize..400,
        beta in 0.2..3.0f64,
        e_min in -2.0..1.0f64,
        width in 0.5..6.0f64,
    ) {
        let e_max = e_min + width;
        let b = BathSpectrum::new(n, beta, e_min, e_max).unwrap();
        let e = b.energies();
        prop_assert!(e.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(e[0] > e_min && e[0] < e_max);
        prop_assert!((e[n - 1] - e_max).abs() < 1e-12);
        prop_assert_eq!(e[3.min(n - 1)], bath_level(4.min(n), n, beta, e_min, e_max));
    }

    #[test]
    fn hamiltonian_is_symmetric_with_orthonormal_eigenbasis(p in small_params()) {
        let hs = build_hamiltonian(&p).unwrap();
        prop_assert!(hs.hermiticity_defect() < 1e-14);
        let r = hs.residuals();
        prop_assert!(r.reconstruction < 1e-12 && r.orthonormality < 1e-12, "{:?}", r);
        prop_assert!(hs.eigenvalues().windows(2).all(|w| w[0] <= w[1]));
        // The trace is untouched by the interaction.
        let diag: f64 = (0..hs.dim()).map(|i| hs.h0()[(i, i)]).sum();
        let trace: f64 = hs.eigenvalues().iter().sum();
        prop_assert!((diag - trace).abs() < 1e-10);
    }

    #[test]
    fn transition_columns_are_distributions(p in small_params()) {
        let hs = build_hamiltonian(&p).unwrap();
        let all: Vec<usize> = (0..hs.dim()).collect();
        let ps = propagate(&hs, &p, &fast(), &all).unwrap();
        let tt = transition_table(&ps, &hs).unwrap();
        prop_assert!(tt.stochasticity_defect() < 1e-9);
        for c in 0..tt.cols() {
            prop_assert!(tt.column(c).iter().all(|&x| x >= 0.0));
        }
        // With every column present the matrix is doubly stochastic.
        for f in 0..hs.dim() {
            let row: f64 = (0..tt.cols()).map(|c| tt.get(f, c)).sum();
            prop_assert!((row - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn undriven_dynamics_is_trivial(p in small_params()) {
        let p = ModelParams { lambda: 0.0, ..p };
        let hs = build_hamiltonian(&p).unwrap();
        let all: Vec<usize> = (0..hs.dim()).collect();
        let tt = transition_table(&propagate(&hs, &p, &fast(), &all).unwrap(), &hs).unwrap();
        for d in eigenstate_deviations(&tt, &hs, p.beta, EigenReference::Own) {
            prop_assert!(d.abs() < 1e-10);
        }
    }

    #[test]
    fn binned_pdfs_are_normalized(p in small_params(), delta in 0.05..1.5f64) {
        let hs = build_hamiltonian(&p).unwrap();
        let all: Vec<usize> = (0..hs.dim()).collect();
        let tt = transition_table(&propagate(&hs, &p, &fast(), &all).unwrap(), &hs).unwrap();
        let binning = EnergyBinning::new(delta).unwrap();
        let cg = coarse_grain(&tt, &binning, &hs).unwrap();
        prop_assert!(cg.incomplete_bins.is_empty());
        let mut omega = 0;
        for pdf in &cg.per_bin {
            prop_assert!((pdf.normalization() - 1.0).abs() < 1e-9);
            omega += pdf.omega;
        }
        prop_assert_eq!(omega, hs.dim());
    }

    #[test]
    fn bins_follow_the_floor_convention(e in -50.0..50.0f64, delta in 0.01..2.0f64) {
        let b = EnergyBinning::new(delta).unwrap();
        let k = b.bin(e);
        prop_assert!(k as f64 * delta <= e + 1e-12);
        prop_assert!(e < (k + 1) as f64 * delta + 1e-12);
    }

    #[test]
    fn consistent_kernels_satisfy_jr0(
        beta in 0.3..2.0f64,
        delta in 0.02..0.3f64,
        ratio in 0.8..1.25f64,
        seed in any::<u64>(),
    ) {
        let ens = SyntheticEnsemble::<f64>::consistent(beta, delta, 1.0, ratio, 151, 20, &mut model_rng(seed));
        // Unreachable ratios are refused rather than approximated.
        if let Ok(ens) = ens {
            prop_assert!(ens.is_consistent(1e-12));
            let r = jr0_check(&ens).unwrap();
            prop_assert!(r.gap() < 1e-12, "{:?}", r);
        }
    }

    #[test]
    fn free_energy_identities_hold(z in 0.01..100.0f64, beta in 0.1..5.0f64, u in -5.0..5.0f64) {
        let fe = free_energy_identities(z, beta, u).unwrap();
        prop_assert!(fe.residual.abs() < 1e-12);
        prop_assert!((fe.free_energy + z.ln() / beta).abs() < 1e-12);
    }
}
