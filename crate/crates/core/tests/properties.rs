//! Property tests over randomly generated problems.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

use smnreg::diagnostics::{self, ess};
use smnreg::ergodicity::{self, build_energy_basis, energy_quadratic, energy_weighted};
use smnreg::gibbs::{self, SamplerSpec};
use smnreg::matvar::standard_normal_matrix;
use smnreg::model;
use smnreg::rng::{substream, Stream};
use smnreg::{ChainState, Dataset, MixingDensity, NIWPrior};

fn spd(rng: &mut Stream, k: usize, ridge: f64) -> DMatrix<f64> {
    let g = standard_normal_matrix(k, k, rng);
    &g * g.transpose() / k as f64 + DMatrix::identity(k, k) * ridge
}

fn problem(seed: u64, n: usize, p: usize, d: usize) -> (Dataset, NIWPrior, DVector<f64>, Stream) {
    let mut rng = substream(seed, 7);
    let x = standard_normal_matrix(n, p, &mut rng);
    let y = standard_normal_matrix(n, d, &mut rng) * 2.0;
    let prior = NIWPrior::new(
        standard_normal_matrix(p, d, &mut rng),
        spd(&mut rng, p, 0.3),
        d as f64 + 0.5 + 3.0 * rng.random::<f64>(),
        spd(&mut rng, d, 0.3),
    )
    .unwrap();
    let u = DVector::from_fn(n, |_, _| (4.0 * rng.random::<f64>() - 2.0).exp());
    (Dataset::new(x, y).unwrap(), prior, u, rng)
}

fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..=4, 1usize..=3).prop_flat_map(|(p, d)| (1usize..=25, Just(p), Just(d)))
}

fn full_rank_dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..=4, 1usize..=3).prop_flat_map(|(p, d)| ((p + d)..=25, Just(p), Just(d)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn posterior_update_determinant_bounds(seed in any::<u64>(), (n, p, d) in dims()) {
        let (data, prior, u, _) = problem(seed, n, p, d);
        let upd = model::compute_update(&u, &data, &prior).unwrap();
        prop_assert!(upd.psi.clone().cholesky().is_some());
        let theta_inv = prior.theta().clone().try_inverse().unwrap();
        // |Ψ| ≥ |Θ⁻¹| and |Ω| ≤ |A|
        prop_assert!(upd.psi.determinant() >= theta_inv.determinant() * (1.0 - 1e-9));
        prop_assert!(upd.omega.determinant() <= prior.a().determinant() * (1.0 + 1e-9));
    }

    #[test]
    fn posterior_update_permutation_invariant(seed in any::<u64>(), (n, p, d) in dims()) {
        let (data, prior, u, _) = problem(seed, n, p, d);
        let perm: Vec<usize> = (0..n).rev().collect();
        let x = DMatrix::from_fn(n, p, |i, j| data.x()[(perm[i], j)]);
        let y = DMatrix::from_fn(n, d, |i, j| data.y()[(perm[i], j)]);
        let up = DVector::from_fn(n, |i, _| u[perm[i]]);
        let a = model::compute_update(&u, &data, &prior).unwrap();
        let b = model::compute_update(&up, &Dataset::new(x, y).unwrap(), &prior).unwrap();
        let scale = 1.0 + a.psi.amax();
        prop_assert!((&a.psi - &b.psi).amax() <= 1e-9 * scale);
        prop_assert!((&a.gamma - &b.gamma).amax() <= 1e-9 * (1.0 + a.gamma.amax()));
    }

    #[test]
    fn mahalanobis_nonnegative(seed in any::<u64>(), (n, p, d) in dims()) {
        let (data, _, _, mut rng) = problem(seed, n, p, d);
        let beta = standard_normal_matrix(p, d, &mut rng);
        let sigma = spd(&mut rng, d, 0.1);
        let delta = model::mahalanobis_residuals(&beta, &sigma, &data).unwrap();
        prop_assert!(delta.iter().all(|&v| v >= 0.0 && v.is_finite()));
    }

    #[test]
    fn weighted_energy_bounded_by_quadratic(seed in any::<u64>(), (n, p, d) in full_rank_dims()) {
        let (data, _, _, mut rng) = problem(seed, n, p, d);
        let state = ChainState::new(standard_normal_matrix(p, d, &mut rng), spd(&mut rng, d, 0.1), DVector::from_element(n, 1.0)).unwrap();
        let basis = build_energy_basis(&data).unwrap();
        let v_c0 = energy_weighted(&state, &data, &basis.c0).unwrap();
        let v_i = energy_weighted(&state, &data, &DMatrix::identity(n, n)).unwrap();
        prop_assert!((v_c0 - energy_quadratic(&state).unwrap()).abs() <= 1e-8 * (1.0 + v_c0));
        prop_assert!(v_i <= basis.trace_c0_inv * v_c0 * (1.0 + 1e-9));
        prop_assert!((ergodicity::energy_proper(&state, &data).unwrap() - v_i).abs() <= 1e-8 * (1.0 + v_i));
    }

    #[test]
    fn improper_condition_monotone_in_dof(seed in any::<u64>(), (n, p, d) in full_rank_dims(), nu in 1.0f64..50.0) {
        let (data, _, _, _) = problem(seed, n, p, d);
        let lo = ergodicity::check_improper_condition(&data, nu + 1.0);
        let hi = ergodicity::check_improper_condition(&data, nu + 10.0);
        if let (Ok(lo), Ok(hi)) = (lo, hi) {
            // g is nonincreasing in ε
            for w in lo.rhs_at_eps.windows(2) {
                prop_assert!(w[1].g <= w[0].g * (1.0 + 1e-12));
            }
            prop_assert!((lo.g_zero_plus - hi.g_zero_plus).abs() <= 1e-12 * lo.g_zero_plus);
            if lo.holds {
                prop_assert!(hi.holds);
                prop_assert!(hi.max_feasible_eps.unwrap() >= lo.max_feasible_eps.unwrap() * (1.0 - 1e-9));
            }
        }
    }

    #[test]
    fn improper_conditional_mean_forms_agree(seed in any::<u64>(), (n, p, d) in full_rank_dims()) {
        let (data, _, u, _) = problem(seed, n, p, d);
        if n > p + d {
            let m = ergodicity::cond_mean_v_improper(&u, &data).unwrap();
            prop_assert!((m.direct - m.projector).abs() <= 1e-8 * (1.0 + m.direct.abs()));
            prop_assert!(m.value <= m.upper_bound * (1.0 + 1e-9));
        }
    }

    #[test]
    fn gamma_conditional_second_moment_bound(a in 0.05f64..20.0, b in 0.05f64..20.0, d in 1usize..=5, delta in 0.0f64..1e4) {
        let h = MixingDensity::gamma(a, b).unwrap();
        let k = d as f64 / 2.0;
        let bound = h.moment(k + 2.0).value / h.moment(k).value;
        let m2 = h.conditional_moment(delta, d, 2.0).unwrap().value;
        prop_assert!(m2 <= bound * (1.0 + 1e-12));
    }

    #[test]
    fn moments_log_convex(a in 0.05f64..20.0, b in 0.05f64..20.0, k in 0.0f64..5.0, step in 0.1f64..2.0) {
        let h = MixingDensity::gamma(a, b).unwrap();
        let (l0, l1, l2) = (h.moment(k).value.ln(), h.moment(k + step).value.ln(), h.moment(k + 2.0 * step).value.ln());
        prop_assert!(2.0 * l1 <= l0 + l2 + 1e-9 * (1.0 + l1.abs()));
    }

    #[test]
    fn error_logdensity_radially_symmetric(nu in 0.5f64..30.0, e in prop::collection::vec(-5.0f64..5.0, 1..4)) {
        let h = MixingDensity::student_t(nu).unwrap();
        let r = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut axis = vec![0.0; e.len()];
        axis[0] = r;
        let (a, b) = (h.error_logdensity(&e).unwrap(), h.error_logdensity(&axis).unwrap());
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
    }

    #[test]
    fn ess_affine_invariant(xs in prop::collection::vec(-100.0f64..100.0, 20..200), shift in -1e3f64..1e3, scale in 0.01f64..100.0) {
        prop_assume!(xs.iter().any(|v| (v - xs[0]).abs() > 1e-6));
        let a = ess(&xs).unwrap();
        let ys: Vec<f64> = xs.iter().map(|v| v * scale + shift).collect();
        let b = ess(&ys).unwrap();
        prop_assert!(a > 0.0 && a <= xs.len() as f64);
        prop_assert!((a - b).abs() <= 1e-6 * a);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn chain_states_stay_valid(seed in any::<u64>(), (n, p, d) in full_rank_dims(), shape in 0.1f64..5.0) {
        let (data, prior, _, _) = problem(seed, n, p, d);
        let settings = gibbs::ChainSettings::new(200, 0, 1).unwrap();
        let specs = [
            SamplerSpec::proper(prior, MixingDensity::gamma(shape, shape).unwrap()),
            SamplerSpec::improper_t(2.0 + shape).unwrap(),
        ];
        for spec in &specs {
            if spec.validate(&data).is_err() {
                continue;
            }
            let trace = gibbs::run_chain(spec, &data, None, settings, seed).unwrap();
            for s in &trace.states {
                prop_assert!(s.validate().is_ok());
                prop_assert!(s.sigma.clone().cholesky().is_some());
            }
            let table = diagnostics::summarize(&trace, &diagnostics::Functional::summary_set(p, d)).unwrap();
            for row in &table.rows {
                prop_assert!(row.q025 <= row.q50 && row.q50 <= row.q975);
            }
        }
    }
}
