use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rnsim::measure::{
    compute_weights, hedge_gains, reweighted_mean, solve_optimal_action, utility_loss, GainsSample, RiskAversion,
    SolverConfig,
};

/// Correlated gains with a drift well inside the noise, so no direction is
/// one-sided and the optimum is finite.
fn gains(seed: u64, n: usize, d: usize, drift: f64) -> GainsSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mix: Vec<f64> = (0..d * d)
        .map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 } + 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
        .collect();
    let mut out = Array2::zeros((n, d));
    for mut row in out.rows_mut() {
        let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        for p in 0..d {
            row[p] = drift * (1.0 + 0.5 * p as f64) + 0.1 * (0..d).map(|q| mix[p * d + q] * z[q]).sum::<f64>();
        }
    }
    GainsSample::new(out).unwrap()
}

fn lam(l: f64) -> RiskAversion {
    RiskAversion::new(l).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn derivatives_match_finite_differences(seed in 0u64..1000, l in 0.5f64..3.0) {
        let s = gains(seed, 200, 3, 0.02);
        let a = [0.3, -0.2, 0.5];
        let u = utility_loss(&a, &s, lam(l)).unwrap();
        let h = 1e-5;
        for p in 0..3 {
            let mut up = a;
            let mut down = a;
            up[p] += h;
            down[p] -= h;
            let fu = utility_loss(&up, &s, lam(l)).unwrap();
            let fd = utility_loss(&down, &s, lam(l)).unwrap();
            let g = (fu.loss() - fd.loss()) / (2.0 * h);
            prop_assert!((g - u.gradient[p]).abs() <= 1e-6 * u.gradient.amax().max(1e-3));
            for q in 0..3 {
                let hq = (fu.gradient[q] - fd.gradient[q]) / (2.0 * h);
                prop_assert!((hq - u.hessian[(p, q)]).abs() <= 1e-6 * u.hessian.amax());
            }
        }
        prop_assert!(u.hessian.clone().symmetric_eigen().eigenvalues.min() >= -1e-12 * u.hessian.amax());
    }

    #[test]
    fn hessian_at_zero_is_scaled_second_moment(seed in 0u64..1000, l in 0.1f64..3.0) {
        let s = gains(seed, 50, 3, 0.05);
        let u = utility_loss(&[0.0; 3], &s, lam(l)).unwrap();
        let x = s.view();
        for p in 0..3 {
            for q in 0..3 {
                let m = x.column(p).dot(&x.column(q)) / 50.0;
                prop_assert!((u.hessian[(p, q)] - l * l * m).abs() <= 1e-14 * (1.0 + m.abs()));
            }
        }
    }

    #[test]
    fn loss_is_convex_along_segments(seed in 0u64..1000, t in 0.0f64..1.0) {
        let s = gains(seed, 100, 3, 0.02);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let a: Vec<f64> = (0..3).map(|_| 5.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
        let b: Vec<f64> = (0..3).map(|_| 5.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
        let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (1.0 - t) * x + t * y).collect();
        let la = utility_loss(&a, &s, lam(1.0)).unwrap().loss();
        let lb = utility_loss(&b, &s, lam(1.0)).unwrap().loss();
        let lm = utility_loss(&mid, &s, lam(1.0)).unwrap().loss();
        prop_assert!(lm <= (1.0 - t) * la + t * lb + 1e-12 * (1.0 + la.max(lb)));
    }

    #[test]
    fn weights_form_a_martingale_measure(seed in 0u64..1000, l in 0.2f64..5.0, drift in -0.02f64..0.02) {
        let s = gains(seed, 500, 3, drift);
        let mc = solve_optimal_action(&s, lam(l), SolverConfig::default()).unwrap();
        prop_assert!(mc.weights.iter().all(|w| *w > 0.0));
        let mean = mc.weights.iter().sum::<f64>() / 500.0;
        prop_assert!((mean - 1.0).abs() <= 1e-12);
        for m in reweighted_mean(&s, &mc.weights) {
            prop_assert!(m.abs() <= 1e-8);
        }
        let g = hedge_gains(&s, &mc.action);
        let mut pairs: Vec<(f64, f64)> = g.into_iter().zip(mc.weights.iter().copied()).collect();
        pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
        prop_assert!(pairs.windows(2).all(|w| w[1].1 <= w[0].1));
        let again = compute_weights(&s, &mc.action, lam(l)).unwrap();
        for (a, b) in again.iter().zip(&mc.weights) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn scaling_risk_aversion_rescales_action(seed in 0u64..1000, c in 0.1f64..10.0) {
        let s = gains(seed, 300, 3, 0.02);
        let base = solve_optimal_action(&s, lam(1.0), SolverConfig::default()).unwrap();
        let scaled = solve_optimal_action(&s, lam(c), SolverConfig::default()).unwrap();
        for (a, b) in base.action.iter().zip(&scaled.action) {
            prop_assert!((a / c - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }
        for (a, b) in base.weights.iter().zip(&scaled.weights) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn centred_sample_needs_no_hedge(seed in 0u64..1000) {
        let s = gains(seed, 100, 3, 0.0);
        let mut x = s.view().to_owned();
        for mut col in x.columns_mut() {
            let m = col.mean().unwrap();
            col.mapv_inplace(|v| v - m);
        }
        let s = GainsSample::new(x).unwrap();
        let tol = SolverConfig::default().tol;
        let mc = solve_optimal_action(&s, lam(1.0), SolverConfig::default()).unwrap();
        prop_assert!(mc.action.iter().all(|a| a.abs() <= 10.0 * tol));
        let w = compute_weights(&s, &[0.0; 3], lam(1.0)).unwrap();
        prop_assert!(w.iter().all(|v| *v == 1.0));
    }
}
