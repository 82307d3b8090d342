mod common;

use nalgebra::{Cholesky, DMatrix, DVector};
use policy_landscape::lqr::{self, LinearGain, LqrSystem};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// `sum_t gamma^t tr((Q + K^T R K) Sigma_t)` with `Sigma_{t+1} = M Sigma_t M^T + W`.
fn series_cost(sys: &LqrSystem, gain: &LinearGain) -> f64 {
    let m = lqr::closed_loop(sys, gain);
    let stage = sys.state_cost() + gain.0.transpose() * sys.r() * &gain.0;
    let mut sigma = sys.init_cov().clone();
    let mut disc = 1.0;
    let mut total = 0.0;
    while disc > 1e-18 {
        total += disc * (&stage * &sigma).trace();
        sigma = &m * sigma * m.transpose() + sys.noise_cov();
        disc *= sys.gamma();
    }
    total
}

fn gaussian(rng: &mut ChaCha8Rng, chol: &DMatrix<f64>) -> DVector<f64> {
    let z = DVector::from_fn(chol.nrows(), |_, _| StandardNormal.sample(rng));
    chol * z
}

#[test]
fn cost_matches_series() {
    for seed in 0..5 {
        let sys = lqr::random_system(3, 2, 0.9, seed).unwrap();
        let gain = lqr::random_stable_gain(&sys, seed + 10).unwrap();
        let exact = lqr::lqr_cost(&sys, &gain).unwrap();
        assert!((exact - series_cost(&sys, &gain)).abs() < 1e-9 * exact, "seed {seed}");
    }
}

#[test]
fn value_at_a_state_matches_rollouts() {
    let sys = lqr::random_system(2, 1, 0.8, 4).unwrap();
    let sys = sys.with_noise_cov(DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3])).unwrap();
    let gain = lqr::random_stable_gain(&sys, 5).unwrap();
    let value = lqr::evaluate_gain(&sys, &gain).unwrap();
    let s0 = DVector::from_vec(vec![1.0, -2.0]);
    let chol = Cholesky::new(sys.noise_cov().clone()).unwrap().l();
    let m = lqr::closed_loop(&sys, &gain);
    let stage = sys.state_cost() + gain.0.transpose() * sys.r() * &gain.0;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let samples: Vec<f64> = (0..20_000)
        .map(|_| {
            let mut s = s0.clone();
            let mut disc = 1.0;
            let mut total = 0.0;
            while disc > 1e-10 {
                total += disc * (s.transpose() * &stage * &s)[(0, 0)];
                s = &m * &s + gaussian(&mut rng, &chol);
                disc *= sys.gamma();
            }
            total
        })
        .collect();
    let (mean, se) = common::mean_se(&samples);
    let exact = value.value(&s0);
    assert!((mean - exact).abs() <= 4.0 * se, "mean {mean} exact {exact} se {se}");
    let noise_part = sys.gamma() / (1.0 - sys.gamma()) * (&value.l * sys.noise_cov()).trace();
    assert!((value.offset - noise_part).abs() < 1e-12 * (1.0 + noise_part));
}

#[test]
fn optimal_gain_beats_perturbations_and_is_greedy_fixed_point() {
    let sys = lqr::random_system(3, 2, 0.9, 1).unwrap();
    let star = lqr::optimal_gain(&sys).unwrap();
    let best = lqr::lqr_cost(&sys, &star).unwrap();
    let again = lqr::policy_iteration_step(&sys, &star).unwrap();
    assert!((&again.0 - &star.0).amax() < 1e-10);
    assert!(lqr::lqr_gradient(&sys, &star).unwrap().amax() < 1e-9);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let d = DMatrix::from_fn(2, 3, |_, _| 1e-2 * Distribution::<f64>::sample(&StandardNormal, &mut rng));
        let g = LinearGain(&star.0 + d);
        if lqr::is_evaluable(&sys, &g) {
            assert!(lqr::lqr_cost(&sys, &g).unwrap() >= best);
        }
    }
}

#[test]
fn scalar_riccati_closed_form() {
    // Scalar discounted Riccati: L = q + g a^2 L r / (r + g b^2 L).
    let (a, b, gamma) = (1.2, 0.7, 0.9);
    let sys = LqrSystem::with_identity_costs(DMatrix::from_element(1, 1, a), DMatrix::from_element(1, 1, b), gamma).unwrap();
    let star = lqr::optimal_gain(&sys).unwrap();
    let l = lqr::evaluate_gain(&sys, &star).unwrap().l[(0, 0)];
    let rhs = 1.0 + gamma * a * a * l / (1.0 + gamma * b * b * l);
    assert!((l - rhs).abs() < 1e-10);
    assert!((star.0[(0, 0)] + gamma * b * l * a / (1.0 + gamma * b * b * l)).abs() < 1e-10);
}
