//! Finite-difference gradient checks shared by the gradient tests and the
//! acceptance gate. Each returns the number of cases and the failures.

use super::{central_diff, rel_close};
use nalgebra::{DMatrix, DVector};
use policy_landscape::inventory::{self, BaseStock, InventoryProblem};
use policy_landscape::lqr::{self, LinearGain};
use policy_landscape::mdp;
use policy_landscape::stopping::{self, StoppingProblem, ThresholdClass};
use policy_landscape::tabular::{
    class_loss, exact_policy_gradient, policy_gradient, softmax_jacobian, softmax_policy, AggregatedSoftmax, Aggregation,
    SoftmaxParams, TabularSoftmax,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Default)]
pub struct CheckOutcome {
    pub cases: usize,
    pub failures: Vec<String>,
}

impl CheckOutcome {
    fn check(&mut self, ok: bool, msg: impl FnOnce() -> String) {
        self.cases += 1;
        if !ok {
            self.failures.push(msg());
        }
    }

    pub fn assert_ok(&self) {
        assert!(self.failures.is_empty(), "{} of {} failed: {:?}", self.failures.len(), self.cases, self.failures);
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn tabular_exact() -> CheckOutcome {
    let mut out = CheckOutcome::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..60 {
        let (n, k) = (rng.random_range(2..=6), rng.random_range(2..=4));
        let m = mdp::random_mdp(n, k, case).unwrap();
        let theta = normal_vec(&mut rng, n * k, 1.0);
        let class = TabularSoftmax::for_mdp(&m);
        let exact = exact_policy_gradient(&m, &SoftmaxParams::from_flat(n, k, &theta).unwrap()).unwrap().gradient;
        let fd = central_diff(|t| class_loss(&m, &class, t).unwrap(), &theta, 1e-6);
        out.check(rel_close(&exact, &fd, 1e-5), || format!("case {case}: {exact} vs {fd}"));
    }
    out
}

pub fn aggregated_softmax() -> CheckOutcome {
    let mut out = CheckOutcome::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..50 {
        let n = rng.random_range(2..=8);
        let blocks = rng.random_range(1..=n);
        let m = mdp::random_mdp(n, 3, 100 + case).unwrap();
        let class = AggregatedSoftmax { aggregation: Aggregation::contiguous(n, blocks).unwrap(), n_actions: 3 };
        let theta = normal_vec(&mut rng, blocks * 3, 1.0);
        let g = policy_gradient(&m, &class, &theta).unwrap().gradient;
        let fd = central_diff(|t| class_loss(&m, &class, t).unwrap(), &theta, 1e-6);
        out.check(rel_close(&g, &fd, 1e-5), || format!("case {case}"));
    }
    out
}

/// Every entry of the per-state Jacobian against differences of the policy.
pub fn softmax_jacobian_entries() -> CheckOutcome {
    let mut out = CheckOutcome::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..60 {
        let k = rng.random_range(2..=6);
        let theta = SoftmaxParams(DMatrix::from_fn(1, k, |_, _| 2.0 * rng.sample::<f64, _>(StandardNormal)));
        let jac = softmax_jacobian(&theta, 0).unwrap();
        let ok = (0..k).all(|i| {
            let fd = central_diff(
                |t| softmax_policy(&SoftmaxParams::from_flat(1, k, t).unwrap()).unwrap().prob(0, i),
                &theta.to_flat(),
                1e-6,
            );
            rel_close(&jac.row(i).transpose(), &fd, 1e-5)
        });
        out.check(ok, || format!("case {case}"));
    }
    out
}

pub fn logistic_derivative() -> CheckOutcome {
    let mut out = CheckOutcome::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let z: f64 = rng.random_range(-30.0..30.0);
        let fd = central_diff(|t| stopping::logistic(t[0]), &DVector::from_element(1, z), 1e-6)[0];
        let d = stopping::logistic_derivative(z);
        out.check((d - fd).abs() <= 1e-5 * d.abs() + 1e-10, || format!("z {z}: {d} vs {fd}"));
    }
    out
}

/// Threshold-policy gradient: generic pullback vs differences, and the
/// structured evaluator vs the generic one.
pub fn threshold_policy() -> CheckOutcome {
    let mut out = CheckOutcome::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..50 {
        let p = StoppingProblem::random(rng.random_range(1..=4), rng.random_range(2..=6), 0.9, case).unwrap();
        let m = stopping::build_stopping_mdp(&p).unwrap();
        let class = ThresholdClass { problem: &p };
        let theta = normal_vec(&mut rng, 2 * p.n_contexts(), 2.0);
        let generic = policy_gradient(&m, &class, &theta).unwrap();
        let fd = central_diff(|t| class_loss(&m, &class, t).unwrap(), &theta, 1e-6);
        let (loss, structured) = stopping::stopping_loss_and_gradient(&p, &theta).unwrap();
        let ok = rel_close(&generic.gradient, &fd, 1e-5)
            && (loss - generic.loss).abs() < 1e-12 * (1.0 + loss.abs())
            && (&structured - &generic.gradient).amax() < 1e-11;
        out.check(ok, || format!("case {case}"));
    }
    out
}

fn random_gain(sys: &lqr::LqrSystem, rng: &mut ChaCha8Rng) -> LinearGain {
    let mut scale = 1.0;
    loop {
        let g = LinearGain(DMatrix::from_fn(sys.n_inputs(), sys.n_states(), |_, _| scale * rng.random_range(-1.0..1.0)));
        if lqr::is_stable(sys, &g) {
            return g;
        }
        scale *= 0.9;
    }
}

/// Closed-form gain gradient on three systems, 20 stable gains each.
pub fn lqr_closed_form() -> CheckOutcome {
    let mut out = CheckOutcome::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let systems = [
        lqr::random_system(3, 2, 0.9, 1).unwrap(),
        lqr::random_system(2, 1, 0.95, 2).unwrap(),
        lqr::random_system(4, 3, 0.8, 3).unwrap(),
    ];
    for (i, sys) in systems.iter().enumerate() {
        for case in 0..20 {
            let gain = random_gain(sys, &mut rng);
            let analytic = LinearGain(lqr::lqr_gradient(sys, &gain).unwrap()).to_flat();
            let fd = central_diff(
                |t| lqr::lqr_cost(sys, &LinearGain::from_flat(sys, t).unwrap()).unwrap(),
                &gain.to_flat(),
                1e-6,
            );
            out.check(rel_close(&analytic, &fd, 1e-5), || format!("system {i} case {case}: {analytic} vs {fd}"));
        }
    }
    out
}

/// Pathwise-mean gradient vs central differences of the cost on the same paths.
pub fn inventory_pathwise() -> CheckOutcome {
    let mut out = CheckOutcome::default();
    let prob = InventoryProblem::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n_paths = 2_000;
    for case in 0..50 {
        let theta = DVector::from_fn(prob.horizon, |_, _| rng.random_range(0.5..12.0));
        let seed = 1000 + case;
        let est = inventory::mc_gradient(&prob, &BaseStock(theta.clone()), n_paths, seed).unwrap();
        let fd = central_diff(
            |t| inventory::mc_cost(&prob, &BaseStock(t.clone()), n_paths, seed).unwrap().mean,
            &theta,
            1e-5,
        );
        let ok = est.kinks == 0
            && (0..prob.horizon).all(|i| {
                let diff = (est.mean[i] - fd[i]).abs();
                diff <= 1e-5 * (1.0 + fd[i].abs()) || diff <= 4.0 * est.std_err[i]
            });
        out.check(ok, || format!("case {case}: {} vs {}", est.mean, fd));
    }
    out
}
