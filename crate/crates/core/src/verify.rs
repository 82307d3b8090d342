//! Numerical checks of the landscape results: the descent inequality along
//! the policy-improvement direction, the approximation bounds for aggregated
//! softmax classes, soft policy iteration, and single-stage descent for
//! finite-horizon inventory control.
//!
//! Directional derivatives are taken by finite differences of the loss so the
//! checks do not lean on the gradient code they help validate.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::inventory::{self, BaseStock, InventoryProblem};
use crate::mdp::{self, FiniteMdp, StochasticPolicy};
use crate::optimize::{gradient_descent, FnObjective, GradTol, LineSearchConfig, StopRule};
use crate::tabular::{
    class_loss, improvement_direction, policy_gradient, softmax_policy, AggregatedSoftmax, Aggregation, PolicyClass,
    SoftmaxParams, TabularSoftmax,
};

/// Smallest policy probability accepted by [`verify_descent`].
pub const MIN_VERIFY_PROB: f64 = 1e-10;
/// Gradient norm required by [`verify_approximation`].
pub const STATIONARY_GRAD_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct DescentReport {
    pub theta: DVector<f64>,
    /// Central difference of `l` along `u`.
    pub directional_derivative: f64,
    /// `-(1-gamma)^{-1} ||J - TJ||_{1,eta}`.
    pub bound: f64,
    /// `bound - directional_derivative`.
    pub slack: f64,
    /// `(1 + ||u||)(1 + ||J||_inf)`, the yardstick for the slack tolerance.
    pub scale: f64,
    pub direction_norm: f64,
}

impl DescentReport {
    pub fn holds(&self, rel_tol: f64) -> bool {
        self.slack >= -rel_tol * self.scale
    }
}

pub fn verify_descent(mdp: &FiniteMdp, theta: &SoftmaxParams) -> Result<DescentReport> {
    let policy = softmax_policy(theta)?;
    for s in 0..policy.n_states() {
        let min_prob = policy.probs().row(s).min();
        if min_prob < MIN_VERIFY_PROB {
            return Err(Error::IllConditioned { state: s, min_prob });
        }
    }
    let u = improvement_direction(mdp, theta)?;
    let values = mdp::evaluate_policy(mdp, &policy)?;
    let eta = mdp::occupancy(mdp, &policy)?;
    let bound = -mdp::weighted_bellman_error(&values, mdp, &eta)? / (1.0 - mdp.gamma());

    let flat = theta.to_flat();
    let class = TabularSoftmax::for_mdp(mdp);
    let u_norm = u.norm();
    let derivative = if u_norm == 0.0 {
        0.0
    } else {
        let dir = &u / u_norm;
        let h = 1e-6 * (1.0 + flat.norm());
        let up = class_loss(mdp, &class, &(&flat + &dir * h))?;
        let down = class_loss(mdp, &class, &(&flat - &dir * h))?;
        u_norm * (up - down) / (2.0 * h)
    };
    Ok(DescentReport {
        theta: flat,
        directional_derivative: derivative,
        bound,
        slack: bound - derivative,
        scale: (1.0 + u_norm) * (1.0 + values.values().amax()),
        direction_norm: u_norm,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApproximationReport {
    pub theta: DVector<f64>,
    pub grad_norm: f64,
    /// `||TJ - J||_{1,eta}`.
    pub bellman_error_eta: f64,
    /// `min_{pi in class} ||T_pi J - TJ||_{1,eta}`, attained by one action per block.
    pub approx_error: f64,
    pub best_actions: Vec<usize>,
    /// Upper bound `1 / min_s rho(s)`.
    pub c_rho: f64,
    pub loss: f64,
    pub optimum: f64,
    pub gap: f64,
    pub bound_rhs: f64,
    /// Allowance for the residual gradient in the Bellman-error inequality.
    pub tol_bellman: f64,
    pub tol_gap: f64,
}

impl ApproximationReport {
    pub fn bellman_holds(&self) -> bool {
        self.bellman_error_eta <= self.approx_error + self.tol_bellman
    }

    pub fn gap_holds(&self) -> bool {
        self.gap <= self.bound_rhs + self.tol_gap
    }
}

/// Runs backtracking descent on an arbitrary policy class until the gradient
/// norm drops below `grad_tol`.
pub fn descend_class<C: PolicyClass + ?Sized>(
    mdp: &FiniteMdp,
    class: &C,
    theta0: &DVector<f64>,
    grad_tol: f64,
    max_iters: usize,
) -> Result<DVector<f64>> {
    let obj = FnObjective::new(
        class.n_params(),
        |t: &DVector<f64>| class_loss(mdp, class, t),
        |t: &DVector<f64>| policy_gradient(mdp, class, t).map(|r| r.gradient),
    );
    let stop = StopRule { grad_tol: GradTol::Absolute(grad_tol), max_iters };
    match gradient_descent(&obj, theta0, &LineSearchConfig::default(), &stop) {
        Ok(run) => Ok(run.theta),
        Err(f) => Err(f.error),
    }
}

/// Checks the Bellman-error and optimality-gap bounds at a near-stationary
/// point `theta` of the aggregated softmax class (flat `m x k`, row-major).
///
/// Stationarity along the direction `u_b = e_{a_b} / pi_b(a_b)` moving each
/// block toward the best vertex gives
/// `sum eta (T_{pi'} J - J) >= -(1-gamma) ||grad|| ||u||`, which is the
/// tolerance used for the Bellman-error inequality.
pub fn verify_approximation(mdp: &FiniteMdp, agg: &Aggregation, theta: &DVector<f64>) -> Result<ApproximationReport> {
    if agg.n_states() != mdp.n_states() {
        return Err(Error::DimensionMismatch { context: "aggregation", expected: mdp.n_states(), got: agg.n_states() });
    }
    let class = AggregatedSoftmax { aggregation: agg.clone(), n_actions: mdp.n_actions() };
    let report = policy_gradient(mdp, &class, theta)?;
    if report.grad_norm > STATIONARY_GRAD_TOL {
        return Err(Error::NotStationary { grad_norm: report.grad_norm, tol: STATIONARY_GRAD_TOL });
    }
    let policy = class.policy(theta)?;
    let values = mdp::evaluate_policy(mdp, &policy)?;
    let q = mdp::q_backup(mdp, &values)?;
    let backup = q.min_values();
    let eta = mdp::occupancy(mdp, &policy)?.eta;
    let gamma = mdp.gamma();
    let k = mdp.n_actions();

    let bellman_error_eta: f64 = (0..mdp.n_states()).map(|s| eta[s] * (values.0[s] - backup.0[s]).abs()).sum();

    let mut approx_error = 0.0;
    let mut best_actions = Vec::with_capacity(agg.n_blocks());
    let mut u_sq = 0.0;
    for b in 0..agg.n_blocks() {
        let excess: Vec<f64> = (0..k)
            .map(|a| agg.members(b).map(|s| eta[s] * (q.0[(s, a)] - backup.0[s])).sum())
            .collect();
        let a = mdp::argmin_lowest(excess.iter());
        approx_error += excess[a];
        best_actions.push(a);
        let s0 = agg.members(b).next().expect("blocks are non-empty");
        u_sq += policy.prob(s0, a).powi(-2);
    }
    let tol_bellman = 1e-8 + (1.0 - gamma) * report.grad_norm * u_sq.sqrt();

    let c_rho = 1.0 / mdp.rho().min();
    let factor = c_rho / (1.0 - gamma).powi(2);
    let (_, optimal_values) = mdp::policy_iteration(mdp)?;
    let optimum = mdp.rho().dot(optimal_values.values());
    Ok(ApproximationReport {
        theta: theta.clone(),
        grad_norm: report.grad_norm,
        bellman_error_eta,
        approx_error,
        best_actions,
        c_rho,
        loss: report.loss,
        optimum,
        gap: report.loss - optimum,
        bound_rhs: factor * approx_error,
        tol_bellman,
        tol_gap: 1e-8 + factor * tol_bellman,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftPiReport {
    pub alpha: f64,
    /// `l(pi) - l(pi^alpha)`.
    pub improvement: f64,
    /// `alpha lambda (l(pi) - l*)`.
    pub rhs: f64,
    /// `(c / C)(1 - kappa)` with `kappa = gamma`, `C = 1`, `c = min_s rho(s)`.
    pub lambda: f64,
    pub gap: f64,
    /// `l(pi) - l(pi')` for the full policy-iteration update `pi'`.
    pub full_step_improvement: f64,
    /// Smallest entry of `J - T_{pi^alpha} J` and of
    /// `T_{pi^alpha} J - ((1-alpha) J + alpha TJ)`; both are `>= 0` in theory.
    pub chain_min_slack: f64,
}

impl SoftPiReport {
    pub fn holds(&self, tol: f64) -> bool {
        self.improvement >= self.rhs - tol && self.chain_min_slack >= -tol
    }
}

pub fn verify_soft_pi(mdp: &FiniteMdp, policy: &StochasticPolicy, alpha: f64) -> Result<SoftPiReport> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidInput(format!("alpha {alpha} not in (0,1)")));
    }
    let values = mdp::evaluate_policy(mdp, policy)?;
    let greedy = mdp::greedy_policy(mdp, &values)?;
    let mixed = policy.mix(&greedy, alpha)?;
    let loss = mdp.rho().dot(values.values());
    let mixed_loss = mdp::average_cost(mdp, &mixed)?;
    let greedy_loss = mdp::average_cost(mdp, &greedy)?;
    let (_, optimal_values) = mdp::policy_iteration(mdp)?;
    let optimum = mdp.rho().dot(optimal_values.values());
    let lambda = mdp.rho().min() * (1.0 - mdp.gamma());

    let t_mixed = mdp::bellman_policy(mdp, &values, &mixed)?;
    let t_opt = mdp::bellman_optimal(mdp, &values)?;
    let mut chain_min_slack = f64::INFINITY;
    for s in 0..mdp.n_states() {
        let j = values.0[s];
        let upper = j - t_mixed.0[s];
        let lower = t_mixed.0[s] - ((1.0 - alpha) * j + alpha * t_opt.0[s]);
        chain_min_slack = chain_min_slack.min(upper).min(lower);
    }
    Ok(SoftPiReport {
        alpha,
        improvement: loss - mixed_loss,
        rhs: alpha * lambda * (loss - optimum),
        lambda,
        gap: loss - optimum,
        full_step_improvement: loss - greedy_loss,
        chain_min_slack,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiniteHorizonConfig {
    pub n_paths: usize,
    pub seed: u64,
    /// Levels closer than this to the reference are treated as optimal.
    pub level_tol: f64,
    /// Finite-difference step along the stage direction.
    pub step: f64,
}

impl Default for FiniteHorizonConfig {
    fn default() -> Self {
        Self { n_paths: 100_000, seed: 0, level_tol: 0.05, step: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteHorizonReport {
    /// Last period (0-based) whose level differs from the reference; `None` if vacuous.
    pub stage: Option<usize>,
    /// `theta*_t - theta_t`.
    pub direction: f64,
    /// CRN central difference of the expected cost along the stage direction.
    pub directional_derivative: f64,
    pub std_err: f64,
}

impl FiniteHorizonReport {
    pub fn vacuous(&self) -> bool {
        self.stage.is_none()
    }

    /// Negative beyond `k` standard errors.
    pub fn descends(&self, k: f64) -> bool {
        self.stage.is_some() && self.directional_derivative + k * self.std_err < 0.0
    }
}

/// Moves only the last suboptimal stage toward its optimal level and measures
/// the resulting directional derivative with common random numbers.
pub fn verify_finite_horizon(
    prob: &InventoryProblem,
    theta: &BaseStock,
    theta_star: &BaseStock,
    cfg: &FiniteHorizonConfig,
) -> Result<FiniteHorizonReport> {
    prob.validate()?;
    let h = prob.horizon;
    for (context, t) in [("levels", theta), ("optimal levels", theta_star)] {
        if t.0.len() != h {
            return Err(Error::DimensionMismatch { context, expected: h, got: t.0.len() });
        }
    }
    let stage = (0..h).rev().find(|&t| (theta.0[t] - theta_star.0[t]).abs() > cfg.level_tol);
    let Some(t) = stage else {
        return Ok(FiniteHorizonReport { stage: None, direction: 0.0, directional_derivative: 0.0, std_err: 0.0 });
    };
    let direction = theta_star.0[t] - theta.0[t];
    let mut up = theta.clone();
    let mut down = theta.clone();
    up.0[t] += cfg.step * direction;
    down.0[t] -= cfg.step * direction;
    let diffs: Vec<f64> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|i| {
            let (s1, w) = inventory::sample_path(prob, &mut inventory::path_rng(cfg.seed, i));
            let hi = inventory::simulate_episode(prob, &up, &w, s1)?.total_cost;
            let lo = inventory::simulate_episode(prob, &down, &w, s1)?.total_cost;
            Ok((hi - lo) / (2.0 * cfg.step))
        })
        .collect::<Result<_>>()?;
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(FiniteHorizonReport { stage, direction, directional_derivative: mean, std_err: (var / n).sqrt() })
}
