//! Seeded experiment runners behind the command-line tool.
//!
//! Each runner returns structured results; [`render`] turns them into the CSV
//! body and the `key=value` sidecar the CLI writes.

use std::cell::RefCell;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::inventory::{self, BaseStock, InventoryObjective, InventoryProblem, McEstimate};
use crate::lqr::{self, LinearGain, LqrObjective, LqrSystem};
use crate::mdp::{self, FiniteMdp, RandomMdpConfig, StochasticPolicy};
use crate::optimize::{
    format_sig12, gradient_descent, RUN_CSV_HEADER, FnObjective, GradTol, LineSearchConfig, Objective, RunRecord, StopRule,
    Termination,
};
use crate::reinforce;
use crate::stopping::{self, StoppingObjective, StoppingProblem};
use crate::tabular::{class_loss, exact_policy_gradient, policy_gradient, AggregatedSoftmax, Aggregation, SoftmaxParams, TabularSoftmax};
use crate::verify::{self, FiniteHorizonConfig, STATIONARY_GRAD_TOL};

pub const VERIFY_DESCENT_HEADER: &str = "case,n_states,n_actions,directional_derivative,bound,slack,scale,holds";
pub const VERIFY_APPROXIMATION_HEADER: &str = "case,mdp_seed,n_states,n_blocks,grad_norm,bellman_error_eta,approx_error,tol_bellman,bellman_holds,gap,bound_rhs,tol_gap,gap_holds,c_rho";
pub const VERIFY_SOFTPI_HEADER: &str = "case,alpha,improvement,rhs,lambda,gap,chain_min_slack,holds";
pub const VERIFY_FINITE_HORIZON_HEADER: &str = "case,stage,direction,directional_derivative,std_err,vacuous,descends,theta";
pub const REINFORCE_CHECK_HEADER: &str = "mdp,theta,component,exact,estimate,std_err,z";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Tabular,
    Stopping,
    Lqr,
    Inventory,
    VerifyDescent,
    VerifyApproximation,
    VerifySoftPi,
    VerifyFiniteHorizon,
    ReinforceCheck,
}

impl Experiment {
    pub const ALL: [Experiment; 9] = [
        Experiment::Tabular,
        Experiment::Stopping,
        Experiment::Lqr,
        Experiment::Inventory,
        Experiment::VerifyDescent,
        Experiment::VerifyApproximation,
        Experiment::VerifySoftPi,
        Experiment::VerifyFiniteHorizon,
        Experiment::ReinforceCheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Tabular => "tabular",
            Experiment::Stopping => "stopping",
            Experiment::Lqr => "lqr",
            Experiment::Inventory => "inventory",
            Experiment::VerifyDescent => "verify-descent",
            Experiment::VerifyApproximation => "verify-approximation",
            Experiment::VerifySoftPi => "verify-softpi",
            Experiment::VerifyFiniteHorizon => "verify-finite-horizon",
            Experiment::ReinforceCheck => "reinforce-check",
        }
    }

    /// Header line of the CSV this experiment writes.
    pub fn csv_header(self) -> &'static str {
        match self {
            Experiment::Tabular | Experiment::Stopping | Experiment::Lqr | Experiment::Inventory => RUN_CSV_HEADER,
            Experiment::VerifyDescent => VERIFY_DESCENT_HEADER,
            Experiment::VerifyApproximation => VERIFY_APPROXIMATION_HEADER,
            Experiment::VerifySoftPi => VERIFY_SOFTPI_HEADER,
            Experiment::VerifyFiniteHorizon => VERIFY_FINITE_HORIZON_HEADER,
            Experiment::ReinforceCheck => REINFORCE_CHECK_HEADER,
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.name() == name)
    }
}

/// Fully resolved settings. Fields irrelevant to an experiment are ignored by it.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub seed: u64,
    pub gamma: f64,
    pub n_states: usize,
    pub n_actions: usize,
    pub n_contexts: usize,
    pub n_offers: usize,
    pub state_dim: usize,
    pub input_dim: usize,
    pub horizon: usize,
    pub order_cost: f64,
    pub holding_cost: f64,
    pub backlog_cost: f64,
    pub demand_max: f64,
    pub beta: f64,
    /// Stop once `||grad|| <= grad_tol (1 + |loss|)`.
    pub grad_tol: f64,
    pub max_iters: usize,
    pub n_paths: usize,
    pub eval_paths: usize,
    /// Number of verification cases.
    pub n: usize,
}

impl ExperimentConfig {
    pub fn defaults(experiment: Experiment) -> Self {
        let base = Self {
            experiment,
            seed: 1,
            gamma: 0.9,
            n_states: 100,
            n_actions: 20,
            n_contexts: 10,
            n_offers: 50,
            state_dim: 3,
            input_dim: 2,
            horizon: 5,
            order_cost: 1.0,
            holding_cost: 1.0,
            backlog_cost: 2.0,
            demand_max: 10.0,
            beta: 0.5,
            grad_tol: 1e-8,
            max_iters: 10_000,
            n_paths: 20_000,
            eval_paths: 100_000,
            n: 100,
        };
        match experiment {
            Experiment::Stopping => Self { grad_tol: 1e-11, max_iters: 100_000, ..base },
            Experiment::Lqr => Self { grad_tol: 1e-9, ..base },
            Experiment::Inventory => Self { max_iters: 1_000, ..base },
            Experiment::VerifyDescent => Self { n_states: 10, n_actions: 5, ..base },
            Experiment::VerifyApproximation => Self { n_states: 8, n_actions: 3, n: 5, max_iters: 50_000, ..base },
            Experiment::VerifySoftPi => Self { n_states: 6, n_actions: 3, ..base },
            Experiment::VerifyFiniteHorizon => Self { n_paths: 100_000, n: 10, ..base },
            Experiment::ReinforceCheck => Self { n_paths: 100_000, ..base },
            Experiment::Tabular => base,
        }
    }

    /// `(key, value)` pairs in a fixed order, as written to the sidecar.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("experiment", self.experiment.name().to_string()),
            ("seed", self.seed.to_string()),
            ("gamma", self.gamma.to_string()),
            ("n_states", self.n_states.to_string()),
            ("n_actions", self.n_actions.to_string()),
            ("n_contexts", self.n_contexts.to_string()),
            ("n_offers", self.n_offers.to_string()),
            ("state_dim", self.state_dim.to_string()),
            ("input_dim", self.input_dim.to_string()),
            ("horizon", self.horizon.to_string()),
            ("order_cost", self.order_cost.to_string()),
            ("holding_cost", self.holding_cost.to_string()),
            ("backlog_cost", self.backlog_cost.to_string()),
            ("demand_max", self.demand_max.to_string()),
            ("beta", self.beta.to_string()),
            ("grad_tol", self.grad_tol.to_string()),
            ("max_iters", self.max_iters.to_string()),
            ("n_paths", self.n_paths.to_string()),
            ("eval_paths", self.eval_paths.to_string()),
            ("n", self.n.to_string()),
        ]
    }

    /// Checks documented ranges; the error names the offending field.
    pub fn validate(&self) -> std::result::Result<(), (String, String)> {
        let bad = |field: &str, msg: &str| Err((field.to_string(), msg.to_string()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma", "must lie in (0, 1)");
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad("beta", "must lie in (0, 1)");
        }
        if !(self.grad_tol >= 0.0 && self.grad_tol.is_finite()) {
            return bad("grad_tol", "must be finite and nonnegative");
        }
        for (field, value, min) in [
            ("n_states", self.n_states, 1),
            ("n_actions", self.n_actions, 1),
            ("n_contexts", self.n_contexts, 1),
            ("n_offers", self.n_offers, 1),
            ("state_dim", self.state_dim, 1),
            ("input_dim", self.input_dim, 1),
            ("horizon", self.horizon, 1),
            ("n_paths", self.n_paths, 2),
            ("eval_paths", self.eval_paths, 2),
            ("n", self.n, 1),
        ] {
            if value < min {
                return bad(field, &format!("must be at least {min}"));
            }
        }
        if matches!(self.experiment, Experiment::VerifyDescent | Experiment::VerifySoftPi)
            && (self.n_states < 2 || self.n_actions < 2)
        {
            return bad("n_states", "verification batches need at least 2 states and 2 actions");
        }
        if self.experiment == Experiment::VerifyApproximation && self.n_states < 2 {
            return bad("n_states", "need at least 2 states for the 2-block aggregation");
        }
        for (field, value) in [
            ("order_cost", self.order_cost),
            ("holding_cost", self.holding_cost),
            ("backlog_cost", self.backlog_cost),
            ("demand_max", self.demand_max),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return bad(field, "must be positive");
            }
        }
        if self.backlog_cost <= self.order_cost {
            return bad("backlog_cost", "must exceed order_cost");
        }
        Ok(())
    }

    fn stop_rule(&self) -> StopRule {
        StopRule { grad_tol: GradTol::RelativeToLoss(self.grad_tol), max_iters: self.max_iters }
    }

    fn line_search(&self) -> Result<LineSearchConfig> {
        LineSearchConfig::new(self.beta, LineSearchConfig::default().max_halvings)
    }

    pub fn inventory_problem(&self) -> InventoryProblem {
        InventoryProblem {
            horizon: self.horizon,
            order_cost: self.order_cost,
            holding_cost: self.holding_cost,
            backlog_cost: self.backlog_cost,
            demand_max: self.demand_max,
            ..InventoryProblem::default()
        }
    }
}

/// A descent run plus its oracle. `failure` holds the error that ended the
/// run early, if any; the record is complete up to that point.
#[derive(Debug, Clone)]
pub struct DescentExperiment {
    pub record: RunRecord,
    pub theta: DVector<f64>,
    pub optimum: f64,
    pub termination: Option<Termination>,
    pub failure: Option<Error>,
}

impl DescentExperiment {
    pub fn initial_gap(&self) -> f64 {
        self.record.rows.first().map_or(f64::NAN, |r| r.optimality_gap)
    }

    pub fn final_gap(&self) -> f64 {
        self.record.last().map_or(f64::NAN, |r| r.optimality_gap)
    }

    /// Whether the gap never increases from one row to the next.
    pub fn gap_monotone(&self) -> bool {
        self.record.rows.windows(2).all(|w| w[1].optimality_gap <= w[0].optimality_gap)
    }
}

fn run_descent<O: Objective>(obj: &O, theta0: &DVector<f64>, cfg: &ExperimentConfig, optimum: f64) -> Result<DescentExperiment> {
    Ok(match gradient_descent(obj, theta0, &cfg.line_search()?, &cfg.stop_rule()) {
        Ok(run) => DescentExperiment {
            record: run.record,
            theta: run.theta,
            optimum,
            termination: Some(run.termination),
            failure: None,
        },
        Err(f) => DescentExperiment { record: f.record, theta: f.theta, optimum, termination: None, failure: Some(f.error) },
    })
}

pub fn tabular_mdp(cfg: &ExperimentConfig) -> Result<FiniteMdp> {
    mdp::random_mdp_with(cfg.n_states, cfg.n_actions, cfg.seed, &RandomMdpConfig { gamma: cfg.gamma, rho: None })
}

pub fn run_tabular(cfg: &ExperimentConfig) -> Result<DescentExperiment> {
    let m = tabular_mdp(cfg)?;
    let (_, optimal) = mdp::policy_iteration(&m)?;
    let optimum = m.rho().dot(optimal.values());
    let class = TabularSoftmax::for_mdp(&m);
    let obj = FnObjective::new(
        cfg.n_states * cfg.n_actions,
        |t: &DVector<f64>| class_loss(&m, &class, t),
        |t: &DVector<f64>| policy_gradient(&m, &class, t).map(|r| r.gradient),
    )
    .with_oracle(optimum);
    run_descent(&obj, &DVector::zeros(cfg.n_states * cfg.n_actions), cfg, optimum)
}

pub fn stopping_problem(cfg: &ExperimentConfig) -> Result<StoppingProblem> {
    StoppingProblem::random(cfg.n_contexts, cfg.n_offers, cfg.gamma, cfg.seed)
}

pub fn run_stopping(cfg: &ExperimentConfig) -> Result<DescentExperiment> {
    let p = stopping_problem(cfg)?;
    let opt = stopping::optimal_stopping(&p)?;
    let m = stopping::build_stopping_mdp(&p)?;
    let optimum = m.rho().dot(opt.cost_values.values());
    let obj = StoppingObjective { problem: &p, optimum: Some(optimum) };
    run_descent(&obj, &DVector::zeros(2 * cfg.n_contexts), cfg, optimum)
}

#[derive(Debug, Clone)]
pub struct LqrExperiment {
    pub descent: DescentExperiment,
    pub system: LqrSystem,
    pub theta0: LinearGain,
    pub theta_star: LinearGain,
    /// `||theta_final - theta*||_F`.
    pub distance: f64,
    /// Operator-norm stability of every iterate the descent visited.
    pub all_iterates_stable: bool,
    pub iterates_checked: usize,
}

/// Records every iterate at which the optimizer asks for a gradient.
struct Watched<'a, O> {
    inner: &'a O,
    visited: RefCell<Vec<DVector<f64>>>,
}

impl<O: Objective> Objective for Watched<'_, O> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn loss(&self, theta: &DVector<f64>) -> Result<f64> {
        self.inner.loss(theta)
    }

    fn gradient(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        self.visited.borrow_mut().push(theta.clone());
        self.inner.gradient(theta)
    }

    fn project(&self, theta: &mut DVector<f64>) {
        self.inner.project(theta)
    }

    fn oracle_optimum(&self) -> Option<f64> {
        self.inner.oracle_optimum()
    }
}

pub fn run_lqr(cfg: &ExperimentConfig) -> Result<LqrExperiment> {
    let system = lqr::random_system(cfg.state_dim, cfg.input_dim, cfg.gamma, cfg.seed)?;
    let theta_star = lqr::optimal_gain(&system)?;
    let optimum = lqr::lqr_cost(&system, &theta_star)?;
    let theta0 = lqr::random_stable_gain(&system, cfg.seed.wrapping_add(1))?;
    let base = LqrObjective { system: &system, optimum: Some(optimum) };
    let watched = Watched { inner: &base, visited: RefCell::new(Vec::new()) };
    let descent = run_descent(&watched, &theta0.to_flat(), cfg, optimum)?;
    let visited = watched.visited.into_inner();
    let all_iterates_stable = visited
        .iter()
        .chain(std::iter::once(&descent.theta))
        .all(|t| LinearGain::from_flat(&system, t).is_ok_and(|g| lqr::is_stable(&system, &g)));
    let distance = (&descent.theta - theta_star.to_flat()).norm();
    Ok(LqrExperiment {
        descent,
        system,
        theta0,
        theta_star,
        distance,
        all_iterates_stable,
        iterates_checked: visited.len() + 1,
    })
}

#[derive(Debug, Clone)]
pub struct InventoryExperiment {
    /// Descent on the sample-average objective; its oracle is that objective at `theta_star`.
    pub descent: DescentExperiment,
    pub theta_star: BaseStock,
    pub final_eval: McEstimate,
    pub optimal_eval: McEstimate,
}

impl InventoryExperiment {
    pub fn eval_difference(&self) -> f64 {
        self.final_eval.mean - self.optimal_eval.mean
    }

    pub fn combined_std_err(&self) -> f64 {
        self.final_eval.std_err.hypot(self.optimal_eval.std_err)
    }
}

/// Starts every stage at `demand_max`: at zero no path orders in stage 1
/// (initial stock is nonnegative), so that stage's gradient is identically zero.
/// Training, oracle and evaluation draws use seeds `seed`, `seed + 1`, `seed + 2`.
pub fn run_inventory(cfg: &ExperimentConfig) -> Result<InventoryExperiment> {
    let prob = cfg.inventory_problem();
    prob.validate()?;
    let theta_star = inventory::optimal_basestock(&prob, cfg.eval_paths, cfg.seed.wrapping_add(1))?;
    let optimum = inventory::mc_cost(&prob, &theta_star, cfg.n_paths, cfg.seed)?.mean;
    let obj = InventoryObjective { problem: &prob, n_paths: cfg.n_paths, seed: cfg.seed, optimum: Some(optimum) };
    let theta0 = DVector::from_element(cfg.horizon, cfg.demand_max);
    let mut descent = run_descent(&obj, &theta0, cfg, optimum)?;
    // The sample-average cost is piecewise linear; exhausting the line search
    // at a kink is the expected way for the run to end.
    if matches!(descent.failure, Some(Error::LineSearch { .. })) {
        descent.failure = None;
    }
    let eval_seed = cfg.seed.wrapping_add(2);
    let final_eval = inventory::mc_cost(&prob, &BaseStock(descent.theta.clone()), cfg.eval_paths, eval_seed)?;
    let optimal_eval = inventory::mc_cost(&prob, &theta_star, cfg.eval_paths, eval_seed)?;
    Ok(InventoryExperiment { descent, theta_star, final_eval, optimal_eval })
}

fn case_rng(seed: u64, case: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(case as u64);
    rng
}

fn normal_params(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

#[derive(Debug, Clone)]
pub struct DescentCase {
    pub n_states: usize,
    pub n_actions: usize,
    pub report: verify::DescentReport,
}

/// Random sizes up to `(n_states, n_actions)`, `theta ~ N(0, I)`.
pub fn run_verify_descent(cfg: &ExperimentConfig) -> Result<Vec<DescentCase>> {
    (0..cfg.n)
        .map(|case| {
            let mut rng = case_rng(cfg.seed, case);
            let n = rng.random_range(2..=cfg.n_states);
            let k = rng.random_range(2..=cfg.n_actions);
            let m = mdp::random_mdp_with(n, k, rng.random(), &RandomMdpConfig { gamma: cfg.gamma, rho: None })?;
            let theta = SoftmaxParams(normal_params(&mut rng, n, k));
            Ok(DescentCase { n_states: n, n_actions: k, report: verify::verify_descent(&m, &theta)? })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ApproximationCase {
    pub mdp_seed: u64,
    pub n_states: usize,
    pub n_blocks: usize,
    pub report: verify::ApproximationReport,
}

/// `n` seeded MDPs, each with 1, 2 and `n_states` contiguous blocks.
pub fn run_verify_approximation(cfg: &ExperimentConfig) -> Result<Vec<ApproximationCase>> {
    let mut cases = Vec::new();
    for case in 0..cfg.n {
        let mdp_seed = cfg.seed.wrapping_mul(1000).wrapping_add(case as u64);
        let m = mdp::random_mdp_with(cfg.n_states, cfg.n_actions, mdp_seed, &RandomMdpConfig { gamma: cfg.gamma, rho: None })?;
        for blocks in [1, 2, cfg.n_states] {
            let agg = Aggregation::contiguous(cfg.n_states, blocks)?;
            let class = AggregatedSoftmax { aggregation: agg.clone(), n_actions: cfg.n_actions };
            let theta0 = DVector::zeros(blocks * cfg.n_actions);
            let theta = verify::descend_class(&m, &class, &theta0, STATIONARY_GRAD_TOL, cfg.max_iters)?;
            let report = verify::verify_approximation(&m, &agg, &theta)?;
            cases.push(ApproximationCase { mdp_seed, n_states: cfg.n_states, n_blocks: blocks, report });
        }
    }
    Ok(cases)
}

/// Random row-stochastic policies and `alpha ~ U(0, 1)` on seeded MDPs.
pub fn run_verify_soft_pi(cfg: &ExperimentConfig) -> Result<Vec<verify::SoftPiReport>> {
    (0..cfg.n)
        .map(|case| {
            let mut rng = case_rng(cfg.seed, case);
            let n = rng.random_range(2..=cfg.n_states);
            let k = rng.random_range(2..=cfg.n_actions);
            let m = mdp::random_mdp_with(n, k, rng.random(), &RandomMdpConfig { gamma: cfg.gamma, rho: None })?;
            let mut probs = DMatrix::from_fn(n, k, |_, _| rng.random::<f64>() + 1e-3);
            for mut row in probs.row_iter_mut() {
                let total: f64 = row.iter().sum();
                row /= total;
            }
            let alpha = rng.random_range(1e-3..1.0 - 1e-3);
            verify::verify_soft_pi(&m, &StochasticPolicy::new(probs)?, alpha)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct FiniteHorizonCase {
    pub theta: BaseStock,
    pub report: verify::FiniteHorizonReport,
}

#[derive(Debug, Clone)]
pub struct FiniteHorizonExperiment {
    pub theta_star: BaseStock,
    pub cases: Vec<FiniteHorizonCase>,
}

/// Case 0 is the reference itself (vacuous); odd cases perturb one stage of
/// the reference, even cases draw every level from `U[0, 2 max theta*]`.
pub fn run_verify_finite_horizon(cfg: &ExperimentConfig) -> Result<FiniteHorizonExperiment> {
    let prob = cfg.inventory_problem();
    let theta_star = inventory::optimal_basestock(&prob, cfg.n_paths, cfg.seed.wrapping_add(1))?;
    let top = theta_star.0.max().max(1.0);
    let fh = FiniteHorizonConfig { n_paths: cfg.n_paths, seed: cfg.seed, ..FiniteHorizonConfig::default() };
    let mut cases = Vec::with_capacity(cfg.n);
    for case in 0..cfg.n {
        let mut rng = case_rng(cfg.seed, case);
        let theta = if case == 0 {
            theta_star.clone()
        } else if case % 2 == 1 {
            let mut t = theta_star.clone();
            let stage = rng.random_range(0..cfg.horizon);
            let delta = rng.random_range(0.5..2.0);
            t.0[stage] = if t.0[stage] - delta >= 1.0 { t.0[stage] - delta } else { t.0[stage] + delta };
            t
        } else {
            BaseStock(DVector::from_fn(cfg.horizon, |_, _| rng.random_range(0.0..2.0 * top)))
        };
        let report = verify::verify_finite_horizon(&prob, &theta, &theta_star, &fh)?;
        cases.push(FiniteHorizonCase { theta, report });
    }
    Ok(FiniteHorizonExperiment { theta_star, cases })
}

#[derive(Debug, Clone)]
pub struct ReinforceCase {
    pub mdp_index: usize,
    pub theta_index: usize,
    pub exact: DVector<f64>,
    pub estimate: reinforce::ReinforceEstimate,
}

impl ReinforceCase {
    pub fn z_scores(&self) -> DVector<f64> {
        DVector::from_fn(self.exact.len(), |i, _| {
            let se = self.estimate.std_err[i];
            let d = self.estimate.mean[i] - self.exact[i];
            if se > 0.0 {
                d / se
            } else if d == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        })
    }
}

/// Least-squares constant `c` in `estimate ~ c exact` over all cases.
pub fn proportionality_constant(cases: &[ReinforceCase]) -> f64 {
    let (num, den) = cases.iter().fold((0.0, 0.0), |(n, d), c| (n + c.estimate.mean.dot(&c.exact), d + c.exact.norm_squared()));
    num / den
}

/// Two small seeded MDPs (3x2 and 4x3) times three `theta ~ N(0, I)`.
pub fn run_reinforce_check(cfg: &ExperimentConfig) -> Result<Vec<ReinforceCase>> {
    let mut cases = Vec::new();
    for (mdp_index, (n, k)) in [(3, 2), (4, 3)].into_iter().enumerate() {
        let mdp_seed = cfg.seed.wrapping_add(mdp_index as u64);
        let m = mdp::random_mdp_with(n, k, mdp_seed, &RandomMdpConfig { gamma: cfg.gamma, rho: None })?;
        for theta_index in 0..3 {
            let mut rng = case_rng(cfg.seed, 10 * mdp_index + theta_index);
            let theta = SoftmaxParams(normal_params(&mut rng, n, k));
            let exact = exact_policy_gradient(&m, &theta)?.gradient;
            let sample_seed = cfg.seed.wrapping_mul(31).wrapping_add((10 * mdp_index + theta_index) as u64);
            let estimate = reinforce::reinforce_estimate(&m, &theta, cfg.n_paths, sample_seed)?;
            cases.push(ReinforceCase { mdp_index, theta_index, exact, estimate });
        }
    }
    Ok(cases)
}

/// CSV body, sidecar entries, summary lines and an optional runtime failure.
#[derive(Debug, Clone, Default)]
pub struct Rendered {
    pub csv: String,
    pub meta: Vec<(String, String)>,
    pub summary: Vec<String>,
    pub failure: Option<String>,
}

fn vec_str(v: &DVector<f64>) -> String {
    v.iter().map(|x| format_sig12(*x)).collect::<Vec<_>>().join(";")
}

fn push(meta: &mut Vec<(String, String)>, key: &str, value: impl ToString) {
    meta.push((key.to_string(), value.to_string()));
}

fn render_descent(d: &DescentExperiment, provenance: &str, out: &mut Rendered) {
    out.csv = d.record.to_csv();
    push(&mut out.meta, "oracle_optimum", format_sig12(d.optimum));
    push(&mut out.meta, "oracle_provenance", provenance);
    push(&mut out.meta, "iterations", d.record.rows.len().saturating_sub(1));
    push(&mut out.meta, "initial_gap", format_sig12(d.initial_gap()));
    push(&mut out.meta, "final_gap", format_sig12(d.final_gap()));
    push(&mut out.meta, "gap_monotone", d.gap_monotone());
    let termination = match (&d.termination, &d.failure) {
        (Some(Termination::GradTol), _) => "grad_tol".to_string(),
        (Some(Termination::MaxIters), _) => "max_iters".to_string(),
        (Some(Termination::Stalled), _) => "stalled".to_string(),
        (None, Some(e)) => format!("error: {e}"),
        (None, None) => "line_search_stall".to_string(),
    };
    push(&mut out.meta, "termination", &termination);
    push(&mut out.meta, "theta_final", vec_str(&d.theta));
    let ratio = d.final_gap() / d.initial_gap();
    out.summary.push(format!(
        "{} iterations, gap {} -> {} (ratio {}), termination {termination}",
        d.record.rows.len().saturating_sub(1),
        format_sig12(d.initial_gap()),
        format_sig12(d.final_gap()),
        format_sig12(ratio),
    ));
    out.failure = d.failure.as_ref().map(|e| e.to_string());
}

fn header(out: &mut String, cols: &str) {
    out.push_str(cols);
    out.push('\n');
}

/// Runs the configured experiment and renders its outputs.
pub fn run(cfg: &ExperimentConfig) -> Result<Rendered> {
    let mut out = Rendered::default();
    for (k, v) in cfg.entries() {
        push(&mut out.meta, k, v);
    }
    push(&mut out.meta, "version", env!("CARGO_PKG_VERSION"));
    match cfg.experiment {
        Experiment::Tabular => {
            let d = run_tabular(cfg)?;
            render_descent(&d, "policy iteration on the same MDP (exact linear solves)", &mut out);
        }
        Experiment::Stopping => {
            let d = run_stopping(cfg)?;
            render_descent(&d, "policy iteration on the built stopping MDP (exact linear solves)", &mut out);
        }
        Experiment::Lqr => {
            let e = run_lqr(cfg)?;
            render_descent(&e.descent, "policy iteration on gains from a stabilizing start (Lyapunov solves)", &mut out);
            push(&mut out.meta, "theta0", vec_str(&e.theta0.to_flat()));
            push(&mut out.meta, "theta_star", vec_str(&e.theta_star.to_flat()));
            push(&mut out.meta, "distance_to_theta_star", format_sig12(e.distance));
            push(&mut out.meta, "all_iterates_stable", e.all_iterates_stable);
            out.summary.push(format!(
                "||theta - theta*||_F = {}, all {} iterates stable: {}",
                format_sig12(e.distance),
                e.iterates_checked,
                e.all_iterates_stable
            ));
        }
        Experiment::Inventory => {
            let e = run_inventory(cfg)?;
            render_descent(
                &e.descent,
                "sample-average cost (training paths) at backward-induction golden-section levels",
                &mut out,
            );
            push(&mut out.meta, "theta_star", vec_str(&e.theta_star.0));
            push(&mut out.meta, "eval_cost_final", format_sig12(e.final_eval.mean));
            push(&mut out.meta, "eval_se_final", format_sig12(e.final_eval.std_err));
            push(&mut out.meta, "eval_cost_theta_star", format_sig12(e.optimal_eval.mean));
            push(&mut out.meta, "eval_se_theta_star", format_sig12(e.optimal_eval.std_err));
            push(&mut out.meta, "eval_combined_se", format_sig12(e.combined_std_err()));
            out.summary.push(format!(
                "evaluation: final {} vs optimal {} (difference {}, combined se {})",
                format_sig12(e.final_eval.mean),
                format_sig12(e.optimal_eval.mean),
                format_sig12(e.eval_difference()),
                format_sig12(e.combined_std_err())
            ));
        }
        Experiment::VerifyDescent => {
            let cases = run_verify_descent(cfg)?;
            header(&mut out.csv, VERIFY_DESCENT_HEADER);
            let mut failed = 0;
            for (i, c) in cases.iter().enumerate() {
                let r = &c.report;
                let holds = r.holds(1e-6);
                failed += usize::from(!holds);
                let _ = writeln!(
                    out.csv,
                    "{i},{},{},{},{},{},{},{holds}",
                    c.n_states,
                    c.n_actions,
                    format_sig12(r.directional_derivative),
                    format_sig12(r.bound),
                    format_sig12(r.slack),
                    format_sig12(r.scale)
                );
            }
            finish_batch(&mut out, cases.len(), failed, "slack >= -1e-6 * scale");
        }
        Experiment::VerifyApproximation => {
            let cases = run_verify_approximation(cfg)?;
            header(
                &mut out.csv,
                VERIFY_APPROXIMATION_HEADER,
            );
            let mut failed = 0;
            for (i, c) in cases.iter().enumerate() {
                let r = &c.report;
                let (b, g) = (r.bellman_holds(), r.gap_holds());
                failed += usize::from(!(b && g));
                let _ = writeln!(
                    out.csv,
                    "{i},{},{},{},{},{},{},{},{b},{},{},{},{g},{}",
                    c.mdp_seed,
                    c.n_states,
                    c.n_blocks,
                    format_sig12(r.grad_norm),
                    format_sig12(r.bellman_error_eta),
                    format_sig12(r.approx_error),
                    format_sig12(r.tol_bellman),
                    format_sig12(r.gap),
                    format_sig12(r.bound_rhs),
                    format_sig12(r.tol_gap),
                    format_sig12(r.c_rho)
                );
            }
            push(&mut out.meta, "c_rho_provenance", "upper bound 1 / min_s rho(s)");
            finish_batch(&mut out, cases.len(), failed, "Bellman-error and gap bounds");
        }
        Experiment::VerifySoftPi => {
            let cases = run_verify_soft_pi(cfg)?;
            header(&mut out.csv, VERIFY_SOFTPI_HEADER);
            let mut failed = 0;
            for (i, r) in cases.iter().enumerate() {
                let holds = r.holds(1e-10);
                failed += usize::from(!holds);
                let _ = writeln!(
                    out.csv,
                    "{i},{},{},{},{},{},{},{holds}",
                    format_sig12(r.alpha),
                    format_sig12(r.improvement),
                    format_sig12(r.rhs),
                    format_sig12(r.lambda),
                    format_sig12(r.gap),
                    format_sig12(r.chain_min_slack)
                );
            }
            push(&mut out.meta, "lambda_provenance", "kappa = gamma, C = 1, c = min_s rho(s)");
            finish_batch(&mut out, cases.len(), failed, "improvement >= alpha lambda gap and elementwise chain");
        }
        Experiment::VerifyFiniteHorizon => {
            let e = run_verify_finite_horizon(cfg)?;
            header(&mut out.csv, VERIFY_FINITE_HORIZON_HEADER);
            let mut failed = 0;
            for (i, c) in e.cases.iter().enumerate() {
                let r = &c.report;
                let descends = r.descends(3.0);
                failed += usize::from(!r.vacuous() && !descends);
                let stage = r.stage.map_or("none".to_string(), |s| (s + 1).to_string());
                let _ = writeln!(
                    out.csv,
                    "{i},{stage},{},{},{},{},{descends},{}",
                    format_sig12(r.direction),
                    format_sig12(r.directional_derivative),
                    format_sig12(r.std_err),
                    r.vacuous(),
                    vec_str(&c.theta.0)
                );
            }
            push(&mut out.meta, "theta_star", vec_str(&e.theta_star.0));
            push(&mut out.meta, "oracle_provenance", "backward-induction golden-section levels");
            finish_batch(&mut out, e.cases.len(), failed, "single-stage direction descends beyond 3 standard errors");
        }
        Experiment::ReinforceCheck => {
            let cases = run_reinforce_check(cfg)?;
            header(&mut out.csv, REINFORCE_CHECK_HEADER);
            let mut worst: f64 = 0.0;
            for c in &cases {
                let z = c.z_scores();
                for i in 0..c.exact.len() {
                    worst = worst.max(z[i].abs());
                    let _ = writeln!(
                        out.csv,
                        "{},{},{i},{},{},{},{}",
                        c.mdp_index,
                        c.theta_index,
                        format_sig12(c.exact[i]),
                        format_sig12(c.estimate.mean[i]),
                        format_sig12(c.estimate.std_err[i]),
                        format_sig12(z[i])
                    );
                }
            }
            let constant = proportionality_constant(&cases);
            push(&mut out.meta, "proportionality_constant", format_sig12(constant));
            push(&mut out.meta, "max_abs_z", format_sig12(worst));
            out.summary.push(format!(
                "max |z| = {} over {} cases, fitted constant {}",
                format_sig12(worst),
                cases.len(),
                format_sig12(constant)
            ));
            if worst > 4.0 {
                out.failure = Some(format!("estimator deviates by {worst:.2} standard errors"));
            }
        }
    }
    Ok(out)
}

fn finish_batch(out: &mut Rendered, total: usize, failed: usize, what: &str) {
    push(&mut out.meta, "cases", total);
    push(&mut out.meta, "failed", failed);
    out.summary.push(format!("{}/{total} cases satisfy {what}", total - failed));
    if failed > 0 {
        out.failure = Some(format!("{failed} of {total} cases violate {what}"));
    }
}
