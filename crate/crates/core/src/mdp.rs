//! Tabular discounted MDPs: Bellman operators, exact policy evaluation,
//! policy iteration and discounted state-occupancy measures.
//!
//! All quantities are *costs* to be minimized. A policy is a row-stochastic
//! `(state, action)` matrix; deterministic policies are the one-hot rows.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Largest system solved by dense LU; bigger ones use fixed-point sweeps.
pub const DIRECT_SOLVE_LIMIT: usize = 10_000;

const STOCHASTIC_TOL: f64 = 1e-12;
const SWEEP_TOL: f64 = 1e-12;

/// A finite discounted MDP `(S, A, g, P, gamma, rho)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdp {
    cost: DMatrix<f64>,
    /// One `n x n` row-stochastic matrix per action.
    transition: Vec<DMatrix<f64>>,
    gamma: f64,
    rho: DVector<f64>,
}

impl FiniteMdp {
    pub fn new(
        cost: DMatrix<f64>,
        transition: Vec<DMatrix<f64>>,
        gamma: f64,
        rho: DVector<f64>,
    ) -> Result<Self> {
        let n = cost.nrows();
        let k = cost.ncols();
        if n == 0 || k == 0 {
            return Err(Error::InvalidInput("MDP needs at least one state and one action".into()));
        }
        if transition.len() != k {
            return Err(Error::DimensionMismatch {
                context: "transition actions",
                expected: k,
                got: transition.len(),
            });
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidInput(format!("discount {gamma} not in (0,1)")));
        }
        if rho.len() != n {
            return Err(Error::DimensionMismatch {
                context: "initial distribution",
                expected: n,
                got: rho.len(),
            });
        }
        if cost.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::InvalidInput("costs must be finite and nonnegative".into()));
        }
        for (a, p) in transition.iter().enumerate() {
            if p.nrows() != n || p.ncols() != n {
                return Err(Error::DimensionMismatch {
                    context: "transition matrix",
                    expected: n,
                    got: if p.nrows() != n { p.nrows() } else { p.ncols() },
                });
            }
            for s in 0..n {
                let row = p.row(s);
                if row.iter().any(|x| !x.is_finite() || *x < 0.0) {
                    return Err(Error::InvalidInput(format!(
                        "transition row (s={s}, a={a}) has a negative or non-finite entry"
                    )));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > STOCHASTIC_TOL {
                    return Err(Error::InvalidInput(format!(
                        "transition row (s={s}, a={a}) sums to {sum}"
                    )));
                }
            }
        }
        if rho.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::InvalidInput(
                "initial distribution must put positive mass on every state".into(),
            ));
        }
        let total: f64 = rho.iter().sum();
        if (total - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::InvalidInput(format!("initial distribution sums to {total}")));
        }
        Ok(Self { cost, transition, gamma, rho })
    }

    pub fn n_states(&self) -> usize {
        self.cost.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.cost.ncols()
    }

    pub fn cost(&self) -> &DMatrix<f64> {
        &self.cost
    }

    /// Transition matrix `P(.|., a)` for a single action.
    pub fn transition(&self, action: usize) -> &DMatrix<f64> {
        &self.transition[action]
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn rho(&self) -> &DVector<f64> {
        &self.rho
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        Self::new(self.cost.clone(), self.transition.clone(), gamma, self.rho.clone())
    }

    pub fn with_rho(&self, rho: DVector<f64>) -> Result<Self> {
        Self::new(self.cost.clone(), self.transition.clone(), self.gamma, rho)
    }

    /// Same dynamics with every cost multiplied by `factor >= 0`.
    pub fn scale_costs(&self, factor: f64) -> Result<Self> {
        Self::new(&self.cost * factor, self.transition.clone(), self.gamma, self.rho.clone())
    }

    fn check_states(&self, context: &'static str, got: usize) -> Result<()> {
        if got != self.n_states() {
            return Err(Error::DimensionMismatch { context, expected: self.n_states(), got });
        }
        Ok(())
    }

    fn check_policy(&self, policy: &StochasticPolicy) -> Result<()> {
        self.check_states("policy states", policy.n_states())?;
        if policy.n_actions() != self.n_actions() {
            return Err(Error::DimensionMismatch {
                context: "policy actions",
                expected: self.n_actions(),
                got: policy.n_actions(),
            });
        }
        Ok(())
    }
}

/// Cost-to-go `J(s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction(pub DVector<f64>);

impl ValueFunction {
    pub fn values(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sup_distance(&self, other: &ValueFunction) -> f64 {
        (&self.0 - &other.0).amax()
    }
}

/// State-action cost-to-go `Q(s, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QFunction(pub DMatrix<f64>);

impl QFunction {
    pub fn values(&self) -> &DMatrix<f64> {
        &self.0
    }

    /// `J(s) = sum_a pi(s,a) Q(s,a)`.
    pub fn state_values(&self, policy: &StochasticPolicy) -> ValueFunction {
        let q = &self.0;
        let probs = policy.probs();
        ValueFunction(DVector::from_fn(q.nrows(), |s, _| q.row(s).dot(&probs.row(s))))
    }

    /// Pointwise minimum over actions.
    pub fn min_values(&self) -> ValueFunction {
        ValueFunction(DVector::from_fn(self.0.nrows(), |s, _| self.0.row(s).min()))
    }
}

/// Row-stochastic `(state, action)` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticPolicy {
    probs: DMatrix<f64>,
}

impl StochasticPolicy {
    pub fn new(probs: DMatrix<f64>) -> Result<Self> {
        for s in 0..probs.nrows() {
            let row = probs.row(s);
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::InvalidInput(format!("policy row {s} has a negative entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::InvalidInput(format!("policy row {s} sums to {sum}")));
            }
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self { probs: DMatrix::from_element(n_states, n_actions, 1.0 / n_actions as f64) }
    }

    /// One-hot policy playing `actions[s]` in state `s`.
    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Result<Self> {
        if let Some(&a) = actions.iter().find(|&&a| a >= n_actions) {
            return Err(Error::InvalidInput(format!("action {a} out of range")));
        }
        let probs = DMatrix::from_fn(actions.len(), n_actions, |s, a| {
            if actions[s] == a {
                1.0
            } else {
                0.0
            }
        });
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &DMatrix<f64> {
        &self.probs
    }

    pub fn n_states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.ncols()
    }

    pub fn prob(&self, state: usize, action: usize) -> f64 {
        self.probs[(state, action)]
    }

    /// Actions of a one-hot policy, or `None` if some row is mixed.
    pub fn deterministic_actions(&self) -> Option<Vec<usize>> {
        (0..self.n_states())
            .map(|s| {
                let row = self.probs.row(s);
                row.iter().position(|&p| p == 1.0)
            })
            .collect()
    }

    /// `(1 - alpha) * self + alpha * other`.
    pub fn mix(&self, other: &StochasticPolicy, alpha: f64) -> Result<Self> {
        if self.probs.shape() != other.probs.shape() {
            return Err(Error::DimensionMismatch {
                context: "policy mixture",
                expected: self.n_states(),
                got: other.n_states(),
            });
        }
        Self::new(&self.probs * (1.0 - alpha) + &other.probs * alpha)
    }
}

/// Discounted state-occupancy measure.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyMeasure {
    pub eta: DVector<f64>,
    /// Whether the `(1 - gamma)` factor is applied, making `eta` a distribution.
    pub normalized: bool,
}

impl OccupancyMeasure {
    /// Unnormalized discounted visit counts `sum_t gamma^t P(s_t = s)`.
    pub fn discounted_visits(&self, gamma: f64) -> DVector<f64> {
        if self.normalized {
            &self.eta / (1.0 - gamma)
        } else {
            self.eta.clone()
        }
    }
}

/// `P_pi(s, s') = sum_a pi(s,a) P(s'|s,a)`.
pub fn policy_transition(mdp: &FiniteMdp, policy: &StochasticPolicy) -> Result<DMatrix<f64>> {
    mdp.check_policy(policy)?;
    let n = mdp.n_states();
    let mut p = DMatrix::zeros(n, n);
    for a in 0..mdp.n_actions() {
        let pa = mdp.transition(a);
        for s in 0..n {
            let w = policy.prob(s, a);
            if w != 0.0 {
                for t in 0..n {
                    p[(s, t)] += w * pa[(s, t)];
                }
            }
        }
    }
    Ok(p)
}

/// `g_pi(s) = sum_a pi(s,a) g(s,a)`.
pub fn policy_cost(mdp: &FiniteMdp, policy: &StochasticPolicy) -> Result<DVector<f64>> {
    mdp.check_policy(policy)?;
    let g = mdp.cost();
    Ok(DVector::from_fn(mdp.n_states(), |s, _| g.row(s).dot(&policy.probs().row(s))))
}

/// Solves `(I - gamma M) x = b`, or `(I - gamma M^T) x = b` when `transpose`.
fn solve_discounted(m: &DMatrix<f64>, gamma: f64, b: &DVector<f64>, transpose: bool) -> Result<DVector<f64>> {
    let n = b.len();
    if n <= DIRECT_SOLVE_LIMIT {
        let mut a = if transpose { m.transpose() } else { m.clone() };
        a *= -gamma;
        for i in 0..n {
            a[(i, i)] += 1.0;
        }
        return a
            .lu()
            .solve(b)
            .ok_or_else(|| Error::Singular(format!("I - gamma P ({n} x {n})")));
    }
    let mt = if transpose { Some(m.transpose()) } else { None };
    let op = mt.as_ref().unwrap_or(m);
    let mut x = b.clone();
    for _ in 0..1_000_000 {
        let next = b + op * &x * gamma;
        let change = (&next - &x).amax();
        x = next;
        if change <= SWEEP_TOL * (1.0 + x.amax()) {
            return Ok(x);
        }
    }
    Err(Error::Singular("fixed-point sweeps did not converge".into()))
}

/// Exact cost-to-go `J_pi = (I - gamma P_pi)^{-1} g_pi`.
pub fn evaluate_policy(mdp: &FiniteMdp, policy: &StochasticPolicy) -> Result<ValueFunction> {
    let p = policy_transition(mdp, policy)?;
    let g = policy_cost(mdp, policy)?;
    solve_discounted(&p, mdp.gamma(), &g, false).map(ValueFunction)
}

/// One-step backup `Q(s,a) = g(s,a) + gamma sum_s' P(s'|s,a) J(s')`.
pub fn q_backup(mdp: &FiniteMdp, values: &ValueFunction) -> Result<QFunction> {
    mdp.check_states("value function", values.len())?;
    let n = mdp.n_states();
    let j = values.values();
    let mut q = mdp.cost().clone();
    for a in 0..mdp.n_actions() {
        let p = mdp.transition(a);
        for s in 0..n {
            let mut next = 0.0;
            for t in 0..n {
                next += p[(s, t)] * j[t];
            }
            q[(s, a)] += mdp.gamma() * next;
        }
    }
    Ok(QFunction(q))
}

/// Unique solution of `Q = g + gamma P Pi Q`.
pub fn solve_q(mdp: &FiniteMdp, policy: &StochasticPolicy) -> Result<QFunction> {
    let values = evaluate_policy(mdp, policy)?;
    q_backup(mdp, &values)
}

/// `(T_pi J)(s) = g(s, pi(s)) + gamma sum_s' P(s'|s, pi(s)) J(s')`.
pub fn bellman_policy(
    mdp: &FiniteMdp,
    values: &ValueFunction,
    policy: &StochasticPolicy,
) -> Result<ValueFunction> {
    mdp.check_policy(policy)?;
    Ok(q_backup(mdp, values)?.state_values(policy))
}

/// `(T J)(s) = min_a Q_J(s, a)`.
pub fn bellman_optimal(mdp: &FiniteMdp, values: &ValueFunction) -> Result<ValueFunction> {
    Ok(q_backup(mdp, values)?.min_values())
}

/// Index of the smallest entry; the lowest index wins ties.
pub fn argmin_lowest<'a>(row: impl IntoIterator<Item = &'a f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::INFINITY;
    for (i, &v) in row.into_iter().enumerate() {
        if v < best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

/// Deterministic greedy actions for `Q`, lowest index on ties.
pub fn greedy_actions(q: &QFunction) -> Vec<usize> {
    (0..q.0.nrows()).map(|s| argmin_lowest(q.0.row(s).iter())).collect()
}

/// Greedy (policy-iteration) update with respect to `J`.
pub fn greedy_policy(mdp: &FiniteMdp, values: &ValueFunction) -> Result<StochasticPolicy> {
    let q = q_backup(mdp, values)?;
    StochasticPolicy::deterministic(mdp.n_actions(), &greedy_actions(&q))
}

/// Output of [`policy_iteration_with_history`].
#[derive(Debug, Clone)]
pub struct PolicyIterationRun {
    pub policy: StochasticPolicy,
    pub values: ValueFunction,
    /// Value function of every evaluated policy, starting from "action 0 everywhere".
    pub history: Vec<ValueFunction>,
}

/// Howard policy iteration from the all-zeros policy.
///
/// A state switches action only when that strictly improves its Q-value
/// beyond round-off, and then to the lowest-index minimizer.
pub fn policy_iteration_with_history(mdp: &FiniteMdp) -> Result<PolicyIterationRun> {
    let n = mdp.n_states();
    let k = mdp.n_actions();
    let mut actions = vec![0usize; n];
    let mut history = Vec::new();
    // Finitely many deterministic policies; this cap only guards bugs.
    for _ in 0..100_000 {
        let policy = StochasticPolicy::deterministic(k, &actions)?;
        let values = evaluate_policy(mdp, &policy)?;
        let q = q_backup(mdp, &values)?;
        history.push(values.clone());
        let mut changed = false;
        for (s, current) in actions.iter_mut().enumerate() {
            let row = q.0.row(s);
            let best = argmin_lowest(row.iter());
            let tol = 1e-12 * (1.0 + row[*current].abs());
            if row[best] < row[*current] - tol {
                *current = best;
                changed = true;
            }
        }
        if !changed {
            return Ok(PolicyIterationRun { policy, values, history });
        }
    }
    Err(Error::InvalidInput("policy iteration did not terminate".into()))
}

/// Optimal deterministic policy and `J*`.
pub fn policy_iteration(mdp: &FiniteMdp) -> Result<(StochasticPolicy, ValueFunction)> {
    let run = policy_iteration_with_history(mdp)?;
    Ok((run.policy, run.values))
}

/// Normalized occupancy `eta^T = (1 - gamma) rho^T (I - gamma P_pi)^{-1}`.
pub fn occupancy(mdp: &FiniteMdp, policy: &StochasticPolicy) -> Result<OccupancyMeasure> {
    let p = policy_transition(mdp, policy)?;
    let rhs = mdp.rho() * (1.0 - mdp.gamma());
    let eta = solve_discounted(&p, mdp.gamma(), &rhs, true)?;
    Ok(OccupancyMeasure { eta, normalized: true })
}

/// `sum_s eta(s) |J(s) - TJ(s)|`.
pub fn weighted_bellman_error(
    values: &ValueFunction,
    mdp: &FiniteMdp,
    eta: &OccupancyMeasure,
) -> Result<f64> {
    mdp.check_states("occupancy", eta.eta.len())?;
    let backup = bellman_optimal(mdp, values)?;
    Ok(eta
        .eta
        .iter()
        .zip(values.0.iter().zip(backup.0.iter()))
        .map(|(w, (j, tj))| w * (j - tj).abs())
        .sum())
}

/// Scalar loss `l = rho^T J_pi`.
pub fn average_cost(mdp: &FiniteMdp, policy: &StochasticPolicy) -> Result<f64> {
    Ok(mdp.rho().dot(evaluate_policy(mdp, policy)?.values()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomMdpConfig {
    pub gamma: f64,
    /// `None` means uniform.
    pub rho: Option<DVector<f64>>,
}

impl Default for RandomMdpConfig {
    fn default() -> Self {
        Self { gamma: 0.9, rho: None }
    }
}

/// Random MDP with the default discount 0.9 and uniform `rho`.
pub fn random_mdp(n_states: usize, n_actions: usize, seed: u64) -> Result<FiniteMdp> {
    random_mdp_with(n_states, n_actions, seed, &RandomMdpConfig::default())
}

/// Costs i.i.d. `U[0,1)`; each transition row i.i.d. `U[0,1)` then normalized.
pub fn random_mdp_with(
    n_states: usize,
    n_actions: usize,
    seed: u64,
    config: &RandomMdpConfig,
) -> Result<FiniteMdp> {
    if n_states == 0 || n_actions == 0 {
        return Err(Error::InvalidInput("MDP needs at least one state and one action".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cost = DMatrix::zeros(n_states, n_actions);
    for s in 0..n_states {
        for a in 0..n_actions {
            cost[(s, a)] = rng.random::<f64>();
        }
    }
    let mut transition = vec![DMatrix::zeros(n_states, n_states); n_actions];
    for s in 0..n_states {
        for p in transition.iter_mut() {
            let mut row: Vec<f64> = (0..n_states).map(|_| rng.random::<f64>()).collect();
            let mut total: f64 = row.iter().sum();
            if total == 0.0 {
                row[0] = 1.0;
                total = 1.0;
            }
            for (t, x) in row.iter().enumerate() {
                p[(s, t)] = x / total;
            }
        }
    }
    let rho = config
        .rho
        .clone()
        .unwrap_or_else(|| DVector::from_element(n_states, 1.0 / n_states as f64));
    FiniteMdp::new(cost, transition, config.gamma, rho)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn value_iteration(mdp: &FiniteMdp, policy: &StochasticPolicy, sweeps: usize) -> ValueFunction {
        let mut j = ValueFunction(DVector::zeros(mdp.n_states()));
        for _ in 0..sweeps {
            j = bellman_policy(mdp, &j, policy).unwrap();
        }
        j
    }

    #[test]
    fn rejects_bad_rows_and_rho() {
        let cost = DMatrix::from_element(2, 1, 1.0);
        let p = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.2, 0.7]);
        let rho = DVector::from_vec(vec![0.5, 0.5]);
        assert!(FiniteMdp::new(cost.clone(), vec![p], 0.9, rho.clone()).is_err());
        let p = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.3, 0.7]);
        assert!(FiniteMdp::new(cost.clone(), vec![p.clone()], 0.9, DVector::from_vec(vec![1.0, 0.0])).is_err());
        assert!(FiniteMdp::new(cost.clone(), vec![p.clone()], 1.0, rho.clone()).is_err());
        assert!(FiniteMdp::new(-cost, vec![p], 0.9, rho).is_err());
    }

    #[test]
    fn policy_dimension_mismatch_is_reported() {
        let mdp = random_mdp(3, 2, 0).unwrap();
        let pi = StochasticPolicy::uniform(3, 4);
        assert!(matches!(solve_q(&mdp, &pi), Err(Error::DimensionMismatch { .. })));
        let j = ValueFunction(DVector::zeros(2));
        assert!(bellman_optimal(&mdp, &j).is_err());
    }

    #[test]
    fn zero_discount_q_is_cost() {
        let mdp = random_mdp(4, 3, 0).unwrap().with_gamma(1e-300).unwrap();
        let pi = StochasticPolicy::uniform(4, 3);
        let q = solve_q(&mdp, &pi).unwrap();
        assert!((q.values() - mdp.cost()).amax() < 1e-15);
        let tj = bellman_optimal(&mdp, &ValueFunction(DVector::from_element(4, 7.0))).unwrap();
        for s in 0..4 {
            assert!((tj.0[s] - mdp.cost().row(s).min()).abs() < 1e-12);
        }
    }

    #[test]
    fn q_matches_value_iteration_oracle() {
        let mdp = random_mdp(2, 2, 0).unwrap();
        let pi = StochasticPolicy::deterministic(2, &[0, 0]).unwrap();
        let q = solve_q(&mdp, &pi).unwrap();
        let j = value_iteration(&mdp, &pi, 10_000);
        let q_oracle = q_backup(&mdp, &j).unwrap();
        assert!((q.values() - q_oracle.values()).amax() < 1e-8);
    }

    #[test]
    fn q_two_state_closed_form() {
        let mdp = random_mdp(2, 3, 5).unwrap();
        let pi = StochasticPolicy::uniform(2, 3);
        let p = policy_transition(&mdp, &pi).unwrap();
        let g = policy_cost(&mdp, &pi).unwrap();
        let gm = mdp.gamma();
        let (a, b, c, d) = (1.0 - gm * p[(0, 0)], -gm * p[(0, 1)], -gm * p[(1, 0)], 1.0 - gm * p[(1, 1)]);
        let det = a * d - b * c;
        let j0 = (d * g[0] - b * g[1]) / det;
        let j1 = (-c * g[0] + a * g[1]) / det;
        let j = evaluate_policy(&mdp, &pi).unwrap();
        assert!((j.0[0] - j0).abs() < 1e-12 && (j.0[1] - j1).abs() < 1e-12);
    }

    #[test]
    fn q_residual_and_fixed_point_at_experiment_scale() {
        let mdp = random_mdp(100, 20, 1).unwrap();
        let pi = StochasticPolicy::uniform(100, 20);
        let q = solve_q(&mdp, &pi).unwrap();
        let j = q.state_values(&pi);
        let residual = q_backup(&mdp, &j).unwrap();
        assert!((residual.values() - q.values()).amax() <= 1e-9);
        let tj = bellman_policy(&mdp, &j, &pi).unwrap();
        assert!(tj.sup_distance(&j) < 1e-8);
    }

    #[test]
    fn zero_values_give_expected_one_step_cost() {
        let mdp = random_mdp(5, 3, 2).unwrap();
        let pi = StochasticPolicy::uniform(5, 3);
        let tj = bellman_policy(&mdp, &ValueFunction(DVector::zeros(5)), &pi).unwrap();
        let g = policy_cost(&mdp, &pi).unwrap();
        assert!((tj.0 - g).amax() < 1e-15);
    }

    #[test]
    fn bellman_optimal_matches_brute_force() {
        let mdp = random_mdp(4, 4, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let j = ValueFunction(DVector::from_fn(4, |_, _| rng.random::<f64>() * 10.0));
        let tj = bellman_optimal(&mdp, &j).unwrap();
        for s in 0..4 {
            let mut best = f64::INFINITY;
            for a in 0..4 {
                let mut next = 0.0;
                for t in 0..4 {
                    next += mdp.transition(a)[(s, t)] * j.0[t];
                }
                best = best.min(mdp.cost()[(s, a)] + mdp.gamma() * next);
            }
            assert_eq!(tj.0[s], best);
        }
    }

    #[test]
    fn policy_iteration_finds_dominant_action() {
        let mut mdp = random_mdp(5, 3, 4).unwrap();
        let mut cost = mdp.cost().clone();
        for s in 0..5 {
            cost[(s, 2)] = 0.0;
            cost[(s, 0)] += 1.0;
            cost[(s, 1)] += 1.0;
        }
        let uniform = mdp.transition(0).clone();
        mdp = FiniteMdp::new(cost, vec![uniform.clone(), uniform.clone(), uniform], 0.9, mdp.rho().clone()).unwrap();
        let (pi, _) = policy_iteration(&mdp).unwrap();
        assert_eq!(pi.deterministic_actions().unwrap(), vec![2; 5]);
    }

    #[test]
    fn policy_iteration_is_monotone() {
        let mdp = random_mdp(30, 5, 8).unwrap();
        let run = policy_iteration_with_history(&mdp).unwrap();
        for w in run.history.windows(2) {
            let diff = &w[1].0 - &w[0].0;
            assert!(diff.max() <= 1e-10);
        }
        for w in run.history.windows(2).take(run.history.len().saturating_sub(2)) {
            assert!((&w[1].0 - &w[0].0).min() < 0.0);
        }
    }

    #[test]
    fn occupancy_vanishing_discount_and_linear_system() {
        let mdp = random_mdp(6, 2, 5).unwrap();
        let pi = StochasticPolicy::uniform(6, 2);
        let eta = occupancy(&mdp.with_gamma(1e-12).unwrap(), &pi).unwrap();
        assert!((eta.eta.clone() - mdp.rho()).amax() < 1e-10);

        let eta = occupancy(&mdp, &pi).unwrap();
        assert!((eta.eta.sum() - 1.0).abs() < 1e-9);
        assert!(eta.eta.min() >= 0.0);
        let p = policy_transition(&mdp, &pi).unwrap();
        let lhs = eta.eta.transpose() - eta.eta.transpose() * &p * mdp.gamma();
        let rhs = mdp.rho().transpose() * (1.0 - mdp.gamma());
        assert!((lhs - rhs).amax() < 1e-10);
    }

    #[test]
    fn occupancy_matches_truncated_series() {
        let mdp = random_mdp(5, 2, 5).unwrap();
        let pi = StochasticPolicy::uniform(5, 2);
        let p = policy_transition(&mdp, &pi).unwrap();
        let mut dist = mdp.rho().transpose();
        let mut acc = dist.clone() * 0.0;
        let mut w = 1.0;
        for _ in 0..=1000 {
            acc += &dist * w;
            dist = &dist * &p;
            w *= mdp.gamma();
        }
        let oracle = acc.transpose() * (1.0 - mdp.gamma());
        let eta = occupancy(&mdp, &pi).unwrap();
        assert!((eta.eta - oracle).amax() < 1e-8);
    }

    #[test]
    fn weighted_error_cases() {
        let mdp = random_mdp(4, 2, 6).unwrap();
        let (_, jstar) = policy_iteration(&mdp).unwrap();
        let uniform_eta = OccupancyMeasure { eta: DVector::from_element(4, 0.25), normalized: true };
        assert!(weighted_bellman_error(&jstar, &mdp, &uniform_eta).unwrap() < 1e-9);

        // J* + c/(1-gamma) shifts TJ by gamma c/(1-gamma), so J - TJ = c.
        let c = 0.3;
        let shifted = ValueFunction(jstar.0.add_scalar(c / (1.0 - mdp.gamma())));
        let err = weighted_bellman_error(&shifted, &mdp, &uniform_eta).unwrap();
        assert!((err - c).abs() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(66);
        let j = ValueFunction(DVector::from_fn(4, |_, _| rng.random::<f64>()));
        let pi = StochasticPolicy::uniform(4, 2);
        let eta = occupancy(&mdp, &pi).unwrap();
        let tj = bellman_optimal(&mdp, &j).unwrap();
        let mut direct = 0.0;
        for s in 0..4 {
            direct += eta.eta[s] * (j.0[s] - tj.0[s]).abs();
        }
        assert_eq!(weighted_bellman_error(&j, &mdp, &eta).unwrap(), direct);
    }

    #[test]
    fn average_cost_scaling_and_single_state() {
        let mdp = random_mdp(3, 2, 7).unwrap();
        let pi = StochasticPolicy::uniform(3, 2);
        let l = average_cost(&mdp, &pi).unwrap();
        let l2 = average_cost(&mdp.scale_costs(2.0).unwrap(), &pi).unwrap();
        assert!((l2 - 2.0 * l).abs() < 1e-12);

        let single = random_mdp(1, 1, 9).unwrap();
        let pi = StochasticPolicy::uniform(1, 1);
        let expected = single.cost()[(0, 0)] / (1.0 - single.gamma());
        assert!((average_cost(&single, &pi).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn random_mdp_is_deterministic() {
        assert_eq!(random_mdp(7, 3, 42).unwrap(), random_mdp(7, 3, 42).unwrap());
        assert_ne!(random_mdp(7, 3, 42).unwrap(), random_mdp(7, 3, 43).unwrap());
        let big = random_mdp(100, 20, 3).unwrap();
        assert_eq!(big.gamma(), 0.9);
        assert_eq!((big.n_states(), big.n_actions()), (100, 20));
    }
}
