//! Contextual optimal stopping with logistic threshold policies.
//!
//! States are `(x, y)` pairs laid out as `x * n_offers + y`, followed by one
//! absorbing terminal state. Action 0 rejects, action 1 accepts. Rewards
//! (offer `y` on acceptance) are turned into nonnegative costs by
//! `cost = shift - reward` in every state, with `shift = max(max offer, 0)`, so
//! `J_cost = shift / (1 - gamma) - J_reward`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mdp::{self, FiniteMdp, StochasticPolicy, ValueFunction};
use crate::optimize::Objective;
use crate::tabular::PolicyClass;

pub const REJECT: usize = 0;
pub const ACCEPT: usize = 1;

const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct StoppingProblem {
    offers: Vec<f64>,
    /// `p(x' | x)`.
    context_kernel: DMatrix<f64>,
    /// `q_x(y)`.
    emission: DMatrix<f64>,
    gamma: f64,
}

fn check_stochastic(name: &str, m: &DMatrix<f64>) -> Result<()> {
    for (i, row) in m.row_iter().enumerate() {
        if row.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidInput(format!("{name} row {i} has a negative or non-finite entry")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::InvalidInput(format!("{name} row {i} sums to {sum}")));
        }
    }
    Ok(())
}

fn random_stochastic(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut m = DMatrix::from_fn(rows, cols, |_, _| rng.random::<f64>());
    for mut row in m.row_iter_mut() {
        let sum: f64 = row.iter().sum();
        row /= sum;
    }
    m
}

impl StoppingProblem {
    pub fn new(offers: Vec<f64>, context_kernel: DMatrix<f64>, emission: DMatrix<f64>, gamma: f64) -> Result<Self> {
        let nx = context_kernel.nrows();
        if nx == 0 || offers.is_empty() {
            return Err(Error::InvalidInput("need at least one context and one offer".into()));
        }
        if context_kernel.ncols() != nx {
            return Err(Error::DimensionMismatch { context: "context kernel", expected: nx, got: context_kernel.ncols() });
        }
        if emission.nrows() != nx || emission.ncols() != offers.len() {
            return Err(Error::DimensionMismatch {
                context: "emission matrix",
                expected: nx * offers.len(),
                got: emission.len(),
            });
        }
        if offers.iter().any(|y| !y.is_finite()) {
            return Err(Error::InvalidInput("offers must be finite".into()));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidInput(format!("discount {gamma} not in (0,1)")));
        }
        check_stochastic("context kernel", &context_kernel)?;
        check_stochastic("emission", &emission)?;
        Ok(Self { offers, context_kernel, emission, gamma })
    }

    /// Offers sorted `U[0, 1]`; kernel and emission rows are normalized uniform draws.
    pub fn random(n_contexts: usize, n_offers: usize, gamma: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut offers: Vec<f64> = (0..n_offers).map(|_| rng.random::<f64>()).collect();
        offers.sort_by(f64::total_cmp);
        let kernel = random_stochastic(&mut rng, n_contexts, n_contexts);
        let emission = random_stochastic(&mut rng, n_contexts, n_offers);
        Self::new(offers, kernel, emission, gamma)
    }

    pub fn n_contexts(&self) -> usize {
        self.context_kernel.nrows()
    }

    pub fn n_offers(&self) -> usize {
        self.offers.len()
    }

    pub fn offers(&self) -> &[f64] {
        &self.offers
    }

    pub fn context_kernel(&self) -> &DMatrix<f64> {
        &self.context_kernel
    }

    pub fn emission(&self) -> &DMatrix<f64> {
        &self.emission
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn n_states(&self) -> usize {
        self.n_contexts() * self.n_offers() + 1
    }

    pub fn terminal(&self) -> usize {
        self.n_contexts() * self.n_offers()
    }

    pub fn state(&self, context: usize, offer: usize) -> usize {
        context * self.n_offers() + offer
    }

    /// `(context, offer)` of a non-terminal state.
    pub fn decode(&self, state: usize) -> Option<(usize, usize)> {
        (state < self.terminal()).then(|| (state / self.n_offers(), state % self.n_offers()))
    }

    pub fn cost_shift(&self) -> f64 {
        self.offers.iter().copied().fold(0.0, f64::max)
    }

    pub fn reward_from_cost(&self, cost_value: f64) -> f64 {
        self.cost_shift() / (1.0 - self.gamma) - cost_value
    }

    /// Probability of the next offer state after rejecting in `context`.
    fn reject_prob(&self, context: usize, next_context: usize, next_offer: usize) -> f64 {
        self.context_kernel[(context, next_context)] * self.emission[(next_context, next_offer)]
    }
}

/// Uniform initial distribution over all states, terminal included.
pub fn build_stopping_mdp(p: &StoppingProblem) -> Result<FiniteMdp> {
    let n = p.n_states();
    let term = p.terminal();
    let shift = p.cost_shift();
    let mut cost = DMatrix::from_element(n, 2, shift);
    let mut reject = DMatrix::zeros(n, n);
    let mut accept = DMatrix::zeros(n, n);
    for s in 0..term {
        let (x, y) = p.decode(s).expect("non-terminal");
        cost[(s, ACCEPT)] = shift - p.offers[y];
        accept[(s, term)] = 1.0;
        for x2 in 0..p.n_contexts() {
            for y2 in 0..p.n_offers() {
                reject[(s, p.state(x2, y2))] = p.reject_prob(x, x2, y2);
            }
        }
    }
    reject[(term, term)] = 1.0;
    accept[(term, term)] = 1.0;
    let rho = DVector::from_element(n, 1.0 / n as f64);
    FiniteMdp::new(cost, vec![reject, accept], p.gamma, rho)
}

/// Per-context `(theta_0, theta_1)` stored at indices `2x` and `2x + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdParams(pub DVector<f64>);

impl ThresholdParams {
    pub fn zeros(p: &StoppingProblem) -> Self {
        Self(DVector::zeros(2 * p.n_contexts()))
    }

    /// Logistic approximation of "accept iff `y > level[x]`" with slope `scale`.
    pub fn from_levels(levels: &[f64], scale: f64) -> Self {
        let mut theta = DVector::zeros(2 * levels.len());
        for (x, &c) in levels.iter().enumerate() {
            theta[2 * x] = -scale * c;
            theta[2 * x + 1] = scale;
        }
        Self(theta)
    }

    pub fn intercept(&self, context: usize) -> f64 {
        self.0[2 * context]
    }

    pub fn slope(&self, context: usize) -> f64 {
        self.0[2 * context + 1]
    }
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `f'(z) = f(z) (1 - f(z))`.
pub fn logistic_derivative(z: f64) -> f64 {
    let f = logistic(z);
    f * (1.0 - f)
}

/// Logistic threshold policies as a [`PolicyClass`] on the built MDP.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdClass<'a> {
    pub problem: &'a StoppingProblem,
}

impl ThresholdClass<'_> {
    fn logit(&self, theta: &DVector<f64>, state: usize) -> Option<(usize, f64)> {
        let (x, y) = self.problem.decode(state)?;
        Some((x, theta[2 * x] + theta[2 * x + 1] * self.problem.offers[y]))
    }

    fn check(&self, theta: &DVector<f64>) -> Result<()> {
        let expected = 2 * self.problem.n_contexts();
        if theta.len() != expected {
            return Err(Error::DimensionMismatch { context: "threshold parameters", expected, got: theta.len() });
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("threshold parameters".into()));
        }
        Ok(())
    }
}

impl PolicyClass for ThresholdClass<'_> {
    fn n_params(&self) -> usize {
        2 * self.problem.n_contexts()
    }

    fn policy(&self, theta: &DVector<f64>) -> Result<StochasticPolicy> {
        self.check(theta)?;
        let n = self.problem.n_states();
        let mut probs = DMatrix::from_element(n, 2, 0.5);
        for s in 0..self.problem.terminal() {
            let (_, z) = self.logit(theta, s).expect("non-terminal");
            let accept = logistic(z);
            probs[(s, ACCEPT)] = accept;
            probs[(s, REJECT)] = 1.0 - accept;
        }
        StochasticPolicy::new(probs)
    }

    fn pullback(&self, theta: &DVector<f64>, weights: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check(theta)?;
        let mut grad = DVector::zeros(theta.len());
        for s in 0..self.problem.terminal() {
            let (x, z) = self.logit(theta, s).expect("non-terminal");
            let y = self.problem.offers[s % self.problem.n_offers()];
            let d = (weights[(s, ACCEPT)] - weights[(s, REJECT)]) * logistic_derivative(z);
            grad[2 * x] += d;
            grad[2 * x + 1] += d * y;
        }
        Ok(grad)
    }
}

pub fn threshold_policy(p: &StoppingProblem, theta: &ThresholdParams) -> Result<StochasticPolicy> {
    ThresholdClass { problem: p }.policy(&theta.0)
}

/// Reward-space value `J_theta` on all states.
pub fn reward_values(p: &StoppingProblem, mdp: &FiniteMdp, policy: &StochasticPolicy) -> Result<ValueFunction> {
    let j = mdp::evaluate_policy(mdp, policy)?;
    Ok(ValueFunction(j.values().map(|v| p.reward_from_cost(v))))
}

fn continuation_from(p: &StoppingProblem, reward: &ValueFunction) -> DVector<f64> {
    DVector::from_fn(p.n_contexts(), |x, _| {
        let mut total = 0.0;
        for x2 in 0..p.n_contexts() {
            for y2 in 0..p.n_offers() {
                total += p.reject_prob(x, x2, y2) * reward.0[p.state(x2, y2)];
            }
        }
        p.gamma * total
    })
}

/// `c_theta(x) = gamma sum p(x'|x) q_{x'}(y') J_theta(x', y')` in reward units.
pub fn continuation_value(p: &StoppingProblem, theta: &ThresholdParams) -> Result<DVector<f64>> {
    let mdp = build_stopping_mdp(p)?;
    let policy = threshold_policy(p, theta)?;
    Ok(continuation_from(p, &reward_values(p, &mdp, &policy)?))
}

/// `u = (-c_theta(x), 1)` per context; the reward objective increases along it.
pub fn stopping_descent_direction(p: &StoppingProblem, theta: &ThresholdParams) -> Result<DVector<f64>> {
    let c = continuation_value(p, theta)?;
    let mut u = DVector::zeros(2 * p.n_contexts());
    for x in 0..p.n_contexts() {
        u[2 * x] = -c[x];
        u[2 * x + 1] = 1.0;
    }
    Ok(u)
}

/// Closed form of the reward objective's derivative along
/// [`stopping_descent_direction`]:
/// `sum_{x,y} (1-gamma)^{-1} eta(x,y) (y - c(x))^2 f'(theta_0 + theta_1 y)`.
pub fn directional_derivative_closed_form(p: &StoppingProblem, theta: &ThresholdParams) -> Result<f64> {
    let mdp = build_stopping_mdp(p)?;
    let policy = threshold_policy(p, theta)?;
    let c = continuation_from(p, &reward_values(p, &mdp, &policy)?);
    let visits = mdp::occupancy(&mdp, &policy)?.discounted_visits(p.gamma);
    let mut total = 0.0;
    for s in 0..p.terminal() {
        let (x, y) = p.decode(s).expect("non-terminal");
        let gap = p.offers[y] - c[x];
        let z = theta.intercept(x) + theta.slope(x) * p.offers[y];
        total += visits[s] * gap * gap * logistic_derivative(z);
    }
    Ok(total)
}

/// Cost-space loss and gradient of a threshold policy on the built MDP,
/// computed through the context-level structure: rejecting in context `x`
/// leads to the same next-state law whatever the offer, so both the
/// continuation values and the discounted visit counts reduce to
/// `|X| x |X|` linear systems. Agrees with the generic tabular gradient.
pub fn stopping_loss_and_gradient(p: &StoppingProblem, theta: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
    let class = ThresholdClass { problem: p };
    class.check(theta)?;
    let (nx, ny) = (p.n_contexts(), p.n_offers());
    let g = p.gamma;
    let rho0 = 1.0 / p.n_states() as f64;
    let pi = DMatrix::from_fn(nx, ny, |x, y| logistic(theta[2 * x] + theta[2 * x + 1] * p.offers[y]));

    let accept_value = DVector::from_fn(nx, |x, _| (0..ny).map(|y| p.emission[(x, y)] * pi[(x, y)] * p.offers[y]).sum::<f64>());
    let stay = DVector::from_fn(nx, |x, _| (0..ny).map(|y| p.emission[(x, y)] * (1.0 - pi[(x, y)])).sum::<f64>());
    let kernel_stay = DMatrix::from_fn(nx, nx, |x, x2| p.context_kernel[(x, x2)] * stay[x2]);
    let identity = DMatrix::<f64>::identity(nx, nx);

    let continuation = (&identity - &kernel_stay * g)
        .lu()
        .solve(&(&p.context_kernel * &accept_value * g))
        .ok_or_else(|| Error::Singular("stopping continuation system".into()))?;

    // Reject mass leaving each context, pushed forward by the kernel.
    let direct = DVector::from_fn(nx, |x, _| rho0 * (0..ny).map(|y| 1.0 - pi[(x, y)]).sum::<f64>());
    let stay_then_kernel = DMatrix::from_fn(nx, nx, |x2, x| p.context_kernel[(x, x2)] * stay[x]);
    let inflow = (&identity - stay_then_kernel * g)
        .lu()
        .solve(&(p.context_kernel.transpose() * direct))
        .ok_or_else(|| Error::Singular("stopping visit system".into()))?;

    let mut reward = 0.0;
    let mut grad = DVector::zeros(2 * nx);
    for x in 0..nx {
        for y in 0..ny {
            let offer = p.offers[y];
            let a = pi[(x, y)];
            reward += rho0 * (a * offer + (1.0 - a) * continuation[x]);
            let visits = rho0 + g * p.emission[(x, y)] * inflow[x];
            let d = visits * (offer - continuation[x]) * a * (1.0 - a);
            grad[2 * x] -= d;
            grad[2 * x + 1] -= d * offer;
        }
    }
    Ok((p.cost_shift() / (1.0 - g) - reward, grad))
}

/// Stopping cost objective over flat threshold parameters.
pub struct StoppingObjective<'a> {
    pub problem: &'a StoppingProblem,
    pub optimum: Option<f64>,
}

impl Objective for StoppingObjective<'_> {
    fn dim(&self) -> usize {
        2 * self.problem.n_contexts()
    }

    fn loss(&self, theta: &DVector<f64>) -> Result<f64> {
        stopping_loss_and_gradient(self.problem, theta).map(|(l, _)| l)
    }

    fn gradient(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        stopping_loss_and_gradient(self.problem, theta).map(|(_, g)| g)
    }

    fn oracle_optimum(&self) -> Option<f64> {
        self.optimum
    }
}

/// Optimal deterministic policy of the built MDP summarized per context by
/// its acceptance level: accept exactly the offers `>= level`, or `None` if
/// nothing is accepted. Errors if an acceptance set is not up-closed in `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalStopping {
    pub policy: StochasticPolicy,
    pub cost_values: ValueFunction,
    pub levels: Vec<Option<f64>>,
    pub continuation: DVector<f64>,
}

pub fn optimal_stopping(p: &StoppingProblem) -> Result<OptimalStopping> {
    let mdp = build_stopping_mdp(p)?;
    let (policy, cost_values) = mdp::policy_iteration(&mdp)?;
    let reward = ValueFunction(cost_values.values().map(|v| p.reward_from_cost(v)));
    let continuation = continuation_from(p, &reward);
    let actions = policy.deterministic_actions().expect("policy iteration returns a deterministic policy");
    let mut levels = Vec::with_capacity(p.n_contexts());
    for x in 0..p.n_contexts() {
        let accepted: Vec<usize> = (0..p.n_offers()).filter(|&y| actions[p.state(x, y)] == ACCEPT).collect();
        let level = accepted.iter().map(|&y| p.offers[y]).fold(f64::INFINITY, f64::min);
        let up_closed = (0..p.n_offers()).all(|y| (p.offers[y] >= level) == accepted.contains(&y));
        if !up_closed {
            return Err(Error::InvalidInput(format!("optimal acceptance set in context {x} is not up-closed")));
        }
        levels.push(level.is_finite().then_some(level));
    }
    Ok(OptimalStopping { policy, cost_values, levels, continuation })
}

/// Smallest max-abs error of any single logistic row `f(t0 + t1 y)` against
/// target acceptance probabilities, by grid search over slope and center.
pub fn threshold_fit_residual(offers: &[f64], target: &[f64]) -> f64 {
    assert_eq!(offers.len(), target.len());
    let lo = offers.iter().copied().fold(f64::INFINITY, f64::min) - 1.0;
    let hi = offers.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 1.0;
    let err = |slope: f64, center: f64| {
        offers
            .iter()
            .zip(target)
            .map(|(&y, &t)| (logistic(slope * (y - center)) - t).abs())
            .fold(0.0, f64::max)
    };
    let mut slopes = vec![0.0];
    for i in 0..=160 {
        let s = 10f64.powf(-2.0 + 6.0 * i as f64 / 160.0);
        slopes.push(s);
        slopes.push(-s);
    }
    let mut best = f64::INFINITY;
    for &slope in &slopes {
        for j in 0..=800 {
            let center = lo + (hi - lo) * j as f64 / 800.0;
            best = best.min(err(slope, center));
        }
    }
    best
}
