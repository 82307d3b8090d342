//! Softmax policies on tabular MDPs, their exact gradients, and the
//! policy-improvement direction in parameter space.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mdp::{self, FiniteMdp, StochasticPolicy};

/// Rows closer than this to a simplex vertex are refused by
/// [`improvement_direction`].
pub const MIN_INTERIOR_PROB: f64 = 1e-12;

/// A differentiable family of stochastic policies on a fixed state/action set.
pub trait PolicyClass {
    fn n_params(&self) -> usize;

    fn policy(&self, theta: &DVector<f64>) -> Result<StochasticPolicy>;

    /// Gradient of `theta -> sum_{s,a} w(s,a) pi_theta(s,a)`.
    fn pullback(&self, theta: &DVector<f64>, weights: &DMatrix<f64>) -> Result<DVector<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub gradient: DVector<f64>,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Exact gradient of `l(theta) = rho^T J_theta` for any [`PolicyClass`]:
/// `sum_s (1-gamma)^{-1} eta(s) sum_a Q(s,a) grad pi(s,a)`.
pub fn policy_gradient<C: PolicyClass + ?Sized>(
    mdp: &FiniteMdp,
    class: &C,
    theta: &DVector<f64>,
) -> Result<GradientReport> {
    let policy = class.policy(theta)?;
    let q = mdp::solve_q(mdp, &policy)?;
    let visits = mdp::occupancy(mdp, &policy)?.discounted_visits(mdp.gamma());
    let mut weights = q.values().clone();
    for (s, mut row) in weights.row_iter_mut().enumerate() {
        row *= visits[s];
    }
    let gradient = class.pullback(theta, &weights)?;
    let loss = mdp.rho().dot(q.state_values(&policy).values());
    let grad_norm = gradient.norm();
    Ok(GradientReport { gradient, loss, grad_norm })
}

/// Loss of a parameterized policy.
pub fn class_loss<C: PolicyClass + ?Sized>(mdp: &FiniteMdp, class: &C, theta: &DVector<f64>) -> Result<f64> {
    mdp::average_cost(mdp, &class.policy(theta)?)
}

/// Per-state logits `theta(s, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxParams(pub DMatrix<f64>);

impl SoftmaxParams {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self(DMatrix::zeros(n_states, n_actions))
    }

    /// Inverse of [`SoftmaxParams::to_flat`] (row-major, `s * k + a`).
    pub fn from_flat(n_states: usize, n_actions: usize, flat: &DVector<f64>) -> Result<Self> {
        if flat.len() != n_states * n_actions {
            return Err(Error::DimensionMismatch {
                context: "softmax parameters",
                expected: n_states * n_actions,
                got: flat.len(),
            });
        }
        Ok(Self(DMatrix::from_row_slice(n_states, n_actions, flat.as_slice())))
    }

    pub fn to_flat(&self) -> DVector<f64> {
        DVector::from_iterator(self.0.len(), self.0.transpose().iter().copied())
    }

    pub fn n_states(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.0.ncols()
    }
}

fn softmax_row(logits: impl Iterator<Item = f64> + Clone) -> Vec<f64> {
    let max = logits.clone().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn softmax_rows(logits: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax logits".into()));
    }
    let mut probs = DMatrix::zeros(logits.nrows(), logits.ncols());
    for s in 0..logits.nrows() {
        let row = softmax_row(logits.row(s).iter().copied());
        for (a, p) in row.into_iter().enumerate() {
            probs[(s, a)] = p;
        }
    }
    Ok(probs)
}

/// `pi(s, i) = exp(theta_si) / sum_j exp(theta_sj)`, max-shifted per row.
pub fn softmax_policy(theta: &SoftmaxParams) -> Result<StochasticPolicy> {
    StochasticPolicy::new(softmax_rows(&theta.0)?)
}

/// `d pi(s,i) / d theta(s,j) = pi_i (1{i=j} - pi_j)`.
pub fn softmax_jacobian(theta: &SoftmaxParams, state: usize) -> Result<DMatrix<f64>> {
    if state >= theta.n_states() {
        return Err(Error::InvalidInput(format!("state {state} out of range")));
    }
    let pi = softmax_row(theta.0.row(state).iter().copied());
    let k = pi.len();
    Ok(DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            pi[i] * (1.0 - pi[i])
        } else {
            -pi[i] * pi[j]
        }
    }))
}

/// Per-state softmax over all `n_states * n_actions` logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TabularSoftmax {
    pub n_states: usize,
    pub n_actions: usize,
}

impl TabularSoftmax {
    pub fn for_mdp(mdp: &FiniteMdp) -> Self {
        Self { n_states: mdp.n_states(), n_actions: mdp.n_actions() }
    }
}

/// `out(j) = pi_j (w_j - sum_a w_a pi_a)` for one softmax row.
fn softmax_row_pullback(pi: &[f64], w: impl Iterator<Item = f64> + Clone) -> Vec<f64> {
    let mean: f64 = w.clone().zip(pi).map(|(w, p)| w * p).sum();
    w.zip(pi).map(|(w, p)| p * (w - mean)).collect()
}

impl PolicyClass for TabularSoftmax {
    fn n_params(&self) -> usize {
        self.n_states * self.n_actions
    }

    fn policy(&self, theta: &DVector<f64>) -> Result<StochasticPolicy> {
        softmax_policy(&SoftmaxParams::from_flat(self.n_states, self.n_actions, theta)?)
    }

    fn pullback(&self, theta: &DVector<f64>, weights: &DMatrix<f64>) -> Result<DVector<f64>> {
        let params = SoftmaxParams::from_flat(self.n_states, self.n_actions, theta)?;
        let probs = softmax_rows(&params.0)?;
        let k = self.n_actions;
        let mut grad = DVector::zeros(self.n_params());
        for s in 0..self.n_states {
            let pi: Vec<f64> = probs.row(s).iter().copied().collect();
            let row = softmax_row_pullback(&pi, weights.row(s).iter().copied());
            for (j, g) in row.into_iter().enumerate() {
                grad[s * k + j] = g;
            }
        }
        Ok(grad)
    }
}

/// Exact gradient for the per-state softmax class.
pub fn exact_policy_gradient(mdp: &FiniteMdp, theta: &SoftmaxParams) -> Result<GradientReport> {
    let class = TabularSoftmax::for_mdp(mdp);
    if theta.n_states() != class.n_states || theta.n_actions() != class.n_actions {
        return Err(Error::DimensionMismatch {
            context: "softmax parameters",
            expected: class.n_params(),
            got: theta.0.len(),
        });
    }
    policy_gradient(mdp, &class, &theta.to_flat())
}

/// Flat direction `u` (same layout as [`SoftmaxParams::to_flat`]) whose
/// directional derivative of `pi_theta` equals `pi_+ - pi_theta`, where `pi_+`
/// is greedy for `Q_theta` (lowest index on ties).
///
/// Each state's Jacobian `diag(pi) - pi pi^T` has null space spanned by the
/// ones vector, and `v / pi` solves it for any tangent `v`; projecting out the
/// ones component gives the minimum-norm solution.
pub fn improvement_direction(mdp: &FiniteMdp, theta: &SoftmaxParams) -> Result<DVector<f64>> {
    let policy = softmax_policy(theta)?;
    let q = mdp::solve_q(mdp, &policy)?;
    let greedy = mdp::greedy_actions(&q);
    let (n, k) = (mdp.n_states(), mdp.n_actions());
    let mut u = DVector::zeros(n * k);
    for s in 0..n {
        let pi = policy.probs().row(s);
        let min_prob = pi.min();
        if min_prob < MIN_INTERIOR_PROB {
            return Err(Error::IllConditioned { state: s, min_prob });
        }
        let raw: Vec<f64> = (0..k)
            .map(|a| {
                let target = if a == greedy[s] { 1.0 } else { 0.0 };
                (target - pi[a]) / pi[a]
            })
            .collect();
        let mean = raw.iter().sum::<f64>() / k as f64;
        for (a, r) in raw.into_iter().enumerate() {
            u[s * k + a] = r - mean;
        }
    }
    Ok(u)
}

/// Partition of states into `m` non-empty blocks sharing one softmax row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Aggregation {
    block_of: Vec<usize>,
    n_blocks: usize,
}

impl Aggregation {
    pub fn new(block_of: Vec<usize>, n_blocks: usize) -> Result<Self> {
        let mut seen = vec![false; n_blocks];
        for (s, &b) in block_of.iter().enumerate() {
            if b >= n_blocks {
                return Err(Error::InvalidInput(format!("state {s} mapped to missing block {b}")));
            }
            seen[b] = true;
        }
        if let Some(b) = seen.iter().position(|x| !x) {
            return Err(Error::InvalidInput(format!("block {b} is empty")));
        }
        Ok(Self { block_of, n_blocks })
    }

    pub fn identity(n_states: usize) -> Self {
        Self { block_of: (0..n_states).collect(), n_blocks: n_states }
    }

    pub fn single(n_states: usize) -> Self {
        Self { block_of: vec![0; n_states], n_blocks: 1 }
    }

    /// `m` contiguous blocks of near-equal size.
    pub fn contiguous(n_states: usize, m: usize) -> Result<Self> {
        if m == 0 || m > n_states {
            return Err(Error::InvalidInput(format!("cannot split {n_states} states into {m} blocks")));
        }
        Self::new((0..n_states).map(|s| s * m / n_states).collect(), m)
    }

    pub fn block_of(&self, state: usize) -> usize {
        self.block_of[state]
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn n_states(&self) -> usize {
        self.block_of.len()
    }

    pub fn members(&self, block: usize) -> impl Iterator<Item = usize> + '_ {
        self.block_of.iter().enumerate().filter(move |(_, &b)| b == block).map(|(s, _)| s)
    }
}

/// Every state plays the softmax row of its block.
pub fn aggregated_softmax(theta_blocks: &DMatrix<f64>, agg: &Aggregation) -> Result<StochasticPolicy> {
    if theta_blocks.nrows() != agg.n_blocks() {
        return Err(Error::DimensionMismatch {
            context: "aggregated softmax blocks",
            expected: agg.n_blocks(),
            got: theta_blocks.nrows(),
        });
    }
    let block_probs = softmax_rows(theta_blocks)?;
    let k = theta_blocks.ncols();
    StochasticPolicy::new(DMatrix::from_fn(agg.n_states(), k, |s, a| {
        block_probs[(agg.block_of(s), a)]
    }))
}

/// Softmax with state aggregation as a [`PolicyClass`] over `m * k` logits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggregatedSoftmax {
    pub aggregation: Aggregation,
    pub n_actions: usize,
}

impl AggregatedSoftmax {
    fn blocks(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        if theta.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                context: "aggregated softmax parameters",
                expected: self.n_params(),
                got: theta.len(),
            });
        }
        Ok(DMatrix::from_row_slice(self.aggregation.n_blocks(), self.n_actions, theta.as_slice()))
    }
}

impl PolicyClass for AggregatedSoftmax {
    fn n_params(&self) -> usize {
        self.aggregation.n_blocks() * self.n_actions
    }

    fn policy(&self, theta: &DVector<f64>) -> Result<StochasticPolicy> {
        aggregated_softmax(&self.blocks(theta)?, &self.aggregation)
    }

    fn pullback(&self, theta: &DVector<f64>, weights: &DMatrix<f64>) -> Result<DVector<f64>> {
        let blocks = self.blocks(theta)?;
        let probs = softmax_rows(&blocks)?;
        let k = self.n_actions;
        let mut grad = DVector::zeros(self.n_params());
        for b in 0..self.aggregation.n_blocks() {
            let pi: Vec<f64> = probs.row(b).iter().copied().collect();
            let mut w = vec![0.0; k];
            for s in self.aggregation.members(b) {
                for (a, wa) in w.iter_mut().enumerate() {
                    *wa += weights[(s, a)];
                }
            }
            for (j, g) in softmax_row_pullback(&pi, w.into_iter()).into_iter().enumerate() {
                grad[b * k + j] = g;
            }
        }
        Ok(grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::random_mdp;

    #[test]
    fn zero_logits_are_uniform() {
        let pi = softmax_policy(&SoftmaxParams::zeros(3, 4)).unwrap();
        assert!(pi.probs().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn two_action_row_matches_formula() {
        let theta = SoftmaxParams(DMatrix::from_row_slice(1, 2, &[10.0, 0.0]));
        let pi = softmax_policy(&theta).unwrap();
        let e = (-10.0f64).exp();
        assert!((pi.prob(0, 0) - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((pi.prob(0, 1) - e / (1.0 + e)).abs() < 1e-15);
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let theta = SoftmaxParams(DMatrix::from_row_slice(1, 3, &[1000.0, 999.0, -1000.0]));
        let pi = softmax_policy(&theta).unwrap();
        assert!(pi.probs().iter().all(|p| p.is_finite()));
    }

    #[test]
    fn jacobian_at_uniform_point() {
        let jac = softmax_jacobian(&SoftmaxParams::zeros(1, 2), 0).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[0.25, -0.25, -0.25, 0.25]);
        assert!((jac - expected).amax() < 1e-15);
    }

    #[test]
    fn flat_round_trip_layout() {
        let theta = SoftmaxParams(DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let flat = theta.to_flat();
        assert_eq!(flat.as_slice(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(SoftmaxParams::from_flat(2, 3, &flat).unwrap(), theta);
    }

    #[test]
    fn exchangeable_actions_have_zero_gradient() {
        let base = random_mdp(4, 1, 3).unwrap();
        let p = base.transition(0).clone();
        let cost = DMatrix::from_fn(4, 2, |s, _| base.cost()[(s, 0)]);
        let mdp = FiniteMdp::new(cost, vec![p.clone(), p], 0.9, base.rho().clone()).unwrap();
        let report = exact_policy_gradient(&mdp, &SoftmaxParams::zeros(4, 2)).unwrap();
        assert_eq!(report.grad_norm, 0.0);
    }

    #[test]
    fn improvement_direction_refuses_vertices() {
        let mdp = random_mdp(3, 2, 9).unwrap();
        let theta = SoftmaxParams(DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 40.0, -40.0, 0.0, 0.0]));
        assert!(matches!(
            improvement_direction(&mdp, &theta),
            Err(Error::IllConditioned { state: 1, .. })
        ));
    }

    #[test]
    fn improvement_direction_tie_picks_lowest_index() {
        let base = random_mdp(2, 1, 1).unwrap();
        let p = base.transition(0).clone();
        let cost = DMatrix::from_fn(2, 3, |s, _| base.cost()[(s, 0)]);
        let mdp = FiniteMdp::new(cost, vec![p.clone(), p.clone(), p], 0.9, base.rho().clone()).unwrap();
        let theta = SoftmaxParams::zeros(2, 3);
        let u = improvement_direction(&mdp, &theta).unwrap();
        // pi_+ = e_0: the direction raises logit 0 and lowers the others.
        for s in 0..2 {
            assert!(u[s * 3] > 0.0 && u[s * 3 + 1] < 0.0 && u[s * 3 + 2] < 0.0);
        }
    }

    #[test]
    fn aggregation_validation() {
        assert!(Aggregation::new(vec![0, 2, 2], 3).is_err());
        assert!(Aggregation::new(vec![0, 3], 3).is_err());
        let agg = Aggregation::contiguous(5, 2).unwrap();
        assert_eq!(agg.members(0).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(agg.members(1).collect::<Vec<_>>(), vec![3, 4]);
    }

    #[test]
    fn aggregated_identity_and_single() {
        let theta = DMatrix::from_row_slice(3, 2, &[0.3, -1.0, 2.0, 0.5, 0.0, 1.0]);
        let full = softmax_policy(&SoftmaxParams(theta.clone())).unwrap();
        let agg = aggregated_softmax(&theta, &Aggregation::identity(3)).unwrap();
        assert_eq!(full, agg);

        let row = DMatrix::from_row_slice(1, 2, &[0.3, -1.0]);
        let shared = aggregated_softmax(&row, &Aggregation::single(4)).unwrap();
        for s in 1..4 {
            assert_eq!(shared.probs().row(s), shared.probs().row(0));
        }
        assert!(aggregated_softmax(&row, &Aggregation::identity(2)).is_err());
    }
}
