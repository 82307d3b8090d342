//! Score-function gradient estimates from geometric-horizon rollouts.
//!
//! With `H ~ Geometric(1 - gamma)` counting failures before the first
//! success, `P(H >= t) = gamma^t`, so `E[c(tau) sum_t score_t]` equals the
//! gradient of `rho^T J_theta` with no extra factor.

use nalgebra::DVector;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Geometric;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mdp::{FiniteMdp, StochasticPolicy};
use crate::tabular::{softmax_policy, SoftmaxParams};

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `s_0..s_H`.
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub costs: Vec<f64>,
    pub horizon: usize,
}

impl Trajectory {
    pub fn total_cost(&self) -> f64 {
        self.costs.iter().sum()
    }
}

/// Precomputed categorical samplers for one policy on one MDP.
pub struct TrajectorySampler<'a> {
    mdp: &'a FiniteMdp,
    initial: WeightedIndex<f64>,
    policy_rows: Vec<WeightedIndex<f64>>,
    next_state: Vec<Vec<WeightedIndex<f64>>>,
    horizon: Geometric,
}

fn categorical(weights: impl IntoIterator<Item = f64>) -> Result<WeightedIndex<f64>> {
    WeightedIndex::new(weights).map_err(|e| Error::InvalidInput(format!("bad categorical weights: {e}")))
}

impl<'a> TrajectorySampler<'a> {
    pub fn new(mdp: &'a FiniteMdp, policy: &StochasticPolicy) -> Result<Self> {
        let (n, k) = (mdp.n_states(), mdp.n_actions());
        if policy.n_states() != n || policy.n_actions() != k {
            return Err(Error::DimensionMismatch { context: "policy", expected: n * k, got: policy.probs().len() });
        }
        let initial = categorical(mdp.rho().iter().copied())?;
        let policy_rows = (0..n).map(|s| categorical(policy.probs().row(s).iter().copied())).collect::<Result<_>>()?;
        let next_state = (0..n)
            .map(|s| (0..k).map(|a| categorical(mdp.transition(a).row(s).iter().copied())).collect())
            .collect::<Result<_>>()?;
        let horizon = Geometric::new(1.0 - mdp.gamma()).map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(Self { mdp, initial, policy_rows, next_state, horizon })
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Trajectory {
        let horizon = self.horizon.sample(rng) as usize;
        let mut states = Vec::with_capacity(horizon + 1);
        let mut actions = Vec::with_capacity(horizon + 1);
        let mut costs = Vec::with_capacity(horizon + 1);
        let mut s = self.initial.sample(rng);
        for t in 0..=horizon {
            let a = self.policy_rows[s].sample(rng);
            states.push(s);
            actions.push(a);
            costs.push(self.mdp.cost()[(s, a)]);
            if t < horizon {
                s = self.next_state[s][a].sample(rng);
            }
        }
        Trajectory { states, actions, costs, horizon }
    }
}

pub fn trajectory_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn sample_trajectory(mdp: &FiniteMdp, theta: &SoftmaxParams, seed: u64) -> Result<Trajectory> {
    let policy = softmax_policy(theta)?;
    Ok(TrajectorySampler::new(mdp, &policy)?.sample(&mut trajectory_rng(seed, 0)))
}

/// `c(tau) sum_t (e_{a_t} - pi(s_t))` in the flat layout of [`SoftmaxParams::to_flat`].
pub fn reinforce_gradient(traj: &Trajectory, theta: &SoftmaxParams) -> Result<DVector<f64>> {
    let policy = softmax_policy(theta)?;
    score_times_cost(traj, &policy)
}

fn score_times_cost(traj: &Trajectory, policy: &StochasticPolicy) -> Result<DVector<f64>> {
    let k = policy.n_actions();
    let mut score = DVector::zeros(policy.n_states() * k);
    for (&s, &a) in traj.states.iter().zip(&traj.actions) {
        if s >= policy.n_states() || a >= k {
            return Err(Error::InvalidInput(format!("trajectory pair ({s}, {a}) outside the policy table")));
        }
        if policy.prob(s, a) <= 0.0 {
            return Err(Error::ZeroProbabilityAction { state: s, action: a });
        }
        for j in 0..k {
            score[s * k + j] -= policy.prob(s, j);
        }
        score[s * k + a] += 1.0;
    }
    Ok(score * traj.total_cost())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReinforceEstimate {
    pub mean: DVector<f64>,
    pub std_err: DVector<f64>,
    pub n_samples: usize,
}

/// Sample mean and componentwise standard error of the estimator over
/// `n_samples` trajectories; trajectory `i` uses stream `i` of `seed`.
pub fn reinforce_estimate(mdp: &FiniteMdp, theta: &SoftmaxParams, n_samples: usize, seed: u64) -> Result<ReinforceEstimate> {
    if n_samples < 2 {
        return Err(Error::InvalidInput("need at least two samples".into()));
    }
    let policy = softmax_policy(theta)?;
    let sampler = TrajectorySampler::new(mdp, &policy)?;
    let samples: Vec<DVector<f64>> = (0..n_samples)
        .into_par_iter()
        .map(|i| score_times_cost(&sampler.sample(&mut trajectory_rng(seed, i)), &policy))
        .collect::<Result<_>>()?;
    let dim = policy.n_states() * policy.n_actions();
    let mut mean = DVector::zeros(dim);
    for g in &samples {
        mean += g;
    }
    mean /= n_samples as f64;
    let mut var = DVector::zeros(dim);
    for g in &samples {
        let d = g - &mean;
        var += d.component_mul(&d);
    }
    let std_err = (var / ((n_samples - 1) as f64 * n_samples as f64)).map(f64::sqrt);
    Ok(ReinforceEstimate { mean, std_err, n_samples })
}
