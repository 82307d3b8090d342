//! Finite-horizon newsvendor with backlogging under base-stock policies.
//!
//! Period `t` starts with inventory `s_t`, orders `a_t = max(0, theta_t - s_t)`,
//! then demand `w_t` arrives: `s_{t+1} = s_t + a_t - w_t`. The period cost is
//! `c a_t + r(s_{t+1})` with `r(x) = p max(0, -x) + b max(0, x)`.
//!
//! Monte Carlo path `i` under seed `k` always draws from ChaCha stream `i` of
//! `seed_from_u64(k)`, so estimates do not depend on the rayon pool size.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::optimize::Objective;

/// Distance below which a path is treated as sitting on a kink of the cost.
pub const KINK_TOL: f64 = 1e-12;
/// Kink-hit paths are redrawn; more than this fraction of draws is an error.
pub const MAX_KINK_RATE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DemandLaw {
    /// `U[0, w_max]`.
    Uniform,
    Constant(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitLaw {
    Uniform { lo: f64, hi: f64 },
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct InventoryProblem {
    pub horizon: usize,
    pub order_cost: f64,
    pub holding_cost: f64,
    pub backlog_cost: f64,
    pub demand_max: f64,
    pub demand_law: DemandLaw,
    pub init_law: InitLaw,
}

impl Default for InventoryProblem {
    fn default() -> Self {
        Self {
            horizon: 5,
            order_cost: 1.0,
            holding_cost: 1.0,
            backlog_cost: 2.0,
            demand_max: 10.0,
            demand_law: DemandLaw::Uniform,
            init_law: InitLaw::Uniform { lo: 0.0, hi: 5.0 },
        }
    }
}

impl InventoryProblem {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidInput("horizon must be at least 1".into()));
        }
        let costs = [self.order_cost, self.holding_cost, self.backlog_cost];
        if costs.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(Error::InvalidInput("costs c, b, p must be positive".into()));
        }
        if !(self.backlog_cost > self.order_cost) {
            return Err(Error::InvalidInput(format!(
                "backlog cost {} must exceed order cost {}",
                self.backlog_cost, self.order_cost
            )));
        }
        if !(self.demand_max.is_finite() && self.demand_max > 0.0) {
            return Err(Error::InvalidInput("demand_max must be positive".into()));
        }
        if let DemandLaw::Constant(w) = self.demand_law {
            if !(0.0..=self.demand_max).contains(&w) {
                return Err(Error::InvalidInput(format!("constant demand {w} outside [0, w_max]")));
            }
        }
        match self.init_law {
            InitLaw::Uniform { lo, hi } if !(lo.is_finite() && hi.is_finite() && lo < hi) => {
                Err(Error::InvalidInput("initial inventory range must satisfy lo < hi".into()))
            }
            InitLaw::Constant(x) if !x.is_finite() => Err(Error::NonFinite("initial inventory".into())),
            _ => Ok(()),
        }
    }

    pub fn scale_costs(&self, factor: f64) -> Self {
        Self {
            order_cost: self.order_cost * factor,
            holding_cost: self.holding_cost * factor,
            backlog_cost: self.backlog_cost * factor,
            ..self.clone()
        }
    }

    /// `r(x) = p max(0, -x) + b max(0, x)`.
    pub fn stage_penalty(&self, x: f64) -> f64 {
        self.backlog_cost * (-x).max(0.0) + self.holding_cost * x.max(0.0)
    }

    /// `r'(x)` away from zero.
    pub fn stage_penalty_slope(&self, x: f64) -> f64 {
        if x > 0.0 {
            self.holding_cost
        } else {
            -self.backlog_cost
        }
    }

    /// Single-period optimal order-up-to level for uniform demand,
    /// `w_max (p - c) / (p + b)`.
    pub fn newsvendor_level(&self) -> f64 {
        self.demand_max * (self.backlog_cost - self.order_cost) / (self.backlog_cost + self.holding_cost)
    }
}

/// Order-up-to levels `theta_1..theta_H`.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseStock(pub DVector<f64>);

impl BaseStock {
    pub fn constant(horizon: usize, level: f64) -> Self {
        Self(DVector::from_element(horizon, level))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodePath {
    /// `s_1..s_{H+1}`.
    pub states: Vec<f64>,
    pub orders: Vec<f64>,
    pub demands: Vec<f64>,
    pub total_cost: f64,
}

fn check_episode(prob: &InventoryProblem, theta: &BaseStock, demands: &[f64], s1: f64) -> Result<()> {
    let h = prob.horizon;
    if theta.0.len() != h {
        return Err(Error::DimensionMismatch { context: "base-stock levels", expected: h, got: theta.0.len() });
    }
    if demands.len() != h {
        return Err(Error::DimensionMismatch { context: "demands", expected: h, got: demands.len() });
    }
    if let Some(w) = demands.iter().find(|w| !(0.0..=prob.demand_max).contains(*w)) {
        return Err(Error::InvalidInput(format!("demand {w} outside [0, {}]", prob.demand_max)));
    }
    if !s1.is_finite() || theta.0.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("episode inputs".into()));
    }
    Ok(())
}

pub fn simulate_episode(prob: &InventoryProblem, theta: &BaseStock, demands: &[f64], s1: f64) -> Result<EpisodePath> {
    check_episode(prob, theta, demands, s1)?;
    let h = prob.horizon;
    let mut states = Vec::with_capacity(h + 1);
    let mut orders = Vec::with_capacity(h);
    let mut s = s1;
    let mut total = 0.0;
    states.push(s);
    for t in 0..h {
        let a = (theta.0[t] - s).max(0.0);
        s = s + a - demands[t];
        total += prob.order_cost * a + prob.stage_penalty(s);
        orders.push(a);
        states.push(s);
    }
    Ok(EpisodePath { states, orders, demands: demands.to_vec(), total_cost: total })
}

/// Derivative of the episode cost in `theta` for fixed demands.
///
/// Component `i` is 0 when `s_i > theta_i`. Otherwise, with `tau` the next
/// period that orders, it is `sum_{h=i+1}^{tau} r'(s_h)`, or
/// `c + sum_{h=i+1}^{H+1} r'(s_h)` when no later period orders.
pub fn pathwise_gradient(prob: &InventoryProblem, theta: &BaseStock, demands: &[f64], s1: f64) -> Result<DVector<f64>> {
    let path = simulate_episode(prob, theta, demands, s1)?;
    let h = prob.horizon;
    let s = &path.states;
    for t in 0..h {
        if (s[t] - theta.0[t]).abs() <= KINK_TOL {
            return Err(Error::KinkHit { period: t + 1 });
        }
    }
    for (t, x) in s.iter().enumerate().skip(1) {
        if x.abs() <= KINK_TOL {
            return Err(Error::KinkHit { period: t });
        }
    }
    let orders_at = |t: usize| s[t] < theta.0[t];
    let mut grad = DVector::zeros(h);
    for i in 0..h {
        if !orders_at(i) {
            continue;
        }
        let mut g = 0.0;
        let mut reordered = false;
        for j in i + 1..=h {
            g += prob.stage_penalty_slope(s[j]);
            if j < h && orders_at(j) {
                reordered = true;
                break;
            }
        }
        if !reordered {
            g += prob.order_cost;
        }
        grad[i] = g;
    }
    Ok(grad)
}

pub fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

/// Draws `(s_1, w_1..w_H)`.
pub fn sample_path(prob: &InventoryProblem, rng: &mut impl Rng) -> (f64, Vec<f64>) {
    let s1 = match prob.init_law {
        InitLaw::Uniform { lo, hi } => rng.random_range(lo..hi),
        InitLaw::Constant(x) => x,
    };
    let demands = (0..prob.horizon)
        .map(|_| match prob.demand_law {
            DemandLaw::Uniform => rng.random_range(0.0..prob.demand_max),
            DemandLaw::Constant(w) => w,
        })
        .collect();
    (s1, demands)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub mean: DVector<f64>,
    pub std_err: DVector<f64>,
    /// Paths redrawn because they hit a kink.
    pub kinks: usize,
}

fn mean_and_se(values: impl Iterator<Item = f64> + Clone, n: usize) -> McEstimate {
    let mean = values.clone().sum::<f64>() / n as f64;
    let std_err = if n > 1 {
        let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    McEstimate { mean, std_err }
}

fn check_mc(prob: &InventoryProblem, theta: &BaseStock, n_paths: usize) -> Result<()> {
    prob.validate()?;
    if n_paths == 0 {
        return Err(Error::InvalidInput("n_paths must be at least 1".into()));
    }
    if theta.0.len() != prob.horizon {
        return Err(Error::DimensionMismatch { context: "base-stock levels", expected: prob.horizon, got: theta.0.len() });
    }
    Ok(())
}

/// Sample mean and standard error of the episode cost.
pub fn mc_cost(prob: &InventoryProblem, theta: &BaseStock, n_paths: usize, seed: u64) -> Result<McEstimate> {
    check_mc(prob, theta, n_paths)?;
    let costs: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let (s1, w) = sample_path(prob, &mut path_rng(seed, i));
            simulate_episode(prob, theta, &w, s1).map(|p| p.total_cost)
        })
        .collect::<Result<_>>()?;
    Ok(mean_and_se(costs.iter().copied(), n_paths))
}

/// Average of [`pathwise_gradient`] over the same paths [`mc_cost`] uses.
pub fn mc_gradient(prob: &InventoryProblem, theta: &BaseStock, n_paths: usize, seed: u64) -> Result<GradientEstimate> {
    check_mc(prob, theta, n_paths)?;
    let max_redraws = ((n_paths as f64 * MAX_KINK_RATE).ceil() as usize).max(1);
    let per_path: Vec<(DVector<f64>, usize)> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = path_rng(seed, i);
            let mut kinks = 0;
            loop {
                let (s1, w) = sample_path(prob, &mut rng);
                match pathwise_gradient(prob, theta, &w, s1) {
                    Ok(g) => return Ok((g, kinks)),
                    Err(Error::KinkHit { .. }) if kinks < max_redraws => kinks += 1,
                    Err(Error::KinkHit { .. }) => {
                        return Err(Error::ExcessiveKinkRate { kinks: kinks + 1, draws: n_paths + kinks + 1 })
                    }
                    Err(e) => return Err(e),
                }
            }
        })
        .collect::<Result<_>>()?;
    let kinks: usize = per_path.iter().map(|(_, k)| k).sum();
    if kinks as f64 > MAX_KINK_RATE * (n_paths + kinks) as f64 {
        return Err(Error::ExcessiveKinkRate { kinks, draws: n_paths + kinks });
    }
    let h = prob.horizon;
    let mut mean = DVector::zeros(h);
    let mut std_err = DVector::zeros(h);
    for i in 0..h {
        let est = mean_and_se(per_path.iter().map(|(g, _)| g[i]), n_paths);
        mean[i] = est.mean;
        std_err[i] = est.std_err;
    }
    Ok(GradientEstimate { mean, std_err, kinks })
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Golden-section search for the minimizer of a unimodal `f` on `[lo, hi]`.
pub fn golden_section<F: FnMut(f64) -> f64>(mut f: F, lo: f64, hi: f64, tol: f64) -> Result<f64> {
    if !(lo < hi) || !(tol > 0.0) {
        return Err(Error::InvalidInput(format!("golden section needs lo < hi and tol > 0 (got [{lo}, {hi}], {tol})")));
    }
    let mut eval = |x: f64| {
        let v = f(x);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(format!("objective at {x}")))
        }
    };
    let (mut a, mut b) = (lo, hi);
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let mut f1 = eval(x1)?;
    let mut f2 = eval(x2)?;
    while b - a > 2.0 * tol {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = eval(x1)?;
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = eval(x2)?;
        }
    }
    Ok(0.5 * (a + b))
}

/// Cost from ordering period `stage` (0-based) onward when the post-order
/// level there is `level` and later periods follow `theta`.
fn tail_cost(prob: &InventoryProblem, theta: &BaseStock, stage: usize, level: f64, demands: &[f64]) -> f64 {
    let mut s = level - demands[stage];
    let mut total = prob.order_cost * level + prob.stage_penalty(s);
    for t in stage + 1..prob.horizon {
        let a = (theta.0[t] - s).max(0.0);
        s = s + a - demands[t];
        total += prob.order_cost * a + prob.stage_penalty(s);
    }
    total
}

/// Monte Carlo estimate of `G(y) = c y + E[r(y - w) + cost-to-go]` at period
/// `stage` (0-based) under the downstream levels in `theta`, with common
/// random numbers across `y` for a given seed.
pub fn stage_objective(
    prob: &InventoryProblem,
    theta: &BaseStock,
    stage: usize,
    level: f64,
    n_paths: usize,
    seed: u64,
) -> Result<McEstimate> {
    check_mc(prob, theta, n_paths)?;
    if stage >= prob.horizon {
        return Err(Error::InvalidInput(format!("stage {stage} outside horizon {}", prob.horizon)));
    }
    let demands = stage_demands(prob, n_paths, seed);
    let costs: Vec<f64> = demands.par_iter().map(|w| tail_cost(prob, theta, stage, level, w)).collect();
    Ok(mean_and_se(costs.iter().copied(), n_paths))
}

fn stage_demands(prob: &InventoryProblem, n_paths: usize, seed: u64) -> Vec<Vec<f64>> {
    (0..n_paths)
        .into_par_iter()
        .map(|i| sample_path(prob, &mut path_rng(seed, i)).1)
        .collect()
}

/// Backward induction over periods `H..1`: each level minimizes the Monte
/// Carlo stage objective by golden section on `[0, w_max H]`; the bracket is
/// doubled once if the minimizer lands on its upper end.
pub fn optimal_basestock(prob: &InventoryProblem, mc_per_eval: usize, seed: u64) -> Result<BaseStock> {
    prob.validate()?;
    if mc_per_eval == 0 {
        return Err(Error::InvalidInput("mc_per_eval must be at least 1".into()));
    }
    let h = prob.horizon;
    let mut theta = BaseStock(DVector::zeros(h));
    for stage in (0..h).rev() {
        let demands = stage_demands(prob, mc_per_eval, seed.wrapping_add(stage as u64));
        let objective = |level: f64| {
            let costs: Vec<f64> = demands.par_iter().map(|w| tail_cost(prob, &theta, stage, level, w)).collect();
            costs.iter().sum::<f64>() / mc_per_eval as f64
        };
        let mut upper = prob.demand_max * h as f64;
        let mut best = None;
        for _ in 0..2 {
            let tol = 1e-7 * upper;
            let x = golden_section(objective, 0.0, upper, tol)?;
            if x < upper - 10.0 * tol {
                best = Some(x);
                break;
            }
            upper *= 2.0;
        }
        theta.0[stage] = best.ok_or(Error::BracketExhausted { upper })?;
    }
    Ok(theta)
}

/// Sample-average objective over a fixed seed; `theta` is kept nonnegative.
pub struct InventoryObjective<'a> {
    pub problem: &'a InventoryProblem,
    pub n_paths: usize,
    pub seed: u64,
    pub optimum: Option<f64>,
}

impl Objective for InventoryObjective<'_> {
    fn dim(&self) -> usize {
        self.problem.horizon
    }

    fn loss(&self, theta: &DVector<f64>) -> Result<f64> {
        Ok(mc_cost(self.problem, &BaseStock(theta.clone()), self.n_paths, self.seed)?.mean)
    }

    fn gradient(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(mc_gradient(self.problem, &BaseStock(theta.clone()), self.n_paths, self.seed)?.mean)
    }

    fn project(&self, theta: &mut DVector<f64>) {
        theta.iter_mut().for_each(|x| *x = x.max(0.0));
    }

    fn oracle_optimum(&self) -> Option<f64> {
        self.optimum
    }
}
