//! Gradient descent with backtracking line search.
//!
//! The line search starts from `alpha = 1 / ||grad||` and shrinks by `beta`
//! until `l(theta - t grad) <= l(theta) - (t/2) ||grad||^2`. Steps landing on
//! points where the objective reports an error (an unstable LQR gain, say)
//! count as failed Armijo tests.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use nalgebra::DVector;

use crate::error::{Error, Result};

/// A differentiable loss over a flat parameter vector.
pub trait Objective {
    fn dim(&self) -> usize;

    fn loss(&self, theta: &DVector<f64>) -> Result<f64>;

    fn gradient(&self, theta: &DVector<f64>) -> Result<DVector<f64>>;

    /// In-place projection onto the feasible set, applied after every step.
    fn project(&self, _theta: &mut DVector<f64>) {}

    fn oracle_optimum(&self) -> Option<f64> {
        None
    }
}

/// Objective assembled from closures, with an optional componentwise lower bound.
pub struct FnObjective<L, G> {
    pub dim: usize,
    pub loss: L,
    pub gradient: G,
    pub lower_bound: Option<f64>,
    pub oracle_optimum: Option<f64>,
}

impl<L, G> FnObjective<L, G>
where
    L: Fn(&DVector<f64>) -> Result<f64>,
    G: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    pub fn new(dim: usize, loss: L, gradient: G) -> Self {
        Self { dim, loss, gradient, lower_bound: None, oracle_optimum: None }
    }

    pub fn with_lower_bound(mut self, bound: f64) -> Self {
        self.lower_bound = Some(bound);
        self
    }

    pub fn with_oracle(mut self, optimum: f64) -> Self {
        self.oracle_optimum = Some(optimum);
        self
    }
}

impl<L, G> Objective for FnObjective<L, G>
where
    L: Fn(&DVector<f64>) -> Result<f64>,
    G: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn loss(&self, theta: &DVector<f64>) -> Result<f64> {
        (self.loss)(theta)
    }

    fn gradient(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        (self.gradient)(theta)
    }

    fn project(&self, theta: &mut DVector<f64>) {
        if let Some(lo) = self.lower_bound {
            theta.iter_mut().for_each(|x| *x = x.max(lo));
        }
    }

    fn oracle_optimum(&self) -> Option<f64> {
        self.oracle_optimum
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearchConfig {
    pub beta: f64,
    pub max_halvings: usize,
}

impl Default for LineSearchConfig {
    fn default() -> Self {
        Self { beta: 0.5, max_halvings: 60 }
    }
}

impl LineSearchConfig {
    pub fn new(beta: f64, max_halvings: usize) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::InvalidInput(format!("line search beta {beta} not in (0,1)")));
        }
        Ok(Self { beta, max_halvings })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineSearchOutcome {
    pub step: f64,
    pub theta: DVector<f64>,
    pub loss: f64,
    /// Number of times the step was shrunk.
    pub shrinks: usize,
}

/// Sufficient-decrease test. With projection the decrease is measured along
/// the projected step; without it this is exactly `(t/2) ||grad||^2`.
pub fn armijo_holds(
    loss_before: f64,
    loss_after: f64,
    grad: &DVector<f64>,
    theta_before: &DVector<f64>,
    theta_after: &DVector<f64>,
) -> bool {
    let decrease = 0.5 * grad.dot(&(theta_before - theta_after));
    loss_after <= loss_before - decrease
}

/// Backtracking line search starting at `alpha = 1 / ||grad||_2`.
pub fn backtracking_line_search<O: Objective + ?Sized>(
    obj: &O,
    theta: &DVector<f64>,
    loss: f64,
    grad: &DVector<f64>,
    cfg: &LineSearchConfig,
) -> Result<LineSearchOutcome> {
    let norm = grad.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::InvalidInput(format!("line search needs a nonzero finite gradient (norm {norm})")));
    }
    let mut step = 1.0 / norm;
    for shrinks in 0..=cfg.max_halvings {
        let mut candidate = theta - grad * step;
        obj.project(&mut candidate);
        if let Ok(new_loss) = obj.loss(&candidate) {
            if new_loss.is_finite() && armijo_holds(loss, new_loss, grad, theta, &candidate) {
                return Ok(LineSearchOutcome { step, theta: candidate, loss: new_loss, shrinks });
            }
        }
        if shrinks < cfg.max_halvings {
            step *= cfg.beta;
        }
    }
    Err(Error::LineSearch { halvings: cfg.max_halvings, last_step: step })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradTol {
    /// Stop when `||grad|| <= c (1 + |loss|)`.
    RelativeToLoss(f64),
    Absolute(f64),
}

impl GradTol {
    pub fn threshold(&self, loss: f64) -> f64 {
        match *self {
            GradTol::RelativeToLoss(c) => c * (1.0 + loss.abs()),
            GradTol::Absolute(t) => t,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopRule {
    pub grad_tol: GradTol,
    pub max_iters: usize,
}

impl Default for StopRule {
    fn default() -> Self {
        Self { grad_tol: GradTol::RelativeToLoss(1e-8), max_iters: 10_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunRow {
    pub iteration: usize,
    pub loss: f64,
    /// `loss - l*`, NaN when no oracle value is known.
    pub optimality_gap: f64,
    pub grad_norm: f64,
    /// Step taken from this iterate; 0 on the final row.
    pub step_size: f64,
    pub wall_time_s: f64,
}

pub const RUN_CSV_HEADER: &str = "iteration,loss,optimality_gap,grad_norm,step_size,wall_time_s";

/// Twelve significant digits, locale independent.
pub fn format_sig12(x: f64) -> String {
    if x.is_nan() {
        "NaN".to_string()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".to_string() } else { "-inf".to_string() }
    } else {
        format!("{x:.11e}")
    }
}

/// Per-iteration trace of a descent run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunRecord {
    pub rows: Vec<RunRow>,
}

impl RunRecord {
    pub fn losses(&self) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().map(|r| r.loss)
    }

    pub fn last(&self) -> Option<&RunRow> {
        self.rows.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.rows.len() + 1));
        out.push_str(RUN_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.iteration,
                format_sig12(r.loss),
                format_sig12(r.optimality_gap),
                format_sig12(r.grad_norm),
                format_sig12(r.step_size),
                format_sig12(r.wall_time_s),
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    GradTol,
    MaxIters,
    /// The last accepted step moved `theta` by at most `1e-12 (1 + ||theta||)`
    /// or did not lower the loss in floating point.
    Stalled,
}

#[derive(Debug, Clone)]
pub struct DescentRun {
    pub theta: DVector<f64>,
    pub record: RunRecord,
    pub termination: Termination,
}

/// A failed run keeps everything computed before the failure.
#[derive(Debug, Clone)]
pub struct DescentFailure {
    pub error: Error,
    pub theta: DVector<f64>,
    pub record: RunRecord,
}

impl std::fmt::Display for DescentFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "descent stopped after {} rows: {}", self.record.rows.len(), self.error)
    }
}

impl std::error::Error for DescentFailure {}

/// `theta_{k+1} = proj(theta_k - t_k grad l(theta_k))` with backtracking `t_k`.
pub fn gradient_descent<O: Objective + ?Sized>(
    obj: &O,
    theta0: &DVector<f64>,
    cfg: &LineSearchConfig,
    stop: &StopRule,
) -> std::result::Result<DescentRun, DescentFailure> {
    let start = Instant::now();
    let oracle = obj.oracle_optimum();
    let mut record = RunRecord::default();
    let mut theta = theta0.clone();
    obj.project(&mut theta);

    let fail = |error: Error, theta: DVector<f64>, record: RunRecord| DescentFailure { error, theta, record };
    if theta.len() != obj.dim() {
        let err = Error::DimensionMismatch { context: "initial parameters", expected: obj.dim(), got: theta.len() };
        return Err(fail(err, theta, record));
    }
    let mut loss = match obj.loss(&theta) {
        Ok(l) => l,
        Err(e) => return Err(fail(e, theta, record)),
    };
    let mut iteration = 0;
    let mut stalled = false;
    loop {
        let grad = match obj.gradient(&theta) {
            Ok(g) => g,
            Err(e) => return Err(fail(e, theta, record)),
        };
        let grad_norm = grad.norm();
        let mut row = RunRow {
            iteration,
            loss,
            optimality_gap: oracle.map_or(f64::NAN, |l| loss - l),
            grad_norm,
            step_size: 0.0,
            wall_time_s: 0.0,
        };
        let termination = if grad_norm <= stop.grad_tol.threshold(loss) {
            Some(Termination::GradTol)
        } else if iteration >= stop.max_iters {
            Some(Termination::MaxIters)
        } else if stalled {
            Some(Termination::Stalled)
        } else {
            None
        };
        if let Some(termination) = termination {
            row.wall_time_s = start.elapsed().as_secs_f64();
            record.rows.push(row);
            return Ok(DescentRun { theta, record, termination });
        }
        match backtracking_line_search(obj, &theta, loss, &grad, cfg) {
            Ok(step) => {
                row.step_size = step.step;
                row.wall_time_s = start.elapsed().as_secs_f64();
                record.rows.push(row);
                let moved = (&step.theta - &theta).norm();
                stalled = moved <= 1e-12 * (1.0 + theta.norm()) || step.loss >= loss;
                theta = step.theta;
                loss = step.loss;
            }
            Err(e) => {
                row.wall_time_s = start.elapsed().as_secs_f64();
                record.rows.push(row);
                return Err(fail(e, theta, record));
            }
        }
        iteration += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSchedule {
    Constant(f64),
    /// `a / (k + 1)`.
    Harmonic(f64),
}

impl StepSchedule {
    pub fn step(&self, k: usize) -> f64 {
        match *self {
            StepSchedule::Constant(a) => a,
            StepSchedule::Harmonic(a) => a / (k as f64 + 1.0),
        }
    }
}

/// Stochastic-gradient mode: no line search, no monotonicity guarantee.
///
/// `sample_gradient(theta, k)` draws the `k`-th noisy gradient; `loss`, when
/// given, is only used to fill the trace.
pub fn stochastic_gradient_descent<G, L>(
    theta0: &DVector<f64>,
    schedule: StepSchedule,
    iters: usize,
    mut sample_gradient: G,
    loss: Option<L>,
    oracle_optimum: Option<f64>,
) -> Result<DescentRun>
where
    G: FnMut(&DVector<f64>, usize) -> Result<DVector<f64>>,
    L: Fn(&DVector<f64>) -> Result<f64>,
{
    let start = Instant::now();
    let mut theta = theta0.clone();
    let mut record = RunRecord::default();
    for k in 0..=iters {
        let l = match &loss {
            Some(f) => f(&theta)?,
            None => f64::NAN,
        };
        let grad = sample_gradient(&theta, k)?;
        let step = if k < iters { schedule.step(k) } else { 0.0 };
        record.rows.push(RunRow {
            iteration: k,
            loss: l,
            optimality_gap: oracle_optimum.map_or(f64::NAN, |o| l - o),
            grad_norm: grad.norm(),
            step_size: step,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        if k < iters {
            theta -= grad * step;
        }
    }
    Ok(DescentRun { theta, record, termination: Termination::MaxIters })
}
