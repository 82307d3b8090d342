//! Discounted linear-quadratic control with linear state feedback `a = theta s`.
//!
//! Dynamics `s' = A s + B a + w` with `w ~ (0, W)`, per-step cost
//! `s^T K s + a^T R a`, initial state with covariance `Sigma_0`.
//! For a gain with closed loop `M = A + B theta` the cost-to-go is
//! `J(s) = s^T L s + gamma / (1 - gamma) tr(L W)` where
//! `L = K + theta^T R theta + gamma M^T L M`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::optimize::Objective;

/// Margin used by [`is_stable`]: the operator norm must be below `1 - STABILITY_MARGIN`.
pub const STABILITY_MARGIN: f64 = 1e-12;
const LYAPUNOV_RESIDUAL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct LqrSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    r: DMatrix<f64>,
    state_cost: DMatrix<f64>,
    gamma: f64,
    noise_cov: DMatrix<f64>,
    init_cov: DMatrix<f64>,
}

fn is_square(m: &DMatrix<f64>, n: usize) -> bool {
    m.nrows() == n && m.ncols() == n
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    (m - m.transpose()).amax() <= 1e-10 * (1.0 + m.amax())
}

fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigenvalues().min()
}

impl LqrSystem {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        r: DMatrix<f64>,
        state_cost: DMatrix<f64>,
        gamma: f64,
        noise_cov: DMatrix<f64>,
        init_cov: DMatrix<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        let k = b.ncols();
        if n == 0 || k == 0 || !is_square(&a, n) || b.nrows() != n {
            return Err(Error::InvalidInput("A must be n x n and B n x k".into()));
        }
        if !is_square(&r, k) || !is_square(&state_cost, n) || !is_square(&noise_cov, n) || !is_square(&init_cov, n) {
            return Err(Error::InvalidInput("cost and covariance matrices have wrong shapes".into()));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidInput(format!("discount {gamma} not in (0,1)")));
        }
        for (name, m) in [("R", &r), ("K", &state_cost)] {
            if !is_symmetric(m) || min_symmetric_eigenvalue(m) <= 0.0 {
                return Err(Error::InvalidInput(format!("{name} must be symmetric positive definite")));
            }
        }
        for (name, m) in [("noise covariance", &noise_cov), ("initial covariance", &init_cov)] {
            if !is_symmetric(m) || min_symmetric_eigenvalue(m) < -1e-12 {
                return Err(Error::InvalidInput(format!("{name} must be symmetric positive semidefinite")));
            }
        }
        let sys = Self { a, b, r, state_cost, gamma, noise_cov, init_cov };
        if !sys.is_controllable() {
            return Err(Error::InvalidInput("(A, B) is not controllable".into()));
        }
        Ok(sys)
    }

    /// Identity `R`, `K`, noise and initial covariances.
    pub fn with_identity_costs(a: DMatrix<f64>, b: DMatrix<f64>, gamma: f64) -> Result<Self> {
        let n = a.nrows();
        let k = b.ncols();
        Self::new(
            a,
            b,
            DMatrix::identity(k, k),
            DMatrix::identity(n, n),
            gamma,
            DMatrix::identity(n, n),
            DMatrix::identity(n, n),
        )
    }

    pub fn with_noise_cov(&self, noise_cov: DMatrix<f64>) -> Result<Self> {
        Self::new(
            self.a.clone(),
            self.b.clone(),
            self.r.clone(),
            self.state_cost.clone(),
            self.gamma,
            noise_cov,
            self.init_cov.clone(),
        )
    }

    pub fn n_states(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.b.ncols()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn state_cost(&self) -> &DMatrix<f64> {
        &self.state_cost
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn noise_cov(&self) -> &DMatrix<f64> {
        &self.noise_cov
    }

    pub fn init_cov(&self) -> &DMatrix<f64> {
        &self.init_cov
    }

    fn is_controllable(&self) -> bool {
        let n = self.n_states();
        let k = self.n_inputs();
        let mut ctrb = DMatrix::zeros(n, n * k);
        let mut block = self.b.clone();
        for i in 0..n {
            ctrb.view_mut((0, i * k), (n, k)).copy_from(&block);
            block = &self.a * block;
        }
        let sv = ctrb.singular_values();
        let tol = 1e-10 * sv.max().max(1.0);
        sv.iter().filter(|&&x| x > tol).count() == n
    }
}

/// Feedback gain `theta` (`k x n`).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGain(pub DMatrix<f64>);

impl LinearGain {
    pub fn zeros(sys: &LqrSystem) -> Self {
        Self(DMatrix::zeros(sys.n_inputs(), sys.n_states()))
    }

    /// Column-major flattening, matching nalgebra storage.
    pub fn to_flat(&self) -> DVector<f64> {
        DVector::from_column_slice(self.0.as_slice())
    }

    pub fn from_flat(sys: &LqrSystem, flat: &DVector<f64>) -> Result<Self> {
        let (k, n) = (sys.n_inputs(), sys.n_states());
        if flat.len() != k * n {
            return Err(Error::DimensionMismatch { context: "gain", expected: k * n, got: flat.len() });
        }
        Ok(Self(DMatrix::from_column_slice(k, n, flat.as_slice())))
    }

    fn check(&self, sys: &LqrSystem) -> Result<()> {
        if self.0.nrows() != sys.n_inputs() || self.0.ncols() != sys.n_states() {
            return Err(Error::DimensionMismatch {
                context: "gain",
                expected: sys.n_inputs() * sys.n_states(),
                got: self.0.len(),
            });
        }
        if self.0.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("gain".into()));
        }
        Ok(())
    }
}

/// `J(s) = s^T L s + offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueMatrix {
    pub l: DMatrix<f64>,
    pub offset: f64,
}

impl ValueMatrix {
    pub fn value(&self, s: &DVector<f64>) -> f64 {
        (s.transpose() * &self.l * s)[(0, 0)] + self.offset
    }
}

pub fn closed_loop(sys: &LqrSystem, gain: &LinearGain) -> DMatrix<f64> {
    sys.a() + sys.b() * &gain.0
}

pub fn operator_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().singular_values().max()
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Membership in `{theta : ||A + B theta||_2 < 1}` (operator norm).
pub fn is_stable(sys: &LqrSystem, gain: &LinearGain) -> bool {
    gain.check(sys).is_ok() && operator_norm(&closed_loop(sys, gain)) < 1.0 - STABILITY_MARGIN
}

/// Weaker requirement used for evaluation: spectral radius below one.
pub fn is_evaluable(sys: &LqrSystem, gain: &LinearGain) -> bool {
    gain.check(sys).is_ok() && spectral_radius(&closed_loop(sys, gain)) < 1.0
}

/// Solves `X = Q + gamma F X F^T` by vectorization.
pub fn discounted_lyapunov(f: &DMatrix<f64>, q: &DMatrix<f64>, gamma: f64) -> Result<DMatrix<f64>> {
    let n = f.nrows();
    let mut system = f.kronecker(f) * (-gamma);
    for i in 0..n * n {
        system[(i, i)] += 1.0;
    }
    let rhs = DVector::from_column_slice(q.as_slice());
    let x = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("discounted Lyapunov equation".into()))?;
    let x = DMatrix::from_column_slice(n, n, x.as_slice());
    let x = (&x + x.transpose()) * 0.5;
    let residual = (&x - q - f * &x * f.transpose() * gamma).amax();
    if residual > LYAPUNOV_RESIDUAL_TOL * (1.0 + x.amax()) {
        return Err(Error::Singular(format!("Lyapunov residual {residual:e}")));
    }
    Ok(x)
}

fn require_evaluable(sys: &LqrSystem, gain: &LinearGain) -> Result<DMatrix<f64>> {
    gain.check(sys)?;
    let m = closed_loop(sys, gain);
    let radius = spectral_radius(&m);
    if !(radius < 1.0) {
        return Err(Error::UnstableGain(format!("spectral radius {radius} for gain {}", gain.0)));
    }
    Ok(m)
}

/// Value matrix `L = K + theta^T R theta + gamma M^T L M` and noise offset
/// `gamma / (1 - gamma) tr(L W)`.
pub fn evaluate_gain(sys: &LqrSystem, gain: &LinearGain) -> Result<ValueMatrix> {
    let m = require_evaluable(sys, gain)?;
    let stage = sys.state_cost() + gain.0.transpose() * sys.r() * &gain.0;
    let l = discounted_lyapunov(&m.transpose(), &stage, sys.gamma())?;
    let offset = sys.gamma() / (1.0 - sys.gamma()) * (&l * sys.noise_cov()).trace();
    Ok(ValueMatrix { l, offset })
}

/// `l(theta) = tr(L Sigma_0) + offset`.
pub fn lqr_cost(sys: &LqrSystem, gain: &LinearGain) -> Result<f64> {
    let v = evaluate_gain(sys, gain)?;
    Ok((&v.l * sys.init_cov()).trace() + v.offset)
}

/// `Q_theta(s, a)` including the state cost and noise constants.
pub fn q_value(sys: &LqrSystem, value: &ValueMatrix, s: &DVector<f64>, a: &DVector<f64>) -> f64 {
    let next = sys.a() * s + sys.b() * a;
    let quad = |x: &DVector<f64>, m: &DMatrix<f64>| (x.transpose() * m * x)[(0, 0)];
    let noise = (&value.l * sys.noise_cov()).trace();
    quad(s, sys.state_cost()) + quad(a, sys.r()) + sys.gamma() * (quad(&next, &value.l) + noise + value.offset)
}

/// Greedy gain `-gamma (R + gamma B^T L B)^{-1} B^T L A`.
pub fn policy_iteration_step(sys: &LqrSystem, gain: &LinearGain) -> Result<LinearGain> {
    let v = evaluate_gain(sys, gain)?;
    greedy_gain(sys, &v.l)
}

fn greedy_gain(sys: &LqrSystem, l: &DMatrix<f64>) -> Result<LinearGain> {
    let g = sys.gamma();
    let bt_l = sys.b().transpose() * l;
    let h = sys.r() + &bt_l * sys.b() * g;
    let rhs = &bt_l * sys.a() * (-g);
    h.cholesky()
        .map(|c| LinearGain(c.solve(&rhs)))
        .ok_or_else(|| Error::Singular("R + gamma B^T L B".into()))
}

/// Riccati-style policy iteration until successive gains agree to 1e-12 (Frobenius).
pub fn optimal_gain(sys: &LqrSystem) -> Result<LinearGain> {
    let zero = LinearGain::zeros(sys);
    let mut gain = if is_stable(sys, &zero) {
        zero
    } else {
        let pinv = sys
            .b()
            .clone()
            .pseudo_inverse(1e-12)
            .map_err(|e| Error::Singular(e.to_string()))?;
        let cancel = LinearGain(-(pinv * sys.a()));
        if !is_evaluable(sys, &cancel) {
            return Err(Error::NoStabilizingGain);
        }
        cancel
    };
    let mut best_change = f64::INFINITY;
    let mut stalls = 0;
    for _ in 0..1000 {
        let next = policy_iteration_step(sys, &gain)?;
        let change = (&next.0 - &gain.0).norm();
        gain = next;
        if change <= 1e-12 {
            return Ok(gain);
        }
        // Quadratic convergence ends in round-off; stop once it no longer shrinks.
        if change >= best_change && change <= 1e-9 {
            stalls += 1;
            if stalls >= 3 {
                return Ok(gain);
            }
        }
        best_change = best_change.min(change);
    }
    Err(Error::Singular("LQR policy iteration did not converge".into()))
}

/// Discounted state second moment `Sigma = S_0 + gamma M Sigma M^T` with
/// `S_0 = Sigma_0 + gamma / (1 - gamma) W`.
pub fn state_second_moment(sys: &LqrSystem, gain: &LinearGain) -> Result<DMatrix<f64>> {
    let m = require_evaluable(sys, gain)?;
    let g = sys.gamma();
    let source = sys.init_cov() + sys.noise_cov() * (g / (1.0 - g));
    discounted_lyapunov(&m, &source, g)
}

/// `grad l(theta) = 2 [(R + gamma B^T L B) theta + gamma B^T L A] Sigma`.
pub fn lqr_gradient(sys: &LqrSystem, gain: &LinearGain) -> Result<DMatrix<f64>> {
    let v = evaluate_gain(sys, gain)?;
    let sigma = state_second_moment(sys, gain)?;
    let g = sys.gamma();
    let bt_l = sys.b().transpose() * &v.l;
    let e = (sys.r() + &bt_l * sys.b() * g) * &gain.0 + &bt_l * sys.a() * g;
    Ok(e * sigma * 2.0)
}

/// Seeded default experiment system: `A ~ U[-0.5, 0.5]`, `B ~ U[-1, 1]`,
/// identity costs and covariances.
pub fn random_system(n: usize, k: usize, gamma: f64, seed: u64) -> Result<LqrSystem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..100 {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.5..0.5));
        let b = DMatrix::from_fn(n, k, |_, _| rng.random_range(-1.0..1.0));
        match LqrSystem::with_identity_costs(a, b, gamma) {
            Ok(sys) => return Ok(sys),
            Err(Error::InvalidInput(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::InvalidInput("could not draw a controllable system".into()))
}

/// Random gain with entries `U[-1, 1]`, redrawn (and shrunk) until operator-norm stable.
pub fn random_stable_gain(sys: &LqrSystem, seed: u64) -> Result<LinearGain> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, n) = (sys.n_inputs(), sys.n_states());
    let mut scale = 1.0;
    for attempt in 0..10_000 {
        let gain = LinearGain(DMatrix::from_fn(k, n, |_, _| scale * rng.random_range(-1.0..1.0)));
        if is_stable(sys, &gain) {
            return Ok(gain);
        }
        if attempt % 100 == 99 {
            scale *= 0.5;
        }
    }
    Err(Error::NoStabilizingGain)
}

/// `l(theta)` over flattened gains; unstable gains are reported as errors.
pub struct LqrObjective<'a> {
    pub system: &'a LqrSystem,
    pub optimum: Option<f64>,
}

impl Objective for LqrObjective<'_> {
    fn dim(&self) -> usize {
        self.system.n_inputs() * self.system.n_states()
    }

    fn loss(&self, theta: &DVector<f64>) -> Result<f64> {
        lqr_cost(self.system, &LinearGain::from_flat(self.system, theta)?)
    }

    fn gradient(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        let g = lqr_gradient(self.system, &LinearGain::from_flat(self.system, theta)?)?;
        Ok(DVector::from_column_slice(g.as_slice()))
    }

    fn oracle_optimum(&self) -> Option<f64> {
        self.optimum
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(a: f64, b: f64, gamma: f64, noise: f64) -> LqrSystem {
        let m = |x: f64| DMatrix::from_element(1, 1, x);
        LqrSystem::new(m(a), m(b), m(1.0), m(1.0), gamma, m(noise), m(1.0)).unwrap()
    }

    fn gain(x: f64) -> LinearGain {
        LinearGain(DMatrix::from_element(1, 1, x))
    }

    #[test]
    fn stability_cases() {
        let sys = LqrSystem::with_identity_costs(DMatrix::zeros(2, 2), DMatrix::identity(2, 2), 0.9).unwrap();
        assert!(is_stable(&sys, &LinearGain::zeros(&sys)));
        assert!(!is_stable(&scalar(2.0, 1.0, 0.9, 0.0), &gain(0.0)));
        assert!(is_stable(&scalar(0.5, 1.0, 0.9, 0.0), &gain(0.4)));
    }

    #[test]
    fn operator_norm_is_stricter_than_spectral_radius() {
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 2.0, 0.0, 0.5]);
        let sys = LqrSystem::with_identity_costs(a, DMatrix::identity(2, 2), 0.9).unwrap();
        let zero = LinearGain::zeros(&sys);
        assert!(!is_stable(&sys, &zero));
        assert!(is_evaluable(&sys, &zero));
        assert!(lqr_cost(&sys, &zero).is_ok());
    }

    #[test]
    fn deadbeat_gain_gives_one_step_value() {
        let sys = scalar(0.9, 1.0, 0.9, 0.0);
        let v = evaluate_gain(&sys, &gain(-0.9)).unwrap();
        assert!((v.l[(0, 0)] - (1.0 + 0.81)).abs() < 1e-14);
        assert_eq!(v.offset, 0.0);
    }

    #[test]
    fn scalar_fixed_point() {
        let sys = scalar(0.9, 1.0, 0.9, 0.0);
        let v = evaluate_gain(&sys, &gain(-0.5)).unwrap();
        let expected = 1.25 / (1.0 - 0.9 * 0.16);
        assert!((v.l[(0, 0)] - expected).abs() < 1e-12);
        assert!((lqr_cost(&sys, &gain(-0.5)).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn unstable_gain_is_an_error() {
        let sys = scalar(0.9, 1.0, 0.9, 0.0);
        assert!(matches!(evaluate_gain(&sys, &gain(0.5)), Err(Error::UnstableGain(_))));
        assert!(lqr_gradient(&sys, &gain(0.5)).is_err());
        assert!(policy_iteration_step(&sys, &gain(0.5)).is_err());
    }

    #[test]
    fn scalar_policy_iteration_step_closed_form() {
        let sys = scalar(0.9, 1.0, 0.9, 0.0);
        let l = evaluate_gain(&sys, &gain(-0.5)).unwrap().l[(0, 0)];
        let expected = -0.9 * l * 0.9 / (1.0 + 0.9 * l);
        let next = policy_iteration_step(&sys, &gain(-0.5)).unwrap();
        assert!((next.0[(0, 0)] - expected).abs() < 1e-12);
    }

    #[test]
    fn scalar_optimum_matches_bisection_riccati() {
        // l = 1 + gamma a^2 l - (gamma a b l)^2 / (r + gamma b^2 l)
        let (a, b, g) = (0.9, 1.0, 0.9);
        let f = |l: f64| 1.0 + g * a * a * l - (g * a * b * l).powi(2) / (1.0 + g * b * b * l) - l;
        let (mut lo, mut hi) = (1.0, 100.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let l_star = 0.5 * (lo + hi);
        let theta_star = -g * a * b * l_star / (1.0 + g * b * b * l_star);
        let sys = scalar(a, b, g, 0.0);
        let opt = optimal_gain(&sys).unwrap();
        assert!((opt.0[(0, 0)] - theta_star).abs() < 1e-10);
        let again = policy_iteration_step(&sys, &opt).unwrap();
        assert!((again.0 - &opt.0).norm() < 1e-10);
    }

    #[test]
    fn scalar_gradient_matches_calculus() {
        // l(theta) = (1 + theta^2) / (1 - gamma (a + b theta)^2), noiseless.
        let (a, b, g) = (0.9, 1.0, 0.9);
        let sys = scalar(a, b, g, 0.0);
        let theta: f64 = -0.5;
        let m = a + b * theta;
        let den = 1.0 - g * m * m;
        let expected = (2.0 * theta * den + (1.0 + theta * theta) * 2.0 * g * m * b) / (den * den);
        let grad = lqr_gradient(&sys, &gain(theta)).unwrap();
        assert!((grad[(0, 0)] - expected).abs() < 1e-12 * expected.abs().max(1.0));
    }

    #[test]
    fn gradient_vanishes_at_optimum() {
        let sys = random_system(3, 2, 0.9, 7).unwrap();
        let opt = optimal_gain(&sys).unwrap();
        assert!(lqr_gradient(&sys, &opt).unwrap().norm() <= 1e-8);
    }

    #[test]
    fn value_matrix_is_symmetric_psd() {
        let sys = random_system(4, 2, 0.9, 3).unwrap();
        let g = random_stable_gain(&sys, 4).unwrap();
        let v = evaluate_gain(&sys, &g).unwrap();
        assert!((&v.l - v.l.transpose()).amax() <= 1e-10);
        assert!(v.l.clone().symmetric_eigenvalues().min() >= 0.0);
    }

    #[test]
    fn uncontrollable_pair_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.5]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        assert!(LqrSystem::with_identity_costs(a, b, 0.9).is_err());
    }

    #[test]
    fn flat_layout_round_trip() {
        let sys = random_system(3, 2, 0.9, 1).unwrap();
        let g = random_stable_gain(&sys, 2).unwrap();
        assert_eq!(LinearGain::from_flat(&sys, &g.to_flat()).unwrap(), g);
    }
}
