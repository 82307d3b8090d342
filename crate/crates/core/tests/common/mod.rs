#![allow(dead_code)]

pub mod checks;

use nalgebra::{DMatrix, DVector};
use policy_landscape::mdp::FiniteMdp;

/// Central differences of `f` at `x`, coordinate by coordinate.
pub fn central_diff(mut f: impl FnMut(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut y = x.clone();
    for i in 0..x.len() {
        y[i] = x[i] + h;
        let up = f(&y);
        y[i] = x[i] - h;
        let down = f(&y);
        y[i] = x[i];
        g[i] = (up - down) / (2.0 * h);
    }
    g
}

/// `||a - b|| <= rel (1 + ||b||)`.
pub fn rel_close(a: &DVector<f64>, b: &DVector<f64>, rel: f64) -> bool {
    (a - b).norm() <= rel * (1.0 + b.norm())
}

/// Value of a deterministic policy by a direct dense solve, built from the raw tables.
pub fn deterministic_values(mdp: &FiniteMdp, actions: &[usize]) -> DVector<f64> {
    let n = mdp.n_states();
    let g = mdp.gamma();
    let mut m = DMatrix::<f64>::identity(n, n);
    let mut c = DVector::zeros(n);
    for s in 0..n {
        let a = actions[s];
        c[s] = mdp.cost()[(s, a)];
        for s2 in 0..n {
            m[(s, s2)] -= g * mdp.transition(a)[(s, s2)];
        }
    }
    m.lu().solve(&c).expect("I - gamma P is invertible")
}

/// Pointwise-minimal values over all `k^n` deterministic policies.
pub fn brute_force_optimum(mdp: &FiniteMdp) -> DVector<f64> {
    let (n, k) = (mdp.n_states(), mdp.n_actions());
    let total = k.pow(n as u32);
    let mut best = DVector::from_element(n, f64::INFINITY);
    let mut actions = vec![0; n];
    for code in 0..total {
        let mut c = code;
        for a in actions.iter_mut() {
            *a = c % k;
            c /= k;
        }
        let v = deterministic_values(mdp, &actions);
        best.zip_apply(&v, |b, x| *b = b.min(x));
    }
    best
}

/// Value iteration to sup-norm change below `tol`.
pub fn value_iteration(mdp: &FiniteMdp, tol: f64) -> DVector<f64> {
    let (n, k) = (mdp.n_states(), mdp.n_actions());
    let mut v = DVector::zeros(n);
    loop {
        let next = DVector::from_fn(n, |s, _| {
            (0..k)
                .map(|a| mdp.cost()[(s, a)] + mdp.gamma() * mdp.transition(a).row(s).transpose().dot(&v))
                .fold(f64::INFINITY, f64::min)
        });
        let change = (&next - &v).amax();
        v = next;
        if change < tol {
            return v;
        }
    }
}

/// Sample mean and standard error.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
