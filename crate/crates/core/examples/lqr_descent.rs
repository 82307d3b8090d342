//! Policy gradient on linear feedback gains for a discounted LQR problem.
//! Starting from a random stabilizing gain, every iterate stays stable.

use policy_landscape::lqr::{self, LinearGain, LqrObjective};
use policy_landscape::optimize::{gradient_descent, GradTol, LineSearchConfig, StopRule};

fn main() -> policy_landscape::Result<()> {
    let sys = lqr::random_system(3, 2, 0.9, 1)?;
    let star = lqr::optimal_gain(&sys)?;
    let optimum = lqr::lqr_cost(&sys, &star)?;
    let theta0 = lqr::random_stable_gain(&sys, 2)?;
    println!("start cost {:.6}, optimal cost {optimum:.6}", lqr::lqr_cost(&sys, &theta0)?);

    let obj = LqrObjective { system: &sys, optimum: Some(optimum) };
    let stop = StopRule { grad_tol: GradTol::RelativeToLoss(1e-9), max_iters: 10_000 };
    let run = gradient_descent(&obj, &theta0.to_flat(), &LineSearchConfig::default(), &stop).map_err(|f| f.error)?;
    for row in &run.record.rows {
        println!("iter {:3}  gap {:.3e}  |grad| {:.3e}", row.iteration, row.optimality_gap, row.grad_norm);
    }
    let gain = LinearGain::from_flat(&sys, &run.theta)?;
    println!("||theta - theta*||_F = {:.3e}", (&gain.0 - &star.0).norm());
    println!("learned gain:{}", gain.0);
    Ok(())
}
