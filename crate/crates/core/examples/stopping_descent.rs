//! Logistic threshold policies for optimal stopping. Descent on the threshold
//! parameters recovers the optimal accept/reject rule in every context.

use nalgebra::DVector;
use policy_landscape::optimize::{gradient_descent, GradTol, LineSearchConfig, StopRule};
use policy_landscape::stopping::{self, StoppingObjective, StoppingProblem, ThresholdParams};

fn main() -> policy_landscape::Result<()> {
    let p = StoppingProblem::random(10, 50, 0.9, 1)?;
    let opt = stopping::optimal_stopping(&p)?;
    let m = stopping::build_stopping_mdp(&p)?;
    let optimum = m.rho().dot(opt.cost_values.values());

    let obj = StoppingObjective { problem: &p, optimum: Some(optimum) };
    let stop = StopRule { grad_tol: GradTol::RelativeToLoss(1e-11), max_iters: 100_000 };
    let run = gradient_descent(&obj, &DVector::zeros(20), &LineSearchConfig::default(), &stop).map_err(|f| f.error)?;
    let first = &run.record.rows[0];
    let last = run.record.last().unwrap();
    println!("gap {:.3e} -> {:.3e} in {} iterations", first.optimality_gap, last.optimality_gap, last.iteration);

    let theta = ThresholdParams(run.theta);
    for x in 0..p.n_contexts() {
        let learned = -theta.intercept(x) / theta.slope(x);
        match opt.levels[x] {
            Some(level) => {
                // Any cut between the largest rejected offer and the level is equally good.
                let below = p.offers().iter().copied().filter(|&y| y < level).fold(f64::NEG_INFINITY, f64::max);
                println!("context {x}: learned cut {learned:.4}, optimal cut anywhere in ({below:.4}, {level:.4}]");
            }
            None => println!("context {x}: learned cut {learned:.4}, optimal never accepts"),
        }
    }
    Ok(())
}
