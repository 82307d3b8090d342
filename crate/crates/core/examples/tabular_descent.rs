//! Gradient descent on softmax policies for a random 100-state, 20-action MDP,
//! tracked against the policy-iteration optimum.

use nalgebra::DVector;
use policy_landscape::mdp;
use policy_landscape::optimize::{gradient_descent, FnObjective, LineSearchConfig, StopRule};
use policy_landscape::tabular::{class_loss, policy_gradient, TabularSoftmax};

fn main() -> policy_landscape::Result<()> {
    let m = mdp::random_mdp(100, 20, 1)?;
    let (_, optimal) = mdp::policy_iteration(&m)?;
    let optimum = m.rho().dot(optimal.values());

    let class = TabularSoftmax::for_mdp(&m);
    let obj = FnObjective::new(
        100 * 20,
        |t: &DVector<f64>| class_loss(&m, &class, t),
        |t: &DVector<f64>| policy_gradient(&m, &class, t).map(|r| r.gradient),
    )
    .with_oracle(optimum);

    let run = gradient_descent(&obj, &DVector::zeros(2000), &LineSearchConfig::default(), &StopRule::default())
        .map_err(|f| f.error)?;
    for row in run.record.rows.iter().step_by(25) {
        println!("iter {:4}  loss {:.8}  gap {:.3e}  |grad| {:.3e}", row.iteration, row.loss, row.optimality_gap, row.grad_norm);
    }
    let last = run.record.last().unwrap();
    println!("stopped after {} iterations ({:?}), final gap {:.3e}", last.iteration, run.termination, last.optimality_gap);
    Ok(())
}
