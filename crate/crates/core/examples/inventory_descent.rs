//! Base-stock levels for a five-period inventory problem: descent on a
//! sample-average cost, compared with backward-induction levels on fresh paths.

use nalgebra::DVector;
use policy_landscape::inventory::{self, BaseStock, InventoryObjective, InventoryProblem};
use policy_landscape::optimize::{gradient_descent, LineSearchConfig, StopRule};

fn main() -> policy_landscape::Result<()> {
    let prob = InventoryProblem::default();
    let star = inventory::optimal_basestock(&prob, 100_000, 2)?;
    println!("backward induction levels: {:.3?}", star.0.as_slice());

    let obj = InventoryObjective { problem: &prob, n_paths: 20_000, seed: 1, optimum: None };
    let theta0 = DVector::from_element(prob.horizon, prob.demand_max);
    // The sample-average cost is piecewise linear, so the run ends by stalling at a kink.
    let theta = match gradient_descent(&obj, &theta0, &LineSearchConfig::default(), &StopRule::default()) {
        Ok(run) => run.theta,
        Err(f) => f.theta,
    };
    println!("descent levels:            {:.3?}", theta.as_slice());

    let learned = inventory::mc_cost(&prob, &BaseStock(theta), 100_000, 3)?;
    let reference = inventory::mc_cost(&prob, &star, 100_000, 3)?;
    println!("fresh-path cost: descent {:.4} +- {:.4}, reference {:.4} +- {:.4}", learned.mean, learned.std_err, reference.mean, reference.std_err);
    Ok(())
}
