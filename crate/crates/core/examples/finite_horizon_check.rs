//! Base-stock policies away from the optimum always have a single-stage move
//! that lowers expected cost.

use policy_landscape::inventory::{self, BaseStock, InventoryProblem};
use policy_landscape::verify::{self, FiniteHorizonConfig};

fn main() -> policy_landscape::Result<()> {
    let prob = InventoryProblem::default();
    let star = inventory::optimal_basestock(&prob, 100_000, 2)?;
    let cfg = FiniteHorizonConfig::default();
    let candidates = [
        star.clone(),
        BaseStock::constant(5, 3.0),
        BaseStock::constant(5, 12.0),
        BaseStock(star.0.map(|x| x + 1.5)),
    ];
    for theta in &candidates {
        let r = verify::verify_finite_horizon(&prob, theta, &star, &cfg)?;
        match r.stage {
            None => println!("{:.2?}: already at the reference levels", theta.0.as_slice()),
            Some(h) => println!(
                "{:.2?}: move stage {} by {:+.3}, derivative {:.4} +- {:.4}",
                theta.0.as_slice(),
                h + 1,
                r.direction,
                r.directional_derivative,
                r.std_err
            ),
        }
    }
    Ok(())
}
