//! Mixing a policy with its greedy improvement lowers cost by at least a fixed
//! fraction of the current optimality gap.

use policy_landscape::mdp::{self, StochasticPolicy};
use policy_landscape::verify;

fn main() -> policy_landscape::Result<()> {
    let m = mdp::random_mdp(6, 3, 3)?;
    let mut policy = StochasticPolicy::uniform(6, 3);
    for step in 0..8 {
        let r = verify::verify_soft_pi(&m, &policy, 0.5)?;
        println!(
            "step {step}: gap {:.4e}, improvement {:.4e} >= {:.4e} ({})",
            r.gap,
            r.improvement,
            r.rhs,
            r.holds(1e-10)
        );
        let values = mdp::evaluate_policy(&m, &policy)?;
        policy = policy.mix(&mdp::greedy_policy(&m, &values)?, 0.5)?;
    }
    Ok(())
}
