//! Score-function estimates from geometric-horizon rollouts average to the
//! exact policy gradient.

use nalgebra::DMatrix;
use policy_landscape::mdp;
use policy_landscape::reinforce;
use policy_landscape::tabular::{exact_policy_gradient, SoftmaxParams};

fn main() -> policy_landscape::Result<()> {
    let m = mdp::random_mdp(3, 2, 1)?;
    let theta = SoftmaxParams(DMatrix::from_row_slice(3, 2, &[0.4, -0.3, 1.0, 0.0, -0.5, 0.5]));
    let exact = exact_policy_gradient(&m, &theta)?.gradient;
    let est = reinforce::reinforce_estimate(&m, &theta, 100_000, 9)?;
    println!("{:>10} {:>12} {:>12} {:>8}", "component", "exact", "estimate", "z");
    for i in 0..exact.len() {
        let z = (est.mean[i] - exact[i]) / est.std_err[i];
        println!("{i:>10} {:>12.6} {:>12.6} {z:>8.2}", exact[i], est.mean[i]);
    }
    Ok(())
}
