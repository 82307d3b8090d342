//! Along the policy-improvement direction the loss falls at least as fast as
//! the occupancy-weighted Bellman error. Checked here on random parameters.

use nalgebra::DMatrix;
use policy_landscape::mdp;
use policy_landscape::tabular::SoftmaxParams;
use policy_landscape::verify;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> policy_landscape::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    println!("{:>6} {:>14} {:>14} {:>12}", "case", "derivative", "bound", "slack");
    for case in 0..10 {
        let m = mdp::random_mdp(8, 4, case)?;
        let theta = SoftmaxParams(DMatrix::from_fn(8, 4, |_, _| rng.sample::<f64, _>(StandardNormal)));
        let r = verify::verify_descent(&m, &theta)?;
        println!("{case:>6} {:>14.6e} {:>14.6e} {:>12.2e}", r.directional_derivative, r.bound, r.slack);
        assert!(r.holds(1e-6));
    }
    Ok(())
}
