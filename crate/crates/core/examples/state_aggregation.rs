//! Softmax policies shared across blocks of states. Stationary points of the
//! restricted class are near-optimal up to the aggregation error.

use nalgebra::DVector;
use policy_landscape::mdp;
use policy_landscape::tabular::{AggregatedSoftmax, Aggregation};
use policy_landscape::verify::{self, STATIONARY_GRAD_TOL};

fn main() -> policy_landscape::Result<()> {
    let m = mdp::random_mdp(12, 3, 7)?;
    for blocks in [1, 2, 3, 6, 12] {
        let agg = Aggregation::contiguous(12, blocks)?;
        let class = AggregatedSoftmax { aggregation: agg.clone(), n_actions: 3 };
        let theta = verify::descend_class(&m, &class, &DVector::zeros(blocks * 3), STATIONARY_GRAD_TOL, 50_000)?;
        let r = verify::verify_approximation(&m, &agg, &theta)?;
        println!(
            "{blocks:>2} blocks: gap {:.3e} <= bound {:.3e} ({}), approx error {:.3e}",
            r.gap,
            r.bound_rhs,
            r.gap_holds(),
            r.approx_error
        );
    }
    Ok(())
}
