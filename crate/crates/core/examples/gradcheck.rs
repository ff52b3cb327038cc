//! Finite-difference check of every differentiable op, then of the joint
//! loss through a small encoder with each local branch.

use amde::encoder::LocalBranch;
use amde::engine::gradcheck::{full_pipeline_check, op_suite, GRAD_TOLERANCE};
use amde::losses::MetricLoss;

fn main() -> amde::Result<()> {
    for check in op_suite(20, 1)? {
        println!("{:<20} worst {:.2e}", check.name, check.worst);
    }
    for branch in [
        LocalBranch::None,
        LocalBranch::Conv,
        LocalBranch::Fc,
        LocalBranch::Rnn,
        LocalBranch::Lstm,
    ] {
        let worst = full_pipeline_check(branch, MetricLoss::Ann, 1)?;
        println!(
            "encoder/{:<5} worst {worst:.2e} (limit {GRAD_TOLERANCE:e})",
            branch.as_str()
        );
    }
    Ok(())
}
