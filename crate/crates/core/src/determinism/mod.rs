//! Narrow-float reductions whose result depends only on the launch record.
//!
//! Every addition is rounded into the target format, so the association
//! order fixed by a [`ReductionPlan`] fully determines the result. Changing
//! the grid split changes the plan, which is exactly how resource-dependent
//! launch rewriting leaks into numerics.

pub mod equivalence;
pub mod format;
pub mod reduce;
pub mod stats;

pub use format::{round_to, FloatFormat, FloatValue};
pub use reduce::{coupling_delta, reduce_with_plan, uniform_inputs, Combine, CouplingDelta, PlanError, ReductionPlan};
pub use stats::{batch_stats_divergence, BatchDivergence, MeanVar, StatsError};

use crate::model::ReductionTag;

/// The value a reduction kernel produces when launched with `grid` blocks:
/// its inputs are regenerated from the tag's seed and summed with a balanced
/// plan of `min(grid, n)` chunks.
pub fn kernel_reduction_result(tag: &ReductionTag, grid: u32) -> FloatValue {
    let n = tag.n as usize;
    if n == 0 {
        return FloatValue::zero(tag.format);
    }
    let values = uniform_inputs(tag.format, n, -1.0, 1.0, tag.seed);
    let g = (grid as usize).clamp(1, n);
    let plan = ReductionPlan::balanced(n, g).expect("1 <= g <= n");
    reduce_with_plan(&values, tag.format, &plan).expect("inputs generated in format")
}
