//! Planning a source network for a target and masking it down to a ticket.

pub mod budget;
mod common;
mod depth_plus_one;
pub mod extend;
pub mod plan;
pub mod report;
pub mod stride;
mod two_for_one;

pub use budget::{budget_2l_from_counts, budget_lp1_from_counts, error_budget_2l, error_budget_lp1};
pub use depth_plus_one::construct_lp1;
pub use extend::{extend_target_depth, ExtendedTarget};
pub use plan::{plan_2l, plan_lp1, slot_layout, width_bound, PlanOptions, SlotLayout, SourcePlan, Variant};
pub use report::{
    BaseElement, ConstructionReport, LayerMap, LayerReport, ParamRef, ProblemKind, ProblemRecord, TargetRef,
};
pub use stride::{stride_replication, StridePosition, StrideSchedule};
pub use two_for_one::construct_2l;

use crate::error::Result;
use crate::network::{init_source, Mask, NetworkSpec};

pub fn plan(target: &NetworkSpec, variant: Variant, opts: &PlanOptions) -> Result<SourcePlan> {
    match variant {
        Variant::TwoForOne => plan_2l(target, opts),
        Variant::DepthPlusOne => plan_lp1(target, opts),
    }
}

/// Samples the source for `plan` from `seed`.
pub fn sample_source(plan: &SourcePlan, seed: u64) -> Result<NetworkSpec> {
    init_source(&plan.layout, seed)
}

pub fn construct(
    target: &NetworkSpec,
    source: &NetworkSpec,
    plan: &SourcePlan,
    seed: u64,
) -> Result<(Mask, ConstructionReport)> {
    match plan.variant {
        Variant::TwoForOne => construct_2l(target, source, plan, seed),
        Variant::DepthPlusOne => construct_lp1(target, source, plan, seed),
    }
}
