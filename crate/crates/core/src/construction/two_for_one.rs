use super::common::{finish, target_input_dims, Ctx, Replication, Role};
use super::plan::{SourcePlan, Variant};
use super::report::{ConstructionReport, LayerMap};
use crate::error::{Error, Result};
use crate::network::{Mask, NetworkSpec};

/// Masks `source` (sampled from a two-for-one plan) down to a ticket
/// approximating `target`. Target layer `l` is rebuilt by source layers
/// `2l - 1` (univariate replication) and `2l` (subset-sum combination);
/// every even layer but the last also carries a constant channel that
/// feeds the next layer's biases.
pub fn construct_2l(
    target: &NetworkSpec,
    source: &NetworkSpec,
    plan: &SourcePlan,
    seed: u64,
) -> Result<(Mask, ConstructionReport)> {
    if plan.variant != Variant::TwoForOne {
        return Err(Error::PlanMismatch("plan is not a two-for-one plan".into()));
    }
    if plan.options.replication_stride > 1 {
        return Err(Error::Unsupported(
            "strided replication layers in construction; see stride_replication".into(),
        ));
    }
    let mut ctx = Ctx::new(target, source, plan)?;
    let dims = target_input_dims(target, plan);
    let depth = target.depth();
    let mut dense = 0;
    for l in 1..=depth {
        let c = plan.target_channels[l];
        let mut rep = Replication::new(&ctx, 2 * l - 1, l, dims[l - 1].as_deref())?;
        let mut rows: Vec<(usize, Role)> = (0..c).map(|i| (i, Role::Channel(i))).collect();
        if l < depth {
            rows.push((c, Role::Const));
        }
        rep.build(&mut ctx, &rows)?;
        dense += c * rep.data_block_width * plan.target_channels[l - 1] * target.layer(l).spec.kernel_len();
    }
    let layer_map = (1..=depth)
        .map(|l| LayerMap {
            target_layer: l,
            source_layer: 2 * l,
            channels: (0..plan.target_channels[l]).collect(),
        })
        .collect();
    finish(ctx, seed, layer_map, dense)
}
