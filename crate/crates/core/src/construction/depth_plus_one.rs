use std::collections::BTreeMap;

use super::common::{aligned_tap, finish, target_input_dims, Ctx, Pending, Replication, Role};
use super::plan::{slot_layout, SlotLayout, SourcePlan, Variant};
use super::report::{BaseElement, ConstructionReport, LayerMap, ParamRef, ProblemKind, ProblemRecord, TargetRef};
use crate::error::{Error, Result};
use crate::network::{Mask, NetworkSpec};
use crate::tensor::SkipKind;

/// Construction state of one interior source layer.
#[derive(Debug, Clone)]
struct Slots {
    layout: SlotLayout,
    spare_role: Vec<Option<Role>>,
    /// Spares that must stay unconstructed because an identity skip carries
    /// them into a slot that expects nothing.
    blocked: Vec<bool>,
    needed: Vec<bool>,
}

impl Slots {
    fn new(layout: SlotLayout) -> Self {
        Self {
            layout,
            spare_role: vec![None; layout.spare],
            blocked: vec![false; layout.spare],
            needed: vec![false; layout.width()],
        }
    }

    fn role(&self, slot: usize) -> Option<Role> {
        let l = &self.layout;
        if slot < l.channels * l.replicas {
            Some(Role::Channel(slot / l.replicas))
        } else if slot < l.const_slot(0) + l.replicas {
            Some(Role::Const)
        } else {
            self.spare_role[slot - l.spare_slot(0)]
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct DirectKey {
    /// Target layer whose slots feed the problem.
    input_layer: usize,
    role: Role,
    tap: usize,
    factor: f64,
}

struct Spares<'t> {
    target: &'t NetworkSpec,
    zero_at_rest: bool,
    states: Vec<Slots>,
    blocks: Vec<((usize, Role), Vec<usize>)>,
}

impl Spares<'_> {
    fn incoming(&self, layer: usize) -> Vec<(usize, Vec<Option<usize>>)> {
        self.target
            .skips()
            .iter()
            .filter(|s| s.to == layer)
            .filter_map(|s| match &s.kind {
                SkipKind::Identity { map } => Some((s.from, map.clone())),
                _ => None,
            })
            .collect()
    }

    fn outgoing(&self, layer: usize) -> Vec<usize> {
        self.target
            .skips()
            .iter()
            .filter(|s| s.from == layer && s.is_identity())
            .map(|s| s.to)
            .collect()
    }

    fn spare_count(states: &[Slots], layer: usize) -> usize {
        states.get(layer.wrapping_sub(1)).map_or(0, |s| s.layout.spare)
    }

    // Gives spare `p` of interior target layer `layer` the role `role`,
    // propagating the constraints that identity skips impose on spare `p`
    // of the layers they connect.
    fn assign(&self, st: &mut [Slots], layer: usize, p: usize, role: Role, fresh: &mut Vec<(usize, usize)>) -> bool {
        let s = &st[layer - 1];
        if p >= s.layout.spare || s.blocked[p] {
            return false;
        }
        if let Some(r) = s.spare_role[p] {
            return r == role;
        }
        for u in self.outgoing(layer) {
            if p < Self::spare_count(st, u) && st[u - 1].blocked[p] {
                return false;
            }
        }
        st[layer - 1].spare_role[p] = Some(role);
        fresh.push((layer, p));
        for (t, map) in self.incoming(layer) {
            let residual = match role {
                Role::Channel(j) => map[j],
                Role::Const => None,
            };
            let ok = match (t, residual) {
                (0, Some(_)) => false,
                (0, None) => true,
                (t, Some(j2)) => p < Self::spare_count(st, t) && self.assign(st, t, p, Role::Channel(j2), fresh),
                (t, None) => p >= Self::spare_count(st, t) || self.block(st, t, p),
            };
            if !ok {
                return false;
            }
        }
        true
    }

    fn block(&self, st: &mut [Slots], layer: usize, p: usize) -> bool {
        let s = &st[layer - 1];
        if s.spare_role[p].is_some() || !self.zero_at_rest {
            return false;
        }
        if s.blocked[p] {
            return true;
        }
        st[layer - 1].blocked[p] = true;
        for (t, _) in self.incoming(layer) {
            if t > 0 && p < Self::spare_count(st, t) && !self.block(st, t, p) {
                return false;
            }
        }
        true
    }

    /// Up to `m` spares of `layer` serving as extra replicas of `role`,
    /// plus every spare (at any layer) that received a role on the way.
    fn block_for(&mut self, layer: usize, role: Role, m: usize) -> (Vec<usize>, Vec<(usize, usize)>) {
        if let Some((_, b)) = self.blocks.iter().find(|(k, _)| *k == (layer, role)) {
            return (b.clone(), Vec::new());
        }
        let mut got = Vec::new();
        let mut fresh = Vec::new();
        for p in 0..Self::spare_count(&self.states, layer) {
            if got.len() == m {
                break;
            }
            let mut trial = self.states.clone();
            let mut f = Vec::new();
            if trial[layer - 1].spare_role[p].is_none() && self.assign(&mut trial, layer, p, role, &mut f) {
                self.states = trial;
                fresh.extend(f);
                got.push(p);
            }
        }
        self.blocks.push(((layer, role), got.clone()));
        (got, fresh)
    }
}

/// A candidate slot row solved during the bottom-up pass.
struct Row {
    records: Vec<ProblemRecord>,
    /// Every problem met its tolerance and every identity-skip partner is
    /// good too. Only good rows are offered to the layer above.
    good: bool,
}

struct Builder<'a, 't> {
    ctx: Ctx<'a>,
    spares: Spares<'t>,
    rep: Replication,
    rows: Vec<BTreeMap<usize, Row>>,
    dims: Vec<Option<Vec<usize>>>,
    kappa: f64,
}

impl Builder<'_, '_> {
    fn is_good(&self, layer: usize, slot: usize) -> bool {
        self.rows[layer - 1].get(&slot).is_some_and(|r| r.good)
    }

    /// Source identity skips into the row `d` of target layer `l`, as
    /// (target layer, slot) pairs.
    fn skip_partners(&self, l: usize, d: usize) -> Vec<(usize, usize)> {
        self.ctx
            .source
            .skips()
            .iter()
            .filter(|s| s.to == l + 1 && s.from >= 2)
            .filter_map(|s| match &s.kind {
                SkipKind::Identity { map } => map[d].map(|src| (s.from - 1, src)),
                _ => None,
            })
            .collect()
    }

    fn direct_pending(&self, l: usize, d: usize, role: Role) -> Result<Vec<Pending<DirectKey>>> {
        let (ctx, plan, target) = (&self.ctx, self.ctx.plan, self.ctx.target);
        let below = self.spares.states[l - 2].layout;
        let tl = target.layer(l);
        let k = tl.spec.kernel_len();
        let q0 = aligned_tap(&tl.spec.kernel, tl.spec.stride, self.dims[l - 1].as_deref())?;
        let src_layer = l + 1;
        let sspec = &ctx.source.layer(src_layer).spec;
        let tol = plan.param_tolerance[l - 1];
        let base_of = |slots: &[usize], tap: usize, factor: f64| -> Vec<BaseElement> {
            slots
                .iter()
                .map(|&s| BaseElement {
                    weight: ParamRef::Weight {
                        layer: src_layer,
                        index: sspec.weight_index(d, s, tap),
                    },
                    lambda: None,
                    factor,
                    mirror: None,
                    lambda_mirror: None,
                })
                .collect()
        };
        let good = |layer: usize, slots: Vec<usize>| -> Vec<usize> {
            slots.into_iter().filter(|&s| self.is_good(layer, s)).collect()
        };
        let replicas = |j: usize| good(l - 1, (0..below.replicas).map(|r| below.slot(j, r)).collect());
        let consts = good(l - 1, (0..below.replicas).map(|r| below.const_slot(r)).collect());

        let mut out = Vec::new();
        let mut push = |kind, target_ref, value, base, key| {
            out.push(Pending {
                target_layer: l,
                kind,
                target: target_ref,
                target_value: value,
                source_layer: src_layer,
                dest_row: d,
                base,
                tolerance: tol,
                key,
            })
        };
        let bias_key = DirectKey {
            input_layer: l - 1,
            role: Role::Const,
            tap: q0,
            factor: self.kappa,
        };
        match role {
            Role::Channel(i) => {
                for j in 0..plan.target_channels[l - 1] {
                    let reps = replicas(j);
                    for q in 0..k {
                        let index = tl.spec.weight_index(i, j, q);
                        let w = tl.weights[index];
                        if w == 0.0 {
                            continue;
                        }
                        let key = DirectKey {
                            input_layer: l - 1,
                            role: Role::Channel(j),
                            tap: q,
                            factor: 1.0,
                        };
                        let t = TargetRef::Param {
                            param: ParamRef::Weight { layer: l, index },
                        };
                        push(ProblemKind::Data, t, w, base_of(&reps, q, 1.0), Some(key));
                    }
                }
                let b = tl.biases[i];
                if b != 0.0 {
                    let t = TargetRef::Param {
                        param: ParamRef::Bias { layer: l, index: i },
                    };
                    push(ProblemKind::Bias, t, b, base_of(&consts, q0, self.kappa), Some(bias_key));
                }
                for (n, skip) in target.skips().iter().enumerate() {
                    let SkipKind::General { kernel, weights } = &skip.kind else {
                        continue;
                    };
                    if skip.to != l {
                        continue;
                    }
                    let from = self.spares.states[skip.from - 1].layout;
                    let (ct, kk) = (plan.target_channels[skip.from], kernel.iter().product::<usize>());
                    let ci = ctx.source.channels(skip.from + 1);
                    for j in 0..ct {
                        let reps = good(skip.from, (0..from.replicas).map(|r| from.slot(j, r)).collect());
                        for q in 0..kk {
                            let index = (i * ct + j) * kk + q;
                            if weights[index] == 0.0 {
                                continue;
                            }
                            let base = reps
                                .iter()
                                .map(|&s| BaseElement {
                                    weight: ParamRef::Skip {
                                        skip: n,
                                        index: (d * ci + s) * kk + q,
                                    },
                                    lambda: None,
                                    factor: 1.0,
                                    mirror: None,
                                    lambda_mirror: None,
                                })
                                .collect();
                            let t = TargetRef::Param {
                                param: ParamRef::Skip { skip: n, index },
                            };
                            push(ProblemKind::Skip, t, weights[index], base, None);
                        }
                    }
                }
            }
            Role::Const => {
                let t = TargetRef::Constant { value: 1.0 };
                push(ProblemKind::Constant, t, 1.0, base_of(&consts, q0, self.kappa), Some(bias_key));
            }
        }
        Ok(out)
    }

    fn store(&mut self, l: usize, d: usize, records: Vec<ProblemRecord>) -> Row {
        let good = records.iter().all(|r| r.success)
            && self.skip_partners(l, d).into_iter().all(|(t, s)| self.is_good(t, s));
        Row { records, good }
    }

    /// Solves spare rows that just received a role, lowest layer first.
    /// Rows above the replication stage get no retries of their own.
    fn solve_fresh(&mut self, mut fresh: Vec<(usize, usize)>) -> Result<()> {
        fresh.sort_unstable();
        for (t, p) in fresh {
            let st = &self.spares.states[t - 1];
            let (slot, role) = (st.layout.spare_slot(p), st.spare_role[p].expect("fresh spares have roles"));
            let records = if t == 1 {
                self.rep.solve_rows(&mut self.ctx, &[(slot, role)])?.pop().unwrap_or_default()
            } else {
                let pending = self.direct_pending(t, slot, role)?;
                self.ctx.solve_primary(&pending)?
            };
            let row = self.store(t, slot, records);
            self.rows[t - 1].insert(slot, row);
        }
        Ok(())
    }

    /// Solves every row of target layer `l >= 2` (all fixed slots, or the
    /// output channels) with retries over spare replicas.
    fn solve_direct(&mut self, l: usize, rows: &[(usize, Role)]) -> Result<Vec<(usize, Row)>> {
        let below = self.spares.states[l - 2].layout;
        // Spares are shared out so every role can get some.
        let m = below.spare.div_ceil(below.channels + 1).max(1);
        let mut out = Vec::with_capacity(rows.len());
        let mut pending = Vec::new();
        for &(d, role) in rows {
            pending.push(self.direct_pending(l, d, role)?);
        }
        let flat: Vec<_> = pending.into_iter().flatten().collect();
        let mut records = self.ctx.solve_primary(&flat)?;
        let mut used = 0;
        for (p, rec) in flat.iter().zip(&mut records) {
            let Some(key) = p.key.filter(|_| !rec.success) else {
                continue;
            };
            let (ps, fresh) = self.spares.block_for(key.input_layer, key.role, m);
            used += ps.len() * usize::from(!fresh.is_empty());
            self.solve_fresh(fresh)?;
            let slots: Vec<usize> = ps
                .iter()
                .map(|&q| below.spare_slot(q))
                .filter(|&s| self.is_good(l - 1, s))
                .collect();
            if slots.is_empty() {
                continue;
            }
            let sspec = &self.ctx.source.layer(l + 1).spec;
            let base = slots
                .iter()
                .map(|&s| BaseElement {
                    weight: ParamRef::Weight {
                        layer: l + 1,
                        index: sspec.weight_index(p.dest_row, s, key.tap),
                    },
                    lambda: None,
                    factor: key.factor,
                    mirror: None,
                    lambda_mirror: None,
                })
                .collect();
            self.ctx.retry_record(rec, base)?;
        }
        self.ctx.layers[l - 1].spare_used += used;
        let mut it = records.into_iter().peekable();
        for &(d, _) in rows {
            let mut recs = Vec::new();
            while it.peek().is_some_and(|r| r.dest_row == d) {
                recs.push(it.next().expect("peeked"));
            }
            let row = self.store(l, d, recs);
            out.push((d, row));
        }
        Ok(out)
    }

    /// All slots of layer `l` with a fixed role. Slots an identity skip
    /// carries forward come first so they are first in line for spares.
    fn fixed_rows(&self, l: usize) -> Vec<(usize, Role)> {
        let s = &self.spares.states[l - 1];
        let mut forced = vec![false; s.layout.width()];
        for skip in self.ctx.source.skips().iter().filter(|k| k.from == l + 1) {
            if let SkipKind::Identity { map } = &skip.kind {
                map.iter().flatten().for_each(|&d| forced[d] = true);
            }
        }
        let mut rows: Vec<(usize, Role)> = (0..s.layout.width())
            .filter_map(|d| s.role(d).map(|r| (d, r)))
            .collect();
        rows.sort_by_key(|&(d, _)| !forced[d]);
        rows
    }
}

/// Masks `source` (sampled from a depth-plus-one plan) down to a ticket
/// approximating `target`. Source layers 1 and 2 rebuild target layer 1 as
/// `R` replicas per channel; every deeper target layer is rebuilt directly
/// from the replicas below it.
///
/// Candidate replicas are solved bottom-up and a replica that missed any
/// tolerance is never offered to the layer above. The mask then keeps,
/// top-down, only the replicas some kept problem selected.
pub fn construct_lp1(
    target: &NetworkSpec,
    source: &NetworkSpec,
    plan: &SourcePlan,
    seed: u64,
) -> Result<(Mask, ConstructionReport)> {
    if plan.variant != Variant::DepthPlusOne {
        return Err(Error::PlanMismatch("plan is not a depth-plus-one plan".into()));
    }
    if plan.options.replication_stride > 1 {
        return Err(Error::Unsupported(
            "strided replication layers in construction; see stride_replication".into(),
        ));
    }
    let mut ctx = Ctx::new(target, source, plan)?;
    let dims = target_input_dims(target, plan);
    let depth = target.depth();
    let mut rep = Replication::new(&ctx, 1, 1, dims[0].as_deref())?;
    let outputs: Vec<(usize, Role)> = (0..plan.target_channels[depth]).map(|i| (i, Role::Channel(i))).collect();
    let data_dense_1 = rep.data_block_width * plan.target_channels[0] * target.layer(1).spec.kernel_len();
    if depth == 1 {
        rep.build(&mut ctx, &outputs)?;
        let layer_map = vec![LayerMap {
            target_layer: 1,
            source_layer: 2,
            channels: (0..plan.target_channels[1]).collect(),
        }];
        return finish(ctx, seed, layer_map, outputs.len() * data_dense_1);
    }
    let mut b = Builder {
        spares: Spares {
            target,
            zero_at_rest: plan.activation.offset() == 0.0,
            states: (1..depth)
                .map(|l| Slots::new(slot_layout(plan, l).expect("interior layer")))
                .collect(),
            blocks: Vec::new(),
        },
        ctx,
        rep,
        rows: (1..depth).map(|_| BTreeMap::new()).collect(),
        dims,
        kappa: plan.activation.evaluate(1.0),
    };

    // Bottom-up: every candidate row, with its quality.
    let first = b.fixed_rows(1);
    let solved = b.rep.solve_rows(&mut b.ctx, &first)?;
    for (&(d, _), records) in first.iter().zip(solved) {
        let row = b.store(1, d, records);
        b.rows[0].insert(d, row);
    }
    let mut top = Vec::new();
    for l in 2..=depth {
        let rows = if l == depth { outputs.clone() } else { b.fixed_rows(l) };
        let solved = b.solve_direct(l, &rows)?;
        if l == depth {
            top = solved;
        } else {
            for (d, row) in solved {
                b.rows[l - 1].insert(d, row);
            }
        }
    }

    // Top-down: keep what the output needs.
    let mut dense = 0;
    let mut commit = top;
    for l in (1..=depth).rev() {
        let data_rows = commit
            .iter()
            .filter(|(d, _)| l == depth || matches!(b.spares.states[l - 1].role(*d), Some(Role::Channel(_))))
            .count();
        dense += data_rows
            * if l == 1 {
                data_dense_1
            } else {
                b.spares.states[l - 2].layout.replicas * plan.target_channels[l - 1] * target.layer(l).spec.kernel_len()
            };
        for (d, row) in &commit {
            for rec in &row.records {
                b.ctx.commit(rec);
            }
            if l == 1 {
                continue;
            }
            for rec in &row.records {
                for &c in &rec.chosen {
                    match rec.base[c].weight {
                        ParamRef::Weight { index, layer } => {
                            let sspec = &source.layer(layer).spec;
                            let slot = (index / sspec.kernel_len()) % sspec.in_channels;
                            b.spares.states[l - 2].needed[slot] = true;
                        }
                        ParamRef::Skip { skip, index } => {
                            let s = &source.skips()[skip];
                            let SkipKind::General { kernel, .. } = &s.kind else { unreachable!() };
                            let kk: usize = kernel.iter().product();
                            let slot = (index / kk) % source.channels(s.from);
                            b.spares.states[s.from - 2].needed[slot] = true;
                        }
                        ParamRef::Bias { .. } => {}
                    }
                }
            }
            for (t, s) in b.skip_partners(l, *d) {
                b.spares.states[t - 1].needed[s] = true;
            }
        }
        if l > 1 {
            let needed = &b.spares.states[l - 2].needed;
            commit = std::mem::take(&mut b.rows[l - 2])
                .into_iter()
                .filter(|(d, _)| needed[*d])
                .collect();
        }
    }

    let layer_map = (1..=depth)
        .map(|l| {
            let channels = if l == depth {
                (0..plan.target_channels[l]).collect()
            } else {
                let s = &b.spares.states[l - 1];
                (0..s.layout.channels)
                    .map(|i| {
                        (0..s.layout.replicas)
                            .map(|r| s.layout.slot(i, r))
                            .find(|&d| s.needed[d])
                            .unwrap_or(s.layout.slot(i, 0))
                    })
                    .collect()
            };
            LayerMap {
                target_layer: l,
                source_layer: l + 1,
                channels,
            }
        })
        .collect();
    let (mask, report) = finish(b.ctx, seed, layer_map, dense)?;
    if report.problems_within_rho == Some(false) {
        log::warn!("solved more problems than the planned rho");
    }
    Ok((mask, report))
}
