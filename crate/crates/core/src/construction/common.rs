//! Pieces shared by both constructions: problem solving with retries, mask
//! bookkeeping and the replication stage (a univariate layer followed by a
//! combining layer).

use rayon::prelude::*;

use super::plan::SourcePlan;
use super::report::{
    BaseElement, ConstructionReport, LayerMap, LayerReport, ParamRef, ProblemKind, ProblemRecord,
    TargetRef,
};
use crate::activation::Linearization;
use crate::error::{Error, Result};
use crate::network::{apply_mask, count_nonzero, Mask, NetworkSpec};
use crate::subset_sum::{solve_optimal, solve_threshold, subset_sum, SolveMode, SubsetSumProblem};
use crate::tensor::{output_dims, zero_offset_tap, SkipKind};

/// What a constructed source neuron (or slot) approximates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Role {
    Channel(usize),
    Const,
}

/// Largest base a retry solves from scratch.
const WHOLE_RETRY_MAX: usize = 20;

pub(crate) struct Solved {
    pub chosen: Vec<usize>,
    pub error: f64,
    pub success: bool,
}

pub(crate) fn solve(values: Vec<f64>, target: f64, tolerance: f64, mode: SolveMode) -> Result<Solved> {
    let p = SubsetSumProblem::new(values, target, tolerance)?;
    let sol = match mode {
        SolveMode::Threshold => solve_threshold(&p).unwrap_or_else(|| solve_optimal(&p)),
        SolveMode::Optimal => solve_optimal(&p),
    };
    let error = p.error_of(&sol.indices);
    Ok(Solved {
        success: error <= tolerance,
        error,
        chosen: sol.indices,
    })
}

/// A problem waiting to be solved. `key` tells the retry hook where spare
/// capacity for this problem would come from.
pub(crate) struct Pending<K> {
    pub target_layer: usize,
    pub kind: ProblemKind,
    pub target: TargetRef,
    pub target_value: f64,
    pub source_layer: usize,
    pub dest_row: usize,
    pub base: Vec<BaseElement>,
    pub tolerance: f64,
    pub key: Option<K>,
}

pub(crate) struct Ctx<'a> {
    pub target: &'a NetworkSpec,
    pub source: &'a NetworkSpec,
    pub plan: &'a SourcePlan,
    pub mask: Mask,
    pub records: Vec<ProblemRecord>,
    pub layers: Vec<LayerReport>,
}

impl<'a> Ctx<'a> {
    pub fn new(target: &'a NetworkSpec, source: &'a NetworkSpec, plan: &'a SourcePlan) -> Result<Self> {
        check_consistency(target, source, plan)?;
        let layers = (1..=target.depth())
            .map(|l| LayerReport {
                target_layer: l,
                budget: plan.budgets[l - 1],
                tolerance: plan.param_tolerance[l - 1],
                problems: 0,
                max_error: 0.0,
                failed: 0,
                retries: 0,
                spare_used: 0,
            })
            .collect();
        Ok(Self {
            target,
            source,
            plan,
            mask: Mask::zeros(source),
            records: Vec::new(),
            layers,
        })
    }

    pub fn keep(&mut self, p: ParamRef) {
        match p {
            ParamRef::Weight { layer, index } => self.mask.layers[layer - 1].weights[index] = true,
            ParamRef::Bias { layer, index } => self.mask.layers[layer - 1].biases[index] = true,
            ParamRef::Skip { skip, index } => self.mask.skips[skip][index] = true,
        }
    }

    pub fn values(&self, base: &[BaseElement]) -> Result<Vec<f64>> {
        base.iter().map(|b| b.value(self.source)).collect()
    }

    /// First attempts of all problems, solved in parallel.
    pub fn solve_primary<K: Sync>(&self, pending: &[Pending<K>]) -> Result<Vec<ProblemRecord>> {
        let mode = self.plan.options.solve_mode;
        let source = self.source;
        pending
            .par_iter()
            .map(|p| {
                let values = p.base.iter().map(|b| b.value(source)).collect::<Result<Vec<_>>>()?;
                let s = solve(values, p.target_value, p.tolerance, mode)?;
                Ok(ProblemRecord {
                    target_layer: p.target_layer,
                    kind: p.kind,
                    target: p.target,
                    target_value: p.target_value,
                    source_layer: p.source_layer,
                    dest_row: p.dest_row,
                    base: p.base.clone(),
                    chosen: s.chosen,
                    error: s.error,
                    tolerance: p.tolerance,
                    success: s.success,
                    attempts: 1,
                })
            })
            .collect()
    }

    /// Corrects a missed problem with extra base elements. Small combined
    /// bases are solved again as a whole. Otherwise the first subset is
    /// kept and the residual it leaves is solved over `extra`. The result is
    /// kept only if it is closer to the target.
    pub fn retry_record(&self, rec: &mut ProblemRecord, extra: Vec<BaseElement>) -> Result<()> {
        let mode = self.plan.options.solve_mode;
        let mut values = self.values(&rec.base)?;
        let extra_values = self.values(&extra)?;
        let offset = values.len();
        let chosen: Vec<usize> = if offset + extra.len() <= WHOLE_RETRY_MAX {
            values.extend(extra_values);
            solve(values.clone(), rec.target_value, rec.tolerance, mode)?.chosen
        } else {
            let residual = rec.target_value - subset_sum(&values, &rec.chosen);
            let s = solve(extra_values.clone(), residual, rec.tolerance, mode)?;
            values.extend(extra_values);
            rec.chosen.iter().copied().chain(s.chosen.iter().map(|i| i + offset)).collect()
        };
        let error = SubsetSumProblem::new(values, rec.target_value, rec.tolerance)?.error_of(&chosen);
        rec.attempts += 1;
        if error < rec.error {
            rec.base.extend(extra);
            rec.chosen = chosen;
            rec.error = error;
            rec.success = error <= rec.tolerance;
        }
        Ok(())
    }

    /// Solves all problems (first attempts in parallel, retries in order)
    /// without committing them.
    pub fn solve<K, F>(&mut self, pending: &[Pending<K>], mut retry: F) -> Result<Vec<ProblemRecord>>
    where
        K: Sync,
        F: FnMut(&mut Self, &Pending<K>) -> Result<Option<Vec<BaseElement>>>,
    {
        let mut records = self.solve_primary(pending)?;
        for (p, rec) in pending.iter().zip(&mut records) {
            if !rec.success && p.key.is_some() {
                if let Some(base) = retry(self, p)? {
                    self.retry_record(rec, base)?;
                }
            }
        }
        Ok(records)
    }

    pub fn commit(&mut self, rec: &ProblemRecord) {
        let kept: Vec<ParamRef> = rec.chosen.iter().flat_map(|&i| rec.base[i].kept()).collect();
        kept.into_iter().for_each(|p| self.keep(p));
        let lr = &mut self.layers[rec.target_layer - 1];
        lr.problems += 1;
        lr.max_error = lr.max_error.max(rec.error);
        lr.failed += usize::from(!rec.success);
        lr.retries += usize::from(rec.attempts > 1);
        self.records.push(rec.clone());
    }
}

fn check_consistency(target: &NetworkSpec, source: &NetworkSpec, plan: &SourcePlan) -> Result<()> {
    let mismatch = |what: &str| Err(Error::PlanMismatch(what.into()));
    let channels: Vec<usize> = (0..=target.depth()).map(|l| target.channels(l)).collect();
    if channels != plan.target_channels || count_nonzero(target) != plan.target_counts {
        return mismatch("target differs from the planned one");
    }
    if source.depth() != plan.depth() || source.input_channels() != plan.layout.input_channels {
        return mismatch("source depth or input channels differ from the plan");
    }
    if source.layers().iter().zip(&plan.layout.layers).any(|(l, s)| l.spec != *s) {
        return mismatch("source layer shapes differ from the plan");
    }
    if source.skips().len() != plan.layout.skips.len()
        || source.skips().iter().zip(&plan.layout.skips).any(|(a, b)| {
            a.from != b.from
                || a.to != b.to
                || match (&a.kind, &b.kind) {
                    (SkipKind::Identity { map: x }, SkipKind::Identity { map: y }) => x != y,
                    (SkipKind::General { kernel: x, .. }, SkipKind::General { kernel: y, .. }) => x != y,
                    _ => true,
                }
        })
    {
        return mismatch("source skips differ from the plan");
    }
    Ok(())
}

/// Per-layer spatial input dims of the target, when known.
pub(crate) fn target_input_dims(target: &NetworkSpec, plan: &SourcePlan) -> Vec<Option<Vec<usize>>> {
    let mut dims = plan.options.input_dims.clone();
    let mut out = Vec::with_capacity(target.depth());
    for l in target.layers() {
        out.push(dims.clone());
        dims = dims.map(|d| output_dims(&d, l.spec.stride));
    }
    out
}

/// Tap of a layer's kernel that reads position `o * stride` exactly.
pub(crate) fn aligned_tap(kernel: &[usize], stride: usize, dims: Option<&[usize]>) -> Result<usize> {
    match (stride, dims) {
        (1, _) => Ok(zero_offset_tap(kernel, kernel, 1)),
        (_, Some(d)) => Ok(zero_offset_tap(d, kernel, stride)),
        (_, None) => Err(Error::InvalidArgument("strided layers need the input dims".into())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Unit {
    Data(usize),
    /// Bias neurons (first layer) or neurons reading the constant channel.
    Const,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Class {
    Pos,
    Neg,
    /// A mirrored looks-linear pair `(2k, 2k + 1)`.
    Pair,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct RepKey {
    unit: Unit,
    class: Class,
    tap: usize,
    factor: f64,
}

/// Univariate layer `odd` replicating its input channels into sign-class
/// blocks, combined by layer `odd + 1`.
pub(crate) struct Replication {
    pub odd: usize,
    pub target_layer: usize,
    in_data: usize,
    const_channel: Option<usize>,
    kappa: f64,
    q_odd: usize,
    q_comb: usize,
    looks_linear: bool,
    lin: Linearization,
    m: usize,
    assigned: Vec<bool>,
    blocks: Vec<((Unit, Class), Vec<usize>)>,
    retry_blocks: Vec<((Unit, Class), Vec<usize>)>,
    /// Neurons handed out from the spare pool.
    pub spare_used: usize,
    /// Data neurons per input channel in primary blocks.
    pub data_block_width: usize,
}

impl Replication {
    pub fn new(ctx: &Ctx<'_>, odd: usize, target_layer: usize, dims: Option<&[usize]>) -> Result<Self> {
        let plan = ctx.plan;
        let act = plan.activation;
        let spec = &ctx.source.layer(odd).spec;
        let looks_linear = plan.layout.looks_linear[odd - 1];
        let const_channel = (target_layer > 1).then(|| plan.target_channels[target_layer - 1]);
        if const_channel.is_none() && !spec.has_bias {
            return Err(Error::PlanMismatch("first replication layer needs biases".into()));
        }
        let comb = &ctx.source.layer(odd + 1).spec;
        let slots = if looks_linear { spec.out_channels / 2 } else { spec.out_channels };
        let mut rep = Self {
            odd,
            target_layer,
            in_data: plan.target_channels[target_layer - 1],
            const_channel,
            kappa: if const_channel.is_some() { act.evaluate(1.0) } else { 1.0 },
            q_odd: aligned_tap(&spec.kernel, 1, None)?,
            q_comb: aligned_tap(&comb.kernel, comb.stride, dims)?,
            looks_linear,
            lin: act.linearize(0.5),
            m: plan.block[target_layer - 1],
            assigned: vec![false; slots],
            blocks: Vec::new(),
            retry_blocks: Vec::new(),
            spare_used: 0,
            data_block_width: 0,
        };
        let units: Vec<Unit> = (0..rep.in_data).map(Unit::Data).chain([Unit::Const]).collect();
        for unit in units {
            for class in rep.classes(unit) {
                let b = rep.allocate(ctx.source, unit, class, rep.m);
                if unit == Unit::Data(0) {
                    rep.data_block_width += b.len() * if looks_linear { 2 } else { 1 };
                }
                rep.blocks.push(((unit, class), b));
            }
        }
        Ok(rep)
    }

    fn classes(&self, unit: Unit) -> Vec<Class> {
        if self.looks_linear {
            return vec![Class::Pair];
        }
        match unit {
            Unit::Data(_) => vec![Class::Pos, Class::Neg],
            Unit::Const => [Class::Pos, Class::Neg]
                .into_iter()
                .filter(|c| self.slope(*c) != 0.0)
                .collect(),
        }
    }

    fn slope(&self, class: Class) -> f64 {
        match class {
            Class::Pos => self.lin.m_plus,
            Class::Neg => self.lin.m_minus,
            Class::Pair => self.lin.m_plus + self.lin.m_minus,
        }
    }

    fn neuron(&self, slot: usize) -> usize {
        if self.looks_linear {
            2 * slot
        } else {
            slot
        }
    }

    fn lambda_ref(&self, source: &NetworkSpec, neuron: usize, unit: Unit) -> ParamRef {
        let spec = &source.layer(self.odd).spec;
        let channel = match (unit, self.const_channel) {
            (Unit::Data(j), _) => j,
            (Unit::Const, Some(c)) => c,
            (Unit::Const, None) => {
                return ParamRef::Bias {
                    layer: self.odd,
                    index: neuron,
                }
            }
        };
        ParamRef::Weight {
            layer: self.odd,
            index: spec.weight_index(neuron, channel, self.q_odd),
        }
    }

    fn allocate(&mut self, source: &NetworkSpec, unit: Unit, class: Class, count: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        for slot in 0..self.assigned.len() {
            if out.len() == count {
                break;
            }
            if self.assigned[slot] {
                continue;
            }
            let lam = self
                .lambda_ref(source, self.neuron(slot), unit)
                .value(source)
                .expect("reference built from the source shape");
            let fits = match class {
                Class::Pos => lam > 0.0,
                Class::Neg => lam < 0.0,
                Class::Pair => lam != 0.0,
            };
            if fits {
                self.assigned[slot] = true;
                out.push(slot);
            }
        }
        out
    }

    fn base(&self, source: &NetworkSpec, slots: &[usize], key: RepKey, dest: usize) -> Vec<BaseElement> {
        let comb = &source.layer(self.odd + 1).spec;
        let w = |n: usize| ParamRef::Weight {
            layer: self.odd + 1,
            index: comb.weight_index(dest, n, key.tap),
        };
        slots
            .iter()
            .map(|&slot| {
                let n = self.neuron(slot);
                BaseElement {
                    weight: w(n),
                    lambda: Some(self.lambda_ref(source, n, key.unit)),
                    factor: key.factor,
                    mirror: self.looks_linear.then(|| w(n + 1)),
                    lambda_mirror: self
                        .looks_linear
                        .then(|| self.lambda_ref(source, n + 1, key.unit)),
                }
            })
            .collect()
    }

    fn block(&self, unit: Unit, class: Class) -> &[usize] {
        self.blocks
            .iter()
            .find(|(k, _)| *k == (unit, class))
            .map(|(_, b)| b.as_slice())
            .unwrap_or(&[])
    }

    /// Problems that build combining-layer row `dest` with role `role`.
    pub fn pending(&self, ctx: &Ctx<'_>, dest: usize, role: Role) -> Vec<Pending<RepKey>> {
        let l = self.target_layer;
        let tl = ctx.target.layer(l);
        let tol = ctx.plan.param_tolerance[l - 1];
        let mut out = Vec::new();
        let mut push = |kind, target, value, key: RepKey| {
            out.push(Pending {
                target_layer: l,
                kind,
                target,
                target_value: value,
                source_layer: self.odd + 1,
                dest_row: dest,
                base: self.base(ctx.source, self.block(key.unit, key.class), key, dest),
                tolerance: tol,
                key: Some(key),
            })
        };
        let const_factor = self.kappa
            * self
                .classes(Unit::Const)
                .iter()
                .map(|&c| self.slope(c))
                .sum::<f64>();
        let data_factor = self.lin.m_plus + self.lin.m_minus;
        match role {
            Role::Channel(i) => {
                for j in 0..self.in_data {
                    for q in 0..tl.spec.kernel_len() {
                        let index = tl.spec.weight_index(i, j, q);
                        let w = tl.weights[index];
                        if w == 0.0 {
                            continue;
                        }
                        for class in self.classes(Unit::Data(j)) {
                            let key = RepKey {
                                unit: Unit::Data(j),
                                class,
                                tap: q,
                                factor: data_factor,
                            };
                            let target = TargetRef::Param {
                                param: ParamRef::Weight { layer: l, index },
                            };
                            push(ProblemKind::Data, target, w, key);
                        }
                    }
                }
                let b = tl.biases[i];
                if b != 0.0 {
                    for class in self.classes(Unit::Const) {
                        let key = RepKey {
                            unit: Unit::Const,
                            class,
                            tap: self.q_comb,
                            factor: const_factor,
                        };
                        let target = TargetRef::Param {
                            param: ParamRef::Bias { layer: l, index: i },
                        };
                        push(ProblemKind::Bias, target, b, key);
                    }
                }
            }
            Role::Const => {
                for class in self.classes(Unit::Const) {
                    let key = RepKey {
                        unit: Unit::Const,
                        class,
                        tap: self.q_comb,
                        factor: const_factor,
                    };
                    push(ProblemKind::Constant, TargetRef::Constant { value: 1.0 }, 1.0, key);
                }
            }
        }
        out
    }

    /// Spare block for a failed problem, drawn once per (unit, class).
    pub fn retry(&mut self, source: &NetworkSpec, p: &Pending<RepKey>) -> Option<Vec<BaseElement>> {
        let key = p.key?;
        let slots = match self.retry_blocks.iter().find(|(k, _)| *k == (key.unit, key.class)) {
            Some((_, b)) => b.clone(),
            None => {
                let b = self.allocate(source, key.unit, key.class, self.m);
                self.spare_used += b.len() * if self.looks_linear { 2 } else { 1 };
                self.retry_blocks.push(((key.unit, key.class), b.clone()));
                b
            }
        };
        (!slots.is_empty()).then(|| self.base(source, &slots, key, p.dest_row))
    }

    /// Solves the given combining rows without committing them; records
    /// come back grouped per row.
    pub fn solve_rows(&mut self, ctx: &mut Ctx<'_>, rows: &[(usize, Role)]) -> Result<Vec<Vec<ProblemRecord>>> {
        let pending: Vec<_> = rows.iter().map(|&(d, role)| self.pending(ctx, d, role)).collect();
        let flat: Vec<_> = pending.into_iter().flatten().collect();
        let before = self.spare_used;
        let records = ctx.solve(&flat, |c, p| Ok(self.retry(c.source, p)))?;
        ctx.layers[self.target_layer - 1].spare_used += self.spare_used - before;
        let mut grouped: Vec<Vec<ProblemRecord>> = vec![Vec::new(); rows.len()];
        let mut it = records.into_iter().peekable();
        for (k, &(d, _)) in rows.iter().enumerate() {
            while it.peek().is_some_and(|r| r.dest_row == d) {
                grouped[k].push(it.next().expect("peeked"));
            }
        }
        Ok(grouped)
    }

    /// Builds and commits the given combining rows.
    pub fn build(&mut self, ctx: &mut Ctx<'_>, rows: &[(usize, Role)]) -> Result<()> {
        for rec in self.solve_rows(ctx, rows)?.iter().flatten() {
            ctx.commit(rec);
        }
        Ok(())
    }
}

/// Kept entries and dense size of the data blocks, for sparsity accounting.
pub(crate) fn data_block_counts(records: &[ProblemRecord]) -> (usize, f64) {
    let data: Vec<_> = records.iter().filter(|r| r.kind == ProblemKind::Data).collect();
    let kept = data
        .iter()
        .map(|r| r.chosen.iter().map(|&i| 1 + usize::from(r.base[i].mirror.is_some())).sum::<usize>())
        .sum();
    let mean = if data.is_empty() {
        0.0
    } else {
        data.iter().map(|r| r.chosen.len() as f64).sum::<f64>() / data.len() as f64
    };
    (kept, mean)
}

/// Totals and accounting shared by both constructions.
pub(crate) fn finish(
    ctx: Ctx<'_>,
    seed: u64,
    layer_map: Vec<LayerMap>,
    data_block_dense: usize,
) -> Result<(Mask, ConstructionReport)> {
    let ticket = apply_mask(ctx.source, &ctx.mask)?;
    let ticket_nonzeros = count_nonzero(&ticket).total;
    let (data_block_kept, mean) = data_block_counts(&ctx.records);
    let plan = ctx.plan;
    let block_size = plan
        .options
        .block_size
        .unwrap_or_else(|| plan.block.iter().copied().max().unwrap_or(0));
    let failed = ctx.records.iter().filter(|r| !r.success).count();
    let report = ConstructionReport {
        variant: plan.variant,
        seed,
        failed_problems: failed,
        retries: ctx.records.iter().filter(|r| r.attempts > 1).count(),
        budget_breach: failed > 0,
        target_nonzeros: plan.target_counts.total,
        source_nonzeros: count_nonzero(ctx.source).total,
        ticket_nonzeros,
        sparsity_ratio: ticket_nonzeros as f64 / ctx.source.dense_size() as f64,
        mean_subset_size: mean,
        block_size,
        expected_entries_per_weight: block_size as f64 * mean,
        data_block_kept,
        data_block_dense,
        rho: plan.rho,
        problems_within_rho: plan.rho.map(|r| ctx.records.len() as f64 <= r),
        layers: ctx.layers,
        layer_map,
        problems: ctx.records,
    };
    if report.budget_breach {
        log::warn!(
            "{} of {} subset-sum problems missed their tolerance",
            failed,
            report.problems.len()
        );
    }
    Ok((ctx.mask, report))
}
