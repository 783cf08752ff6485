//! Source-network planning: widths, weight scales, budgets and block sizes,
//! all fixed before anything is sampled.

use serde::{Deserialize, Serialize};

use super::budget::{error_budget_2l, error_budget_lp1};
use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::network::{count_nonzero, LayerSpec, NetworkSpec, NonzeroCounts, SourceLayout};
use crate::subset_sum::{ceil_snapped, SolveMode, MAX_BASE_SET};
use crate::tensor::{SkipKind, SkipOperator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Two source layers per target layer.
    TwoForOne,
    /// One replication layer followed by one source layer per target layer.
    DepthPlusOne,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2l" | "two_for_one" => Ok(Variant::TwoForOne),
            "lp1" | "depth_plus_one" => Ok(Variant::DepthPlusOne),
            _ => Err(Error::InvalidArgument(format!("unknown variant `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanOptions {
    pub epsilon: f64,
    pub delta: f64,
    #[serde(default = "default_c")]
    pub c: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Overrides every block size (and the replica count).
    #[serde(default)]
    pub block_size: Option<usize>,
    /// Spare neurons per layer; defaults to `2m` for replication layers and
    /// `m` for direct layers.
    #[serde(default)]
    pub spare: Option<usize>,
    /// Per-parameter tolerance; defaults to 0.01 when the block size is
    /// overridden, else to the layer budget.
    #[serde(default)]
    pub param_tolerance: Option<f64>,
    #[serde(default = "default_mode")]
    pub solve_mode: SolveMode,
    #[serde(default)]
    pub looks_linear: bool,
    /// Width multiplier for strided replication layers.
    #[serde(default = "default_stride")]
    pub replication_stride: usize,
    /// Spatial input size. Needed when a target layer has stride > 1, since
    /// the tap that keeps a constant channel aligned depends on it.
    #[serde(default)]
    pub input_dims: Option<Vec<usize>>,
}

fn default_c() -> f64 {
    3.0
}
fn default_gamma() -> f64 {
    0.1
}
fn default_mode() -> SolveMode {
    SolveMode::Threshold
}
fn default_stride() -> usize {
    1
}

impl PlanOptions {
    pub fn new(epsilon: f64, delta: f64) -> Self {
        Self {
            epsilon,
            delta,
            c: default_c(),
            gamma: default_gamma(),
            block_size: None,
            spare: None,
            param_tolerance: None,
            solve_mode: default_mode(),
            looks_linear: false,
            replication_stride: 1,
            input_dims: None,
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [("epsilon", self.epsilon), ("delta", self.delta)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidArgument(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if !(self.c > 0.0 && self.c.is_finite()) || !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidArgument("C and gamma must be positive".into()));
        }
        if self.block_size == Some(0) || self.replication_stride == 0 {
            return Err(Error::InvalidArgument("block size and stride must be positive".into()));
        }
        if let Some(d) = &self.input_dims {
            if d.is_empty() || d.contains(&0) {
                return Err(Error::InvalidArgument("input dims must be positive".into()));
            }
        }
        if let Some(t) = self.param_tolerance {
            if !(t > 0.0) {
                return Err(Error::InvalidArgument("parameter tolerance must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourcePlan {
    pub variant: Variant,
    pub options: PlanOptions,
    pub activation: Activation,
    pub lipschitz: f64,
    /// `c_{t,0} .. c_{t,L}`.
    pub target_channels: Vec<usize>,
    pub target_counts: NonzeroCounts,
    /// `eps_l` per target layer.
    pub budgets: Vec<f64>,
    /// Per-parameter subset-sum tolerance per target layer.
    pub param_tolerance: Vec<f64>,
    /// Activation approximation scale per replication stage (none for
    /// piecewise-linear activations).
    pub eps_activation: Vec<Option<f64>>,
    pub delta_problem: f64,
    /// Block size per target layer: sign-class block of the replication
    /// stage, or the replica count for direct layers.
    pub block: Vec<usize>,
    /// Replicas per channel in interior layers of the depth-plus-one
    /// construction.
    pub replicas: Option<usize>,
    pub rho: Option<f64>,
    /// Width lower bound from the existence theorems, per source layer that
    /// has one (0 otherwise).
    pub width_bound: Vec<usize>,
    /// `c_{0,0} .. c_{0,L0}`.
    pub widths: Vec<usize>,
    pub sigma: Vec<f64>,
    /// Spare neurons per source layer.
    pub spare: Vec<usize>,
    /// Source layer whose output approximates target layer `l` (index
    /// `l - 1`).
    pub layer_map: Vec<usize>,
    pub layout: SourceLayout,
}

impl SourcePlan {
    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }
}

struct TargetInfo {
    activation: Activation,
    channels: Vec<usize>,
    counts: NonzeroCounts,
    total: usize,
}

fn inspect_target(target: &NetworkSpec, opts: &PlanOptions) -> Result<TargetInfo> {
    opts.validate()?;
    let act = target.layer(1).spec.activation;
    if target.layers().iter().any(|l| l.spec.activation != act) {
        return Err(Error::Unsupported("targets with mixed activations".into()));
    }
    if !target.has_unit_output_scale() {
        return Err(Error::Unsupported("targets with non-unit output scale".into()));
    }
    if act.offset() != 0.0 && !opts.looks_linear {
        return Err(Error::UnsupportedActivation {
            activation: act.to_string(),
            reason: "phi(0) != 0 requires looks-linear initialization (--looks-linear)".into(),
        });
    }
    target.check_unit_range()?;
    let strided = target.layers().iter().any(|l| l.spec.stride > 1);
    match &opts.input_dims {
        None if strided => {
            return Err(Error::InvalidArgument(
                "targets with stride > 1 need the input dims (--input-dims)".into(),
            ))
        }
        Some(d) if d.len() != target.spatial_rank() => {
            return Err(Error::InvalidArgument("input dims do not match the spatial rank".into()))
        }
        _ => {}
    }
    let counts = count_nonzero(target);
    let channels = (0..=target.depth()).map(|l| target.channels(l)).collect();
    Ok(TargetInfo {
        activation: act,
        total: counts.total,
        channels,
        counts,
    })
}

fn ln_ratio(num: f64, den: f64) -> f64 {
    (num / den).ln().max(0.0)
}

/// Scale of the replication layer feeding a combining layer whose
/// per-parameter budget is `eps_l` and whose blocks hold `m` neurons.
fn replication_scale(act: Activation, eps_l: f64, m: usize) -> (Option<f64>, f64) {
    let lin = act.linearize(0.5);
    let Some((low, high)) = act.g_range() else {
        return (None, 1.0);
    };
    let y = (2.0 * eps_l / (m as f64 * lin.r)).clamp(low * (1.0 + 1e-12), high);
    let eps_pp = act.invert_g(y).expect("clamped into range");
    (Some(eps_pp), (act.validity_radius(eps_pp) / 2.0).min(1.0))
}

fn check_block(m: usize) -> Result<()> {
    if m > MAX_BASE_SET {
        return Err(Error::BaseSetTooLarge {
            size: m,
            limit: MAX_BASE_SET,
        });
    }
    Ok(())
}

/// Plan for the construction with two source layers per target layer.
pub fn plan_2l(target: &NetworkSpec, opts: &PlanOptions) -> Result<SourcePlan> {
    let info = inspect_target(target, opts)?;
    if !target.skips().is_empty() {
        return Err(Error::Unsupported(
            "skip connections in the two-for-one construction; use depth_plus_one".into(),
        ));
    }
    let act = info.activation;
    let t = act.lipschitz();
    let depth = target.depth();
    let budgets = error_budget_2l(target, opts.epsilon, t)?;
    let lin = act.linearize(0.5);
    let s0 = opts.replication_stride;

    let mut widths = vec![info.channels[0]];
    let mut sigma = Vec::new();
    let mut spare = Vec::new();
    let mut layers = Vec::new();
    let mut width_bound = Vec::new();
    let mut block = Vec::new();
    let mut eps_activation = Vec::new();
    let mut tolerance = Vec::new();
    for l in 1..=depth {
        let eps_l = budgets[l - 1];
        let floor = eps_l.min(opts.delta);
        let m_theory = ceil_snapped(opts.c * ln_ratio(info.total as f64, floor));
        let m = opts.block_size.unwrap_or(m_theory);
        check_block(m)?;
        let units = info.channels[l - 1] + 1;
        let sp = opts.spare.unwrap_or(2 * m);
        let sp = if opts.looks_linear { sp + sp % 2 } else { sp };
        let odd = 2 * m * units * s0 + sp;
        let (eps_pp, s_rep) = replication_scale(act, eps_l, m);
        let tl = &target.layer(l).spec;
        let in_ch = *widths.last().expect("nonempty");
        layers.push(LayerSpec {
            in_channels: in_ch,
            out_channels: odd,
            kernel: tl.kernel.clone(),
            stride: 1,
            activation: act,
            has_bias: l == 1,
        });
        let even = if l == depth { info.channels[l] } else { info.channels[l] + 1 };
        layers.push(LayerSpec {
            in_channels: odd,
            out_channels: even,
            kernel: tl.kernel.clone(),
            stride: tl.stride,
            activation: act,
            has_bias: false,
        });
        widths.extend([odd, even]);
        sigma.extend([s_rep, lin.r / s_rep]);
        spare.extend([sp, 0]);
        width_bound.extend([
            ceil_snapped(opts.c * info.channels[l - 1] as f64 * ln_ratio(info.total as f64, floor)),
            info.channels[l] + 1,
        ]);
        block.push(m);
        eps_activation.push(eps_pp);
        tolerance.push(opts.param_tolerance.unwrap_or(if opts.block_size.is_some() {
            0.01
        } else {
            eps_l
        }));
    }
    let looks_linear = (0..2 * depth).map(|i| opts.looks_linear && i % 2 == 0).collect();
    let layout = SourceLayout {
        input_channels: info.channels[0],
        layers,
        skips: vec![],
        sigma: sigma.clone(),
        skip_sigma: 1.0,
        looks_linear,
    };
    Ok(SourcePlan {
        variant: Variant::TwoForOne,
        options: opts.clone(),
        activation: act,
        lipschitz: t,
        target_channels: info.channels,
        delta_problem: opts.delta / (2.0 * info.total as f64),
        target_counts: info.counts,
        budgets,
        param_tolerance: tolerance,
        eps_activation,
        block,
        replicas: None,
        rho: None,
        width_bound,
        widths,
        sigma,
        spare,
        layer_map: (1..=depth).map(|l| 2 * l).collect(),
        layout,
    })
}

/// Slot layout of an interior source layer in the depth-plus-one
/// construction: `R` replicas per target channel, then `R` constant
/// replicas, then spares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotLayout {
    pub channels: usize,
    pub replicas: usize,
    pub spare: usize,
}

impl SlotLayout {
    pub fn slot(&self, channel: usize, replica: usize) -> usize {
        channel * self.replicas + replica
    }

    pub fn const_slot(&self, replica: usize) -> usize {
        self.channels * self.replicas + replica
    }

    pub fn spare_slot(&self, p: usize) -> usize {
        (self.channels + 1) * self.replicas + p
    }

    pub fn width(&self) -> usize {
        (self.channels + 1) * self.replicas + self.spare
    }
}

/// Plan for the construction of depth `L + 1`.
pub fn plan_lp1(target: &NetworkSpec, opts: &PlanOptions) -> Result<SourcePlan> {
    let info = inspect_target(target, opts)?;
    let act = info.activation;
    let t = act.lipschitz();
    let depth = target.depth();
    let budgets = error_budget_lp1(target, opts.epsilon, t)?;
    let min_eps = budgets.iter().cloned().fold(f64::INFINITY, f64::min);
    let rho = (opts.c
        * (info.total as f64).powf(1.0 + opts.gamma)
        * ln_ratio(1.0, min_eps.min(opts.delta)))
    .ceil();
    let floor = |l: usize| budgets[l - 1].min(opts.delta / rho);
    let m_theory: Vec<usize> = (1..=depth)
        .map(|l| ceil_snapped(opts.c * ln_ratio(1.0, floor(l))))
        .collect();
    let block: Vec<usize> = m_theory.iter().map(|&m| opts.block_size.unwrap_or(m)).collect();
    let replicas = block[1..].iter().copied().max().unwrap_or(block[0]);
    check_block(block[0])?;
    check_block(replicas)?;
    let lin = act.linearize(0.5);
    let s0 = opts.replication_stride;
    let m1 = block[0];
    let (eps_pp, s_rep) = replication_scale(act, budgets[0], m1);

    let sp1 = opts.spare.unwrap_or(2 * m1);
    let sp1 = if opts.looks_linear { sp1 + sp1 % 2 } else { sp1 };
    let w1 = 2 * m1 * (info.channels[0] + 1) * s0 + sp1;
    let mut widths = vec![info.channels[0], w1];
    let mut sigma = vec![s_rep];
    let mut spare = vec![sp1];
    let mut width_bound =
        vec![ceil_snapped(opts.c * info.channels[0] as f64 * ln_ratio(1.0, floor(1)))];
    let mut layers = vec![LayerSpec {
        in_channels: info.channels[0],
        out_channels: w1,
        kernel: target.layer(1).spec.kernel.clone(),
        stride: 1,
        activation: act,
        has_bias: true,
    }];
    let mut slot_layouts = Vec::new();
    for l in 1..=depth {
        let tl = &target.layer(l).spec;
        let (width, sp) = if l == depth {
            (info.channels[l], 0)
        } else {
            let sp = opts.spare.unwrap_or(replicas);
            let s = SlotLayout {
                channels: info.channels[l],
                replicas,
                spare: sp,
            };
            slot_layouts.push(s);
            (s.width(), sp)
        };
        layers.push(LayerSpec {
            in_channels: *widths.last().expect("nonempty"),
            out_channels: width,
            kernel: tl.kernel.clone(),
            stride: tl.stride,
            activation: act,
            has_bias: false,
        });
        widths.push(width);
        sigma.push(if l == 1 { lin.r / s_rep } else { 1.0 });
        spare.push(sp);
        width_bound.push(if l == depth {
            info.channels[l]
        } else {
            ceil_snapped(opts.c * info.channels[l] as f64 * ln_ratio(1.0, floor(l + 1)))
        });
    }
    let skips = target
        .skips()
        .iter()
        .map(|s| source_skip(s, target, &slot_layouts, &widths))
        .collect::<Result<Vec<_>>>()?;
    let mut looks_linear = vec![false; depth + 1];
    looks_linear[0] = opts.looks_linear;
    let layout = SourceLayout {
        input_channels: info.channels[0],
        layers,
        skips,
        sigma: sigma.clone(),
        skip_sigma: 1.0,
        looks_linear,
    };
    let tolerance = budgets
        .iter()
        .map(|&e| {
            opts.param_tolerance
                .unwrap_or(if opts.block_size.is_some() { 0.01 } else { e })
        })
        .collect();
    Ok(SourcePlan {
        variant: Variant::DepthPlusOne,
        options: opts.clone(),
        activation: act,
        lipschitz: t,
        target_channels: info.channels,
        delta_problem: opts.delta / (2.0 * info.total as f64),
        target_counts: info.counts,
        budgets,
        param_tolerance: tolerance,
        eps_activation: vec![eps_pp],
        block,
        replicas: (depth > 1).then_some(replicas),
        rho: Some(rho),
        width_bound,
        widths,
        sigma,
        spare,
        layer_map: (1..=depth).map(|l| l + 1).collect(),
        layout,
    })
}

/// Slot layout of source layer `l + 1` (interior target layer `l`).
pub fn slot_layout(plan: &SourcePlan, target_layer: usize) -> Option<SlotLayout> {
    let depth = plan.target_channels.len() - 1;
    if plan.variant != Variant::DepthPlusOne || target_layer == 0 || target_layer >= depth {
        return None;
    }
    Some(SlotLayout {
        channels: plan.target_channels[target_layer],
        replicas: plan.replicas?,
        spare: plan.spare[target_layer],
    })
}

// Mirrors a target skip `t -> l` as a source skip `t' -> l + 1`, where
// `t' = t + 1` for hidden layers and the input stays the input.
fn source_skip(
    skip: &SkipOperator,
    target: &NetworkSpec,
    slots: &[SlotLayout],
    widths: &[usize],
) -> Result<SkipOperator> {
    let depth = target.depth();
    let from = if skip.from == 0 { 0 } else { skip.from + 1 };
    let to = skip.to + 1;
    let kind = match &skip.kind {
        SkipKind::Identity { map } => {
            let src_slot = |j: usize, r: usize| -> usize {
                if skip.from == 0 {
                    j
                } else {
                    slots[skip.from - 1].slot(j, r)
                }
            };
            let new_map = if skip.to == depth {
                map.iter().map(|j| j.map(|j| src_slot(j, 0))).collect()
            } else {
                let dst = slots[skip.to - 1];
                let mut m = vec![None; dst.width()];
                for (i, j) in map.iter().enumerate() {
                    for r in 0..dst.replicas {
                        m[dst.slot(i, r)] = j.map(|j| src_slot(j, r));
                    }
                }
                if skip.from > 0 {
                    let src = slots[skip.from - 1];
                    for p in 0..dst.spare.min(src.spare) {
                        m[dst.spare_slot(p)] = Some(src.spare_slot(p));
                    }
                }
                m
            };
            SkipKind::Identity { map: new_map }
        }
        SkipKind::General { kernel, .. } => {
            if skip.from == 0 {
                return Err(Error::Unsupported(
                    "general skips reading the network input (no replicas to select from)".into(),
                ));
            }
            let k: usize = kernel.iter().product();
            SkipKind::General {
                kernel: kernel.clone(),
                weights: vec![0.0; widths[to] * widths[from] * k],
            }
        }
    };
    Ok(SkipOperator { from, to, kind })
}

/// Theoretical odd-layer width bound `ceil(C c ln(N / floor))`.
pub fn width_bound(c: f64, channels: usize, n_total: usize, floor: f64) -> usize {
    ceil_snapped(c * channels as f64 * ln_ratio(n_total as f64, floor))
}
