//! Measuring a ticket: sampled sup-norm error against the target, exact
//! recomputation of every subset-sum residual, and sparsity accounting.

use std::collections::HashSet;
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::construction::report::recompute;
use crate::construction::{ConstructionReport, LayerMap, ParamRef, ProblemKind};
use crate::error::{Error, Result};
use crate::network::{count_nonzero, Mask, NetworkSpec};
use crate::subset_sum::trial_rng;
use crate::tensor::{ChannelTensor, SkipKind};

/// Inputs are drawn i.i.d. from `U[low, high]` per entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDomain {
    pub channels: usize,
    pub dims: Vec<usize>,
    pub low: f64,
    pub high: f64,
}

impl InputDomain {
    pub fn unit_cube(channels: usize, dims: Vec<usize>) -> Self {
        Self {
            channels,
            dims,
            low: -1.0,
            high: 1.0,
        }
    }

    fn sample(&self, seed: u64, index: u64) -> Result<ChannelTensor> {
        let mut rng = trial_rng(seed, index);
        let u = Uniform::new_inclusive(self.low, self.high);
        let n = self.channels * self.dims.iter().product::<usize>();
        ChannelTensor::new(self.channels, self.dims.clone(), (0..n).map(|_| u.sample(&mut rng)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDeviation {
    pub target_layer: usize,
    pub source_layer: usize,
    pub max_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    /// Largest output-entry deviation over all samples. Sampling only gives
    /// a lower bound on the true sup over the domain.
    pub sup_error: f64,
    pub per_layer: Vec<LayerDeviation>,
    pub samples: usize,
    pub seed: u64,
    pub domain: InputDomain,
    pub epsilon: Option<f64>,
    pub passed: Option<bool>,
}

impl VerificationReport {
    pub fn judge(mut self, epsilon: f64) -> Self {
        self.epsilon = Some(epsilon);
        self.passed = Some(self.sup_error <= epsilon);
        self
    }
}

fn max_dev(a: &ChannelTensor, b: &ChannelTensor, channels: &[usize]) -> f64 {
    let mut m = 0.0f64;
    for (i, &c) in channels.iter().enumerate() {
        for (x, y) in a.channel(i).iter().zip(b.channel(c)) {
            m = m.max((x - y).abs());
        }
    }
    m
}

/// Forwards `samples` random inputs through both networks. Sample `k` is
/// drawn from its own stream, so more samples only ever add inputs and the
/// result is the same at any thread count.
pub fn verify_sup_error(
    target: &NetworkSpec,
    ticket: &NetworkSpec,
    samples: usize,
    seed: u64,
    domain: &InputDomain,
    layer_map: &[LayerMap],
) -> Result<VerificationReport> {
    let (lt, ls) = (target.depth(), ticket.depth());
    if target.input_channels() != ticket.input_channels()
        || target.input_channels() != domain.channels
        || target.channels(lt) != ticket.channels(ls)
    {
        return Err(Error::Shape("target, ticket and input domain disagree on channels".into()));
    }
    if domain.dims.len() != target.spatial_rank() || !(domain.low <= domain.high) {
        return Err(Error::Shape("input domain does not match the networks".into()));
    }
    for m in layer_map {
        if m.target_layer == 0
            || m.target_layer > lt
            || m.source_layer == 0
            || m.source_layer > ls
            || m.channels.len() != target.channels(m.target_layer)
            || m.channels.iter().any(|&c| c >= ticket.channels(m.source_layer))
        {
            return Err(Error::Shape(format!("layer map entry for target layer {} is invalid", m.target_layer)));
        }
    }
    let out_channels: Vec<usize> = (0..target.channels(lt)).collect();
    let per_sample = (0..samples)
        .into_par_iter()
        .map(|k| {
            let x = domain.sample(seed, k as u64)?;
            let a = target.forward_trace(&x)?;
            let b = ticket.forward_trace(&x)?;
            if a[lt].dims() != b[ls].dims() {
                return Err(Error::Shape("output spatial dims differ".into()));
            }
            let layers = layer_map
                .iter()
                .map(|m| max_dev(&a[m.target_layer], &b[m.source_layer], &m.channels))
                .collect::<Vec<_>>();
            Ok((max_dev(&a[lt], &b[ls], &out_channels), layers))
        })
        .collect::<Result<Vec<_>>>()?;
    let sup_error = per_sample.iter().map(|(e, _)| *e).fold(0.0, f64::max);
    let per_layer = layer_map
        .iter()
        .enumerate()
        .map(|(i, m)| LayerDeviation {
            target_layer: m.target_layer,
            source_layer: m.source_layer,
            max_deviation: per_sample.iter().map(|(_, l)| l[i]).fold(0.0, f64::max),
        })
        .collect();
    Ok(VerificationReport {
        sup_error,
        per_layer,
        samples,
        seed,
        domain: domain.clone(),
        epsilon: None,
        passed: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub target_nonzeros: usize,
    pub target_dense: usize,
    pub ticket_nonzeros: usize,
    pub source_dense: usize,
    pub rho_t: f64,
    pub rho_eps: f64,
    pub mean_subset_size: f64,
    pub m: usize,
    /// `E|S| / m`, the predicted value of `rho_eps / rho_t`.
    pub predicted_ratio: f64,
    pub exact_ratio: f64,
    pub relative_gap: f64,
    /// Same comparison restricted to the blocks data problems choose from,
    /// which leaves out constant channels, spares and the univariate layer.
    pub data_block_ratio: f64,
    pub data_block_relative_gap: f64,
    /// Kept entries split by origin; their sum must equal the mask's count.
    pub subset_entries: usize,
    pub univariate_entries: usize,
    pub bias_entries: usize,
    pub recount_matches: bool,
}

fn gap(exact: f64, predicted: f64) -> f64 {
    if predicted == 0.0 {
        if exact == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (exact - predicted).abs() / predicted
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Nonzero parameters; identity skips carry none.
fn param_nonzeros(net: &NetworkSpec) -> usize {
    let general: usize = net
        .skips()
        .iter()
        .map(|s| match &s.kind {
            SkipKind::General { weights, .. } => weights.iter().filter(|w| **w != 0.0).count(),
            SkipKind::Identity { .. } => 0,
        })
        .sum();
    count_nonzero(net).weights.iter().sum::<usize>() + general
}

/// Sparsity of target and ticket relative to their dense networks, and how
/// well `rho_eps / rho_t ~ E|S| / m` holds.
pub fn sparsity_accounting(
    target: &NetworkSpec,
    ticket: &NetworkSpec,
    source: &NetworkSpec,
    report: &ConstructionReport,
    mask: &Mask,
) -> SparsityReport {
    let target_nonzeros = param_nonzeros(target);
    let ticket_nonzeros = param_nonzeros(ticket);
    let (target_dense, source_dense) = (target.dense_size(), source.dense_size());
    let rho_t = ratio(target_nonzeros, target_dense);
    let rho_eps = ratio(ticket_nonzeros, source_dense);
    let predicted = if report.block_size == 0 {
        0.0
    } else {
        report.mean_subset_size / report.block_size as f64
    };
    let exact_ratio = if rho_t == 0.0 { 0.0 } else { rho_eps / rho_t };

    let weight_nz: usize = target.layers().iter().map(|l| l.weights.iter().filter(|w| **w != 0.0).count()).sum();
    let weight_dense: usize = target.layers().iter().map(|l| l.weights.len()).sum();
    let rho_tw = ratio(weight_nz, weight_dense);
    let data_block = ratio(report.data_block_kept, report.data_block_dense);
    let data_block_ratio = if rho_tw == 0.0 { 0.0 } else { data_block / rho_tw };

    let mut subset_entries = 0;
    let mut lambdas = HashSet::new();
    for p in &report.problems {
        for &c in &p.chosen {
            let b = &p.base[c];
            subset_entries += 1 + usize::from(b.mirror.is_some());
            lambdas.extend([b.lambda, b.lambda_mirror].into_iter().flatten());
        }
    }
    let bias_entries = lambdas.iter().filter(|p| matches!(p, ParamRef::Bias { .. })).count();
    let univariate_entries = lambdas.len() - bias_entries;
    SparsityReport {
        target_nonzeros,
        target_dense,
        ticket_nonzeros,
        source_dense,
        rho_t,
        rho_eps,
        mean_subset_size: report.mean_subset_size,
        m: report.block_size,
        predicted_ratio: predicted,
        exact_ratio,
        relative_gap: gap(exact_ratio, predicted),
        data_block_ratio,
        data_block_relative_gap: gap(data_block_ratio, predicted),
        subset_entries,
        univariate_entries,
        bias_entries,
        recount_matches: subset_entries + univariate_entries + bias_entries == mask.count_kept(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionRow {
    pub problem: usize,
    pub target_layer: usize,
    pub kind: ProblemKind,
    pub subset_size: usize,
    pub error: f64,
    pub reported_error: f64,
    pub tolerance: f64,
    /// Bitwise equality with the construction report.
    pub matches_report: bool,
}

fn mask_bit(mask: &Mask, p: ParamRef) -> Option<bool> {
    match p {
        ParamRef::Weight { layer, index } => mask.layers.get(layer.wrapping_sub(1))?.weights.get(index).copied(),
        ParamRef::Bias { layer, index } => mask.layers.get(layer.wrapping_sub(1))?.biases.get(index).copied(),
        ParamRef::Skip { skip, index } => mask.skips.get(skip)?.get(index).copied(),
    }
}

/// Recomputes every subset-sum residual from raw target and source values,
/// after checking that each selected parameter survives the mask.
pub fn param_reconstruction(
    target: &NetworkSpec,
    source: &NetworkSpec,
    mask: &Mask,
    report: &ConstructionReport,
) -> Result<Vec<ReconstructionRow>> {
    report
        .problems
        .iter()
        .enumerate()
        .map(|(i, p)| {
            for &c in &p.chosen {
                let b = p.base.get(c).ok_or_else(|| Error::PlanMismatch(format!("problem {i} chooses a missing element")))?;
                if b.kept().any(|r| mask_bit(mask, r) != Some(true)) {
                    return Err(Error::PlanMismatch(format!("problem {i} uses a parameter the mask removes")));
                }
            }
            let error = recompute(p, target, source)?;
            Ok(ReconstructionRow {
                problem: i,
                target_layer: p.target_layer,
                kind: p.kind,
                subset_size: p.chosen.len(),
                error,
                reported_error: p.error,
                tolerance: p.tolerance,
                matches_report: error.to_bits() == p.error.to_bits(),
            })
        })
        .collect()
}

pub fn write_reconstruction_csv(rows: &[ReconstructionRow], path: &Path, config: &serde_json::Value) -> Result<()> {
    let fmt = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut w = crate::network::csv_writer(path, config)?;
    w.write_record(["problem", "target_layer", "kind", "subset_size", "error", "reported_error", "tolerance", "matches_report"])
        .map_err(fmt)?;
    for r in rows {
        w.write_record([
            r.problem.to_string(),
            r.target_layer.to_string(),
            r.kind.as_str().to_string(),
            r.subset_size.to_string(),
            format!("{:e}", r.error),
            format!("{:e}", r.reported_error),
            format!("{:e}", r.tolerance),
            r.matches_report.to_string(),
        ])
        .map_err(fmt)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
