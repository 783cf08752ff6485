//! What a construction did: every solved subset-sum problem with enough
//! references to recompute it from raw parameter values.

use serde::{Deserialize, Serialize};

use super::plan::Variant;
use crate::error::{Error, Result};
use crate::network::NetworkSpec;
use crate::subset_sum::subset_sum;
use crate::tensor::SkipKind;

/// A parameter of a network. Layers are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamRef {
    Weight { layer: usize, index: usize },
    Bias { layer: usize, index: usize },
    Skip { skip: usize, index: usize },
}

impl ParamRef {
    pub fn value(&self, net: &NetworkSpec) -> Result<f64> {
        let missing = || Error::PlanMismatch(format!("parameter {self:?} does not exist"));
        match *self {
            ParamRef::Weight { layer, index } => layer_checked(net, layer)
                .and_then(|l| l.weights.get(index).copied())
                .ok_or_else(missing),
            ParamRef::Bias { layer, index } => layer_checked(net, layer)
                .and_then(|l| l.biases.get(index).copied())
                .ok_or_else(missing),
            ParamRef::Skip { skip, index } => match net.skips().get(skip).map(|s| &s.kind) {
                Some(SkipKind::General { weights, .. }) => weights.get(index).copied().ok_or_else(missing),
                _ => Err(missing()),
            },
        }
    }
}

fn layer_checked(net: &NetworkSpec, layer: usize) -> Option<&crate::network::Layer> {
    (1..=net.depth()).contains(&layer).then(|| net.layer(layer))
}

/// The quantity a problem approximates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetRef {
    Param { param: ParamRef },
    /// Bias of a constant channel.
    Constant { value: f64 },
}

impl TargetRef {
    pub fn value(&self, target: &NetworkSpec) -> Result<f64> {
        match self {
            TargetRef::Param { param } => param.value(target),
            TargetRef::Constant { value } => Ok(*value),
        }
    }
}

/// One base value `X = (w * lambda) * factor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseElement {
    pub weight: ParamRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<ParamRef>,
    pub factor: f64,
    /// Set for looks-linear pairs: the mirrored combining weight that is
    /// kept together with `weight`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mirror: Option<ParamRef>,
    /// Univariate entry of the mirrored neuron of a looks-linear pair.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_mirror: Option<ParamRef>,
}

impl BaseElement {
    /// Every parameter that must survive when this element is chosen.
    pub fn kept(&self) -> impl Iterator<Item = ParamRef> {
        [Some(self.weight), self.lambda, self.mirror, self.lambda_mirror]
            .into_iter()
            .flatten()
    }

    pub fn value(&self, source: &NetworkSpec) -> Result<f64> {
        let w = self.weight.value(source)?;
        Ok(match self.lambda {
            Some(l) => (w * l.value(source)?) * self.factor,
            None => w * self.factor,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    /// A target weight rebuilt from replicas of one input channel.
    Data,
    /// A target bias rebuilt from the constant channel.
    Bias,
    /// The bias that keeps a constant channel at 1.
    Constant,
    /// A general skip filter entry.
    Skip,
}

impl ProblemKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProblemKind::Data => "data",
            ProblemKind::Bias => "bias",
            ProblemKind::Constant => "constant",
            ProblemKind::Skip => "skip",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemRecord {
    pub target_layer: usize,
    pub kind: ProblemKind,
    pub target: TargetRef,
    pub target_value: f64,
    /// Source layer whose parameters were selected.
    pub source_layer: usize,
    pub dest_row: usize,
    pub base: Vec<BaseElement>,
    pub chosen: Vec<usize>,
    pub error: f64,
    pub tolerance: f64,
    pub success: bool,
    pub attempts: usize,
}

/// Where target layer `l` lives in the ticket.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMap {
    pub target_layer: usize,
    pub source_layer: usize,
    /// Ticket channel approximating each target channel.
    pub channels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub target_layer: usize,
    pub budget: f64,
    pub tolerance: f64,
    pub problems: usize,
    pub max_error: f64,
    pub failed: usize,
    pub retries: usize,
    pub spare_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstructionReport {
    pub variant: Variant,
    pub seed: u64,
    pub layers: Vec<LayerReport>,
    pub layer_map: Vec<LayerMap>,
    pub problems: Vec<ProblemRecord>,
    pub failed_problems: usize,
    pub retries: usize,
    pub budget_breach: bool,
    pub target_nonzeros: usize,
    pub source_nonzeros: usize,
    pub ticket_nonzeros: usize,
    /// Ticket nonzeros over the dense source size.
    pub sparsity_ratio: f64,
    /// Mean chosen subset size over data problems.
    pub mean_subset_size: f64,
    /// Replica count or block size used for the accounting estimate.
    pub block_size: usize,
    /// `m E|S|` kept entries per target weight.
    pub expected_entries_per_weight: f64,
    /// Kept combining entries in data problems and the dense size of the
    /// blocks they were chosen from.
    pub data_block_kept: usize,
    pub data_block_dense: usize,
    pub rho: Option<f64>,
    pub problems_within_rho: Option<bool>,
}

impl ConstructionReport {
    pub fn max_error(&self) -> f64 {
        self.problems.iter().map(|p| p.error).fold(0.0, f64::max)
    }

    /// One row per problem.
    pub fn write_csv(&self, path: &std::path::Path, config: &serde_json::Value) -> Result<()> {
        let mut w = crate::network::csv_writer(path, config)?;
        w.write_record([
            "target_layer", "kind", "source_layer", "dest_row", "target_value", "subset_size",
            "error", "tolerance", "success", "attempts",
        ])
        .map_err(|e| csv_err(path, e))?;
        for p in &self.problems {
            w.write_record([
                p.target_layer.to_string(),
                p.kind.as_str().to_string(),
                p.source_layer.to_string(),
                p.dest_row.to_string(),
                format!("{:e}", p.target_value),
                p.chosen.len().to_string(),
                format!("{:e}", p.error),
                format!("{:e}", p.tolerance),
                p.success.to_string(),
                p.attempts.to_string(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_err(path: &std::path::Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

/// Recomputes the achieved error of a record from raw values.
pub(crate) fn recompute(record: &ProblemRecord, target: &NetworkSpec, source: &NetworkSpec) -> Result<f64> {
    let values = record
        .base
        .iter()
        .map(|b| b.value(source))
        .collect::<Result<Vec<_>>>()?;
    if record.chosen.iter().any(|&i| i >= values.len()) {
        return Err(Error::PlanMismatch("chosen index outside the base set".into()));
    }
    let t = record.target.value(target)?;
    Ok((t - subset_sum(&values, &record.chosen)).abs())
}
