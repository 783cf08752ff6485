//! Network specifications, forward evaluation, masks and parameter counts.
//!
//! Layers are numbered from 1; "layer 0" is the network input. A skip
//! operator `from -> to` adds its contribution after the activation of
//! layer `to`, reading the stored output of layer `from`.

mod init;
mod io;

use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::tensor::{layer_preactivation, skip_forward, ChannelTensor, LayerView, SkipKind, SkipOperator};

pub use init::{init_source, random_target, LayerArch, SourceLayout};
pub use io::{
    csv_reader, csv_writer, load_mask, load_network, load_target, read_json, save_mask, save_network, write_json,
    NET_FORMAT, MASK_FORMAT, FORMAT_VERSION,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Spatial kernel shape, one entry per spatial axis.
    pub kernel: Vec<usize>,
    pub stride: usize,
    pub activation: Activation,
    pub has_bias: bool,
}

impl LayerSpec {
    pub fn kernel_len(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_len()
    }

    /// Flat index of weight `(out, in, tap)`.
    pub fn weight_index(&self, out: usize, input: usize, tap: usize) -> usize {
        (out * self.in_channels + input) * self.kernel_len() + tap
    }

    fn validate(&self, index: usize) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Shape(format!("layer {index} has zero channels")));
        }
        if self.kernel.is_empty() || self.kernel.len() > 2 || self.kernel.contains(&0) {
            return Err(Error::Shape(format!(
                "layer {index} has invalid kernel shape {:?}",
                self.kernel
            )));
        }
        if self.stride == 0 {
            return Err(Error::Shape(format!("layer {index} has stride 0")));
        }
        Ok(())
    }
}

/// A layer's architecture plus its parameters. Weights are laid out
/// `[out][in][tap]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    pub fn zeros(spec: LayerSpec) -> Self {
        Self {
            weights: vec![0.0; spec.weight_len()],
            biases: vec![0.0; spec.out_channels],
            spec,
        }
    }

    fn view(&self) -> LayerView<'_> {
        LayerView {
            in_channels: self.spec.in_channels,
            out_channels: self.spec.out_channels,
            kernel: &self.spec.kernel,
            stride: self.spec.stride,
            weights: &self.weights,
            biases: &self.biases,
            activation: self.spec.activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    input_channels: usize,
    layers: Vec<Layer>,
    skips: Vec<SkipOperator>,
    output_scale: Vec<f64>,
}

static WARNED_INPUT_RANGE: AtomicBool = AtomicBool::new(false);

impl NetworkSpec {
    pub fn new(input_channels: usize, layers: Vec<Layer>, skips: Vec<SkipOperator>) -> Result<Self> {
        let scale = vec![1.0; layers.len()];
        Self::with_output_scale(input_channels, layers, skips, scale)
    }

    pub fn with_output_scale(
        input_channels: usize,
        layers: Vec<Layer>,
        skips: Vec<SkipOperator>,
        output_scale: Vec<f64>,
    ) -> Result<Self> {
        let net = Self {
            input_channels,
            layers,
            skips,
            output_scale,
        };
        net.validate()?;
        Ok(net)
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Shape("network has no layers".into()));
        }
        if self.input_channels == 0 {
            return Err(Error::Shape("network has zero input channels".into()));
        }
        let rank = self.layers[0].spec.kernel.len();
        let mut prev = self.input_channels;
        for (i, layer) in self.layers.iter().enumerate() {
            let l = i + 1;
            layer.spec.validate(l)?;
            if layer.spec.kernel.len() != rank {
                return Err(Error::Shape(format!("layer {l} changes the spatial rank")));
            }
            if layer.spec.in_channels != prev {
                return Err(Error::ChannelMismatch {
                    expected: prev,
                    actual: layer.spec.in_channels,
                });
            }
            if layer.weights.len() != layer.spec.weight_len()
                || layer.biases.len() != layer.spec.out_channels
            {
                return Err(Error::Shape(format!("layer {l} parameter lengths do not match")));
            }
            if layer.weights.iter().chain(&layer.biases).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("layer parameters"));
            }
            if !layer.spec.has_bias && layer.biases.iter().any(|&b| b != 0.0) {
                return Err(Error::Shape(format!("layer {l} has no bias but nonzero biases")));
            }
            prev = layer.spec.out_channels;
        }
        if self.output_scale.len() != self.layers.len()
            || self.output_scale.iter().any(|s| !(s.is_finite() && *s > 0.0))
        {
            return Err(Error::Shape("output scale must hold one positive value per layer".into()));
        }
        for skip in &self.skips {
            if skip.from >= skip.to || skip.to > self.depth() {
                return Err(Error::Shape(format!(
                    "skip {} -> {} is not a forward connection",
                    skip.from, skip.to
                )));
            }
            let c_from = self.channels(skip.from);
            let c_to = self.channels(skip.to);
            match &skip.kind {
                SkipKind::Identity { map } => {
                    if map.len() != c_to || map.iter().flatten().any(|&j| j >= c_from) {
                        return Err(Error::Shape(format!(
                            "identity skip {} -> {} has an invalid channel map",
                            skip.from, skip.to
                        )));
                    }
                }
                SkipKind::General { kernel, weights } => {
                    if kernel.len() != rank
                        || weights.len() != c_to * c_from * kernel.iter().product::<usize>()
                    {
                        return Err(Error::Shape(format!(
                            "general skip {} -> {} has an invalid filter grid",
                            skip.from, skip.to
                        )));
                    }
                    if weights.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite("skip parameters"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    /// Channel count of layer `l`, with `l = 0` the input.
    pub fn channels(&self, l: usize) -> usize {
        if l == 0 {
            self.input_channels
        } else {
            self.layers[l - 1].spec.out_channels
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Layer `l`, 1-based.
    pub fn layer(&self, l: usize) -> &Layer {
        &self.layers[l - 1]
    }

    pub fn skips(&self) -> &[SkipOperator] {
        &self.skips
    }

    pub fn output_scale(&self) -> &[f64] {
        &self.output_scale
    }

    pub fn spatial_rank(&self) -> usize {
        self.layers[0].spec.kernel.len()
    }

    pub fn has_unit_output_scale(&self) -> bool {
        self.output_scale.iter().all(|&s| s == 1.0)
    }

    /// Total number of maskable parameters: all weights, all biases and all
    /// general skip entries.
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum::<usize>()
            + self.skips.iter().map(SkipOperator::param_len).sum::<usize>()
    }

    /// Size of the dense parameter set used as sparsity reference: weights,
    /// biases of layers that have them, and general skip entries.
    pub fn dense_size(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + if l.spec.has_bias { l.biases.len() } else { 0 })
            .sum::<usize>()
            + self.skips.iter().map(SkipOperator::param_len).sum::<usize>()
    }

    pub fn max_abs_parameter(&self) -> f64 {
        let layer_max = self
            .layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases))
            .fold(0.0f64, |m, v| m.max(v.abs()));
        self.skips
            .iter()
            .filter_map(|s| match &s.kind {
                SkipKind::General { weights, .. } => Some(weights),
                SkipKind::Identity { .. } => None,
            })
            .flatten()
            .fold(layer_max, |m, v| m.max(v.abs()))
    }

    /// Rejects targets with any parameter outside `[-1, 1]`.
    pub fn check_unit_range(&self) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            if let Some(v) = l.weights.iter().chain(&l.biases).find(|v| v.abs() > 1.0) {
                return Err(Error::ParameterOutOfRange {
                    layer: i + 1,
                    value: *v,
                });
            }
        }
        for s in &self.skips {
            if let SkipKind::General { weights, .. } = &s.kind {
                if let Some(v) = weights.iter().find(|v| v.abs() > 1.0) {
                    return Err(Error::ParameterOutOfRange {
                        layer: s.to,
                        value: *v,
                    });
                }
            }
        }
        Ok(())
    }

    /// Divides each offending layer's weights and biases by a power of two
    /// and moves the factor into the layer's output scale, which leaves the
    /// function unchanged for positively homogeneous activations.
    pub fn rescale_to_unit_range(&self) -> Result<NetworkSpec> {
        let mut out = self.clone();
        for (i, layer) in out.layers.iter_mut().enumerate() {
            let max = layer
                .weights
                .iter()
                .chain(&layer.biases)
                .fold(0.0f64, |m, v| m.max(v.abs()));
            if max <= 1.0 {
                continue;
            }
            if !layer.spec.activation.is_positively_homogeneous() {
                return Err(Error::UnsupportedActivation {
                    activation: layer.spec.activation.to_string(),
                    reason: format!("layer {} cannot be rescaled without changing the function", i + 1),
                });
            }
            let factor = 2f64.powi(max.log2().ceil() as i32);
            layer.weights.iter_mut().for_each(|w| *w /= factor);
            layer.biases.iter_mut().for_each(|b| *b /= factor);
            out.output_scale[i] *= factor;
        }
        if out.skips.iter().any(|s| {
            matches!(&s.kind, SkipKind::General { weights, .. } if weights.iter().any(|v| v.abs() > 1.0))
        }) {
            return Err(Error::Unsupported("rescaling general skip filters".into()));
        }
        Ok(out)
    }

    pub fn forward(&self, input: &ChannelTensor) -> Result<ChannelTensor> {
        Ok(self.forward_trace(input)?.pop().expect("at least one layer"))
    }

    /// All intermediate outputs `x^(0) ... x^(L)`.
    pub fn forward_trace(&self, input: &ChannelTensor) -> Result<Vec<ChannelTensor>> {
        if input.channels() != self.input_channels {
            return Err(Error::ChannelMismatch {
                expected: self.input_channels,
                actual: input.channels(),
            });
        }
        if input.dims().len() != self.spatial_rank() {
            return Err(Error::Shape(format!(
                "input has spatial rank {}, network expects {}",
                input.dims().len(),
                self.spatial_rank()
            )));
        }
        if input.max_abs() > 1.0 && !WARNED_INPUT_RANGE.swap(true, Ordering::Relaxed) {
            log::warn!("input entries exceed |x| <= 1; approximation guarantees do not apply");
        }
        let mut stored = Vec::with_capacity(self.depth() + 1);
        stored.push(input.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let l = i + 1;
            let mut h = layer_preactivation(&layer.view(), &stored[i])?;
            let (act, scale) = (layer.spec.activation, self.output_scale[i]);
            let data: Vec<f64> = h.data().iter().map(|&v| scale * act.evaluate(v)).collect();
            h = ChannelTensor::new(h.channels(), h.dims().to_vec(), data)?;
            skip_forward(l, &mut h, &self.skips, &stored)?;
            stored.push(h);
        }
        Ok(stored)
    }
}

/// Keep-bits for every maskable parameter of a network. Identity skips have
/// no entry (their vector is empty).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub layers: Vec<LayerMask>,
    pub skips: Vec<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMask {
    pub weights: Vec<bool>,
    pub biases: Vec<bool>,
}

impl Mask {
    pub fn filled(net: &NetworkSpec, keep: bool) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerMask {
                    weights: vec![keep; l.weights.len()],
                    biases: vec![keep; l.biases.len()],
                })
                .collect(),
            skips: net.skips.iter().map(|s| vec![keep; s.param_len()]).collect(),
        }
    }

    pub fn ones(net: &NetworkSpec) -> Self {
        Self::filled(net, true)
    }

    pub fn zeros(net: &NetworkSpec) -> Self {
        Self::filled(net, false)
    }

    pub fn len(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum::<usize>()
            + self.skips.iter().map(Vec::len).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count_kept(&self) -> usize {
        self.to_bits().iter().filter(|&&b| b).count()
    }

    /// Flat bits in parameter order: per layer weights then biases, then
    /// general skips.
    pub fn to_bits(&self) -> Vec<bool> {
        let mut bits = Vec::with_capacity(self.len());
        for l in &self.layers {
            bits.extend(&l.weights);
            bits.extend(&l.biases);
        }
        for s in &self.skips {
            bits.extend(s);
        }
        bits
    }

    pub(crate) fn shape_matches(&self, net: &NetworkSpec) -> bool {
        self.layers.len() == net.layers.len()
            && self.skips.len() == net.skips.len()
            && self.layers.iter().zip(&net.layers).all(|(m, l)| {
                m.weights.len() == l.weights.len() && m.biases.len() == l.biases.len()
            })
            && self.skips.iter().zip(&net.skips).all(|(m, s)| m.len() == s.param_len())
    }
}

/// Zeros every parameter whose mask bit is off; every kept value is copied
/// unchanged. Identity skips are never touched.
pub fn apply_mask(source: &NetworkSpec, mask: &Mask) -> Result<NetworkSpec> {
    if !mask.shape_matches(source) {
        return Err(Error::Shape("mask does not match the network's parameter set".into()));
    }
    let pick = |v: &f64, &keep: &bool| if keep { *v } else { 0.0 };
    let mut out = source.clone();
    for (layer, m) in out.layers.iter_mut().zip(&mask.layers) {
        layer.weights = layer.weights.iter().zip(&m.weights).map(|(v, k)| pick(v, k)).collect();
        layer.biases = layer.biases.iter().zip(&m.biases).map(|(v, k)| pick(v, k)).collect();
    }
    for (skip, m) in out.skips.iter_mut().zip(&mask.skips) {
        if let SkipKind::General { weights, .. } = &mut skip.kind {
            *weights = weights.iter().zip(m).map(|(v, k)| pick(v, k)).collect();
        }
    }
    Ok(out)
}

/// Nonzero parameter counts per layer (index 0 is layer 1).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NonzeroCounts {
    /// Nonzero weights and biases.
    pub weights: Vec<usize>,
    /// Nonzero skip entries arriving at the layer; an identity skip counts
    /// one unit filter per channel.
    pub skips: Vec<usize>,
    pub total: usize,
}

impl NonzeroCounts {
    /// `N_l = N_{w,l} + N_{m,l}` for layer `l` (1-based).
    pub fn layer_total(&self, l: usize) -> usize {
        self.weights[l - 1] + self.skips[l - 1]
    }
}

pub fn count_nonzero(net: &NetworkSpec) -> NonzeroCounts {
    let weights: Vec<usize> = net
        .layers
        .iter()
        .map(|l| l.weights.iter().chain(&l.biases).filter(|v| **v != 0.0).count())
        .collect();
    let mut skips = vec![0; net.depth()];
    for s in &net.skips {
        skips[s.to - 1] += s.nonzero_len();
    }
    let total = weights.iter().sum::<usize>() + skips.iter().sum::<usize>();
    NonzeroCounts {
        weights,
        skips,
        total,
    }
}
