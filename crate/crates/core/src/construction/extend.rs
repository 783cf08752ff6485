//! Deepening a target with layers that approximately pass their input
//! through, so it can be matched against a deeper source.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::{Layer, LayerSpec, NetworkSpec};

#[derive(Debug, Clone, Serialize)]
pub struct ExtendedTarget {
    #[serde(skip)]
    pub network: NetworkSpec,
    pub extra_layers: usize,
    /// Inputs to an appended layer must satisfy `|x| <= radius` for the
    /// bound below to hold.
    pub radius: f64,
    /// Worst-case deviation added by one appended layer, `2 r eps'`.
    pub per_layer_bound: f64,
    /// The appended layers are exact wherever their inputs are nonnegative.
    pub exact_on_nonnegative: bool,
}

/// Appends `extra_layers` diagonal layers with unit `1 x .. x 1` filters and
/// the last layer's activation. For ReLU and leaky ReLU every appended layer
/// is exactly the identity on nonnegative inputs, which covers any ReLU
/// output; for tanh it deviates by at most `2 r eps'` on `|x| <= a(eps')`.
pub fn extend_target_depth(target: &NetworkSpec, extra_layers: usize, eps_prime: f64) -> Result<ExtendedTarget> {
    if !(eps_prime > 0.0 && eps_prime < 1.0) {
        return Err(Error::InvalidArgument(format!("eps' must lie in (0, 1), got {eps_prime}")));
    }
    let act = target.layer(target.depth()).spec.activation;
    if act.offset() != 0.0 {
        return Err(Error::UnsupportedActivation {
            activation: act.to_string(),
            reason: "phi(0) != 0, so a single layer cannot pass its input through".into(),
        });
    }
    let lin = act.linearize(eps_prime);
    let c = target.channels(target.depth());
    let mut layers = target.layers().to_vec();
    let mut scale = target.output_scale().to_vec();
    for _ in 0..extra_layers {
        let mut layer = Layer::zeros(LayerSpec {
            in_channels: c,
            out_channels: c,
            kernel: vec![1; target.spatial_rank()],
            stride: 1,
            activation: act,
            has_bias: false,
        });
        for i in 0..c {
            let idx = layer.spec.weight_index(i, i, 0);
            layer.weights[idx] = 1.0;
        }
        layers.push(layer);
        scale.push(1.0);
    }
    let network = NetworkSpec::with_output_scale(target.input_channels(), layers, target.skips().to_vec(), scale)?;
    let exact = act.is_exactly_linearizable();
    Ok(ExtendedTarget {
        network,
        extra_layers,
        radius: act.validity_radius(eps_prime),
        per_layer_bound: if exact { 0.0 } else { lin.identity_bound(eps_prime) },
        exact_on_nonnegative: exact,
    })
}
