use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Layer, LayerSpec, NetworkSpec};
use crate::error::{Error, Result};
use crate::tensor::{SkipKind, SkipOperator};

/// Everything needed to sample a source network: architecture, per-layer
/// scales and the mirrored-pair option.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceLayout {
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
    /// General skips carry zero-filled weights here; they are redrawn.
    pub skips: Vec<SkipOperator>,
    /// Weights of layer `l` are drawn from `U[-sigma[l-1], sigma[l-1]]`.
    pub sigma: Vec<f64>,
    pub skip_sigma: f64,
    /// `looks_linear[l-1]` mirrors layer `l`'s output channels in pairs
    /// `(2k, 2k+1)` and the matching input columns of layer `l + 1`.
    pub looks_linear: Vec<bool>,
}

/// Samples a source network. Layer-1 biases are uniform like its weights;
/// all deeper biases are exactly 0. Each layer draws from its own stream.
pub fn init_source(layout: &SourceLayout, seed: u64) -> Result<NetworkSpec> {
    let depth = layout.layers.len();
    if layout.sigma.len() != depth || layout.looks_linear.len() != depth {
        return Err(Error::InvalidArgument(
            "source layout needs one sigma and one looks-linear flag per layer".into(),
        ));
    }
    if layout.sigma.iter().chain([&layout.skip_sigma]).any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidArgument("sigma values must be positive".into()));
    }
    let mut layers = Vec::with_capacity(depth);
    for (i, spec) in layout.layers.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let u = Uniform::new_inclusive(-layout.sigma[i], layout.sigma[i]);
        let mut layer = Layer::zeros(spec.clone());
        layer.weights.iter_mut().for_each(|w| *w = u.sample(&mut rng));
        if i == 0 && spec.has_bias {
            layer.biases.iter_mut().for_each(|b| *b = u.sample(&mut rng));
        }
        layers.push(layer);
    }
    for i in 0..depth {
        if !layout.looks_linear[i] {
            continue;
        }
        let k = layers[i].spec.in_channels * layers[i].spec.kernel_len();
        let pairs = layers[i].spec.out_channels / 2;
        let layer = &mut layers[i];
        for p in 0..pairs {
            let (a, b) = (2 * p * k, (2 * p + 1) * k);
            for t in 0..k {
                layer.weights[b + t] = -layer.weights[a + t];
            }
            layer.biases[2 * p + 1] = -layer.biases[2 * p];
        }
        if let Some(next) = layers.get_mut(i + 1) {
            let kl = next.spec.kernel_len();
            for o in 0..next.spec.out_channels {
                for p in 0..pairs {
                    for t in 0..kl {
                        let src = next.spec.weight_index(o, 2 * p, t);
                        let dst = next.spec.weight_index(o, 2 * p + 1, t);
                        next.weights[dst] = -next.weights[src];
                    }
                }
            }
        }
    }
    let mut skips = layout.skips.clone();
    for (n, skip) in skips.iter_mut().enumerate() {
        if let SkipKind::General { weights, .. } = &mut skip.kind {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((depth + n) as u64);
            let u = Uniform::new_inclusive(-layout.skip_sigma, layout.skip_sigma);
            weights.iter_mut().for_each(|w| *w = u.sample(&mut rng));
        }
    }
    NetworkSpec::new(layout.input_channels, layers, skips)
}

/// Shape of one target layer for [`random_target`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerArch {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Kernel side length; the kernel is square in 2-d.
    pub kernel: usize,
    pub stride: usize,
}

/// A random target with weights and biases drawn from
/// `U[-theta_max, theta_max]`. Each `residual` entry `l` adds an identity
/// skip from layer `l` to layer `l + 1`.
pub fn random_target(
    layers: &[LayerArch],
    rank: usize,
    activation: crate::activation::Activation,
    theta_max: f64,
    residual: &[usize],
    seed: u64,
) -> Result<NetworkSpec> {
    if !(theta_max > 0.0 && theta_max <= 1.0) {
        return Err(Error::InvalidArgument(format!("theta_max must lie in (0, 1], got {theta_max}")));
    }
    if layers.is_empty() || !(1..=2).contains(&rank) {
        return Err(Error::InvalidArgument("need at least one layer and spatial rank 1 or 2".into()));
    }
    let u = Uniform::new_inclusive(-theta_max, theta_max);
    let built = layers
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut layer = Layer::zeros(LayerSpec {
                in_channels: a.in_channels,
                out_channels: a.out_channels,
                kernel: vec![a.kernel; rank],
                stride: a.stride,
                activation,
                has_bias: true,
            });
            layer.weights.iter_mut().for_each(|w| *w = u.sample(&mut rng));
            layer.biases.iter_mut().for_each(|b| *b = u.sample(&mut rng));
            layer
        })
        .collect();
    let skips = residual
        .iter()
        .map(|&l| {
            if l == 0 || l >= layers.len() {
                return Err(Error::InvalidArgument(format!("residual {l} -> {} is not inside the network", l + 1)));
            }
            if layers[l - 1].out_channels != layers[l].out_channels {
                return Err(Error::InvalidArgument(format!("residual {l} -> {} joins different widths", l + 1)));
            }
            Ok(SkipOperator::residual(l, l + 1, layers[l].out_channels))
        })
        .collect::<Result<Vec<_>>>()?;
    NetworkSpec::new(layers[0].in_channels, built, skips)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::Activation;

    fn layout(looks_linear: bool) -> SourceLayout {
        let spec = |cin, cout, k: usize, bias| LayerSpec {
            in_channels: cin,
            out_channels: cout,
            kernel: vec![k, k],
            stride: 1,
            activation: Activation::Sigmoid,
            has_bias: bias,
        };
        SourceLayout {
            input_channels: 2,
            layers: vec![spec(2, 6, 1, true), spec(6, 3, 3, false), spec(3, 3, 3, false)],
            skips: vec![SkipOperator {
                from: 1,
                to: 3,
                kind: SkipKind::General {
                    kernel: vec![1, 1],
                    weights: vec![0.0; 18],
                },
            }],
            sigma: vec![0.25, 4.0, 1.0],
            skip_sigma: 1.0,
            looks_linear: vec![looks_linear, false, false],
        }
    }

    #[test]
    fn respects_sigma_and_zero_deep_biases() {
        let net = init_source(&layout(false), 3).unwrap();
        for (l, s) in net.layers().iter().zip([0.25, 4.0, 1.0]) {
            assert!(l.weights.iter().all(|w| w.abs() <= s));
        }
        assert!(net.layer(1).biases.iter().all(|b| b.abs() <= 0.25 && *b != 0.0));
        assert!(net.layer(2).biases.iter().all(|b| *b == 0.0));
        assert!(net.layer(3).biases.iter().all(|b| *b == 0.0));
    }

    #[test]
    fn same_seed_same_network() {
        let a = init_source(&layout(true), 17).unwrap();
        let b = init_source(&layout(true), 17).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_source(&layout(true), 18).unwrap());
    }

    #[test]
    fn looks_linear_mirrors_pairs() {
        let net = init_source(&layout(true), 5).unwrap();
        let l1 = net.layer(1);
        for p in 0..3 {
            assert_eq!(l1.weights[2 * p * 2], -l1.weights[(2 * p + 1) * 2]);
            assert_eq!(l1.biases[2 * p], -l1.biases[2 * p + 1]);
        }
        let l2 = net.layer(2);
        for o in 0..3 {
            for t in 0..9 {
                let a = l2.weights[l2.spec.weight_index(o, 0, t)];
                let b = l2.weights[l2.spec.weight_index(o, 1, t)];
                assert_eq!(a, -b);
            }
        }
    }
}
