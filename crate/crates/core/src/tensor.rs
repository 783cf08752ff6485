//! Dense multi-channel spatial tensors and the forward-only convolution
//! semantics used by every network in the crate.
//!
//! Convolutions follow the flipped-kernel definition
//! `(K * X)_i = sum_k K_k X_{i - k}` with zero padding. Padding is chosen
//! per axis so that a stride-1 convolution preserves the spatial extent; when
//! the total padding is odd the extra element goes on the low side. Output
//! extents under a stride `s` are `ceil(n / s)`.

use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::error::{Error, Result};

/// A tensor of shape `channels x spatial_dims`, stored channel-major with
/// row-major spatial flattening.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelTensor {
    channels: usize,
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl ChannelTensor {
    pub fn new(channels: usize, dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_dims(&dims)?;
        let plane: usize = dims.iter().product();
        if data.len() != channels * plane {
            return Err(Error::Shape(format!(
                "tensor data has {} entries, expected {} x {}",
                data.len(),
                channels,
                plane
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor data"));
        }
        Ok(Self {
            channels,
            dims,
            data,
        })
    }

    pub fn zeros(channels: usize, dims: Vec<usize>) -> Result<Self> {
        check_dims(&dims)?;
        let len = channels * dims.iter().product::<usize>();
        Ok(Self {
            channels,
            dims,
            data: vec![0.0; len],
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn plane_len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn channel_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    /// Largest absolute entry (the sup norm).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() || dims.len() > 2 {
        return Err(Error::Shape(format!(
            "spatial rank must be 1 or 2, got {}",
            dims.len()
        )));
    }
    if dims.contains(&0) {
        return Err(Error::Shape("spatial extents must be positive".into()));
    }
    Ok(())
}

/// A single convolution kernel with its stride.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Filter {
    pub entries: Vec<f64>,
    pub shape: Vec<usize>,
    pub stride: usize,
}

impl Filter {
    pub fn new(entries: Vec<f64>, shape: Vec<usize>, stride: usize) -> Result<Self> {
        check_dims(&shape)?;
        if entries.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "filter has {} entries but shape {:?}",
                entries.len(),
                shape
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be at least 1".into()));
        }
        Ok(Self {
            entries,
            shape,
            stride,
        })
    }
}

/// Output extent of a strided convolution along one axis.
pub fn output_extent(input: usize, stride: usize) -> usize {
    input.div_ceil(stride)
}

/// Low-side zero padding along one axis.
pub fn pad_low(input: usize, kernel: usize, stride: usize) -> usize {
    let out = output_extent(input, stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    total.div_ceil(2)
}

/// Offset of the input position read by kernel tap `tap` relative to
/// `o * stride`. Can be negative.
pub fn tap_offset(input: usize, kernel: usize, stride: usize, tap: usize) -> isize {
    (kernel - 1 - tap) as isize - pad_low(input, kernel, stride) as isize
}

/// Index of the tap (per axis) that reads position `o * stride` exactly. A
/// filter that keeps only this tap maps a constant channel to a constant
/// channel and, under stride 1, scales its input in place.
pub fn zero_offset_tap(input_dims: &[usize], kernel: &[usize], stride: usize) -> usize {
    let mut flat = 0;
    for (axis, (&n, &k)) in input_dims.iter().zip(kernel).enumerate() {
        let t = k - 1 - pad_low(n, k, stride);
        flat = if axis == 0 { t } else { flat * k + t };
    }
    flat
}

/// Spatial output dims for a strided convolution.
pub fn output_dims(input_dims: &[usize], stride: usize) -> Vec<usize> {
    input_dims
        .iter()
        .map(|&n| output_extent(n, stride))
        .collect()
}

/// Accumulates `kernel * input` into `out`. Shapes must already be checked.
pub(crate) fn conv_accumulate(
    kernel: &[f64],
    kshape: &[usize],
    stride: usize,
    input: &[f64],
    in_dims: &[usize],
    out: &mut [f64],
    out_dims: &[usize],
) {
    match in_dims.len() {
        1 => {
            let (n, k, no) = (in_dims[0], kshape[0], out_dims[0]);
            for (tap, &w) in kernel.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let off = tap_offset(n, k, stride, tap);
                for (o, acc) in out.iter_mut().enumerate().take(no) {
                    let p = (o * stride) as isize + off;
                    if p >= 0 && (p as usize) < n {
                        *acc += w * input[p as usize];
                    }
                }
            }
        }
        _ => {
            let (n1, n2) = (in_dims[0], in_dims[1]);
            let (k1, k2) = (kshape[0], kshape[1]);
            let (o1n, o2n) = (out_dims[0], out_dims[1]);
            for a in 0..k1 {
                let off1 = tap_offset(n1, k1, stride, a);
                for b in 0..k2 {
                    let w = kernel[a * k2 + b];
                    if w == 0.0 {
                        continue;
                    }
                    let off2 = tap_offset(n2, k2, stride, b);
                    for o1 in 0..o1n {
                        let p1 = (o1 * stride) as isize + off1;
                        if p1 < 0 || p1 as usize >= n1 {
                            continue;
                        }
                        let row = &input[p1 as usize * n2..(p1 as usize + 1) * n2];
                        let orow = &mut out[o1 * o2n..(o1 + 1) * o2n];
                        for (o2, acc) in orow.iter_mut().enumerate() {
                            let p2 = (o2 * stride) as isize + off2;
                            if p2 >= 0 && (p2 as usize) < n2 {
                                *acc += w * row[p2 as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Convolves a single spatial channel. Returns the output plane and its dims.
pub fn convolve(filter: &Filter, input: &[f64], dims: &[usize]) -> Result<(Vec<f64>, Vec<usize>)> {
    check_dims(dims)?;
    if filter.shape.len() != dims.len() {
        return Err(Error::Shape(format!(
            "filter rank {} does not match input rank {}",
            filter.shape.len(),
            dims.len()
        )));
    }
    if input.len() != dims.iter().product::<usize>() {
        return Err(Error::Shape("input plane length does not match dims".into()));
    }
    if input.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("convolution input"));
    }
    let out_dims = output_dims(dims, filter.stride);
    let mut out = vec![0.0; out_dims.iter().product()];
    conv_accumulate(
        &filter.entries,
        &filter.shape,
        filter.stride,
        input,
        dims,
        &mut out,
        &out_dims,
    );
    Ok((out, out_dims))
}

/// Borrowed view of one convolutional layer's parameters. Weights are laid
/// out `[out][in][kernel]`.
#[derive(Debug, Clone, Copy)]
pub struct LayerView<'a> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: &'a [usize],
    pub stride: usize,
    pub weights: &'a [f64],
    pub biases: &'a [f64],
    pub activation: Activation,
}

impl LayerView<'_> {
    pub fn kernel_len(&self) -> usize {
        self.kernel.iter().product()
    }
}

/// Pre-activation `h_i = sum_j W_ij * x_j + b_i`.
pub fn layer_preactivation(layer: &LayerView<'_>, input: &ChannelTensor) -> Result<ChannelTensor> {
    if input.channels() != layer.in_channels {
        return Err(Error::ChannelMismatch {
            expected: layer.in_channels,
            actual: input.channels(),
        });
    }
    if layer.kernel.len() != input.dims().len() {
        return Err(Error::Shape(format!(
            "kernel rank {} does not match input rank {}",
            layer.kernel.len(),
            input.dims().len()
        )));
    }
    let k = layer.kernel_len();
    if layer.weights.len() != layer.out_channels * layer.in_channels * k {
        return Err(Error::Shape("weight grid does not match layer shape".into()));
    }
    if layer.biases.len() != layer.out_channels {
        return Err(Error::Shape("bias vector does not match output channels".into()));
    }
    let out_dims = output_dims(input.dims(), layer.stride);
    let mut out = ChannelTensor::zeros(layer.out_channels, out_dims.clone())?;
    for i in 0..layer.out_channels {
        let acc = out.channel_mut(i);
        for j in 0..layer.in_channels {
            let w = &layer.weights[(i * layer.in_channels + j) * k..(i * layer.in_channels + j + 1) * k];
            if w.iter().all(|&v| v == 0.0) {
                continue;
            }
            conv_accumulate(
                w,
                layer.kernel,
                layer.stride,
                input.channel(j),
                input.dims(),
                acc,
                &out_dims,
            );
        }
        let b = layer.biases[i];
        if b != 0.0 {
            acc.iter_mut().for_each(|v| *v += b);
        }
    }
    Ok(out)
}

/// `x_i = phi(sum_j W_ij * x_j + b_i)`.
pub fn layer_forward(layer: &LayerView<'_>, input: &ChannelTensor) -> Result<ChannelTensor> {
    let mut h = layer_preactivation(layer, input)?;
    let act = layer.activation;
    h.data.iter_mut().for_each(|v| *v = act.evaluate(*v));
    Ok(h)
}

/// Skip operator semantics, see [`SkipOperator`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SkipKind {
    /// Fixed identity wiring: output channel `i` receives input channel
    /// `map[i]` unchanged, or nothing for `None`. Carries no prunable
    /// parameters.
    Identity { map: Vec<Option<usize>> },
    /// Prunable filters `M_ij` laid out `[to][from][kernel]`, stride 1.
    General { kernel: Vec<usize>, weights: Vec<f64> },
}

/// A skip connection adding `sum_j M_ij * x^(from)_j` to the activated
/// output of layer `to`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipOperator {
    pub from: usize,
    pub to: usize,
    #[serde(flatten)]
    pub kind: SkipKind,
}

impl SkipOperator {
    /// Standard same-width residual connection.
    pub fn residual(from: usize, to: usize, channels: usize) -> Self {
        Self {
            from,
            to,
            kind: SkipKind::Identity {
                map: (0..channels).map(Some).collect(),
            },
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.kind, SkipKind::Identity { .. })
    }

    /// Number of prunable parameters.
    pub fn param_len(&self) -> usize {
        match &self.kind {
            SkipKind::Identity { .. } => 0,
            SkipKind::General { weights, .. } => weights.len(),
        }
    }

    /// Number of unit filters (identity) or nonzero filter entries (general).
    pub fn nonzero_len(&self) -> usize {
        match &self.kind {
            SkipKind::Identity { map } => map.iter().flatten().count(),
            SkipKind::General { weights, .. } => weights.iter().filter(|v| **v != 0.0).count(),
        }
    }
}

/// Adds skip contributions to `layer_output` (the activated output of
/// layer `layer`). `stored[t]` holds `x^(t)`, with `stored[0]` the input.
pub fn skip_forward(
    layer: usize,
    layer_output: &mut ChannelTensor,
    skips: &[SkipOperator],
    stored: &[ChannelTensor],
) -> Result<()> {
    for skip in skips.iter().filter(|s| s.to == layer) {
        let src = stored
            .get(skip.from)
            .ok_or(Error::MissingActivation(skip.from))?;
        if src.dims() != layer_output.dims() {
            return Err(Error::Shape(format!(
                "skip {} -> {} joins spatial dims {:?} and {:?}",
                skip.from,
                skip.to,
                src.dims(),
                layer_output.dims()
            )));
        }
        match &skip.kind {
            SkipKind::Identity { map } => {
                if map.len() != layer_output.channels() {
                    return Err(Error::ChannelMismatch {
                        expected: layer_output.channels(),
                        actual: map.len(),
                    });
                }
                for (i, j) in map.iter().enumerate() {
                    let Some(j) = *j else { continue };
                    if j >= src.channels() {
                        return Err(Error::Shape(format!(
                            "identity skip reads channel {j} of a {}-channel tensor",
                            src.channels()
                        )));
                    }
                    let n = src.plane_len();
                    let from = &src.data[j * n..(j + 1) * n];
                    let to = layer_output.channel_mut(i);
                    to.iter_mut().zip(from).for_each(|(a, b)| *a += b);
                }
            }
            SkipKind::General { kernel, weights } => {
                let (co, ci) = (layer_output.channels(), src.channels());
                let k: usize = kernel.iter().product();
                if weights.len() != co * ci * k || kernel.len() != src.dims().len() {
                    return Err(Error::Shape(format!(
                        "general skip {} -> {} has mismatched filter grid",
                        skip.from, skip.to
                    )));
                }
                let dims = src.dims().to_vec();
                for i in 0..co {
                    for j in 0..ci {
                        let w = &weights[(i * ci + j) * k..(i * ci + j + 1) * k];
                        if w.iter().all(|&v| v == 0.0) {
                            continue;
                        }
                        conv_accumulate(
                            w,
                            kernel,
                            1,
                            src.channel(j),
                            &dims,
                            layer_output.channel_mut(i),
                            &dims,
                        );
                    }
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv1(k: &[f64], x: &[f64], stride: usize) -> Vec<f64> {
        let f = Filter::new(k.to_vec(), vec![k.len()], stride).unwrap();
        convolve(&f, x, &[x.len()]).unwrap().0
    }

    #[test]
    fn unit_filter_is_identity() {
        assert_eq!(conv1(&[1.0], &[1.0, 2.0, 3.0], 1), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn two_tap_filter_matches_hand_evaluation() {
        // (K*X)_i = K_1 X_i + K_2 X_{i-1}, X_0 = 0
        assert_eq!(conv1(&[1.0, 1.0], &[1.0, 2.0, 3.0], 1), vec![1.0, 3.0, 5.0]);
    }

    #[test]
    fn zero_filter_gives_zero_plane() {
        assert_eq!(conv1(&[0.0, 0.0], &[4.0, -2.0, 7.5], 1), vec![0.0; 3]);
    }

    #[test]
    fn strided_extent_is_ceiling() {
        assert_eq!(conv1(&[1.0, 0.0, 0.0], &[1.0; 5], 2).len(), 3);
        assert_eq!(conv1(&[1.0], &[1.0; 4], 3).len(), 2);
    }

    #[test]
    fn three_tap_filter_is_centered() {
        // K = [a, b, c]: out_i = a x_{i+1} + b x_i + c x_{i-1}
        let out = conv1(&[1.0, 10.0, 100.0], &[1.0, 2.0, 3.0], 1);
        assert_eq!(out, vec![2.0 + 10.0, 3.0 + 20.0 + 100.0, 30.0 + 200.0]);
    }

    #[test]
    fn two_d_center_tap_scales() {
        let mut k = vec![0.0; 9];
        k[4] = -0.5;
        let f = Filter::new(k, vec![3, 3], 1).unwrap();
        let x: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let (out, dims) = convolve(&f, &x, &[3, 4]).unwrap();
        assert_eq!(dims, vec![3, 4]);
        for (o, v) in out.iter().zip(&x) {
            assert_eq!(*o, -0.5 * v);
        }
        assert_eq!(zero_offset_tap(&[3, 4], &[3, 3], 1), 4);
    }

    #[test]
    fn rank_mismatch_is_error() {
        let f = Filter::new(vec![1.0; 4], vec![2, 2], 1).unwrap();
        assert!(matches!(convolve(&f, &[1.0, 2.0], &[2]), Err(Error::Shape(_))));
    }

    #[test]
    fn layer_forward_relu_identity() {
        let x = ChannelTensor::new(1, vec![2], vec![-1.0, 2.0]).unwrap();
        let layer = LayerView {
            in_channels: 1,
            out_channels: 1,
            kernel: &[1],
            stride: 1,
            weights: &[1.0],
            biases: &[0.0],
            activation: Activation::Relu,
        };
        assert_eq!(layer_forward(&layer, &x).unwrap().data(), &[0.0, 2.0]);
    }

    #[test]
    fn layer_forward_bias_only() {
        let x = ChannelTensor::new(1, vec![3], vec![0.3, -0.2, 0.9]).unwrap();
        let layer = LayerView {
            in_channels: 1,
            out_channels: 2,
            kernel: &[3],
            stride: 1,
            weights: &[0.0; 6],
            biases: &[0.5, 0.5],
            activation: Activation::LeakyRelu(1.0),
        };
        assert_eq!(layer_forward(&layer, &x).unwrap().data(), &[0.5; 6]);
    }

    #[test]
    fn layer_forward_sums_input_channels() {
        let x = ChannelTensor::new(2, vec![2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let layer = LayerView {
            in_channels: 2,
            out_channels: 1,
            kernel: &[1],
            stride: 1,
            weights: &[1.0, 1.0],
            biases: &[0.0],
            activation: Activation::LeakyRelu(1.0),
        };
        assert_eq!(layer_forward(&layer, &x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn layer_forward_channel_mismatch() {
        let x = ChannelTensor::new(1, vec![2], vec![1.0, 0.0]).unwrap();
        let layer = LayerView {
            in_channels: 2,
            out_channels: 1,
            kernel: &[1],
            stride: 1,
            weights: &[1.0, 1.0],
            biases: &[0.0],
            activation: Activation::Relu,
        };
        assert!(matches!(
            layer_forward(&layer, &x),
            Err(Error::ChannelMismatch { expected: 2, actual: 1 })
        ));
    }

    #[test]
    fn residual_skip_adds() {
        let stored = vec![
            ChannelTensor::new(1, vec![2], vec![0.0, 0.0]).unwrap(),
            ChannelTensor::new(1, vec![2], vec![3.0, 4.0]).unwrap(),
        ];
        let mut y = ChannelTensor::new(1, vec![2], vec![1.0, 2.0]).unwrap();
        skip_forward(2, &mut y, &[SkipOperator::residual(1, 2, 1)], &stored).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0]);
    }

    #[test]
    fn no_skips_leaves_output() {
        let mut y = ChannelTensor::new(1, vec![2], vec![1.0, 2.0]).unwrap();
        skip_forward(1, &mut y, &[], &[]).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn general_skip_applies_filter() {
        let stored = vec![
            ChannelTensor::new(1, vec![2], vec![0.0, 0.0]).unwrap(),
            ChannelTensor::new(1, vec![2], vec![1.0, 1.0]).unwrap(),
        ];
        let skip = SkipOperator {
            from: 1,
            to: 2,
            kind: SkipKind::General {
                kernel: vec![1],
                weights: vec![2.0],
            },
        };
        let mut y = ChannelTensor::new(1, vec![2], vec![0.0, 0.0]).unwrap();
        skip_forward(2, &mut y, &[skip], &stored).unwrap();
        assert_eq!(y.data(), &[2.0, 2.0]);
    }

    #[test]
    fn missing_stored_activation() {
        let mut y = ChannelTensor::new(1, vec![2], vec![0.0, 0.0]).unwrap();
        let err = skip_forward(3, &mut y, &[SkipOperator::residual(2, 3, 1)], &[]).unwrap_err();
        assert!(matches!(err, Error::MissingActivation(2)));
    }

    use proptest::prelude::*;

    fn conv_case() -> impl Strategy<Value = (Vec<usize>, Vec<usize>, usize, Vec<f64>, Vec<f64>, Vec<f64>, f64, f64)> {
        (1usize..=2, 1usize..=3)
            .prop_flat_map(|(rank, stride)| {
                let dims = prop::collection::vec(1usize..7, rank);
                let ks = prop::collection::vec(1usize..4, rank);
                (dims, ks, Just(stride))
            })
            .prop_flat_map(|(dims, ks, stride)| {
                let n: usize = dims.iter().product();
                let k: usize = ks.iter().product();
                (
                    Just(dims),
                    Just(ks),
                    Just(stride),
                    prop::collection::vec(-1.0f64..1.0, k),
                    prop::collection::vec(-1.0f64..1.0, k),
                    prop::collection::vec(-1.0f64..1.0, n),
                    -2.0f64..2.0,
                    -2.0f64..2.0,
                )
            })
    }

    proptest! {
        #[test]
        fn convolution_is_linear_in_the_filter(
            (dims, ks, stride, k1, k2, x, a, b) in conv_case()
        ) {
            let f = |k: Vec<f64>| Filter::new(k, ks.clone(), stride).unwrap();
            let mix: Vec<f64> = k1.iter().zip(&k2).map(|(p, q)| a * p + b * q).collect();
            let (lhs, _) = convolve(&f(mix), &x, &dims).unwrap();
            let (o1, _) = convolve(&f(k1.clone()), &x, &dims).unwrap();
            let (o2, _) = convolve(&f(k2.clone()), &x, &dims).unwrap();
            for i in 0..lhs.len() {
                let rhs = a * o1[i] + b * o2[i];
                let scale = lhs[i].abs().max(rhs.abs()).max(1.0);
                prop_assert!((lhs[i] - rhs).abs() <= 1e-12 * scale);
            }
        }

        #[test]
        fn univariate_stride_one_scales_exactly(
            (dims, ks, _s, _k1, _k2, x, lambda, _b) in conv_case()
        ) {
            let mut entries = vec![0.0; ks.iter().product()];
            entries[zero_offset_tap(&dims, &ks, 1)] = lambda;
            let f = Filter::new(entries, ks, 1).unwrap();
            let (out, out_dims) = convolve(&f, &x, &dims).unwrap();
            prop_assert_eq!(out_dims, dims);
            for (o, v) in out.iter().zip(&x) {
                prop_assert_eq!(*o, lambda * v);
            }
        }

        #[test]
        fn convolution_is_deterministic((dims, ks, stride, k1, _k2, x, _a, _b) in conv_case()) {
            let f = Filter::new(k1, ks, stride).unwrap();
            let a = convolve(&f, &x, &dims).unwrap().0;
            let b = convolve(&f, &x, &dims).unwrap().0;
            prop_assert_eq!(
                a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
