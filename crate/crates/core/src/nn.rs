//! Layer definitions with exact forward and backward passes.
//!
//! Activations are `[batch, ...]` tensors. Weights are stored in the usual
//! `[out, in]` / `[c_out, c_in, k, k]` layout, and a weight that is inactive in
//! the sparse mask is simply a literal zero, so the forward pass needs no mask.

use rand::Rng;

use crate::error::{DstError, Result};
use crate::tensor::{self, Tensor};
use crate::topology::Mask;

/// One layer type of the supported architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Fully connected layer. Inputs with more than one feature axis are
    /// flattened.
    Linear { inputs: usize, outputs: usize },
    /// Square-kernel convolution over `[C, H, W]` inputs.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    /// 2×2 max pooling with stride 2 (odd trailing rows/columns dropped).
    MaxPool2,
    GlobalAvgPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub has_bias: bool,
}

impl LayerSpec {
    pub fn linear(inputs: usize, outputs: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Linear { inputs, outputs },
            has_bias: true,
        }
    }

    /// Stride-1 convolution.
    pub fn conv2d(in_channels: usize, out_channels: usize, kernel: usize, padding: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride: 1,
                padding,
            },
            has_bias: true,
        }
    }

    pub fn relu() -> Self {
        LayerSpec {
            kind: LayerKind::Relu,
            has_bias: false,
        }
    }

    pub fn max_pool2() -> Self {
        LayerSpec {
            kind: LayerKind::MaxPool2,
            has_bias: false,
        }
    }

    pub fn global_avg_pool() -> Self {
        LayerSpec {
            kind: LayerKind::GlobalAvgPool,
            has_bias: false,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.has_bias = false;
        self
    }

    pub fn is_parameterized(&self) -> bool {
        matches!(self.kind, LayerKind::Linear { .. } | LayerKind::Conv2d { .. })
    }

    /// Weight tensor shape of a parameterized layer.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match self.kind {
            LayerKind::Linear { inputs, outputs } => Some(vec![outputs, inputs]),
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some(vec![out_channels, in_channels, kernel, kernel]),
            _ => None,
        }
    }

    fn bias_len(&self) -> Option<usize> {
        if !self.has_bias {
            return None;
        }
        match self.kind {
            LayerKind::Linear { outputs, .. } => Some(outputs),
            LayerKind::Conv2d { out_channels, .. } => Some(out_channels),
            _ => None,
        }
    }

    fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Linear { inputs, .. } => inputs,
            LayerKind::Conv2d {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel * kernel,
            _ => 0,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self.kind {
            LayerKind::Linear { inputs, outputs } => {
                let n: usize = input.iter().product();
                if n != inputs {
                    return Err(DstError::config(format!(
                        "Linear({inputs}, {outputs}) receives {n} features (input shape {input:?})"
                    )));
                }
                Ok(vec![outputs])
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 3 || input[0] != in_channels {
                    return Err(DstError::config(format!(
                        "Conv2d expects [{in_channels}, H, W] input, got {input:?}"
                    )));
                }
                if stride == 0 || kernel == 0 {
                    return Err(DstError::config("Conv2d needs kernel >= 1 and stride >= 1"));
                }
                let (h, w) = (input[1] + 2 * padding, input[2] + 2 * padding);
                if h < kernel || w < kernel {
                    return Err(DstError::config(format!(
                        "Conv2d kernel {kernel} larger than padded input {h}x{w}"
                    )));
                }
                Ok(vec![
                    out_channels,
                    (h - kernel) / stride + 1,
                    (w - kernel) / stride + 1,
                ])
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::MaxPool2 => {
                if input.len() != 3 || input[1] < 2 || input[2] < 2 {
                    return Err(DstError::config(format!(
                        "MaxPool2 expects [C, H>=2, W>=2] input, got {input:?}"
                    )));
                }
                Ok(vec![input[0], input[1] / 2, input[2] / 2])
            }
            LayerKind::GlobalAvgPool => {
                if input.len() != 3 {
                    return Err(DstError::config(format!(
                        "GlobalAvgPool expects [C, H, W] input, got {input:?}"
                    )));
                }
                Ok(vec![input[0]])
            }
        }
    }
}

/// Weight and optional bias of one parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

/// Gradients for every parameterized layer, in maskable-layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<LayerParams>,
}

impl ParamGrads {
    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weight.all_finite() && l.bias.as_ref().is_none_or(Tensor::all_finite)
        })
    }

    /// Largest absolute entry over all tensors.
    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| {
                l.weight
                    .data()
                    .iter()
                    .chain(l.bias.iter().flat_map(|b| b.data().iter()))
            })
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Which weight gradients `backward` computes.
#[derive(Debug, Clone, Copy)]
pub enum GradMode<'a> {
    /// Every weight, including masked ones.
    Dense,
    /// Only weights active in the mask; the rest are reported as 0. Active
    /// entries are bit-identical to the `Dense` result.
    ActiveOnly(&'a Mask),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Softmax over the logits followed by cross-entropy.
    SoftmaxCrossEntropy,
    /// Single logit, sigmoid, binary cross-entropy.
    SigmoidBce,
}

impl LossKind {
    /// Loss implied by the width of the network output.
    pub fn for_outputs(outputs: usize) -> Self {
        if outputs == 1 {
            LossKind::SigmoidBce
        } else {
            LossKind::SoftmaxCrossEntropy
        }
    }
}

#[derive(Debug, Clone)]
enum LayerCache {
    /// Transposed flattened input, `[in, batch]`.
    Linear { input_t: Vec<f64> },
    Conv { input: Tensor },
    Relu { positive: Vec<bool> },
    MaxPool { argmax: Vec<usize>, input_shape: Vec<usize> },
    Gap { input_shape: Vec<usize> },
}

/// Activations retained by `forward` for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    layers: Vec<LayerCache>,
}

impl ForwardCache {
    /// True when both passes took the same ReLU branches and max-pool winners,
    /// i.e. the network is the same smooth function around both points.
    pub fn same_pattern(&self, other: &ForwardCache) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| match (a, b) {
                (LayerCache::Relu { positive: p }, LayerCache::Relu { positive: q }) => p == q,
                (LayerCache::MaxPool { argmax: p, .. }, LayerCache::MaxPool { argmax: q, .. }) => {
                    p == q
                }
                _ => true,
            })
    }
}

/// A feed-forward network: layer sequence plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    /// Maskable-layer slot of each layer.
    slots: Vec<Option<usize>>,
    params: Vec<LayerParams>,
    names: Vec<String>,
    output_dim: usize,
}

impl Network {
    /// Builds a network with zero parameters after checking that the layer
    /// sequence is shape-consistent for per-sample inputs of `input_shape`.
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(DstError::config(format!("invalid input shape {input_shape:?}")));
        }
        if layers.is_empty() {
            return Err(DstError::config("network needs at least one layer"));
        }
        let mut shape = input_shape.clone();
        let mut slots = Vec::with_capacity(layers.len());
        let mut params = Vec::new();
        let mut names = Vec::new();
        let (mut n_linear, mut n_conv) = (0, 0);
        for spec in &layers {
            shape = spec.output_shape(&shape)?;
            if let Some(ws) = spec.weight_shape() {
                slots.push(Some(params.len()));
                params.push(LayerParams {
                    weight: Tensor::zeros(ws),
                    bias: spec.bias_len().map(|n| Tensor::zeros(vec![n])),
                });
                names.push(match spec.kind {
                    LayerKind::Conv2d { .. } => {
                        n_conv += 1;
                        format!("conv{n_conv}")
                    }
                    _ => {
                        n_linear += 1;
                        format!("fc{n_linear}")
                    }
                });
            } else {
                slots.push(None);
            }
        }
        if shape.len() != 1 {
            return Err(DstError::config(format!(
                "network output must be a flat logit vector, got per-sample shape {shape:?}"
            )));
        }
        if params.is_empty() {
            return Err(DstError::config("network has no parameterized layer"));
        }
        Ok(Network {
            input_shape,
            layers,
            slots,
            params,
            names,
            output_dim: shape[0],
        })
    }

    /// PyTorch-style default initialization: weights and biases drawn from
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn init_uniform<R: Rng>(&mut self, rng: &mut R) {
        for (spec, slot) in self.layers.iter().zip(&self.slots) {
            let Some(slot) = *slot else { continue };
            let bound = 1.0 / (spec.fan_in() as f64).sqrt();
            let p = &mut self.params[slot];
            for v in p.weight.data_mut() {
                *v = rng.random_range(-bound..bound);
            }
            if let Some(b) = p.bias.as_mut() {
                for v in b.data_mut() {
                    *v = rng.random_range(-bound..bound);
                }
            }
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn loss_kind(&self) -> LossKind {
        LossKind::for_outputs(self.output_dim)
    }

    /// Parameters of the maskable layers, in order.
    pub fn params(&self) -> &[LayerParams] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [LayerParams] {
        &mut self.params
    }

    /// Names of the maskable layers (`conv1`, `fc1`, ...).
    pub fn layer_names(&self) -> &[String] {
        &self.names
    }

    /// Layer specs of the maskable layers, in order.
    pub fn maskable_specs(&self) -> Vec<LayerSpec> {
        self.layers
            .iter()
            .zip(&self.slots)
            .filter(|(_, s)| s.is_some())
            .map(|(l, _)| *l)
            .collect()
    }

    /// Total number of parameters, weights and biases.
    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .map(|p| p.weight.len() + p.bias.as_ref().map_or(0, Tensor::len))
            .sum()
    }

    /// Number of maskable weights.
    pub fn weight_count(&self) -> usize {
        self.params.iter().map(|p| p.weight.len()).sum()
    }

    /// Zeroes every weight that is inactive in `mask`.
    pub fn apply_mask(&mut self, mask: &Mask) {
        for (p, lm) in self.params.iter_mut().zip(mask.layers()) {
            for (w, &on) in p.weight.data_mut().iter_mut().zip(lm.bits()) {
                if !on {
                    *w = 0.0;
                }
            }
        }
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.shape().len() < 2 || batch.shape()[1..] != self.input_shape[..] {
            // a flat batch feeding a flattening first Linear layer is accepted too
            let flat_ok = batch.shape().len() >= 2
                && batch.row_len() == self.input_shape.iter().product::<usize>()
                && matches!(self.layers[0].kind, LayerKind::Linear { .. });
            if !flat_ok {
                return Err(DstError::shape(format!(
                    "batch shape {:?} does not match network input [N, {:?}]",
                    batch.shape(),
                    self.input_shape
                )));
            }
        }
        Ok(())
    }

    /// Forward pass returning the logits and the activations needed by
    /// `backward`. A pure function of parameters and batch.
    pub fn forward(&self, batch: &Tensor) -> Result<(Tensor, ForwardCache)> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (spec, slot) in self.layers.iter().zip(&self.slots) {
            let (y, cache) = self.layer_forward(spec, *slot, x);
            x = y;
            caches.push(cache);
        }
        Ok((
            x,
            ForwardCache {
                batch: batch.rows(),
                layers: caches,
            },
        ))
    }

    /// Logits only.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward(batch)?.0)
    }

    fn layer_forward(&self, spec: &LayerSpec, slot: Option<usize>, x: Tensor) -> (Tensor, LayerCache) {
        let b = x.rows();
        match spec.kind {
            LayerKind::Linear { inputs, outputs } => {
                let p = &self.params[slot.unwrap()];
                let input_t = tensor::transpose(x.data(), b, inputs);
                // yᵀ[out, b] = W[out, in] · xᵀ[in, b]
                let mut yt = tensor::matmul_sparse_lhs(p.weight.data(), &input_t, outputs, inputs, b);
                if let Some(bias) = &p.bias {
                    for (o, &bv) in bias.data().iter().enumerate() {
                        for v in &mut yt[o * b..(o + 1) * b] {
                            *v += bv;
                        }
                    }
                }
                let y = tensor::transpose(&yt, outputs, b);
                (Tensor::from_parts(vec![b, outputs], y), LayerCache::Linear { input_t })
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let p = &self.params[slot.unwrap()];
                let geom = ConvGeom::new(x.shape(), in_channels, kernel, stride, padding);
                let q = in_channels * kernel * kernel;
                let npos = geom.out_h * geom.out_w;
                let mut out = Vec::with_capacity(b * out_channels * npos);
                for s in 0..b {
                    let cols = geom.im2col(x.row(s));
                    let mut ys = tensor::matmul_sparse_lhs(p.weight.data(), &cols, out_channels, q, npos);
                    if let Some(bias) = &p.bias {
                        for (c, &bv) in bias.data().iter().enumerate() {
                            for v in &mut ys[c * npos..(c + 1) * npos] {
                                *v += bv;
                            }
                        }
                    }
                    out.extend_from_slice(&ys);
                }
                (
                    Tensor::from_parts(vec![b, out_channels, geom.out_h, geom.out_w], out),
                    LayerCache::Conv { input: x },
                )
            }
            LayerKind::Relu => {
                let positive: Vec<bool> = x.data().iter().map(|&v| v > 0.0).collect();
                let mut y = x;
                for v in y.data_mut() {
                    if *v <= 0.0 {
                        *v = 0.0;
                    }
                }
                (y, LayerCache::Relu { positive })
            }
            LayerKind::MaxPool2 => {
                let shape = x.shape().to_vec();
                let (c, h, w) = (shape[1], shape[2], shape[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut out = Vec::with_capacity(b * c * oh * ow);
                let mut argmax = Vec::with_capacity(b * c * oh * ow);
                let data = x.data();
                for s in 0..b {
                    for ch in 0..c {
                        let base = (s * c + ch) * h * w;
                        for i in 0..oh {
                            for j in 0..ow {
                                let mut best = base + 2 * i * w + 2 * j;
                                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                                    if data[idx] > data[best] {
                                        best = idx;
                                    }
                                }
                                out.push(data[best]);
                                argmax.push(best);
                            }
                        }
                    }
                }
                (
                    Tensor::from_parts(vec![b, c, oh, ow], out),
                    LayerCache::MaxPool {
                        argmax,
                        input_shape: shape,
                    },
                )
            }
            LayerKind::GlobalAvgPool => {
                let shape = x.shape().to_vec();
                let (c, hw) = (shape[1], shape[2] * shape[3]);
                let out: Vec<f64> = x
                    .data()
                    .chunks(hw)
                    .map(|plane| plane.iter().sum::<f64>() / hw as f64)
                    .collect();
                (
                    Tensor::from_parts(vec![b, c], out),
                    LayerCache::Gap { input_shape: shape },
                )
            }
        }
    }

    /// Backward pass from the gradient of the loss with respect to the logits.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Tensor, mode: GradMode<'_>) -> ParamGrads {
        let b = cache.batch;
        let mut grads: Vec<LayerParams> = self
            .params
            .iter()
            .map(|p| LayerParams {
                weight: Tensor::zeros(p.weight.shape().to_vec()),
                bias: p.bias.as_ref().map(|t| Tensor::zeros(t.shape().to_vec())),
            })
            .collect();
        let mut dy = dlogits.clone();
        for (li, (spec, slot)) in self.layers.iter().zip(&self.slots).enumerate().rev() {
            let need_input_grad = li > 0;
            dy = match (&spec.kind, &cache.layers[li]) {
                (LayerKind::Linear { inputs, outputs }, LayerCache::Linear { input_t }) => {
                    let slot = slot.unwrap();
                    let (inputs, outputs) = (*inputs, *outputs);
                    let dyt = tensor::transpose(dy.data(), b, outputs);
                    let g = &mut grads[slot];
                    if let Some(db) = g.bias.as_mut() {
                        for (o, v) in db.data_mut().iter_mut().enumerate() {
                            *v = dyt[o * b..(o + 1) * b].iter().sum();
                        }
                    }
                    let gw = g.weight.data_mut();
                    let mut fill = |o: usize, i: usize| {
                        gw[o * inputs + i] =
                            tensor::dot(&dyt[o * b..(o + 1) * b], &input_t[i * b..(i + 1) * b]);
                    };
                    match mode {
                        GradMode::Dense => {
                            for o in 0..outputs {
                                for i in 0..inputs {
                                    fill(o, i);
                                }
                            }
                        }
                        GradMode::ActiveOnly(mask) => {
                            for flat in mask.layer(slot).active_indices() {
                                fill(flat / inputs, flat % inputs);
                            }
                        }
                    }
                    if !need_input_grad {
                        break;
                    }
                    // dxᵀ[in, b] = Wᵀ · dyᵀ
                    let w = self.params[slot].weight.data();
                    let dxt = tensor::matmul_sparse_lhs_t(w, &dyt, outputs, inputs, b);
                    let mut shape = vec![b];
                    shape.extend_from_slice(self.layer_input_shape(li).as_slice());
                    Tensor::from_parts(shape, tensor::transpose(&dxt, inputs, b))
                }
                (
                    LayerKind::Conv2d {
                        in_channels,
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    },
                    LayerCache::Conv { input },
                ) => {
                    let slot = slot.unwrap();
                    let geom = ConvGeom::new(input.shape(), *in_channels, *kernel, *stride, *padding);
                    let co = *out_channels;
                    let q = in_channels * kernel * kernel;
                    let npos = geom.out_h * geom.out_w;
                    let w = self.params[slot].weight.data();
                    let active: Option<Vec<usize>> = match mode {
                        GradMode::Dense => None,
                        GradMode::ActiveOnly(mask) => Some(mask.layer(slot).active_indices()),
                    };
                    let mut dx = if need_input_grad {
                        vec![0.0; input.len()]
                    } else {
                        Vec::new()
                    };
                    let in_len = input.row_len();
                    let g = &mut grads[slot];
                    for s in 0..b {
                        let dys = dy.row(s);
                        let cols = geom.im2col(input.row(s));
                        if let Some(db) = g.bias.as_mut() {
                            for (c, v) in db.data_mut().iter_mut().enumerate() {
                                *v += dys[c * npos..(c + 1) * npos].iter().sum::<f64>();
                            }
                        }
                        let gw = g.weight.data_mut();
                        match &active {
                            None => {
                                for c in 0..co {
                                    let dyc = &dys[c * npos..(c + 1) * npos];
                                    for r in 0..q {
                                        gw[c * q + r] += tensor::dot(dyc, &cols[r * npos..(r + 1) * npos]);
                                    }
                                }
                            }
                            Some(idx) => {
                                for &flat in idx {
                                    let (c, r) = (flat / q, flat % q);
                                    gw[flat] += tensor::dot(
                                        &dys[c * npos..(c + 1) * npos],
                                        &cols[r * npos..(r + 1) * npos],
                                    );
                                }
                            }
                        }
                        if need_input_grad {
                            let dcols = tensor::matmul_sparse_lhs_t(w, dys, co, q, npos);
                            geom.col2im_add(&dcols, &mut dx[s * in_len..(s + 1) * in_len]);
                        }
                    }
                    if !need_input_grad {
                        break;
                    }
                    Tensor::from_parts(input.shape().to_vec(), dx)
                }
                (LayerKind::Relu, LayerCache::Relu { positive }) => {
                    let mut d = dy;
                    for (v, &p) in d.data_mut().iter_mut().zip(positive) {
                        if !p {
                            *v = 0.0;
                        }
                    }
                    d
                }
                (LayerKind::MaxPool2, LayerCache::MaxPool { argmax, input_shape }) => {
                    let mut dx = vec![0.0; input_shape.iter().product()];
                    for (&src, &g) in argmax.iter().zip(dy.data()) {
                        dx[src] += g;
                    }
                    Tensor::from_parts(input_shape.clone(), dx)
                }
                (LayerKind::GlobalAvgPool, LayerCache::Gap { input_shape }) => {
                    let hw = input_shape[2] * input_shape[3];
                    let scale = 1.0 / hw as f64;
                    let mut dx = Vec::with_capacity(input_shape.iter().product());
                    for &g in dy.data() {
                        dx.extend(std::iter::repeat_n(g * scale, hw));
                    }
                    Tensor::from_parts(input_shape.clone(), dx)
                }
                _ => unreachable!("cache does not match layer kind"),
            };
        }
        ParamGrads { layers: grads }
    }

    /// Per-sample input shape of layer `li`.
    fn layer_input_shape(&self, li: usize) -> Vec<usize> {
        let mut shape = self.input_shape.clone();
        for spec in &self.layers[..li] {
            shape = spec
                .output_shape(&shape)
                .expect("layer shapes validated at construction");
        }
        shape
    }
}

/// Geometry of one convolution applied to a `[C, H, W]` sample.
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn new(batch_shape: &[usize], c: usize, k: usize, stride: usize, pad: usize) -> Self {
        let (h, w) = (batch_shape[2], batch_shape[3]);
        ConvGeom {
            c,
            h,
            w,
            k,
            stride,
            pad,
            out_h: (h + 2 * pad - k) / stride + 1,
            out_w: (w + 2 * pad - k) / stride + 1,
        }
    }

    /// `[C·k·k, out_h·out_w]` patch matrix; row order matches the weight
    /// layout `[c_out, c_in, k, k]`.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let npos = self.out_h * self.out_w;
        let mut cols = vec![0.0; self.c * self.k * self.k * npos];
        for ch in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (ch * self.k + ki) * self.k + kj;
                    let dst = &mut cols[row * npos..(row + 1) * npos];
                    for oi in 0..self.out_h {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        for oj in 0..self.out_w {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj < 0 || jj >= self.w as isize {
                                continue;
                            }
                            dst[oi * self.out_w + oj] =
                                x[(ch * self.h + ii as usize) * self.w + jj as usize];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im_add(&self, cols: &[f64], dx: &mut [f64]) {
        let npos = self.out_h * self.out_w;
        for ch in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (ch * self.k + ki) * self.k + kj;
                    let src = &cols[row * npos..(row + 1) * npos];
                    for oi in 0..self.out_h {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        for oj in 0..self.out_w {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj < 0 || jj >= self.w as isize {
                                continue;
                            }
                            dx[(ch * self.h + ii as usize) * self.w + jj as usize] +=
                                src[oi * self.out_w + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Mean loss over the batch and its gradient with respect to the logits.
pub fn loss_and_dlogits(logits: &Tensor, labels: &[usize], kind: LossKind) -> Result<(f64, Tensor)> {
    let b = logits.rows();
    if labels.len() != b {
        return Err(DstError::Data(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    let c = logits.row_len();
    let mut grad = vec![0.0; b * c];
    let mut total = 0.0;
    match kind {
        LossKind::SoftmaxCrossEntropy => {
            for (s, &y) in labels.iter().enumerate() {
                if y >= c {
                    return Err(DstError::Data(format!(
                        "label {y} out of range for {c} classes"
                    )));
                }
                let z = logits.row(s);
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
                let lse = m + sum.ln();
                total += lse - z[y];
                let g = &mut grad[s * c..(s + 1) * c];
                for (j, gj) in g.iter_mut().enumerate() {
                    *gj = (z[j] - lse).exp() / b as f64;
                }
                g[y] -= 1.0 / b as f64;
            }
        }
        LossKind::SigmoidBce => {
            if c != 1 {
                return Err(DstError::shape(format!(
                    "sigmoid BCE needs one logit per sample, got {c}"
                )));
            }
            for (s, &y) in labels.iter().enumerate() {
                if y > 1 {
                    return Err(DstError::Data(format!(
                        "label {y} out of range for binary classification"
                    )));
                }
                let z = logits.data()[s];
                let yf = y as f64;
                total += z.max(0.0) - z * yf + (-z.abs()).exp().ln_1p();
                grad[s] = (sigmoid(z) - yf) / b as f64;
            }
        }
    }
    Ok((total / b as f64, Tensor::from_parts(logits.shape().to_vec(), grad)))
}

/// Mean loss only.
pub fn loss_value(logits: &Tensor, labels: &[usize], kind: LossKind) -> Result<f64> {
    Ok(loss_and_dlogits(logits, labels, kind)?.0)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Forward, loss and dense gradients for every parameter, masked or not.
pub fn loss_and_grad(
    net: &Network,
    batch: &Tensor,
    labels: &[usize],
    kind: LossKind,
) -> Result<(f64, ParamGrads)> {
    loss_and_grad_with(net, batch, labels, kind, GradMode::Dense)
}

pub fn loss_and_grad_with(
    net: &Network,
    batch: &Tensor,
    labels: &[usize],
    kind: LossKind,
    mode: GradMode<'_>,
) -> Result<(f64, ParamGrads)> {
    let (logits, cache) = net.forward(batch)?;
    let (loss, dlogits) = loss_and_dlogits(&logits, labels, kind)?;
    Ok((loss, net.backward(&cache, &dlogits, mode)))
}

/// Predicted class per sample. Ties go to the lowest class index; for a single
/// sigmoid logit, class 1 requires a strictly positive logit.
pub fn predict(logits: &Tensor) -> Vec<usize> {
    let c = logits.row_len();
    (0..logits.rows())
        .map(|s| {
            let z = logits.row(s);
            if c == 1 {
                usize::from(z[0] > 0.0)
            } else {
                let mut best = 0;
                for j in 1..c {
                    if z[j] > z[best] {
                        best = j;
                    }
                }
                best
            }
        })
        .collect()
}
