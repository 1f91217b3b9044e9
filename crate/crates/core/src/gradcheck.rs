//! Central finite differences as an oracle for the analytic gradients.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::nn::{self, LayerParams, LossKind, Network, ParamGrads};
use crate::presets::Preset;
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

/// Denominator floor of the relative error, so that gradients which are zero
/// up to rounding are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Central difference `(f(x+h) - f(x-h)) / 2h` of a scalar function.
pub fn central_difference_1d(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// One scalar parameter of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRef {
    Weight { layer: usize, index: usize },
    Bias { layer: usize, index: usize },
}

fn param_mut(net: &mut Network, p: ParamRef) -> &mut f64 {
    match p {
        ParamRef::Weight { layer, index } => &mut net.params_mut()[layer].weight.data_mut()[index],
        ParamRef::Bias { layer, index } => {
            &mut net.params_mut()[layer].bias.as_mut().expect("layer has a bias").data_mut()[index]
        }
    }
}

fn grad_at(grads: &ParamGrads, p: ParamRef) -> f64 {
    match p {
        ParamRef::Weight { layer, index } => grads.layers[layer].weight.data()[index],
        ParamRef::Bias { layer, index } => grads.layers[layer].bias.as_ref().unwrap().data()[index],
    }
}

/// Every parameter of `net`.
pub fn all_params(net: &Network) -> Vec<ParamRef> {
    let mut out = Vec::new();
    for (layer, p) in net.params().iter().enumerate() {
        out.extend((0..p.weight.len()).map(|index| ParamRef::Weight { layer, index }));
        if let Some(b) = &p.bias {
            out.extend((0..b.len()).map(|index| ParamRef::Bias { layer, index }));
        }
    }
    out
}

/// Up to `per_tensor` randomly chosen parameters from every weight and bias
/// tensor.
pub fn sample_params<R: Rng>(net: &Network, per_tensor: usize, rng: &mut R) -> Vec<ParamRef> {
    let mut out = Vec::new();
    for (layer, p) in net.params().iter().enumerate() {
        let n = p.weight.len();
        for index in index::sample(rng, n, per_tensor.min(n)) {
            out.push(ParamRef::Weight { layer, index });
        }
        if let Some(b) = &p.bias {
            for index in index::sample(rng, b.len(), per_tensor.min(b.len())) {
                out.push(ParamRef::Bias { layer, index });
            }
        }
    }
    out
}

/// Central-difference estimate `(L(θ+h) - L(θ-h)) / 2h` of one partial
/// derivative, plus whether both probes kept the base activation pattern.
fn central_difference(
    net: &mut Network,
    batch: &Tensor,
    labels: &[usize],
    kind: LossKind,
    h: f64,
    p: ParamRef,
    base: Option<&nn::ForwardCache>,
) -> Result<(f64, bool)> {
    let orig = *param_mut(net, p);
    *param_mut(net, p) = orig + h;
    let (zp, cp) = net.forward(batch)?;
    *param_mut(net, p) = orig - h;
    let (zm, cm) = net.forward(batch)?;
    *param_mut(net, p) = orig;
    let smooth = base.is_none_or(|b| b.same_pattern(&cp) && b.same_pattern(&cm));
    Ok((loss_difference(&zp, &zm, labels, kind)? / (2.0 * h), smooth))
}

/// `L(zp) - L(zm)` for the mean loss, computed from the logit differences.
///
/// Subtracting two loss values of order one leaves about `ε / h` of rounding
/// noise in the quotient, which swamps small partial derivatives. Per sample,
/// `lse(zp) - lse(zm) = ln(Σ p_j e^{Δz_j}) = ln_1p(Σ p_j expm1(Δz_j))` with
/// `p = softmax(zm)` involves no such cancellation. The sigmoid loss is the
/// softmax loss over the logit pair `[0, z]`.
pub fn loss_difference(zp: &Tensor, zm: &Tensor, labels: &[usize], kind: LossKind) -> Result<f64> {
    // validates shapes and labels
    nn::loss_value(zm, labels, kind)?;
    let c = zm.row_len();
    let mut total = 0.0;
    for (s, &y) in labels.iter().enumerate() {
        let (a, b) = (zp.row(s), zm.row(s));
        let (plus, minus, y): (Vec<f64>, Vec<f64>, usize) = match kind {
            LossKind::SoftmaxCrossEntropy => (a.to_vec(), b.to_vec(), y),
            LossKind::SigmoidBce => (vec![0.0, a[0]], vec![0.0, b[0]], y),
        };
        debug_assert!(kind == LossKind::SigmoidBce || plus.len() == c);
        let m = minus.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = minus.iter().map(|v| (v - m).exp()).collect();
        let norm: f64 = weights.iter().sum();
        let mix: f64 = weights
            .iter()
            .zip(plus.iter().zip(&minus))
            .map(|(w, (p, q))| w / norm * (p - q).exp_m1())
            .sum();
        total += mix.ln_1p() - (plus[y] - minus[y]);
    }
    Ok(total / labels.len() as f64)
}

/// Central-difference gradient of the mean loss for every parameter.
pub fn finite_diff_grad(
    net: &Network,
    batch: &Tensor,
    labels: &[usize],
    kind: LossKind,
    h: f64,
) -> Result<ParamGrads> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut work = net.clone();
    let mut layers: Vec<LayerParams> = net
        .params()
        .iter()
        .map(|p| LayerParams {
            weight: Tensor::zeros(p.weight.shape().to_vec()),
            bias: p.bias.as_ref().map(|b| Tensor::zeros(b.shape().to_vec())),
        })
        .collect();
    for p in all_params(net) {
        let (g, _) = central_difference(&mut work, batch, labels, kind, h, p, None)?;
        match p {
            ParamRef::Weight { layer, index } => layers[layer].weight.data_mut()[index] = g,
            ParamRef::Bias { layer, index } => layers[layer].bias.as_mut().unwrap().data_mut()[index] = g,
        }
    }
    Ok(ParamGrads { layers })
}

/// Outcome of comparing analytic and numeric gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter with the largest error.
    pub worst: Option<ParamRef>,
    pub checked: usize,
    /// Parameters whose probes crossed a ReLU or max-pool switch, where the
    /// loss is not differentiable within the step.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tolerance
    }
}

/// Compares analytic dense gradients with central differences on `params`.
pub fn check_gradients(
    net: &Network,
    batch: &Tensor,
    labels: &[usize],
    kind: LossKind,
    h: f64,
    params: &[ParamRef],
) -> Result<GradCheckReport> {
    let (logits, cache) = net.forward(batch)?;
    let (_, dlogits) = nn::loss_and_dlogits(&logits, labels, kind)?;
    let analytic = net.backward(&cache, &dlogits, nn::GradMode::Dense);
    check_against(net, batch, labels, kind, h, params, &analytic)
}

/// Compares caller-supplied gradients with central differences on `params`.
pub fn check_against(
    net: &Network,
    batch: &Tensor,
    labels: &[usize],
    kind: LossKind,
    h: f64,
    params: &[ParamRef],
    analytic: &ParamGrads,
) -> Result<GradCheckReport> {
    let (_, cache) = net.forward(batch)?;
    let mut work = net.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    for &p in params {
        let (numeric, smooth) = central_difference(&mut work, batch, labels, kind, h, p, Some(&cache))?;
        if !smooth {
            report.skipped += 1;
            continue;
        }
        report.checked += 1;
        let err = relative_error(grad_at(analytic, p), numeric);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some(p);
        }
    }
    Ok(report)
}

/// Gradient check of a freshly initialized preset on a random batch.
///
/// Inputs are standard normal, labels uniform, both drawn from the synthetic
/// stream of `seed`; weights come from the usual init stream. Checks up to
/// `per_tensor` sampled coordinates of every weight and bias tensor.
pub fn check_preset(preset: &Preset, seed: u64, batch_size: usize, per_tensor: usize) -> Result<GradCheckReport> {
    let mut net = preset.build()?;
    net.init_uniform(&mut stream_rng(seed, Stream::Init, 0));
    let mut rng = stream_rng(seed, Stream::Synth, 0);
    let mut shape = vec![batch_size];
    shape.extend_from_slice(net.input_shape());
    let count: usize = shape.iter().product();
    let data: Vec<f64> = (0..count).map(|_| StandardNormal.sample(&mut rng)).collect();
    let batch = Tensor::from_vec(shape, data)?;
    let classes = net.output_dim().max(2);
    let labels: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..classes)).collect();
    let params = sample_params(&net, per_tensor, &mut rng);
    let kind = net.loss_kind();
    check_gradients(&net, &batch, &labels, kind, DEFAULT_STEP, &params)
}
