//! Sparse masks, ER/ERK density allocation and exploration (ITOP) tracking.

use rand::seq::index;

use crate::error::{DstError, Result};
use crate::nn::{LayerKind, LayerSpec, Network};
use crate::rng::{stream_rng, Stream};

/// Binary topology of one weight tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMask {
    name: String,
    shape: Vec<usize>,
    bits: Vec<bool>,
    active: usize,
}

impl LayerMask {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, bits: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != bits.len() {
            return Err(DstError::shape(format!(
                "mask of {} bits for shape {shape:?}",
                bits.len()
            )));
        }
        let active = bits.iter().filter(|&&b| b).count();
        Ok(LayerMask {
            name: name.into(),
            shape,
            bits,
            active,
        })
    }

    pub fn full(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        LayerMask {
            name: name.into(),
            shape,
            bits: vec![true; n],
            active: n,
        }
    }

    /// Mask with exactly the listed flat positions active.
    pub fn from_active(name: impl Into<String>, shape: Vec<usize>, active: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        let mut bits = vec![false; n];
        for &i in active {
            if i >= n {
                return Err(DstError::shape(format!("active index {i} outside {n} positions")));
            }
            bits[i] = true;
        }
        LayerMask::new(name, shape, bits)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn active_count(&self) -> usize {
        self.active
    }

    pub fn inactive_count(&self) -> usize {
        self.bits.len() - self.active
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn set(&mut self, i: usize, on: bool) {
        if self.bits[i] != on {
            self.bits[i] = on;
            if on {
                self.active += 1;
            } else {
                self.active -= 1;
            }
        }
    }

    /// Sorted flat indices of active positions.
    pub fn active_indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    /// Sorted flat indices of inactive positions.
    pub fn inactive_indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| (!b).then_some(i))
            .collect()
    }

    pub fn density(&self) -> f64 {
        self.active as f64 / self.bits.len() as f64
    }
}

/// Per-layer masks over the maskable (Linear/Conv2d) weights of a network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    layers: Vec<LayerMask>,
}

impl Mask {
    pub fn new(layers: Vec<LayerMask>) -> Self {
        Mask { layers }
    }

    /// All-ones mask for `net`.
    pub fn dense_for(net: &Network) -> Self {
        Mask {
            layers: net
                .layer_names()
                .iter()
                .zip(net.params())
                .map(|(name, p)| LayerMask::full(name.clone(), p.weight.shape().to_vec()))
                .collect(),
        }
    }

    pub fn layers(&self) -> &[LayerMask] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &LayerMask {
        &self.layers[l]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut LayerMask {
        &mut self.layers[l]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn total_positions(&self) -> usize {
        self.layers.iter().map(LayerMask::len).sum()
    }

    pub fn total_active(&self) -> usize {
        self.layers.iter().map(LayerMask::active_count).sum()
    }

    /// Checks the mask matches `net`'s maskable layers.
    pub fn check_against(&self, net: &Network) -> Result<()> {
        if self.layers.len() != net.params().len() {
            return Err(DstError::shape(format!(
                "mask has {} layers, network has {} maskable layers",
                self.layers.len(),
                net.params().len()
            )));
        }
        for (lm, p) in self.layers.iter().zip(net.params()) {
            if lm.shape() != p.weight.shape() {
                return Err(DstError::shape(format!(
                    "mask layer {} has shape {:?}, weight has {:?}",
                    lm.name(),
                    lm.shape(),
                    p.weight.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Fraction of active positions over all maskable weights.
pub fn global_density(mask: &Mask) -> f64 {
    mask.total_active() as f64 / mask.total_positions() as f64
}

pub fn layer_density(mask: &Mask, l: usize) -> f64 {
    mask.layer(l).density()
}

/// Allocation for one maskable layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPlan {
    pub name: String,
    pub shape: Vec<usize>,
    /// Raw ER/ERK scaling term of the layer.
    pub scale: f64,
    /// Real-valued density `min(1, ε·scale)`.
    pub density: f64,
    /// Number of active weights to sample.
    pub count: usize,
    /// Whether the layer hit density 1.
    pub clamped: bool,
}

impl LayerPlan {
    pub fn positions(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Per-layer densities for a global target density.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityPlan {
    pub target: f64,
    pub epsilon: f64,
    pub layers: Vec<LayerPlan>,
}

impl SparsityPlan {
    pub fn total_positions(&self) -> usize {
        self.layers.iter().map(LayerPlan::positions).sum()
    }

    pub fn total_count(&self) -> usize {
        self.layers.iter().map(|l| l.count).sum()
    }

    /// Density realized by the integer counts.
    pub fn realized_density(&self) -> f64 {
        self.total_count() as f64 / self.total_positions() as f64
    }

    /// Plan with the same layers and the given per-layer fractions.
    pub fn with_fractions(&self, fractions: &[f64]) -> SparsityPlan {
        let layers = self
            .layers
            .iter()
            .zip(fractions)
            .map(|(l, &f)| LayerPlan {
                density: f,
                count: ((f * l.positions() as f64).round() as usize).min(l.positions()),
                clamped: f >= 1.0,
                ..l.clone()
            })
            .collect();
        SparsityPlan {
            target: self.target,
            epsilon: f64::NAN,
            layers,
        }
    }
}

/// A maskable layer described by its fan-in, fan-out and kernel size.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDims {
    pub name: String,
    pub fan_in: usize,
    pub fan_out: usize,
    /// `Some(k)` for a `k×k` convolution.
    pub kernel: Option<usize>,
}

impl LayerDims {
    pub fn linear(fan_in: usize, fan_out: usize) -> Self {
        LayerDims {
            name: String::new(),
            fan_in,
            fan_out,
            kernel: None,
        }
    }

    fn shape(&self) -> Vec<usize> {
        match self.kernel {
            Some(k) => vec![self.fan_out, self.fan_in, k, k],
            None => vec![self.fan_out, self.fan_in],
        }
    }

    /// `(n_in + n_out) / (n_in · n_out)`; the kernel is ignored.
    pub fn er_scale(&self) -> f64 {
        let (a, b) = (self.fan_in as f64, self.fan_out as f64);
        (a + b) / (a * b)
    }

    /// `(n_in + n_out + w + h) / (n_in · n_out · w · h)` for convolutions,
    /// the ER term otherwise.
    pub fn erk_scale(&self) -> f64 {
        match self.kernel {
            Some(k) => {
                let (a, b, k) = (self.fan_in as f64, self.fan_out as f64, k as f64);
                (a + b + 2.0 * k) / (a * b * k * k)
            }
            None => self.er_scale(),
        }
    }
}

/// Maskable-layer dimensions of a layer list.
pub fn dims_of(specs: &[LayerSpec]) -> Vec<LayerDims> {
    let (mut nl, mut nc) = (0, 0);
    specs
        .iter()
        .filter_map(|s| match s.kind {
            LayerKind::Linear { inputs, outputs } => {
                nl += 1;
                Some(LayerDims {
                    name: format!("fc{nl}"),
                    fan_in: inputs,
                    fan_out: outputs,
                    kernel: None,
                })
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                nc += 1;
                Some(LayerDims {
                    name: format!("conv{nc}"),
                    fan_in: in_channels,
                    fan_out: out_channels,
                    kernel: Some(kernel),
                })
            }
            _ => None,
        })
        .collect()
}

/// Erdős–Rényi allocation: `d^l ∝ (n^{l-1} + n^l) / (n^{l-1} n^l)`.
pub fn er_allocate(layers: &[LayerDims], density: f64) -> Result<SparsityPlan> {
    let scales: Vec<f64> = layers.iter().map(LayerDims::er_scale).collect();
    allocate(layers, &scales, density)
}

/// ER-Kernel allocation: kernel-aware scaling for convolutions, ER for
/// linear layers.
pub fn erk_allocate(layers: &[LayerDims], density: f64) -> Result<SparsityPlan> {
    let scales: Vec<f64> = layers.iter().map(LayerDims::erk_scale).collect();
    allocate(layers, &scales, density)
}

pub fn er_allocate_specs(specs: &[LayerSpec], density: f64) -> Result<SparsityPlan> {
    er_allocate(&dims_of(specs), density)
}

pub fn erk_allocate_specs(specs: &[LayerSpec], density: f64) -> Result<SparsityPlan> {
    erk_allocate(&dims_of(specs), density)
}

fn allocate(layers: &[LayerDims], scales: &[f64], density: f64) -> Result<SparsityPlan> {
    if layers.is_empty() {
        return Err(DstError::config("no maskable layers to allocate"));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(DstError::InfeasibleDensity(format!(
            "density must lie in (0, 1], got {density}"
        )));
    }
    let sizes: Vec<f64> = layers
        .iter()
        .map(|l| l.shape().iter().product::<usize>() as f64)
        .collect();
    let total: f64 = sizes.iter().sum();
    let budget = density * total;

    // Clamp-and-redistribute until no free layer exceeds density 1.
    let mut clamped = vec![false; layers.len()];
    let epsilon = loop {
        let fixed: f64 = sizes.iter().zip(&clamped).filter(|(_, &c)| c).map(|(s, _)| s).sum();
        let free: f64 = scales
            .iter()
            .zip(&sizes)
            .zip(&clamped)
            .filter(|(_, &c)| !c)
            .map(|((sc, s), _)| sc * s)
            .sum();
        if free == 0.0 {
            if fixed + 1e-9 * total < budget {
                return Err(DstError::InfeasibleDensity(format!(
                    "every layer is dense and the network still falls short of density {density}"
                )));
            }
            break 0.0;
        }
        let eps = (budget - fixed) / free;
        let mut changed = false;
        for (i, c) in clamped.iter_mut().enumerate() {
            if !*c && eps * scales[i] > 1.0 {
                *c = true;
                changed = true;
            }
        }
        if !changed {
            break eps;
        }
    };

    let mut plans: Vec<LayerPlan> = layers
        .iter()
        .zip(scales)
        .zip(&clamped)
        .map(|((l, &scale), &c)| {
            let d = if c { 1.0 } else { epsilon * scale };
            let n = l.shape().iter().product::<usize>();
            LayerPlan {
                name: l.name.clone(),
                shape: l.shape(),
                scale,
                density: d,
                count: ((d * n as f64).round() as usize).clamp(1, n),
                clamped: c,
            }
        })
        .collect();

    // Hit the exact global count by adjusting the largest layers that can
    // absorb the difference.
    let target = ((budget).round() as usize).max(plans.len());
    let mut order: Vec<usize> = (0..plans.len()).collect();
    order.sort_by(|&a, &b| plans[b].positions().cmp(&plans[a].positions()).then(a.cmp(&b)));
    let mut current: usize = plans.iter().map(|p| p.count).sum();
    for &i in &order {
        if current == target {
            break;
        }
        let p = &mut plans[i];
        if current < target {
            let room = p.positions() - p.count;
            let add = room.min(target - current);
            p.count += add;
            current += add;
        } else {
            let room = p.count - 1;
            let sub = room.min(current - target);
            p.count -= sub;
            current -= sub;
        }
    }

    Ok(SparsityPlan {
        target: density,
        epsilon,
        layers: plans,
    })
}

/// Samples `count` active positions per layer uniformly without replacement.
pub fn sample_mask(plan: &SparsityPlan, seed: u64) -> Mask {
    let mut rng = stream_rng(seed, Stream::Init, 1);
    sample_mask_with(plan, &mut rng)
}

pub fn sample_mask_with<R: rand::Rng + ?Sized>(plan: &SparsityPlan, rng: &mut R) -> Mask {
    let layers = plan
        .layers
        .iter()
        .map(|l| {
            let n = l.positions();
            let mut bits = vec![false; n];
            for i in index::sample(rng, n, l.count.min(n)).into_iter() {
                bits[i] = true;
            }
            LayerMask::new(l.name.clone(), l.shape.clone(), bits).expect("plan shape is consistent")
        })
        .collect();
    Mask::new(layers)
}

/// Running union of every mask seen during training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExplorationLedger {
    explored: Vec<Vec<bool>>,
    counts: Vec<usize>,
}

impl ExplorationLedger {
    pub fn new(initial: &Mask) -> Self {
        ExplorationLedger {
            explored: initial.layers().iter().map(|l| l.bits().to_vec()).collect(),
            counts: initial.layers().iter().map(LayerMask::active_count).collect(),
        }
    }

    pub fn record(&mut self, mask: &Mask) {
        for ((seen, count), lm) in self.explored.iter_mut().zip(&mut self.counts).zip(mask.layers()) {
            for (s, &b) in seen.iter_mut().zip(lm.bits()) {
                if b && !*s {
                    *s = true;
                    *count += 1;
                }
            }
        }
    }

    pub fn explored(&self, l: usize) -> &[bool] {
        &self.explored[l]
    }

    pub fn explored_count(&self, l: usize) -> usize {
        self.counts[l]
    }

    pub fn total_explored(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn total_positions(&self) -> usize {
        self.explored.iter().map(Vec::len).sum()
    }

    /// Whether every active position of `mask` has been recorded.
    pub fn covers(&self, mask: &Mask) -> bool {
        self.explored
            .iter()
            .zip(mask.layers())
            .all(|(seen, lm)| seen.iter().zip(lm.bits()).all(|(&s, &b)| s || !b))
    }
}

/// Fraction of maskable positions that have been active at least once.
pub fn itop_ratio(ledger: &ExplorationLedger) -> f64 {
    ledger.total_explored() as f64 / ledger.total_positions() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::Preset;

    #[test]
    fn full_density_is_dense() {
        let dims = vec![LayerDims::linear(24, 256), LayerDims::linear(256, 256), LayerDims::linear(256, 1)];
        let plan = er_allocate(&dims, 1.0).unwrap();
        assert!(plan.layers.iter().all(|l| l.density == 1.0 && l.count == l.positions()));
    }

    #[test]
    fn single_layer_gets_target_density() {
        let plan = er_allocate(&[LayerDims::linear(30, 40)], 0.3).unwrap();
        assert!((plan.layers[0].density - 0.3).abs() < 1e-12);
        assert_eq!(plan.layers[0].count, 360);
    }

    #[test]
    fn infeasible_targets_are_rejected() {
        for d in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(
                er_allocate(&[LayerDims::linear(4, 4)], d),
                Err(DstError::InfeasibleDensity(_))
            ));
        }
    }

    #[test]
    fn erk_degenerates_to_er_without_convs() {
        let specs = Preset::SmallMlp.layers();
        assert_eq!(er_allocate_specs(&specs, 0.1).unwrap(), erk_allocate_specs(&specs, 0.1).unwrap());
    }

    #[test]
    fn mask_counts_are_exact() {
        let plan = er_allocate(&[LayerDims::linear(10, 10)], 0.2).unwrap();
        let m = sample_mask(&plan, 5);
        assert_eq!(m.layer(0).active_count(), 20);
        assert_eq!(m.layer(0).active_indices().len(), 20);
        assert_eq!(global_density(&m), 0.2);
        assert_eq!(m, sample_mask(&plan, 5));
        assert_ne!(m, sample_mask(&plan, 6));
    }

    #[test]
    fn densities_of_full_and_empty_layers() {
        let full = LayerMask::full("a", vec![3, 3]);
        let empty = LayerMask::new("b", vec![2], vec![false, false]).unwrap();
        let m = Mask::new(vec![full, empty]);
        assert_eq!(layer_density(&m, 0), 1.0);
        assert_eq!(layer_density(&m, 1), 0.0);
    }

    #[test]
    fn ledger_tracks_union() {
        let a = Mask::new(vec![LayerMask::from_active("l", vec![4], &[0, 1]).unwrap()]);
        let b = Mask::new(vec![LayerMask::from_active("l", vec![4], &[1, 2]).unwrap()]);
        let mut ledger = ExplorationLedger::new(&a);
        assert_eq!(itop_ratio(&ledger), 0.5);
        ledger.record(&b);
        assert_eq!(itop_ratio(&ledger), 0.75);
        assert!(ledger.covers(&a) && ledger.covers(&b));
        let all = Mask::new(vec![LayerMask::full("l", vec![4])]);
        ledger.record(&all);
        assert_eq!(itop_ratio(&ledger), 1.0);
    }
}
