//! Masked SGD, the prune-and-regrow update and the training loop.

use std::time::Instant;

use rand::seq::index;
use sha2::{Digest, Sha256};

use crate::criteria::{self, GrowthCriterion, LayerState, PruneCriterion, PruneDecision};
use crate::data::{self, Dataset, Splits};
use crate::error::{DstError, Result};
use crate::nn::{self, GradMode, LayerParams, Network, ParamGrads};
use crate::presets::Preset;
use crate::rng::{stream_rng, Stream, StreamRng};
use crate::schedule::{self, LrSchedule, PruneSchedule, ScheduleKind, UpdateCadence};
use crate::snapshot::MaskSnapshot;
use crate::tensor::Tensor;
use crate::topology::{self, ExplorationLedger, Mask, SparsityPlan};

/// Where prune scores are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PruningScope {
    /// Each layer prunes its own fraction.
    Local,
    /// One pool over all layers.
    Global,
}

impl std::str::FromStr for PruningScope {
    type Err = DstError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(PruningScope::Local),
            "global" => Ok(PruningScope::Global),
            other => Err(DstError::config(format!(
                "unknown pruning_scope '{other}'; valid options: local, global"
            ))),
        }
    }
}

impl std::fmt::Display for PruningScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PruningScope::Local => "local",
            PruningScope::Global => "global",
        })
    }
}

/// Layer-density rule of the initial mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SparseInit {
    Er,
    Erk,
}

impl std::str::FromStr for SparseInit {
    type Err = DstError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "er" => Ok(SparseInit::Er),
            "erk" => Ok(SparseInit::Erk),
            other => Err(DstError::config(format!("unknown sparse_init '{other}'; valid options: er, erk"))),
        }
    }
}

impl std::fmt::Display for SparseInit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SparseInit::Er => "er",
            SparseInit::Erk => "erk",
        })
    }
}

/// Everything that determines one training run apart from the data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub architecture: Preset,
    pub density: f64,
    pub sparse_init: SparseInit,
    pub criterion: PruneCriterion,
    pub growth: GrowthCriterion,
    pub prune_schedule: ScheduleKind,
    pub prune_fraction: f64,
    /// Optimizer steps between updates; `u64::MAX` means never.
    pub update_period: u64,
    /// Last update-eligible step as a fraction of all steps.
    pub update_stop_fraction: f64,
    pub scope: PruningScope,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub milestones: Vec<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    pub seed: u64,
    /// Separate, larger batch for scoring at update steps.
    pub dst_update_batch_size: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            architecture: Preset::SmallMlp,
            density: 0.05,
            sparse_init: SparseInit::Erk,
            criterion: PruneCriterion::Magnitude,
            growth: GrowthCriterion::RandomUniform,
            prune_schedule: ScheduleKind::Cosine,
            prune_fraction: 0.5,
            update_period: 800,
            update_stop_fraction: 1.0,
            scope: PruningScope::Local,
            epochs: 10,
            batch_size: 128,
            lr: 0.01,
            lr_decay: 0.1,
            milestones: vec![0.5, 0.75],
            momentum: 0.9,
            weight_decay: 5e-4,
            nesterov: true,
            seed: 0,
            dst_update_batch_size: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(DstError::config(format!("density must lie in (0, 1], got {}", self.density)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(DstError::config("epochs and batch_size must be >= 1"));
        }
        if self.update_period == 0 {
            return Err(DstError::config("update_period must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.update_stop_fraction) {
            return Err(DstError::config(format!(
                "update_stop_fraction must lie in [0, 1], got {}",
                self.update_stop_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(DstError::config("momentum must lie in [0, 1) and weight_decay must be >= 0"));
        }
        if self.dst_update_batch_size == Some(0) {
            return Err(DstError::config("dst_update_batch_size must be >= 1"));
        }
        self.criterion.validate()?;
        self.lr_schedule().validate()?;
        self.prune_schedule(1).validate()
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.lr,
            milestones: self.milestones.clone(),
            gamma: self.lr_decay,
        }
    }

    /// Prune schedule for a run of `total_iters` optimizer steps.
    pub fn prune_schedule(&self, total_iters: u64) -> PruneSchedule {
        let rho = self.prune_fraction;
        match self.prune_schedule {
            ScheduleKind::Cosine => PruneSchedule::Cosine {
                rho,
                stop: self.update_stop(total_iters).max(1),
            },
            ScheduleKind::Linear => PruneSchedule::Linear {
                rho,
                factor: PruneSchedule::LINEAR_FACTOR,
                every: PruneSchedule::LINEAR_EVERY,
            },
            ScheduleKind::Constant => PruneSchedule::Constant { rho },
        }
    }

    pub fn update_stop(&self, total_iters: u64) -> u64 {
        (self.update_stop_fraction * total_iters as f64).round() as u64
    }

    pub fn cadence(&self, total_iters: u64) -> UpdateCadence {
        UpdateCadence {
            period: self.update_period,
            stop: self.update_stop(total_iters),
        }
    }

    /// Density plan of the initial mask.
    pub fn plan(&self, net: &Network) -> Result<SparsityPlan> {
        let specs = net.maskable_specs();
        match self.sparse_init {
            SparseInit::Er => topology::er_allocate_specs(&specs, self.density),
            SparseInit::Erk => topology::erk_allocate_specs(&specs, self.density),
        }
    }
}

/// Momentum buffers and SGD hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    /// Steps taken so far.
    pub steps: u64,
    buffers: Vec<LayerParams>,
}

impl OptimizerState {
    pub fn new(net: &Network, momentum: f64, weight_decay: f64, nesterov: bool) -> Self {
        let buffers = net
            .params()
            .iter()
            .map(|p| LayerParams {
                weight: Tensor::zeros(p.weight.shape().to_vec()),
                bias: p.bias.as_ref().map(|b| Tensor::zeros(b.shape().to_vec())),
            })
            .collect();
        OptimizerState {
            momentum,
            weight_decay,
            nesterov,
            steps: 0,
            buffers,
        }
    }

    pub fn buffers(&self) -> &[LayerParams] {
        &self.buffers
    }

    /// Zeroes the weight momentum at the given flat positions of layer `l`.
    pub fn reset(&mut self, l: usize, positions: &[usize]) {
        let buf = self.buffers[l].weight.data_mut();
        for &i in positions {
            buf[i] = 0.0;
        }
    }
}

#[inline]
fn sgd_scalar(theta: &mut f64, buf: &mut f64, g: f64, lr: f64, mu: f64, wd: f64, nesterov: bool) {
    let d = g + wd * *theta;
    *buf = mu * *buf + d;
    let step = if nesterov { d + mu * *buf } else { *buf };
    *theta -= lr * step;
}

/// One SGD step with momentum, optional Nesterov correction and L2 weight
/// decay. Inactive weights and their momentum are left untouched, so they stay
/// exactly zero; biases are always trained.
pub fn sgd_step(net: &mut Network, grads: &ParamGrads, mask: &Mask, opt: &mut OptimizerState, lr: f64) -> Result<()> {
    opt.steps += 1;
    if !grads.all_finite() {
        return Err(DstError::Divergence {
            step: opt.steps,
            msg: "non-finite gradient".into(),
        });
    }
    let (mu, wd, nesterov) = (opt.momentum, opt.weight_decay, opt.nesterov);
    for (l, p) in net.params_mut().iter_mut().enumerate() {
        let bits = mask.layer(l).bits();
        let buf = &mut opt.buffers[l];
        let g = &grads.layers[l];
        let w = p.weight.data_mut();
        let bw = buf.weight.data_mut();
        for (i, &on) in bits.iter().enumerate() {
            if on {
                sgd_scalar(&mut w[i], &mut bw[i], g.weight.data()[i], lr, mu, wd, nesterov);
            }
        }
        if let (Some(b), Some(bb), Some(gb)) = (p.bias.as_mut(), buf.bias.as_mut(), g.bias.as_ref()) {
            for ((t, m), &gv) in b.data_mut().iter_mut().zip(bb.data_mut()).zip(gb.data()) {
                sgd_scalar(t, m, gv, lr, mu, wd, nesterov);
            }
        }
        if !p.weight.all_finite() || p.bias.as_ref().is_some_and(|b| !b.all_finite()) {
            return Err(DstError::Divergence {
                step: opt.steps,
                msg: format!("non-finite parameter in layer {l} after step"),
            });
        }
    }
    Ok(())
}

/// Prune counts for one update: per layer `⌊ρ·active⌋` capped by the layer's
/// inactive count (local), or one pooled count (global).
fn local_counts(mask: &Mask, rho: f64) -> Vec<usize> {
    mask.layers()
        .iter()
        .map(|lm| criteria::prune_count(rho, lm.active_count()).min(lm.inactive_count()))
        .collect()
}

fn global_count(mask: &Mask, rho: f64) -> usize {
    let active = mask.total_active();
    let inactive = mask.total_positions() - active;
    criteria::prune_count(rho, active)
        .min(inactive)
        .min(active.saturating_sub(mask.num_layers()))
}

/// Positions each criterion would prune at prune fraction `rho`.
pub fn select_prune_sets(
    criterion: &PruneCriterion,
    net: &Network,
    mask: &Mask,
    grads: &ParamGrads,
    rho: f64,
    scope: PruningScope,
    rng: &mut StreamRng,
) -> Result<PruneDecision> {
    let states: Vec<LayerState<'_>> = net
        .params()
        .iter()
        .zip(&grads.layers)
        .zip(mask.layers())
        .map(|((p, g), lm)| LayerState {
            weights: p.weight.data(),
            grads: g.weight.data(),
            mask: lm,
        })
        .collect();
    match scope {
        PruningScope::Local => {
            let ks = local_counts(mask, rho);
            let indices = states
                .iter()
                .zip(ks)
                .map(|(s, k)| criteria::select_prune_local(criterion, s, k, rng))
                .collect::<Result<Vec<_>>>()?;
            Ok(PruneDecision { indices })
        }
        PruningScope::Global => criteria::select_prune_global(criterion, &states, global_count(mask, rho), rng),
    }
}

/// Inactive positions of layer `l`, never-explored ones first, each group
/// ascending. Random growth draws ranks into this list, so the number of newly
/// explored positions depends only on the exploration count and the rng.
fn growth_candidates(mask: &Mask, ledger: &ExplorationLedger, l: usize) -> (Vec<usize>, Vec<usize>) {
    let seen = ledger.explored(l);
    let lm = mask.layer(l);
    let mut fresh = Vec::new();
    let mut revisit = Vec::new();
    for (i, &on) in lm.bits().iter().enumerate() {
        if !on {
            if seen[i] {
                revisit.push(i);
            } else {
                fresh.push(i);
            }
        }
    }
    (fresh, revisit)
}

/// Grow sets for one update. Candidates are the positions inactive before the
/// update, so nothing pruned in this update can be regrown in it.
fn select_grow_sets(
    growth: GrowthCriterion,
    mask: &Mask,
    ledger: &ExplorationLedger,
    grads: &ParamGrads,
    counts: &[usize],
    scope: PruningScope,
    rng: &mut StreamRng,
) -> Result<Vec<Vec<usize>>> {
    let layers = mask.num_layers();
    match (scope, growth) {
        (PruningScope::Local, GrowthCriterion::RandomUniform) => (0..layers)
            .map(|l| {
                let (mut fresh, revisit) = growth_candidates(mask, ledger, l);
                fresh.extend(revisit);
                criteria::grow_random_from(&fresh, counts[l], rng)
            })
            .collect(),
        (PruningScope::Local, GrowthCriterion::GradientMagnitude) => (0..layers)
            .map(|l| criteria::select_grow_gradient(grads.layers[l].weight.data(), mask.layer(l), counts[l]))
            .collect(),
        (PruningScope::Global, GrowthCriterion::RandomUniform) => {
            let mut fresh = Vec::new();
            let mut revisit = Vec::new();
            for l in 0..layers {
                let (f, r) = growth_candidates(mask, ledger, l);
                fresh.extend(f.into_iter().map(|i| (l, i)));
                revisit.extend(r.into_iter().map(|i| (l, i)));
            }
            fresh.extend(revisit);
            criteria::grow_random_global(&fresh, layers, counts.iter().sum(), rng)
        }
        (PruningScope::Global, GrowthCriterion::GradientMagnitude) => {
            let g: Vec<&[f64]> = grads.layers.iter().map(|p| p.weight.data()).collect();
            let cands: Vec<Vec<usize>> = mask.layers().iter().map(|lm| lm.inactive_indices()).collect();
            criteria::grow_gradient_global(&g, &cands, counts.iter().sum())
        }
    }
}

/// What one topology update changed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdateOutcome {
    pub pruned: PruneDecision,
    pub grown: Vec<Vec<usize>>,
}

/// Random streams consumed by topology updates.
#[derive(Debug, Clone)]
pub struct UpdateRngs {
    pub prune: StreamRng,
    pub grow: StreamRng,
}

impl UpdateRngs {
    pub fn new(seed: u64) -> Self {
        UpdateRngs {
            prune: stream_rng(seed, Stream::Prune, 0),
            grow: stream_rng(seed, Stream::Growth, 0),
        }
    }
}

/// Prune-and-regrow update.
///
/// Prunes `⌊ρ·active⌋` positions per layer (or pooled), regrows as many from
/// the positions that were inactive before the update, zeroes the weights and
/// momentum of both sets, and records the new mask in the ledger. Gradient
/// growth reads `grads` at inactive positions, so they must be dense.
#[allow(clippy::too_many_arguments)]
pub fn dst_update(
    net: &mut Network,
    mask: &mut Mask,
    opt: &mut OptimizerState,
    ledger: &mut ExplorationLedger,
    grads: &ParamGrads,
    criterion: &PruneCriterion,
    growth: GrowthCriterion,
    rho: f64,
    scope: PruningScope,
    rngs: &mut UpdateRngs,
) -> Result<UpdateOutcome> {
    let pruned = select_prune_sets(criterion, net, mask, grads, rho, scope, &mut rngs.prune)?;
    let counts = pruned.counts();
    let grown = select_grow_sets(growth, mask, ledger, grads, &counts, scope, &mut rngs.grow)?;
    for (l, (p_idx, g_idx)) in pruned.indices.iter().zip(&grown).enumerate() {
        let lm = mask.layer_mut(l);
        for &i in p_idx {
            lm.set(i, false);
        }
        for &i in g_idx {
            lm.set(i, true);
        }
        let w = net.params_mut()[l].weight.data_mut();
        for &i in p_idx.iter().chain(g_idx) {
            w[i] = 0.0;
        }
        opt.reset(l, p_idx);
        opt.reset(l, g_idx);
    }
    ledger.record(mask);
    Ok(UpdateOutcome { pruned, grown })
}

/// Mean loss and top-1 accuracy over a dataset, in fixed order.
pub fn evaluate(net: &Network, dataset: &Dataset) -> Result<(f64, f64)> {
    if dataset.is_empty() {
        return Err(DstError::Data("cannot evaluate on an empty split".into()));
    }
    const EVAL_BATCH: usize = 512;
    let kind = net.loss_kind();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for b in data::eval_batches(dataset, EVAL_BATCH) {
        let logits = net.logits(&b.features)?;
        loss_sum += nn::loss_value(&logits, &b.labels, kind)? * b.labels.len() as f64;
        correct += nn::predict(&logits)
            .iter()
            .zip(&b.labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    let n = dataset.len() as f64;
    Ok((loss_sum / n, correct as f64 / n))
}

/// Metrics of one finished epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
    pub itop: f64,
    pub density: f64,
}

/// Outcome of a complete run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub epochs: Vec<EpochRecord>,
    pub test_loss: f64,
    pub test_acc: f64,
    pub total_iterations: u64,
    pub updates: usize,
    /// ITOP ratio after initialization and after every update.
    pub itop_trajectory: Vec<f64>,
    pub wall_seconds: f64,
}

impl RunRecord {
    pub const CSV_HEADER: [&'static str; 7] = ["epoch", "train_loss", "val_loss", "val_acc", "lr", "itop", "density"];

    /// Per-epoch CSV. Floats use shortest round-trip formatting, so equal
    /// records give equal bytes.
    pub fn to_csv(&self) -> String {
        let mut s = Self::CSV_HEADER.join(",");
        s.push('\n');
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                e.epoch, e.train_loss, e.val_loss, e.val_acc, e.lr, e.itop, e.density
            ));
        }
        s
    }

    pub fn final_itop(&self) -> f64 {
        self.itop_trajectory.last().copied().unwrap_or(0.0)
    }
}

/// Per-epoch records read back from a RunRecord CSV.
pub fn read_epoch_csv(path: &std::path::Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != RunRecord::CSV_HEADER {
        return Err(DstError::Analysis(format!("{}: unexpected header {:?}", path.display(), headers)));
    }
    let mut out = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let f = |c: usize| -> Result<f64> {
            rec[c].parse().map_err(|_| DstError::Parse {
                path: path.to_path_buf(),
                row: row + 1,
                column: RunRecord::CSV_HEADER[c].into(),
                msg: format!("bad number '{}'", &rec[c]),
            })
        };
        out.push(EpochRecord {
            epoch: f(0)? as usize,
            train_loss: f(1)?,
            val_loss: f(2)?,
            val_acc: f(3)?,
            lr: f(4)?,
            itop: f(5)?,
            density: f(6)?,
        });
    }
    Ok(out)
}

/// SHA-256 over all parameter bits, in layer order.
pub fn param_hash(net: &Network) -> String {
    let mut h = Sha256::new();
    for p in net.params() {
        for v in p.weight.data().iter().chain(p.bias.iter().flat_map(|b| b.data().iter())) {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Network state captured at the first update step, before the update.
#[derive(Debug, Clone)]
pub struct FirstUpdateState {
    pub step: u64,
    pub net: Network,
    pub mask: Mask,
    pub grads: ParamGrads,
    pub rho: f64,
    pub param_hash: String,
}

/// A training run in progress.
pub struct Trainer<'d> {
    cfg: TrainConfig,
    data: &'d Splits,
    net: Network,
    mask: Mask,
    opt: OptimizerState,
    ledger: ExplorationLedger,
    rngs: UpdateRngs,
    schedule: PruneSchedule,
    cadence: UpdateCadence,
    lr_schedule: LrSchedule,
    total_iters: u64,
    t: u64,
    snapshots: Vec<MaskSnapshot>,
    itop: Vec<f64>,
    updates: usize,
}

impl<'d> Trainer<'d> {
    /// Initializes weights and the sparse mask for `cfg.seed`.
    pub fn new(cfg: TrainConfig, data: &'d Splits) -> Result<Self> {
        cfg.validate()?;
        let mut net = cfg.architecture.build()?;
        let want: usize = net.input_shape().iter().product();
        let have: usize = data.train.sample_shape().iter().product();
        if want != have {
            return Err(DstError::shape(format!(
                "architecture {} expects {:?} inputs, dataset {} provides {:?}",
                cfg.architecture,
                net.input_shape(),
                data.train.name,
                data.train.sample_shape()
            )));
        }
        let outputs = net.output_dim();
        let classes = data.train.class_count;
        if !(outputs == classes || (outputs == 1 && classes == 2)) {
            return Err(DstError::shape(format!(
                "architecture {} has {outputs} outputs but the dataset has {classes} classes",
                cfg.architecture
            )));
        }
        net.init_uniform(&mut stream_rng(cfg.seed, Stream::Init, 0));
        let plan = cfg.plan(&net)?;
        let mask = topology::sample_mask(&plan, cfg.seed);
        mask.check_against(&net)?;
        net.apply_mask(&mask);
        let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size) as u64;
        let total_iters = steps_per_epoch * cfg.epochs as u64;
        let opt = OptimizerState::new(&net, cfg.momentum, cfg.weight_decay, cfg.nesterov);
        let ledger = ExplorationLedger::new(&mask);
        let mut tr = Trainer {
            schedule: cfg.prune_schedule(total_iters),
            cadence: cfg.cadence(total_iters),
            lr_schedule: cfg.lr_schedule(),
            rngs: UpdateRngs::new(cfg.seed),
            itop: vec![topology::itop_ratio(&ledger)],
            cfg,
            data,
            net,
            mask,
            opt,
            ledger,
            total_iters,
            t: 0,
            snapshots: Vec::new(),
            updates: 0,
        };
        tr.snapshot();
        Ok(tr)
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.opt
    }

    pub fn ledger(&self) -> &ExplorationLedger {
        &self.ledger
    }

    pub fn snapshots(&self) -> &[MaskSnapshot] {
        &self.snapshots
    }

    pub fn total_iterations(&self) -> u64 {
        self.total_iters
    }

    /// Optimizer steps taken.
    pub fn step_count(&self) -> u64 {
        self.t
    }

    fn snapshot(&mut self) {
        self.snapshots.push(MaskSnapshot {
            step: self.t,
            criterion: self.cfg.criterion.to_string(),
            growth: self.cfg.growth.to_string(),
            seed: self.cfg.seed,
            density: self.cfg.density,
            mask: self.mask.clone(),
        });
    }

    /// Gradients driving the update at step `t`: the current batch's, or a
    /// separate larger batch when configured. Dense when gradient growth needs
    /// inactive entries.
    fn update_grads(&self, batch: &data::Batch, active_grads: ParamGrads) -> Result<ParamGrads> {
        let dense = self.cfg.growth == GrowthCriterion::GradientMagnitude;
        let kind = self.net.loss_kind();
        match self.cfg.dst_update_batch_size {
            Some(size) => {
                let n = self.data.train.len();
                let mut rng = stream_rng(self.cfg.seed, Stream::UpdateBatch, self.t);
                let mut idx: Vec<usize> = index::sample(&mut rng, n, size.min(n)).into_vec();
                idx.sort_unstable();
                let b = data::batches(&self.data.train, &idx, idx.len()).next().expect("non-empty");
                let mode = if dense { GradMode::Dense } else { GradMode::ActiveOnly(&self.mask) };
                Ok(nn::loss_and_grad_with(&self.net, &b.features, &b.labels, kind, mode)?.1)
            }
            None if dense => Ok(nn::loss_and_grad(&self.net, &batch.features, &batch.labels, kind)?.1),
            None => Ok(active_grads),
        }
    }

    /// One optimizer step on `batch`, followed by a topology update when the
    /// cadence says so. Returns the batch loss.
    fn step(&mut self, batch: &data::Batch, lr: f64) -> Result<f64> {
        self.t += 1;
        let t = self.t;
        let kind = self.net.loss_kind();
        let updating = schedule::is_update_step(&self.cadence, t);
        let (loss, grads) =
            nn::loss_and_grad_with(&self.net, &batch.features, &batch.labels, kind, GradMode::ActiveOnly(&self.mask))?;
        if !loss.is_finite() {
            return Err(DstError::Divergence { step: t, msg: format!("loss is {loss}") });
        }
        // Update gradients are taken at the pre-step parameters, like the step's own.
        let update_grads = if updating { Some(self.update_grads(batch, grads.clone())?) } else { None };
        sgd_step(&mut self.net, &grads, &self.mask, &mut self.opt, lr)?;
        if let Some(g) = update_grads {
            let rho = schedule::prune_fraction_at(&self.schedule, t);
            dst_update(
                &mut self.net,
                &mut self.mask,
                &mut self.opt,
                &mut self.ledger,
                &g,
                &self.cfg.criterion,
                self.cfg.growth,
                rho,
                self.cfg.scope,
                &mut self.rngs,
            )?;
            self.updates += 1;
            self.itop.push(topology::itop_ratio(&self.ledger));
            self.snapshot();
        }
        Ok(loss)
    }

    /// Trains one epoch (0-based `epoch`) and evaluates on the validation split.
    pub fn train_epoch(&mut self, epoch: usize) -> Result<EpochRecord> {
        let lr = schedule::lr_at(&self.lr_schedule, epoch, self.cfg.epochs);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for b in data::train_batches(&self.data.train, self.cfg.batch_size, self.cfg.seed, epoch as u64) {
            loss_sum += self.step(&b, lr)? * b.labels.len() as f64;
            seen += b.labels.len();
        }
        let (val_loss, val_acc) = evaluate(&self.net, &self.data.valid)?;
        Ok(EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / seen as f64,
            val_loss,
            val_acc,
            lr,
            itop: topology::itop_ratio(&self.ledger),
            density: topology::global_density(&self.mask),
        })
    }

    /// Runs every epoch, evaluates on the test split and takes the final
    /// snapshot.
    pub fn run(mut self) -> Result<(RunRecord, Vec<MaskSnapshot>, Network)> {
        let start = Instant::now();
        let mut epochs = Vec::with_capacity(self.cfg.epochs);
        for e in 0..self.cfg.epochs {
            epochs.push(self.train_epoch(e)?);
        }
        let (test_loss, test_acc) = evaluate(&self.net, &self.data.test)?;
        self.snapshot();
        let record = RunRecord {
            epochs,
            test_loss,
            test_acc,
            total_iterations: self.total_iters,
            updates: self.updates,
            itop_trajectory: self.itop,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        Ok((record, self.snapshots, self.net))
    }

    /// Trains until the first update step and returns the state the update
    /// would act on, after that step's SGD step.
    pub fn run_to_first_update(mut self) -> Result<FirstUpdateState> {
        for epoch in 0..self.cfg.epochs {
            let lr = schedule::lr_at(&self.lr_schedule, epoch, self.cfg.epochs);
            for b in data::train_batches(&self.data.train, self.cfg.batch_size, self.cfg.seed, epoch as u64) {
                let t = self.t + 1;
                if schedule::is_update_step(&self.cadence, t) {
                    self.t = t;
                    let kind = self.net.loss_kind();
                    let (_, grads) = nn::loss_and_grad_with(
                        &self.net,
                        &b.features,
                        &b.labels,
                        kind,
                        GradMode::ActiveOnly(&self.mask),
                    )?;
                    let update_grads = self.update_grads(&b, grads.clone())?;
                    sgd_step(&mut self.net, &grads, &self.mask, &mut self.opt, lr)?;
                    return Ok(FirstUpdateState {
                        step: t,
                        param_hash: param_hash(&self.net),
                        rho: schedule::prune_fraction_at(&self.schedule, t),
                        net: self.net,
                        mask: self.mask,
                        grads: update_grads,
                    });
                }
                self.step(&b, lr)?;
            }
        }
        Err(DstError::Harness(format!(
            "no update step within {} iterations (update_period {})",
            self.total_iters, self.cfg.update_period
        )))
    }
}

/// Trains `cfg` on `data` from scratch.
pub fn run_experiment(cfg: &TrainConfig, data: &Splits) -> Result<(RunRecord, Vec<MaskSnapshot>)> {
    let (record, snaps, _) = Trainer::new(cfg.clone(), data)?.run()?;
    Ok((record, snaps))
}
