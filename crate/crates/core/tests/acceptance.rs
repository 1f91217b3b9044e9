//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! The heavier criteria train small networks; they share a lock so that the
//! runtime budgets measure one criterion at a time.

use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dstlab::analysis::{self, average_ranks, cd_report, nemenyi_cd};
use dstlab::config::{ExperimentConfig, SweepSpec};
use dstlab::criteria::{self, GrowthCriterion, LayerState, PruneCriterion};
use dstlab::data::{synth_tabular_grid, SplitSpec, Splits};
use dstlab::gradcheck;
use dstlab::presets::Preset;
use dstlab::rng::{stream_rng, Stream};
use dstlab::runner;
use dstlab::schedule::{prune_fraction_at, PruneSchedule};
use dstlab::topology::{self, LayerMask};
use dstlab::trainer::{param_hash, run_experiment, PruningScope, SparseInit, TrainConfig, Trainer};

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: OnceLock<Mutex<()>> = OnceLock::new();
    LOCK.get_or_init(|| Mutex::new(())).lock().unwrap_or_else(|e| e.into_inner())
}

/// Prints the verdict line for a criterion (bypassing output capture so it
/// always shows) and fails the test when `ok` is false.
fn verdict(n: u32, name: &str, ok: bool, detail: &str) {
    let line = format!("acceptance {n:>2} {} {name}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(ok, "{}", line.trim_end());
}

const EPS: f64 = criteria::DEFAULT_EPSILON;

// ---------------------------------------------------------------------------
// Shared desk-scale fixture: small-MLP on the 4×4 checkerboard task.

fn grid_splits() -> &'static Splits {
    static SPLITS: OnceLock<Splits> = OnceLock::new();
    SPLITS.get_or_init(|| {
        let d = synth_tabular_grid(0, 20_000, 24, 2, 4).unwrap();
        let spec = SplitSpec {
            train: 0.7,
            valid: 0.15,
            test: 0.15,
            seed: 0,
        };
        Splits::from_dataset(&d, &spec, true).unwrap()
    })
}

/// Smaller task for criteria that need many runs but no accuracy claim.
fn small_splits() -> &'static Splits {
    static SPLITS: OnceLock<Splits> = OnceLock::new();
    SPLITS.get_or_init(|| {
        let d = synth_tabular_grid(7, 4_000, 24, 2, 4).unwrap();
        let spec = SplitSpec {
            train: 0.7,
            valid: 0.15,
            test: 0.15,
            seed: 7,
        };
        Splits::from_dataset(&d, &spec, true).unwrap()
    })
}

fn desk_config() -> TrainConfig {
    TrainConfig {
        architecture: Preset::SmallMlp,
        density: 0.05,
        epochs: 40,
        update_period: 220,
        lr: 0.1,
        ..TrainConfig::default()
    }
}

// ---------------------------------------------------------------------------
// 1. Gradient oracle

#[test]
fn a01_gradient_oracle() {
    let _g = serial();
    let start = Instant::now();
    let presets = [Preset::SmallMlp, Preset::LargeMlp, Preset::SmallCnn, Preset::Lenet5Caffe];
    let mut worst = 0.0f64;
    let mut checked = 0;
    for p in &presets {
        for seed in 0..5 {
            let r = gradcheck::check_preset(p, seed, 2, 10).unwrap();
            assert!(r.checked > 0);
            checked += r.checked;
            worst = worst.max(r.max_rel_error);
        }
    }
    let elapsed = start.elapsed();

    // Negative control: the same comparison must reject a corrupted backward.
    let mut net = Preset::SmallMlp.build().unwrap();
    net.init_uniform(&mut stream_rng(0, Stream::Init, 0));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Vec<f64> = (0..2 * 24).map(|_| rng.random_range(-1.0..1.0)).collect();
    let batch = dstlab::tensor::Tensor::from_vec(vec![2, 24], x).unwrap();
    let labels = [0, 1];
    let kind = net.loss_kind();
    let (_, mut bad) = dstlab::nn::loss_and_grad(&net, &batch, &labels, kind).unwrap();
    for v in bad.layers[1].weight.data_mut().iter_mut().step_by(7) {
        *v *= 1.001;
    }
    let params = gradcheck::all_params(&net)
        .into_iter()
        .filter(|p| matches!(p, gradcheck::ParamRef::Weight { layer: 1, .. }))
        .collect::<Vec<_>>();
    let control = gradcheck::check_against(&net, &batch, &labels, kind, gradcheck::DEFAULT_STEP, &params, &bad).unwrap();
    let caught = !control.passes(1e-6);

    let ok = worst < 1e-6 && elapsed < Duration::from_secs(60) && caught;
    verdict(
        1,
        "gradient oracle",
        ok,
        &format!(
            "max rel err {worst:.2e} over {checked} coords (4 presets x 5 seeds) in {:.1}s; corrupted backward rejected: {caught} ({:.1e})",
            elapsed.as_secs_f64(),
            control.max_rel_error
        ),
    );
}

// ---------------------------------------------------------------------------
// 2. Schedule exactness

#[test]
fn a02_schedule_exactness() {
    let t_stop = 1000u64;
    let cos = PruneSchedule::Cosine { rho: 0.5, stop: t_stop };
    let c0 = prune_fraction_at(&cos, 0);
    let c_half = prune_fraction_at(&cos, t_stop / 2);
    let c_end = prune_fraction_at(&cos, t_stop);
    let mut ok = (c0 - 0.5).abs() < 1e-12 && (c_half - 0.25).abs() < 1e-12 && c_end.abs() < 1e-12;
    ok &= prune_fraction_at(&cos, t_stop + 1) == 0.0;
    for t in [1u64, 17, 250, 333, 750, 999] {
        let want = 0.25 * (1.0 + (t as f64 * std::f64::consts::PI / t_stop as f64).cos());
        ok &= (prune_fraction_at(&cos, t) - want).abs() < 1e-12;
    }
    let lin = PruneSchedule::Linear {
        rho: 0.5,
        factor: PruneSchedule::LINEAR_FACTOR,
        every: PruneSchedule::LINEAR_EVERY,
    };
    for (t, power) in [(0u64, 0), (599, 0), (600, 1), (1199, 1), (1200, 2), (6000, 10)] {
        ok &= (prune_fraction_at(&lin, t) - 0.5 * 0.99f64.powi(power)).abs() < 1e-12;
    }
    let constant = PruneSchedule::Constant { rho: 0.3 };
    ok &= [0u64, 1, 10_000].iter().all(|&t| prune_fraction_at(&constant, t) == 0.3);
    verdict(
        2,
        "schedule exactness",
        ok,
        &format!("cosine rho_0={c0}, rho_T/2={c_half}, rho_T={c_end:e}; linear 0.99^floor(t/600) and constant checked"),
    );
}

// ---------------------------------------------------------------------------
// 3. Density accounting

/// Oracle scaling terms computed from the weight shape alone.
fn shape_scales(shape: &[usize], kernel_aware: bool) -> f64 {
    match shape {
        [out, inp] => (*inp + *out) as f64 / (*inp * *out) as f64,
        [out, inp, kh, kw] => {
            let (o, i, h, w) = (*out as f64, *inp as f64, *kh as f64, *kw as f64);
            if kernel_aware {
                (i + o + h + w) / (i * o * h * w)
            } else {
                (i + o) / (i * o)
            }
        }
        other => panic!("unexpected weight shape {other:?}"),
    }
}

#[test]
fn a03_density_accounting() {
    let presets = [Preset::SmallMlp, Preset::LargeMlp, Preset::SmallCnn, Preset::Lenet5Caffe];
    let mut worst_density = 0.0f64;
    let mut worst_ratio = 0.0f64;
    let mut cases = 0;
    for p in &presets {
        let specs = p.layers();
        for &d in &[0.05, 0.1, 0.2, 0.5] {
            for (kernel_aware, plan) in [
                (false, topology::er_allocate_specs(&specs, d).unwrap()),
                (true, topology::erk_allocate_specs(&specs, d).unwrap()),
            ] {
                cases += 1;
                // direct count on a sampled mask
                let mask = topology::sample_mask(&plan, 11);
                let active: usize = mask.layers().iter().map(|l| l.bits().iter().filter(|&&b| b).count()).sum();
                let total: usize = mask.layers().iter().map(|l| l.len()).sum();
                worst_density = worst_density.max((active as f64 / total as f64 - d).abs() / d);
                let free: Vec<_> = plan.layers.iter().filter(|l| !l.clamped).collect();
                for a in &free {
                    for b in &free {
                        let got = a.density / b.density;
                        let want = shape_scales(&a.shape, kernel_aware) / shape_scales(&b.shape, kernel_aware);
                        worst_ratio = worst_ratio.max((got - want).abs() / want);
                    }
                }
                for l in plan.layers.iter().filter(|l| l.clamped) {
                    assert_eq!(l.count, l.positions(), "clamped layer {} not dense", l.name);
                }
            }
        }
    }
    let ok = worst_density <= 0.005 && worst_ratio <= 1e-12;
    verdict(
        3,
        "density accounting",
        ok,
        &format!("{cases} ER/ERK plans: worst relative density error {worst_density:.2e}, worst unclamped ratio error {worst_ratio:.2e}"),
    );
}

// ---------------------------------------------------------------------------
// Random layer states shared by criteria 4 and 5.

struct Instance {
    weights: Vec<Vec<f64>>,
    grads: Vec<Vec<f64>>,
    masks: Vec<LayerMask>,
}

impl Instance {
    fn states(&self) -> Vec<LayerState<'_>> {
        (0..self.masks.len())
            .map(|l| LayerState {
                weights: &self.weights[l],
                grads: &self.grads[l],
                mask: &self.masks[l],
            })
            .collect()
    }
}

/// Values from a coarse grid (forcing ties and zeros) or continuous, with a
/// per-layer scale so that global selections favour some layers.
fn random_values(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    let coarse = rng.random_bool(0.5);
    (0..n)
        .map(|_| {
            if coarse {
                rng.random_range(-3i32..=3) as f64 * 0.5 * scale
            } else {
                rng.random_range(-1.0..1.0) * scale
            }
        })
        .collect()
}

fn random_instance(rng: &mut ChaCha8Rng, layers: usize) -> Instance {
    let mut weights = Vec::new();
    let mut grads = Vec::new();
    let mut masks = Vec::new();
    for l in 0..layers {
        let n = rng.random_range(1..40);
        let scale = [0.01, 1.0, 100.0][rng.random_range(0..3)];
        weights.push(random_values(rng, n, scale));
        let gscale = [0.01, 1.0][rng.random_range(0..2)];
        grads.push(random_values(rng, n, gscale));
        let p = rng.random_range(0.05..0.95);
        let mut bits: Vec<bool> = (0..n).map(|_| rng.random_bool(p)).collect();
        if !bits.iter().any(|&b| b) {
            bits[rng.random_range(0..n)] = true;
        }
        masks.push(LayerMask::new(format!("l{l}"), vec![n], bits).unwrap());
    }
    Instance { weights, grads, masks }
}

fn oracle_score(c: &PruneCriterion, w: f64, g: f64) -> f64 {
    match *c {
        PruneCriterion::Magnitude | PruneCriterion::Set => w.abs(),
        PruneCriterion::Mest { lambda } => w.abs() + lambda * g.abs(),
        PruneCriterion::Sensitivity { epsilon } => g.abs() / (w.abs() + epsilon),
        PruneCriterion::RSensitivity { epsilon } => w.abs() / (g.abs() + epsilon),
        PruneCriterion::Snip => w.abs() * g.abs(),
        PruneCriterion::RandomPrune => unreachable!(),
    }
}

/// `(score, layer, index)` of every active weight, in layer then index order.
/// Random scores consume `rng` in that same order.
fn scored(c: &PruneCriterion, inst: &Instance, rng: &mut ChaCha8Rng) -> Vec<(f64, usize, usize)> {
    let mut out = Vec::new();
    for (l, m) in inst.masks.iter().enumerate() {
        for i in 0..m.len() {
            if m.bits()[i] {
                let s = if *c == PruneCriterion::RandomPrune {
                    rng.random::<f64>()
                } else {
                    oracle_score(c, inst.weights[l][i], inst.grads[l][i])
                };
                out.push((s, l, i));
            }
        }
    }
    out
}

fn full_sort(v: &mut [(f64, usize, usize)]) {
    v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
}

fn set_split(k: usize, neg: usize, nonneg: usize) -> (usize, usize) {
    // half (rounded down) from the negatives, rest from the others, with any
    // shortfall on one side taken from the other
    let want_neg = k / 2;
    let want_pos = k - want_neg;
    let take_neg = want_neg.min(neg);
    let take_pos = (want_pos + (want_neg - take_neg)).min(nonneg);
    let take_neg = take_neg + (k - take_neg - take_pos).min(neg - take_neg);
    (take_neg, k - take_neg)
}

fn oracle_local(c: &PruneCriterion, inst: &Instance, l: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let only = Instance {
        weights: vec![inst.weights[l].clone()],
        grads: vec![inst.grads[l].clone()],
        masks: vec![inst.masks[l].clone()],
    };
    let mut all = scored(c, &only, rng);
    let mut picked: Vec<usize> = if *c == PruneCriterion::Set {
        let w = &inst.weights[l];
        let mut neg: Vec<_> = all.iter().copied().filter(|x| w[x.2] < 0.0).collect();
        let mut pos: Vec<_> = all.iter().copied().filter(|x| w[x.2] >= 0.0).collect();
        full_sort(&mut neg);
        full_sort(&mut pos);
        let (kn, kp) = set_split(k, neg.len(), pos.len());
        neg[..kn].iter().chain(&pos[..kp]).map(|x| x.2).collect()
    } else {
        full_sort(&mut all);
        all[..k].iter().map(|x| x.2).collect()
    };
    picked.sort_unstable();
    picked
}

/// Walks `sorted` taking entries while their layer keeps at least one weight.
fn walk_keep_one(sorted: &[(f64, usize, usize)], want: usize, left: &mut [usize], taken: &mut Vec<(usize, usize)>) {
    let mut got = 0;
    for &(_, l, i) in sorted {
        if got == want {
            break;
        }
        if taken.contains(&(l, i)) || left[l] <= 1 {
            continue;
        }
        left[l] -= 1;
        taken.push((l, i));
        got += 1;
    }
}

fn oracle_global(c: &PruneCriterion, inst: &Instance, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut all = scored(c, inst, rng);
    let mut left: Vec<usize> = inst.masks.iter().map(|m| m.active_count()).collect();
    let mut taken = Vec::new();
    if *c == PruneCriterion::Set {
        let mut neg: Vec<_> = all.iter().copied().filter(|x| inst.weights[x.1][x.2] < 0.0).collect();
        let mut pos: Vec<_> = all.iter().copied().filter(|x| inst.weights[x.1][x.2] >= 0.0).collect();
        full_sort(&mut neg);
        full_sort(&mut pos);
        let (kn, kp) = set_split(k, neg.len(), pos.len());
        walk_keep_one(&neg, kn, &mut left, &mut taken);
        let after_neg = taken.len();
        walk_keep_one(&pos, kp, &mut left, &mut taken);
        let pos_got = taken.len() - after_neg;
        // keep-one shortfalls spill to the other sign
        walk_keep_one(&neg, kp - pos_got, &mut left, &mut taken);
        let missing = k - taken.len();
        walk_keep_one(&pos, missing, &mut left, &mut taken);
    } else {
        full_sort(&mut all);
        walk_keep_one(&all, k, &mut left, &mut taken);
    }
    let mut out = vec![Vec::new(); inst.masks.len()];
    for (l, i) in taken {
        out[l].push(i);
    }
    for v in &mut out {
        v.sort_unstable();
    }
    out
}

fn all_criteria() -> Vec<PruneCriterion> {
    vec![
        PruneCriterion::Magnitude,
        PruneCriterion::Set,
        PruneCriterion::Mest { lambda: 1.0 },
        PruneCriterion::Mest { lambda: 0.3 },
        PruneCriterion::Sensitivity { epsilon: EPS },
        PruneCriterion::RSensitivity { epsilon: EPS },
        PruneCriterion::Snip,
        PruneCriterion::RandomPrune,
    ]
}

// ---------------------------------------------------------------------------
// 4. MEST(λ=0) ≡ Magnitude

#[test]
fn a04_mest_zero_equals_magnitude() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mest0 = PruneCriterion::Mest { lambda: 0.0 };
    let mut identical = 0;
    for _ in 0..100 {
        let inst = random_instance(&mut rng, 3);
        let states = inst.states();
        let mut same = true;
        for s in &states {
            let k = rng.random_range(0..=s.mask.active_count());
            let a = criteria::select_prune_local(&mest0, s, k, &mut stream_rng(0, Stream::Prune, 0)).unwrap();
            let b = criteria::select_prune_local(&PruneCriterion::Magnitude, s, k, &mut stream_rng(0, Stream::Prune, 0))
                .unwrap();
            same &= a == b;
        }
        let capacity: usize = states.iter().map(|s| s.mask.active_count() - 1).sum();
        let k = rng.random_range(0..=capacity);
        let a = criteria::select_prune_global(&mest0, &states, k, &mut stream_rng(0, Stream::Prune, 0)).unwrap();
        let b = criteria::select_prune_global(&PruneCriterion::Magnitude, &states, k, &mut stream_rng(0, Stream::Prune, 0))
            .unwrap();
        same &= a == b;
        identical += usize::from(same);
    }
    verdict(4, "MEST(lambda=0) equals Magnitude", identical == 100, &format!("{identical}/100 instances identical (local and global)"));
}

// ---------------------------------------------------------------------------
// 5. Selection oracle

#[test]
fn a05_selection_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut failures = Vec::new();
    let mut keep_one_exercised = 0;
    let mut set_spill_exercised = 0;
    for c in all_criteria() {
        for case in 0..100 {
            let nl = rng.random_range(1..4);
            let inst = random_instance(&mut rng, nl);
            let states = inst.states();
            let seed = rng.random::<u64>();
            // local
            for (l, s) in states.iter().enumerate() {
                let k = rng.random_range(0..=s.mask.active_count());
                let mut lib_rng = ChaCha8Rng::seed_from_u64(seed);
                let mut ora_rng = ChaCha8Rng::seed_from_u64(seed);
                let got = criteria::select_prune_local(&c, s, k, &mut lib_rng).unwrap();
                let want = oracle_local(&c, &inst, l, k, &mut ora_rng);
                if got != want {
                    failures.push(format!("{c} local case {case} layer {l}"));
                }
                if c == PruneCriterion::Set {
                    let neg = (0..s.mask.len()).filter(|&i| s.mask.bits()[i] && s.weights[i] < 0.0).count();
                    let pos = s.mask.active_count() - neg;
                    set_spill_exercised += usize::from(neg < k / 2 || pos < k - k / 2);
                }
            }
            // global
            let total: usize = states.iter().map(|s| s.mask.active_count()).sum();
            let capacity: usize = states.iter().map(|s| s.mask.active_count() - 1).sum();
            let k = rng.random_range(0..=capacity.min(total.saturating_sub(1)));
            let mut lib_rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ora_rng = ChaCha8Rng::seed_from_u64(seed);
            let got = criteria::select_prune_global(&c, &states, k, &mut lib_rng).unwrap();
            let want = oracle_global(&c, &inst, k, &mut ora_rng);
            if got.indices != want {
                failures.push(format!("{c} global case {case}"));
            }
            keep_one_exercised += usize::from(
                got.indices.iter().zip(&states).any(|(p, s)| s.mask.active_count() > 1 && p.len() == s.mask.active_count() - 1),
            );
        }
    }

    // growth: gradient growth against a full sort, random growth for validity
    for case in 0..100 {
        let nl = rng.random_range(1..4);
            let inst = random_instance(&mut rng, nl);
        let mut cands = Vec::new();
        for (l, m) in inst.masks.iter().enumerate() {
            let inactive = m.inactive_indices();
            let k = rng.random_range(0..=inactive.len());
            let got = criteria::select_grow_gradient(&inst.grads[l], m, k).unwrap();
            let mut sorted: Vec<usize> = inactive.clone();
            sorted.sort_by(|&a, &b| inst.grads[l][b].abs().total_cmp(&inst.grads[l][a].abs()).then(a.cmp(&b)));
            let mut want: Vec<usize> = sorted[..k].to_vec();
            want.sort_unstable();
            if got != want {
                failures.push(format!("gradient growth local case {case} layer {l}"));
            }
            let random = criteria::select_grow_random(m, k, &mut ChaCha8Rng::seed_from_u64(case)).unwrap();
            let distinct: std::collections::BTreeSet<_> = random.iter().collect();
            if random.len() != k || distinct.len() != k || random.iter().any(|&i| m.bits()[i]) {
                failures.push(format!("random growth case {case} layer {l}"));
            }
            cands.push(inactive);
        }
        let total: usize = cands.iter().map(Vec::len).sum();
        let k = rng.random_range(0..=total);
        let grads: Vec<&[f64]> = inst.grads.iter().map(Vec::as_slice).collect();
        let got = criteria::grow_gradient_global(&grads, &cands, k).unwrap();
        let mut pool: Vec<(f64, usize, usize)> =
            cands.iter().enumerate().flat_map(|(l, c)| { let g = grads[l]; c.iter().map(move |&i| (-g[i].abs(), l, i)) }).collect();
        full_sort(&mut pool);
        let mut want = vec![Vec::new(); cands.len()];
        for &(_, l, i) in &pool[..k] {
            want[l].push(i);
        }
        for v in &mut want {
            v.sort_unstable();
        }
        if got != want {
            failures.push(format!("gradient growth global case {case}"));
        }
    }

    let ok = failures.is_empty() && keep_one_exercised > 0 && set_spill_exercised > 0;
    verdict(
        5,
        "selection oracle",
        ok,
        &format!(
            "{} criteria x 100 instances local+global, plus 100 growth instances; mismatches: {}; keep-one hit {keep_one_exercised}x, SET spill hit {set_spill_exercised}x{}",
            all_criteria().len(),
            failures.len(),
            if failures.is_empty() { String::new() } else { format!(" (first: {})", failures[0]) }
        ),
    );
}

// ---------------------------------------------------------------------------
// 6. Static equivalence

#[test]
fn a06_static_equivalence() {
    let _g = serial();
    let splits = small_splits();
    let steps_per_epoch = splits.train.len().div_ceil(128) as u64;
    let base = TrainConfig {
        epochs: 4,
        lr: 0.1,
        seed: 3,
        ..TrainConfig::default()
    };
    let total = steps_per_epoch * 4;
    let never = TrainConfig { update_period: u64::MAX, ..base.clone() };
    let beyond = TrainConfig { update_period: total + 1, ..base.clone() };
    let (rec_static, snaps_static, net_static) = Trainer::new(never.clone(), splits).unwrap().run().unwrap();
    let (rec_beyond, snaps_beyond, net_beyond) = Trainer::new(beyond, splits).unwrap().run().unwrap();
    let same_run = rec_static.to_csv() == rec_beyond.to_csv()
        && param_hash(&net_static) == param_hash(&net_beyond)
        && snaps_static.last().unwrap().mask == snaps_beyond.last().unwrap().mask
        && rec_beyond.updates == 0;

    // DST whose first update is the last step of epoch 2
    let dst = TrainConfig { update_period: 2 * steps_per_epoch, ..base.clone() };
    let first = Trainer::new(dst.clone(), splits).unwrap().run_to_first_update().unwrap();
    let mut st = Trainer::new(never, splits).unwrap();
    let e1_static = st.train_epoch(0).unwrap();
    st.train_epoch(1).unwrap();
    let prefix_params = first.step == 2 * steps_per_epoch && first.param_hash == param_hash(st.network()) && first.mask == *st.mask();
    let mut dt = Trainer::new(dst, splits).unwrap();
    let e1_dst = dt.train_epoch(0).unwrap();
    let prefix_record = e1_static == e1_dst;

    let ok = same_run && prefix_params && prefix_record;
    verdict(
        6,
        "static equivalence",
        ok,
        &format!(
            "dt > T identical to static: {same_run}; DST prefix to step {} identical (params+mask: {prefix_params}, epoch-1 record: {prefix_record})",
            first.step
        ),
    );
}

// ---------------------------------------------------------------------------
// 7. DST beats static

#[test]
fn a07_dst_beats_static() {
    let _g = serial();
    let splits = grid_splits();
    let start = Instant::now();
    let mut dst = Vec::new();
    let mut stat = Vec::new();
    for seed in 0..5 {
        let cfg = TrainConfig { seed, ..desk_config() };
        dst.push(run_experiment(&cfg, splits).unwrap().0.test_acc);
        let cfg = TrainConfig { seed, update_period: u64::MAX, ..desk_config() };
        stat.push(run_experiment(&cfg, splits).unwrap().0.test_acc);
    }
    let elapsed = start.elapsed();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let wins = dst.iter().zip(&stat).filter(|(d, s)| d > s).count();
    let ok = mean(&dst) > mean(&stat) && wins >= 4 && elapsed < Duration::from_secs(600);
    verdict(
        7,
        "DST beats static",
        ok,
        &format!(
            "mean test acc DST {:.4} vs static ERK {:.4}; DST ahead on {wins}/5 seeds; {:.0}s",
            mean(&dst),
            mean(&stat),
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. Similarity ordering at the first update

#[test]
fn a08_similarity_ordering() {
    let _g = serial();
    let crit = [
        PruneCriterion::Magnitude,
        PruneCriterion::Set,
        PruneCriterion::Mest { lambda: 1.0 },
        PruneCriterion::Snip,
        PruneCriterion::RSensitivity { epsilon: EPS },
    ];
    let r = analysis::first_update_similarity(&desk_config(), grid_splits(), &crit, &[0, 1, 2, 3, 4]).unwrap();
    let m = &r.matrix;
    let j = |a: &str, b: &str| m.get(a, b).unwrap();
    let snip_rs = j("snip", "rsensitivity");
    let ordering = j("magnitude", "set") > j("magnitude", "snip") && j("magnitude", "mest") > j("magnitude", "snip");
    let min_pair = m.min_pair().map(|(a, b)| (m.labels[a].clone(), m.labels[b].clone()));
    let is_min = min_pair == Some(("snip".into(), "rsensitivity".into()));
    let mut above_random = true;
    for a in 0..m.labels.len() {
        for b in a + 1..m.labels.len() {
            let pair = (m.labels[a].as_str(), m.labels[b].as_str());
            if pair != ("snip", "rsensitivity") {
                above_random &= m.values[a][b] > r.random_baseline;
            }
        }
    }
    let ok = ordering && is_min && above_random;
    verdict(
        8,
        "similarity ordering",
        ok,
        &format!(
            "step {}: J(mag,set)={:.3} J(mag,mest)={:.3} J(mag,snip)={:.3} J(snip,rsens)={snip_rs:.3} (minimum: {is_min}); J_r={:.3}, other pairs above J_r: {above_random}",
            r.step,
            j("magnitude", "set"),
            j("magnitude", "mest"),
            j("magnitude", "snip"),
            r.random_baseline
        ),
    );
}

// ---------------------------------------------------------------------------
// 9. End-mask drift

#[test]
fn a09_end_mask_drift() {
    let _g = serial();
    let cfg = TrainConfig {
        criterion: PruneCriterion::Snip,
        update_period: 55,
        ..desk_config()
    };
    let (rec, snaps) = run_experiment(&cfg, grid_splits()).unwrap();
    let j = analysis::init_vs_end(&snaps[0], snaps.last().unwrap()).unwrap();
    let plan = cfg.plan(&cfg.architecture.build().unwrap()).unwrap();
    let jr = analysis::random_baseline_jr(&plan, &[0, 1, 2, 3, 4]).unwrap();
    let ok = j <= jr + 0.05;
    // Informational: magnitude pruning keeps more of its initial mask here.
    let mag = TrainConfig { criterion: PruneCriterion::Magnitude, ..cfg.clone() };
    let (_, ms) = run_experiment(&mag, grid_splits()).unwrap();
    let j_mag = analysis::init_vs_end(&ms[0], ms.last().unwrap()).unwrap();
    verdict(
        9,
        "end-mask drift",
        ok,
        &format!(
            "snip + random growth, dt=55, {} updates: J(init,end)={j:.4} vs J_r + 0.05 = {:.4} (magnitude, not asserted: {j_mag:.4})",
            rec.updates,
            jr + 0.05
        ),
    );
}

// ---------------------------------------------------------------------------
// 10. ITOP properties

#[test]
fn a10_itop_properties() {
    let _g = serial();
    let splits = small_splits();
    let base = TrainConfig {
        epochs: 8,
        update_period: 20,
        lr: 0.1,
        ..TrainConfig::default()
    };
    // monotone and bounded, on every run below
    let mut bounded = true;
    let mut check = |traj: &[f64], density: f64| {
        bounded &= traj.windows(2).all(|w| w[1] >= w[0]);
        bounded &= traj.iter().all(|&r| r >= density - 1e-4 && r <= 1.0);
    };

    let mut finals = Vec::new();
    for c in all_criteria() {
        let cfg = TrainConfig { criterion: c, seed: 2, ..base.clone() };
        let (rec, _) = run_experiment(&cfg, splits).unwrap();
        check(&rec.itop_trajectory, cfg.density);
        finals.push((c.to_string(), rec.final_itop()));
    }
    let equal = finals.iter().all(|(_, v)| *v == finals[0].1);

    let mut random = Vec::new();
    let mut gradient = Vec::new();
    for seed in 0..5 {
        for (growth, out) in [(GrowthCriterion::RandomUniform, &mut random), (GrowthCriterion::GradientMagnitude, &mut gradient)] {
            let cfg = TrainConfig { growth, seed, ..base.clone() };
            let (rec, _) = run_experiment(&cfg, splits).unwrap();
            check(&rec.itop_trajectory, cfg.density);
            out.push(rec.final_itop());
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let ok = bounded && equal && mean(&random) >= mean(&gradient);
    verdict(
        10,
        "ITOP properties",
        ok,
        &format!(
            "monotone within [D,1]: {bounded}; final ITOP equal across {} criteria: {equal} ({:.4}); 5-seed mean random {:.4} vs gradient {:.4}",
            finals.len(),
            finals[0].1,
            mean(&random),
            mean(&gradient)
        ),
    );
}

// ---------------------------------------------------------------------------
// 11. Rank machinery

#[test]
fn a11_rank_machinery() {
    let rows: Vec<(String, String, f64)> = [
        ("a", "s1", 0.9),
        ("b", "s1", 0.8),
        ("c", "s1", 0.7),
        ("a", "s2", 0.6),
        ("b", "s2", 0.9),
        ("c", "s2", 0.5),
        ("a", "s3", 0.8),
        ("b", "s3", 0.8),
        ("c", "s3", 0.1),
        ("a", "s4", 0.7),
        ("b", "s4", 0.75),
        ("c", "s4", 0.72),
    ]
    .iter()
    .map(|(m, s, v)| (m.to_string(), s.to_string(), *v))
    .collect();
    let table = average_ranks(&rows).unwrap();
    // by hand: s1 a1 b2 c3; s2 b1 a2 c3; s3 a1.5 b1.5 c3; s4 b1 c2 a3
    let want_ranks = [[1.0, 2.0, 3.0], [2.0, 1.0, 3.0], [1.5, 1.5, 3.0], [3.0, 1.0, 2.0]];
    let want_avg = [7.5 / 4.0, 5.5 / 4.0, 11.0 / 4.0];
    let ranks_ok = table.ranks.iter().zip(&want_ranks).all(|(r, w)| r.as_slice() == w.as_slice());
    let avg_ok = table.average.iter().zip(&want_avg).all(|(a, w)| a == w);
    let sums_ok = table.ranks.iter().all(|r| r.iter().sum::<f64>() == 6.0);
    let cd = nemenyi_cd(3, 4).unwrap();
    let want_cd = 2.343 * (3.0f64 * 4.0 / (6.0 * 4.0)).sqrt();
    let cd_ok = (cd - want_cd).abs() < 1e-12 && (nemenyi_cd(2, 9).unwrap() - 1.960 / 3.0).abs() < 1e-12;
    let report = cd_report(&table).unwrap();
    // b-a = 0.5 and a-c = 0.875 are within CD ≈ 1.657; b-c = 1.375 as well
    let groups_ok = report.groups == vec![vec!["b".to_string(), "a".to_string(), "c".to_string()]];
    let ok = ranks_ok && avg_ok && sums_ok && cd_ok && groups_ok;
    verdict(
        11,
        "rank machinery",
        ok,
        &format!("average ranks {:?}, CD {cd:.6} (hand {want_cd:.6}), rank sums 6 per setting: {sums_ok}", table.average),
    );
}

// ---------------------------------------------------------------------------
// 12. Determinism and concurrency independence

fn tree(root: &std::path::Path) -> std::collections::BTreeMap<std::path::PathBuf, Vec<u8>> {
    fn walk(root: &std::path::Path, dir: &std::path::Path, out: &mut std::collections::BTreeMap<std::path::PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else if p.file_name().unwrap() != runner::MANIFEST_FILE {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = std::collections::BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn a12_determinism_and_concurrency() {
    let _g = serial();
    let splits = small_splits();
    let cfg = TrainConfig {
        epochs: 3,
        update_period: 25,
        criterion: PruneCriterion::RandomPrune,
        growth: GrowthCriterion::GradientMagnitude,
        scope: PruningScope::Global,
        sparse_init: SparseInit::Er,
        seed: 9,
        ..TrainConfig::default()
    };
    let (r1, s1) = run_experiment(&cfg, splits).unwrap();
    let (r2, s2) = run_experiment(&cfg, splits).unwrap();
    let encode = |s: &[dstlab::snapshot::MaskSnapshot]| s.iter().map(|x| x.encode()).collect::<Vec<_>>();
    let rerun = r1.to_csv() == r2.to_csv() && encode(&s1) == encode(&s2);

    let text = "architecture=mlp:24-32-32-1\ndataset=synth-tabular\nsynth_samples=1500\nsynth_cells=4\nepochs=3\nupdate_period=15\nlr=0.05\n\
                densities=0.1,0.3\ncriteria=magnitude,snip,random_prune\ngrowths=random,gradient\nseeds=0,1\n";
    let spec = SweepSpec::parse(text).unwrap();
    let runs = spec.runs().len();
    let one = tempfile::tempdir().unwrap();
    let four = tempfile::tempdir().unwrap();
    let a = runner::run_sweep(&spec, one.path(), 1, None).unwrap();
    let b = runner::run_sweep(&spec, four.path(), 4, None).unwrap();
    let ta = tree(one.path());
    let tb = tree(four.path());
    let sweep_ok = a.failed() == 0 && b.failed() == 0 && !ta.is_empty() && ta == tb;
    let files = ta.len();

    // a single train of one grid point reproduces the sweep's directory
    let single = tempfile::tempdir().unwrap();
    let point: &ExperimentConfig = &spec.runs()[5];
    runner::execute_run(point, &point.data.load(None).unwrap(), single.path()).unwrap();
    let single_ok = tree(single.path()).iter().all(|(k, v)| ta.get(k) == Some(v));

    let ok = rerun && sweep_ok && single_ok;
    verdict(
        12,
        "determinism and concurrency independence",
        ok,
        &format!("rerun identical: {rerun}; {runs}-run sweep at parallelism 1 vs 4 identical over {files} files: {sweep_ok}; standalone run matches sweep: {single_ok}"),
    );
}
