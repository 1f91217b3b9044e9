//! Property tests over the public API.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dstlab::analysis::{jaccard, jaccard_bits, rank_descending};
use dstlab::criteria::{self, LayerState, PruneCriterion};
use dstlab::data::{synth_tabular_grid, SplitSpec, Splits};
use dstlab::nn::LayerSpec;
use dstlab::topology::{self, LayerMask};
use dstlab::trainer::{run_experiment, TrainConfig};

fn layer(max_len: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>)> {
    (2..max_len).prop_flat_map(|n| {
        (
            prop::collection::vec(-4.0f64..4.0, n),
            prop::collection::vec(-4.0f64..4.0, n),
            prop::collection::vec(any::<bool>(), n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn jaccard_is_a_similarity(a in prop::collection::vec(any::<bool>(), 1..64), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut b = a.clone();
        b.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let j = jaccard_bits(&a, &b);
        prop_assert!((0.0..=1.0).contains(&j));
        prop_assert_eq!(j, jaccard_bits(&b, &a));
        prop_assert_eq!(jaccard_bits(&a, &a), 1.0);
        let ia: Vec<usize> = (0..a.len()).filter(|&i| a[i]).collect();
        let ib: Vec<usize> = (0..b.len()).filter(|&i| b[i]).collect();
        prop_assert_eq!(j, jaccard(&ia, &ib));
        let complement: Vec<bool> = a.iter().map(|x| !x).collect();
        if a.iter().any(|&x| x) && complement.iter().any(|&x| x) {
            prop_assert_eq!(jaccard_bits(&a, &complement), 0.0);
        }
    }

    #[test]
    fn ranks_sum_to_triangular_number(values in prop::collection::vec(0u8..5, 1..12)) {
        let v: Vec<f64> = values.iter().map(|&x| f64::from(x)).collect();
        let r = rank_descending(&v);
        let n = v.len() as f64;
        prop_assert_eq!(r.iter().sum::<f64>(), n * (n + 1.0) / 2.0);
        for i in 0..v.len() {
            for j in 0..v.len() {
                if v[i] > v[j] {
                    prop_assert!(r[i] < r[j]);
                }
                if v[i] == v[j] {
                    prop_assert_eq!(r[i], r[j]);
                }
            }
        }
    }

    /// Multiplying weights by a power of two is exact, so magnitude-based
    /// selections must not move.
    #[test]
    fn magnitude_selection_is_scale_invariant((w, g, bits) in layer(48), exp in -20i32..20, frac in 0.0f64..1.0) {
        let mut bits = bits;
        bits[0] = true;
        let mask = LayerMask::new("l", vec![w.len()], bits).unwrap();
        let k = (frac * mask.active_count() as f64) as usize;
        let scaled: Vec<f64> = w.iter().map(|x| x * 2f64.powi(exp)).collect();
        for c in [PruneCriterion::Magnitude, PruneCriterion::Set, PruneCriterion::Snip] {
            let a = criteria::select_prune_local(&c, &LayerState { weights: &w, grads: &g, mask: &mask }, k, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let b = criteria::select_prune_local(&c, &LayerState { weights: &scaled, grads: &g, mask: &mask }, k, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn pruned_indices_are_active_and_distinct((w, g, bits) in layer(48), frac in 0.0f64..1.0, seed in any::<u64>()) {
        let mut bits = bits;
        bits[0] = true;
        let mask = LayerMask::new("l", vec![w.len()], bits).unwrap();
        let k = (frac * mask.active_count() as f64) as usize;
        let state = LayerState { weights: &w, grads: &g, mask: &mask };
        for c in [PruneCriterion::RandomPrune, PruneCriterion::Sensitivity { epsilon: 1e-12 }, PruneCriterion::Mest { lambda: 1.0 }] {
            let p = criteria::select_prune_local(&c, &state, k, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(p.len(), k);
            prop_assert!(p.windows(2).all(|x| x[0] < x[1]));
            prop_assert!(p.iter().all(|&i| mask.is_active(i)));
        }
    }

    #[test]
    fn allocation_hits_the_target_count(widths in prop::collection::vec(2usize..300, 2..5), d in 0.01f64..0.99) {
        let specs: Vec<LayerSpec> = widths.windows(2).map(|p| LayerSpec::linear(p[0], p[1])).collect();
        for plan in [topology::er_allocate_specs(&specs, d).unwrap(), topology::erk_allocate_specs(&specs, d).unwrap()] {
            let n = plan.total_positions();
            prop_assert_eq!(plan.total_count(), (d * n as f64).round() as usize);
            prop_assert!(plan.layers.iter().all(|l| l.count >= 1 && l.count <= l.positions()));
            let mask = topology::sample_mask(&plan, 3);
            for (lm, lp) in mask.layers().iter().zip(&plan.layers) {
                prop_assert_eq!(lm.active_count(), lp.count);
            }
        }
    }
}

#[test]
fn random_growth_is_uniform_over_candidates() {
    let bits: Vec<bool> = (0..40).map(|i| i % 4 == 0).collect();
    let mask = LayerMask::new("l", vec![40], bits).unwrap();
    let candidates = mask.inactive_indices();
    let (k, trials) = (6, 20_000);
    let mut hits = vec![0usize; 40];
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..trials {
        for i in criteria::select_grow_random(&mask, k, &mut rng).unwrap() {
            hits[i] += 1;
        }
    }
    let p = k as f64 / candidates.len() as f64;
    let sd = (trials as f64 * p * (1.0 - p)).sqrt();
    for (i, &h) in hits.iter().enumerate() {
        if mask.is_active(i) {
            assert_eq!(h, 0, "active index {i} was grown");
        } else {
            let z = (h as f64 - trials as f64 * p) / sd;
            assert!(z.abs() < 5.0, "index {i}: {h} hits, z = {z:.2}");
        }
    }
}

#[test]
fn training_preserves_per_layer_density() {
    let d = synth_tabular_grid(3, 1_500, 24, 2, 4).unwrap();
    let spec = SplitSpec { train: 0.7, valid: 0.15, test: 0.15, seed: 3 };
    let splits = Splits::from_dataset(&d, &spec, true).unwrap();
    for (criterion, growth) in [("magnitude", "gradient"), ("set", "random"), ("snip", "random")] {
        let cfg = TrainConfig {
            epochs: 2,
            update_period: 4,
            criterion: criterion.parse().unwrap(),
            growth: growth.parse().unwrap(),
            ..TrainConfig::default()
        };
        let (rec, snaps) = run_experiment(&cfg, &splits).unwrap();
        assert!(rec.updates > 0);
        let counts = |s: &dstlab::snapshot::MaskSnapshot| s.mask.layers().iter().map(|l| l.active_count()).collect::<Vec<_>>();
        let first = counts(&snaps[0]);
        for s in &snaps {
            assert_eq!(counts(s), first, "{criterion}/{growth} at step {}", s.step);
        }
        assert_ne!(snaps[0].mask, snaps.last().unwrap().mask);
    }
}
