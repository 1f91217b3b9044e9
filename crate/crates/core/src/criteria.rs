//! Pruning scores, prune-set selection and growth selection.
//!
//! Every selection is deterministic: ties are broken towards the lower flat
//! index (and, when layers are pooled, the lower layer index).

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;

use crate::error::{DstError, Result};
use crate::topology::LayerMask;

/// Default denominator guard of Sensitivity and RSensitivity.
pub const DEFAULT_EPSILON: f64 = 1e-12;

/// Default MEST gradient weight.
pub const DEFAULT_MEST_LAMBDA: f64 = 1.0;

/// Importance score used to pick the weights to remove.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PruneCriterion {
    /// `|θ|`
    Magnitude,
    /// `|θ|`, pruning equal numbers of negative and non-negative weights.
    Set,
    /// `|θ| + λ|g|`
    Mest { lambda: f64 },
    /// `|g| / (|θ| + ε)`
    Sensitivity { epsilon: f64 },
    /// `|θ| / (|g| + ε)`
    RSensitivity { epsilon: f64 },
    /// `|θ| · |g|`
    Snip,
    /// Uniformly random scores; a baseline.
    RandomPrune,
}

impl PruneCriterion {
    pub const NAMES: [&'static str; 7] = [
        "magnitude",
        "set",
        "mest",
        "sensitivity",
        "rsensitivity",
        "snip",
        "random_prune",
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PruneCriterion::Magnitude => "magnitude",
            PruneCriterion::Set => "set",
            PruneCriterion::Mest { .. } => "mest",
            PruneCriterion::Sensitivity { .. } => "sensitivity",
            PruneCriterion::RSensitivity { .. } => "rsensitivity",
            PruneCriterion::Snip => "snip",
            PruneCriterion::RandomPrune => "random_prune",
        }
    }

    /// Parses a criterion name; `mest` takes `mest_lambda`.
    pub fn parse_with(name: &str, mest_lambda: f64) -> Result<Self> {
        let c = match name {
            "magnitude" => PruneCriterion::Magnitude,
            "set" => PruneCriterion::Set,
            "mest" => PruneCriterion::Mest { lambda: mest_lambda },
            "sensitivity" => PruneCriterion::Sensitivity {
                epsilon: DEFAULT_EPSILON,
            },
            "rsensitivity" => PruneCriterion::RSensitivity {
                epsilon: DEFAULT_EPSILON,
            },
            "snip" => PruneCriterion::Snip,
            "random_prune" => PruneCriterion::RandomPrune,
            other => {
                return Err(DstError::config(format!(
                    "unknown criterion '{other}'; valid options: {}",
                    Self::NAMES.join(", ")
                )))
            }
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        match *self {
            PruneCriterion::Mest { lambda } if !ok(lambda) => {
                Err(DstError::config(format!("mest lambda must be finite and >= 0, got {lambda}")))
            }
            PruneCriterion::Sensitivity { epsilon } | PruneCriterion::RSensitivity { epsilon }
                if !ok(epsilon) =>
            {
                Err(DstError::config(format!("epsilon must be finite and >= 0, got {epsilon}")))
            }
            _ => Ok(()),
        }
    }

    /// Score of one weight with gradient `g`.
    #[inline]
    pub fn score_one(&self, w: f64, g: f64) -> f64 {
        match *self {
            PruneCriterion::Magnitude | PruneCriterion::Set => w.abs(),
            PruneCriterion::Mest { lambda } => w.abs() + lambda * g.abs(),
            PruneCriterion::Sensitivity { epsilon } => g.abs() / (w.abs() + epsilon),
            PruneCriterion::RSensitivity { epsilon } => w.abs() / (g.abs() + epsilon),
            PruneCriterion::Snip => w.abs() * g.abs(),
            PruneCriterion::RandomPrune => f64::NAN,
        }
    }
}

impl FromStr for PruneCriterion {
    type Err = DstError;

    fn from_str(s: &str) -> Result<Self> {
        PruneCriterion::parse_with(s, DEFAULT_MEST_LAMBDA)
    }
}

impl fmt::Display for PruneCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Rule for choosing which inactive weights to reactivate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GrowthCriterion {
    RandomUniform,
    GradientMagnitude,
}

impl GrowthCriterion {
    pub fn name(&self) -> &'static str {
        match self {
            GrowthCriterion::RandomUniform => "random",
            GrowthCriterion::GradientMagnitude => "gradient",
        }
    }
}

impl FromStr for GrowthCriterion {
    type Err = DstError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(GrowthCriterion::RandomUniform),
            "gradient" => Ok(GrowthCriterion::GradientMagnitude),
            other => Err(DstError::config(format!(
                "unknown growth criterion '{other}'; valid options: random, gradient"
            ))),
        }
    }
}

impl fmt::Display for GrowthCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Elementwise scores. `RandomPrune` has no deterministic score and is
/// rejected here; selections draw its scores from an rng.
pub fn score(criterion: &PruneCriterion, weights: &[f64], grads: &[f64]) -> Result<Vec<f64>> {
    if weights.len() != grads.len() {
        return Err(DstError::shape(format!(
            "{} weights but {} gradients",
            weights.len(),
            grads.len()
        )));
    }
    if *criterion == PruneCriterion::RandomPrune {
        return Err(DstError::selection("random_prune scores are drawn from an rng"));
    }
    Ok(weights
        .iter()
        .zip(grads)
        .map(|(&w, &g)| criterion.score_one(w, g))
        .collect())
}

/// Number of weights removed for prune fraction `rho`: `⌊rho · active⌋`.
///
/// A 1e-9 slack absorbs representation error in products such as
/// `0.29 · 100`.
pub fn prune_count(rho: f64, active: usize) -> usize {
    let k = (rho * active as f64 + 1e-9).floor();
    (k.max(0.0) as usize).min(active)
}

/// Weights, gradients and mask of one layer at update time.
#[derive(Debug, Clone, Copy)]
pub struct LayerState<'a> {
    pub weights: &'a [f64],
    pub grads: &'a [f64],
    pub mask: &'a LayerMask,
}

/// Per-layer positions chosen for deactivation.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PruneDecision {
    /// Sorted flat indices per layer.
    pub indices: Vec<Vec<usize>>,
}

impl PruneDecision {
    pub fn counts(&self) -> Vec<usize> {
        self.indices.iter().map(Vec::len).collect()
    }

    pub fn total(&self) -> usize {
        self.indices.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    score: f64,
    layer: usize,
    index: usize,
}

fn by_score(a: &Candidate, b: &Candidate) -> Ordering {
    a.score
        .total_cmp(&b.score)
        .then(a.layer.cmp(&b.layer))
        .then(a.index.cmp(&b.index))
}

fn active_candidates<R: Rng + ?Sized>(
    criterion: &PruneCriterion,
    layer: usize,
    state: &LayerState<'_>,
    rng: &mut R,
) -> Vec<Candidate> {
    state
        .mask
        .bits()
        .iter()
        .enumerate()
        .filter(|(_, &on)| on)
        .map(|(i, _)| Candidate {
            score: match criterion {
                PruneCriterion::RandomPrune => rng.random::<f64>(),
                c => c.score_one(state.weights[i], state.grads[i]),
            },
            layer,
            index: i,
        })
        .collect()
}

/// The `k` lowest candidates, unordered.
fn lowest(mut cands: Vec<Candidate>, k: usize) -> Vec<Candidate> {
    if k == 0 {
        return Vec::new();
    }
    if k < cands.len() {
        cands.select_nth_unstable_by(k - 1, by_score);
        cands.truncate(k);
    }
    cands
}

/// Sign classes of SET: negative weights and non-negative ones (zeros
/// included), with the quota split `⌊k/2⌋` / `k - ⌊k/2⌋` and any deficit
/// spilled to the other class.
fn set_quotas(neg: usize, nonneg: usize, k: usize) -> (usize, usize) {
    let mut k_neg = k / 2;
    let mut k_pos = k - k_neg;
    if neg < k_neg {
        k_pos += k_neg - neg;
        k_neg = neg;
    }
    if nonneg < k_pos {
        k_neg += k_pos - nonneg;
        k_pos = nonneg;
    }
    (k_neg, k_pos)
}

fn check_layer(state: &LayerState<'_>) -> Result<()> {
    let n = state.mask.len();
    if state.weights.len() != n || state.grads.len() != n {
        return Err(DstError::shape(format!(
            "layer {}: {} weights, {} gradients, {} mask bits",
            state.mask.name(),
            state.weights.len(),
            state.grads.len(),
            n
        )));
    }
    Ok(())
}

/// The `k` active positions of one layer with the lowest scores (sorted flat
/// indices).
pub fn select_prune_local<R: Rng + ?Sized>(
    criterion: &PruneCriterion,
    state: &LayerState<'_>,
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    check_layer(state)?;
    let active = state.mask.active_count();
    if k > active {
        return Err(DstError::selection(format!(
            "cannot prune {k} of {active} active weights in layer {}",
            state.mask.name()
        )));
    }
    let cands = active_candidates(criterion, 0, state, rng);
    let chosen = if *criterion == PruneCriterion::Set {
        let (neg, nonneg): (Vec<Candidate>, Vec<Candidate>) =
            cands.into_iter().partition(|c| state.weights[c.index] < 0.0);
        let (k_neg, k_pos) = set_quotas(neg.len(), nonneg.len(), k);
        let mut out = lowest(neg, k_neg);
        out.extend(lowest(nonneg, k_pos));
        out
    } else {
        lowest(cands, k)
    };
    let mut idx: Vec<usize> = chosen.into_iter().map(|c| c.index).collect();
    idx.sort_unstable();
    Ok(idx)
}

/// Lowest-scoring `k_total` active positions pooled over all layers, keeping
/// at least one active weight per layer. A candidate whose removal would
/// empty its layer is skipped in favour of the next-lowest score.
pub fn select_prune_global<R: Rng + ?Sized>(
    criterion: &PruneCriterion,
    layers: &[LayerState<'_>],
    k_total: usize,
    rng: &mut R,
) -> Result<PruneDecision> {
    for s in layers {
        check_layer(s)?;
    }
    let total_active: usize = layers.iter().map(|s| s.mask.active_count()).sum();
    if k_total > 0 && k_total >= total_active {
        return Err(DstError::selection(format!(
            "cannot prune {k_total} of {total_active} active weights globally"
        )));
    }
    let capacity: usize = layers.iter().map(|s| s.mask.active_count().saturating_sub(1)).sum();
    if k_total > capacity {
        return Err(DstError::selection(format!(
            "pruning {k_total} weights would empty a layer; at most {capacity} can be removed"
        )));
    }
    let mut pool = Vec::with_capacity(total_active);
    for (l, s) in layers.iter().enumerate() {
        pool.extend(active_candidates(criterion, l, s, rng));
    }
    let mut room: Vec<usize> = layers.iter().map(|s| s.mask.active_count().saturating_sub(1)).collect();
    let chosen = if *criterion == PruneCriterion::Set {
        let (neg, nonneg): (Vec<Candidate>, Vec<Candidate>) =
            pool.into_iter().partition(|c| layers[c.layer].weights[c.index] < 0.0);
        select_set_global(neg, nonneg, k_total, &mut room)
    } else {
        select_keep_one(pool, k_total, &mut room)
    };
    let mut indices = vec![Vec::new(); layers.len()];
    for c in chosen {
        indices[c.layer].push(c.index);
    }
    for v in &mut indices {
        v.sort_unstable();
    }
    Ok(PruneDecision { indices })
}

/// Greedy ascending pick of `k` candidates with per-layer capacity `room`.
fn select_keep_one(pool: Vec<Candidate>, k: usize, room: &mut [usize]) -> Vec<Candidate> {
    // Fast path: the plain k lowest already respect every capacity.
    let fast = lowest(pool.clone(), k);
    let mut used = vec![0usize; room.len()];
    for c in &fast {
        used[c.layer] += 1;
    }
    if used.iter().zip(room.iter()).all(|(u, r)| u <= r) {
        for (r, u) in room.iter_mut().zip(used) {
            *r -= u;
        }
        return fast;
    }
    let mut sorted = pool;
    sorted.sort_unstable_by(by_score);
    take_greedy(&sorted, k, room, &mut Vec::new())
}

fn take_greedy(sorted: &[Candidate], k: usize, room: &mut [usize], skipped: &mut Vec<Candidate>) -> Vec<Candidate> {
    let mut out = Vec::with_capacity(k);
    for c in sorted {
        if out.len() == k {
            skipped.push(*c);
            continue;
        }
        if room[c.layer] > 0 {
            room[c.layer] -= 1;
            out.push(*c);
        } else {
            skipped.push(*c);
        }
    }
    out
}

fn select_set_global(
    mut neg: Vec<Candidate>,
    mut nonneg: Vec<Candidate>,
    k: usize,
    room: &mut [usize],
) -> Vec<Candidate> {
    neg.sort_unstable_by(by_score);
    nonneg.sort_unstable_by(by_score);
    let (k_neg, k_pos) = set_quotas(neg.len(), nonneg.len(), k);
    let (mut rest_neg, mut rest_pos) = (Vec::new(), Vec::new());
    let mut out = take_greedy(&neg, k_neg, room, &mut rest_neg);
    let got_neg = out.len();
    out.extend(take_greedy(&nonneg, k_pos, room, &mut rest_pos));
    let got_pos = out.len() - got_neg;
    // Shortfalls caused by the keep-one rule spill to the other sign class.
    if got_pos < k_pos {
        out.extend(take_greedy(&rest_neg, k_pos - got_pos, room, &mut Vec::new()));
    }
    if out.len() < k {
        let missing = k - out.len();
        out.extend(take_greedy(&rest_pos, missing, room, &mut Vec::new()));
    }
    out
}

/// `k` positions drawn uniformly without replacement from `candidates`
/// (sorted output). The draw depends only on `candidates.len()`, `k` and the
/// rng state; which positions it maps to follows the candidate order.
pub fn grow_random_from<R: Rng + ?Sized>(candidates: &[usize], k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k > candidates.len() {
        return Err(DstError::selection(format!(
            "cannot grow {k} weights from {} candidates",
            candidates.len()
        )));
    }
    let mut out: Vec<usize> = index::sample(rng, candidates.len(), k)
        .into_iter()
        .map(|r| candidates[r])
        .collect();
    out.sort_unstable();
    Ok(out)
}

/// `k` inactive positions of a layer drawn uniformly without replacement.
pub fn select_grow_random<R: Rng + ?Sized>(mask: &LayerMask, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    grow_random_from(&mask.inactive_indices(), k, rng)
}

/// The `k` candidates with the largest `|g|` (sorted output).
pub fn grow_gradient_from(grads: &[f64], candidates: &[usize], k: usize) -> Result<Vec<usize>> {
    if k > candidates.len() {
        return Err(DstError::selection(format!(
            "cannot grow {k} weights from {} candidates",
            candidates.len()
        )));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut c: Vec<usize> = candidates.to_vec();
    let cmp = |a: &usize, b: &usize| grads[*b].abs().total_cmp(&grads[*a].abs()).then(a.cmp(b));
    if k < c.len() {
        c.select_nth_unstable_by(k - 1, cmp);
        c.truncate(k);
    }
    c.sort_unstable();
    Ok(c)
}

/// The `k` inactive positions of a layer with the largest dense-gradient
/// magnitude.
pub fn select_grow_gradient(dense_grads: &[f64], mask: &LayerMask, k: usize) -> Result<Vec<usize>> {
    if dense_grads.len() != mask.len() {
        return Err(DstError::shape(format!(
            "{} gradients for {} mask positions",
            dense_grads.len(),
            mask.len()
        )));
    }
    grow_gradient_from(dense_grads, &mask.inactive_indices(), k)
}

/// Pooled gradient growth: the `k` `(layer, index)` candidates with the
/// largest `|g|`, ties towards lower layer then lower index.
pub fn grow_gradient_global(grads: &[&[f64]], candidates: &[Vec<usize>], k: usize) -> Result<Vec<Vec<usize>>> {
    let total: usize = candidates.iter().map(Vec::len).sum();
    if k > total {
        return Err(DstError::selection(format!("cannot grow {k} weights from {total} candidates")));
    }
    let mut pool: Vec<Candidate> = candidates
        .iter()
        .enumerate()
        .flat_map(|(l, idx)| {
            idx.iter().map(move |&i| Candidate {
                score: -grads[l][i].abs(),
                layer: l,
                index: i,
            })
        })
        .collect();
    if k > 0 && k < pool.len() {
        pool.select_nth_unstable_by(k - 1, by_score);
    }
    pool.truncate(k);
    let mut out = vec![Vec::new(); candidates.len()];
    for c in pool {
        out[c.layer].push(c.index);
    }
    for v in &mut out {
        v.sort_unstable();
    }
    Ok(out)
}

/// Pooled random growth over per-layer candidate lists, drawn over the
/// concatenation in the given order.
pub fn grow_random_global<R: Rng + ?Sized>(
    candidates: &[(usize, usize)],
    num_layers: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if k > candidates.len() {
        return Err(DstError::selection(format!(
            "cannot grow {k} weights from {} candidates",
            candidates.len()
        )));
    }
    let mut out = vec![Vec::new(); num_layers];
    for r in index::sample(rng, candidates.len(), k) {
        let (l, i) = candidates[r];
        out[l].push(i);
    }
    for v in &mut out {
        v.sort_unstable();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    fn layer(w: &[f64]) -> LayerMask {
        LayerMask::full("l", vec![w.len()])
    }

    #[test]
    fn table_scores() {
        let mest = PruneCriterion::Mest { lambda: 1.0 };
        assert!((mest.score_one(0.3, 0.2) - 0.5).abs() < 1e-15);
        assert!((PruneCriterion::Snip.score_one(0.3, 0.2) - 0.06).abs() < 1e-15);
        let rs = PruneCriterion::RSensitivity { epsilon: 0.0 };
        assert!((rs.score_one(0.3, 0.2) - 1.5).abs() < 1e-15);
        let s = PruneCriterion::Sensitivity { epsilon: 0.0 };
        assert!((s.score_one(0.3, 0.2) - 0.2 / 0.3).abs() < 1e-15);
        assert_eq!(PruneCriterion::Set.score_one(-0.4, 9.0), 0.4);
    }

    #[test]
    fn mest_without_lambda_is_magnitude() {
        let w = [0.5, -0.1, 0.3, -0.7];
        let g = [0.9, 0.2, -0.4, 0.0];
        assert_eq!(
            score(&PruneCriterion::Mest { lambda: 0.0 }, &w, &g).unwrap(),
            score(&PruneCriterion::Magnitude, &w, &g).unwrap()
        );
    }

    #[test]
    fn score_shape_mismatch() {
        assert!(matches!(
            score(&PruneCriterion::Magnitude, &[1.0], &[1.0, 2.0]),
            Err(DstError::Shape(_))
        ));
    }

    #[test]
    fn magnitude_and_set_examples() {
        let w = [0.5, -0.05, 0.1, -0.2];
        let g = [0.0; 4];
        let m = layer(&w);
        let st = LayerState { weights: &w, grads: &g, mask: &m };
        let mut rng = stream_rng(0, Stream::Prune, 0);
        assert_eq!(select_prune_local(&PruneCriterion::Magnitude, &st, 2, &mut rng).unwrap(), vec![1, 2]);
        assert_eq!(select_prune_local(&PruneCriterion::Set, &st, 2, &mut rng).unwrap(), vec![1, 2]);
        let w = [0.3, 0.2, 0.1];
        let m = layer(&w);
        let st = LayerState { weights: &w, grads: &g[..3], mask: &m };
        assert_eq!(select_prune_local(&PruneCriterion::Set, &st, 2, &mut rng).unwrap(), vec![1, 2]);
        assert!(select_prune_local(&PruneCriterion::Set, &st, 4, &mut rng).is_err());
    }

    #[test]
    fn set_quota_spill() {
        assert_eq!(set_quotas(5, 5, 4), (2, 2));
        assert_eq!(set_quotas(0, 3, 2), (0, 2));
        assert_eq!(set_quotas(3, 0, 3), (3, 0));
        assert_eq!(set_quotas(1, 10, 5), (1, 4));
        assert_eq!(set_quotas(10, 1, 5), (4, 1));
    }

    #[test]
    fn global_examples() {
        let g = [0.0; 2];
        let mut rng = stream_rng(0, Stream::Prune, 0);
        let (w1, w2) = ([0.1, 0.9], [0.2, 0.8]);
        let (m1, m2) = (layer(&w1), layer(&w2));
        let layers = [
            LayerState { weights: &w1, grads: &g, mask: &m1 },
            LayerState { weights: &w2, grads: &g, mask: &m2 },
        ];
        let d = select_prune_global(&PruneCriterion::Magnitude, &layers, 2, &mut rng).unwrap();
        assert_eq!(d.indices, vec![vec![0], vec![0]]);

        let (w1, w2) = ([0.1, 0.2], [0.8, 0.9]);
        let layers = [
            LayerState { weights: &w1, grads: &g, mask: &m1 },
            LayerState { weights: &w2, grads: &g, mask: &m2 },
        ];
        let d = select_prune_global(&PruneCriterion::Magnitude, &layers, 2, &mut rng).unwrap();
        assert_eq!(d.indices, vec![vec![0], vec![0]]);
        assert!(select_prune_global(&PruneCriterion::Magnitude, &layers, 3, &mut rng).is_err());
        assert!(select_prune_global(&PruneCriterion::Magnitude, &layers, 4, &mut rng).is_err());
    }

    #[test]
    fn gradient_growth_examples() {
        let mask = LayerMask::new("l", vec![3], vec![false; 3]).unwrap();
        assert_eq!(select_grow_gradient(&[0.9, 0.1, 0.5], &mask, 2).unwrap(), vec![0, 2]);
        assert_eq!(select_grow_gradient(&[0.3, 0.3, 0.3], &mask, 2).unwrap(), vec![0, 1]);
        assert!(select_grow_gradient(&[0.3, 0.3, 0.3], &mask, 4).is_err());
    }

    #[test]
    fn random_growth_edge_cases() {
        let mut rng = stream_rng(0, Stream::Growth, 0);
        let mask = LayerMask::full("l", vec![5]);
        assert!(select_grow_random(&mask, 0, &mut rng).unwrap().is_empty());
        assert!(select_grow_random(&mask, 1, &mut rng).is_err());
    }

    #[test]
    fn prune_counts() {
        assert_eq!(prune_count(0.5, 100), 50);
        assert_eq!(prune_count(0.5, 3), 1);
        assert_eq!(prune_count(0.0, 77), 0);
        assert_eq!(prune_count(0.29, 100), 29);
        assert_eq!(prune_count(1.0, 7), 7);
    }

    #[test]
    fn names_parse() {
        for n in PruneCriterion::NAMES {
            assert_eq!(n.parse::<PruneCriterion>().unwrap().name(), n);
        }
        let err = "magnitudes".parse::<PruneCriterion>().unwrap_err().to_string();
        assert!(err.contains("rsensitivity"));
        assert!(PruneCriterion::parse_with("mest", -1.0).is_err());
        assert_eq!("gradient".parse::<GrowthCriterion>().unwrap(), GrowthCriterion::GradientMagnitude);
    }
}
