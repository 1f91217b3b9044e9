//! Mask similarity, exploration curves and rank statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::criteria::PruneCriterion;
use crate::data::Splits;
use crate::error::{DstError, Result};
use crate::rng::{stream_rng, Stream};
use crate::snapshot::MaskSnapshot;
use crate::topology::{self, LayerMask, Mask, SparsityPlan};
use crate::trainer::{self, TrainConfig, Trainer};

fn analysis(msg: impl Into<String>) -> DstError {
    DstError::Analysis(msg.into())
}

/// `|A ∩ B| / |A ∪ B|` of two index sets; 1 when both are empty.
pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_unstable();
    a.dedup();
    b.sort_unstable();
    b.dedup();
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Jaccard index of the set bits of two equally long bit arrays.
pub fn jaccard_bits(a: &[bool], b: &[bool]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn check_structure(a: &Mask, b: &Mask) -> Result<()> {
    if a.num_layers() != b.num_layers() {
        return Err(analysis(format!("{} layers vs {} layers", a.num_layers(), b.num_layers())));
    }
    for (x, y) in a.layers().iter().zip(b.layers()) {
        if x.name() != y.name() || x.shape() != y.shape() {
            return Err(analysis(format!(
                "layer mismatch: {} {:?} vs {} {:?}",
                x.name(),
                x.shape(),
                y.name(),
                y.shape()
            )));
        }
    }
    Ok(())
}

/// Per-layer Jaccard indices of two masks.
pub fn layer_jaccard(a: &Mask, b: &Mask) -> Result<Vec<f64>> {
    check_structure(a, b)?;
    Ok(a.layers().iter().zip(b.layers()).map(|(x, y)| jaccard_bits(x.bits(), y.bits())).collect())
}

/// Unweighted mean over layers of the per-layer Jaccard index.
pub fn mean_jaccard(a: &Mask, b: &Mask) -> Result<f64> {
    let per = layer_jaccard(a, b)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Layer-averaged Jaccard index of two per-layer index-set lists.
pub fn mean_jaccard_sets(a: &[Vec<usize>], b: &[Vec<usize>]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(analysis(format!("{} layers vs {} layers", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| jaccard(x, y)).sum::<f64>() / a.len() as f64)
}

/// Expected overlap of random subsets: mean pairwise `mean_jaccard` of masks
/// sampled from `plan` with each seed.
pub fn random_baseline_jr(plan: &SparsityPlan, seeds: &[u64]) -> Result<f64> {
    let mut distinct = seeds.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() != seeds.len() || seeds.len() < 2 {
        return Err(analysis("the random baseline needs at least two distinct seeds"));
    }
    let masks: Vec<Mask> = seeds.iter().map(|&s| topology::sample_mask(plan, s)).collect();
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..masks.len() {
        for j in i + 1..masks.len() {
            sum += mean_jaccard(&masks[i], &masks[j])?;
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

/// Symmetric matrix of mean layer-averaged Jaccard indices.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityMatrix {
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
    /// `per_layer[l][i][j]`.
    pub per_layer: Vec<Vec<Vec<f64>>>,
    pub layer_names: Vec<String>,
    /// Number of seeds averaged.
    pub seeds: usize,
}

impl SimilarityMatrix {
    /// Averages per-seed, per-layer pair tables `tables[seed][l][i][j]`.
    fn from_tables(labels: Vec<String>, layer_names: Vec<String>, tables: &[Vec<Vec<Vec<f64>>>]) -> Self {
        let k = labels.len();
        let layers = layer_names.len();
        let s = tables.len() as f64;
        let mut per_layer = vec![vec![vec![0.0; k]; k]; layers];
        for t in tables {
            for l in 0..layers {
                for i in 0..k {
                    for j in 0..k {
                        per_layer[l][i][j] += t[l][i][j];
                    }
                }
            }
        }
        for m in &mut per_layer {
            for row in m.iter_mut() {
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
        }
        let mut values = vec![vec![0.0; k]; k];
        for i in 0..k {
            for j in 0..k {
                values[i][j] = if i == j {
                    1.0
                } else {
                    // mean over seeds of the layer mean equals the layer mean of seed means
                    tables.iter().map(|t| t.iter().map(|m| m[i][j]).sum::<f64>() / layers as f64).sum::<f64>() / s
                };
            }
        }
        SimilarityMatrix {
            labels,
            values,
            per_layer,
            layer_names,
            seeds: tables.len(),
        }
    }

    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.labels.iter().position(|l| l == a)?;
        let j = self.labels.iter().position(|l| l == b)?;
        Some(self.values[i][j])
    }

    /// Off-diagonal entry with the smallest value, as `(i, j)` with `i < j`.
    pub fn min_pair(&self) -> Option<(usize, usize)> {
        let k = self.labels.len();
        let mut best: Option<(usize, usize)> = None;
        for i in 0..k {
            for j in i + 1..k {
                if best.is_none_or(|(a, b)| self.values[i][j] < self.values[a][b]) {
                    best = Some((i, j));
                }
            }
        }
        best
    }

    /// Header `label,<labels...>` followed by one row per label.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("label");
        for l in &self.labels {
            s.push(',');
            s.push_str(l);
        }
        s.push('\n');
        for (l, row) in self.labels.iter().zip(&self.values) {
            s.push_str(l);
            for v in row {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// Long format: `layer,a,b,jaccard`.
    pub fn per_layer_csv(&self) -> String {
        let mut s = String::from("layer,a,b,jaccard\n");
        for (name, m) in self.layer_names.iter().zip(&self.per_layer) {
            for (i, a) in self.labels.iter().enumerate() {
                for (j, b) in self.labels.iter().enumerate() {
                    writeln!(s, "{name},{a},{b},{}", m[i][j]).unwrap();
                }
            }
        }
        s
    }
}

fn pair_tables(sets: &[Vec<Vec<bool>>]) -> Vec<Vec<Vec<f64>>> {
    let k = sets.len();
    let layers = sets[0].len();
    (0..layers)
        .map(|l| {
            (0..k)
                .map(|i| (0..k).map(|j| jaccard_bits(&sets[i][l], &sets[j][l])).collect())
                .collect()
        })
        .collect()
}

/// First-update prune sets of several criteria, plus the random baseline.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FirstUpdateReport {
    pub matrix: SimilarityMatrix,
    /// Mean pairwise overlap of random prune sets of the same per-layer sizes
    /// under different sparse initializations.
    pub random_baseline: f64,
    pub step: u64,
    pub rho: f64,
}

/// Compares the sets each criterion prunes at the first update.
///
/// For every seed, each criterion's run is trained up to the first update
/// step. Training before that step does not depend on the criterion, so all
/// runs must reach the same parameters; a differing parameter hash is reported
/// as a harness error. Prune sets are then selected on the shared state.
pub fn first_update_similarity(
    base: &TrainConfig,
    data: &Splits,
    criteria: &[PruneCriterion],
    seeds: &[u64],
) -> Result<FirstUpdateReport> {
    if criteria.len() < 2 || seeds.is_empty() {
        return Err(analysis("need at least two criteria and one seed"));
    }
    let labels: Vec<String> = criteria.iter().map(|c| c.to_string()).collect();
    let mut tables = Vec::with_capacity(seeds.len());
    let mut layer_names = Vec::new();
    let mut fractions: Vec<f64> = Vec::new();
    let (mut step, mut rho) = (0, 0.0);
    for &seed in seeds {
        let mut sets = Vec::with_capacity(criteria.len());
        let mut hash: Option<String> = None;
        for c in criteria {
            let cfg = TrainConfig {
                criterion: *c,
                seed,
                ..base.clone()
            };
            let state = Trainer::new(cfg.clone(), data)?.run_to_first_update()?;
            match &hash {
                None => hash = Some(state.param_hash.clone()),
                Some(h) if *h != state.param_hash => {
                    return Err(DstError::Harness(format!(
                        "seed {seed}: criterion {c} reached step {} with different parameters",
                        state.step
                    )))
                }
                Some(_) => {}
            }
            let decision = trainer::select_prune_sets(
                c,
                &state.net,
                &state.mask,
                &state.grads,
                state.rho,
                cfg.scope,
                &mut stream_rng(seed, Stream::Prune, 0),
            )?;
            if fractions.is_empty() {
                fractions = decision
                    .indices
                    .iter()
                    .zip(state.mask.layers())
                    .map(|(ix, lm)| ix.len() as f64 / lm.len() as f64)
                    .collect();
                layer_names = state.mask.layers().iter().map(|l| l.name().to_string()).collect();
                step = state.step;
                rho = state.rho;
            }
            let bits: Vec<Vec<bool>> = decision
                .indices
                .iter()
                .zip(state.mask.layers())
                .map(|(ix, lm)| {
                    let mut b = vec![false; lm.len()];
                    for &i in ix {
                        b[i] = true;
                    }
                    b
                })
                .collect();
            sets.push(bits);
        }
        tables.push(pair_tables(&sets));
    }
    let net = base.architecture.build()?;
    let plan = base.plan(&net)?.with_fractions(&fractions);
    let baseline_seeds: Vec<u64> = (0..seeds.len().max(2) as u64).map(|s| 1_000_003 + s).collect();
    Ok(FirstUpdateReport {
        matrix: SimilarityMatrix::from_tables(labels, layer_names, &tables),
        random_baseline: random_baseline_jr(&plan, &baseline_seeds)?,
        step,
        rho,
    })
}

fn check_same_density(snaps: &[&MaskSnapshot]) -> Result<()> {
    let first = snaps.first().ok_or_else(|| analysis("no snapshots given"))?;
    for s in snaps {
        check_structure(&first.mask, &s.mask)?;
        if s.density != first.density {
            return Err(analysis(format!(
                "density mismatch: {} vs {}",
                first.density, s.density
            )));
        }
    }
    Ok(())
}

/// Pairwise end-mask similarity. `groups[i]` holds one end snapshot per seed
/// for label `i`; entries pair snapshots of equal seed and average over seeds.
pub fn end_mask_similarity(groups: &[(String, Vec<MaskSnapshot>)]) -> Result<SimilarityMatrix> {
    if groups.is_empty() {
        return Err(analysis("no snapshot groups given"));
    }
    let all: Vec<&MaskSnapshot> = groups.iter().flat_map(|(_, v)| v.iter()).collect();
    check_same_density(&all)?;
    let mut seeds: Vec<u64> = groups[0].1.iter().map(|s| s.seed).collect();
    seeds.sort_unstable();
    for (label, snaps) in groups {
        let mut own: Vec<u64> = snaps.iter().map(|s| s.seed).collect();
        own.sort_unstable();
        if own != seeds {
            return Err(analysis(format!("{label}: seeds {own:?} differ from {seeds:?}")));
        }
    }
    let labels: Vec<String> = groups.iter().map(|(l, _)| l.clone()).collect();
    let layer_names: Vec<String> = all[0].mask.layers().iter().map(|l| l.name().to_string()).collect();
    let tables: Vec<_> = seeds
        .iter()
        .map(|seed| {
            let sets: Vec<Vec<Vec<bool>>> = groups
                .iter()
                .map(|(_, snaps)| {
                    let s = snaps.iter().find(|s| s.seed == *seed).unwrap();
                    s.mask.layers().iter().map(|l| l.bits().to_vec()).collect()
                })
                .collect();
            pair_tables(&sets)
        })
        .collect();
    Ok(SimilarityMatrix::from_tables(labels, layer_names, &tables))
}

/// `J̄(init mask, end mask)` of one run.
pub fn init_vs_end(init: &MaskSnapshot, end: &MaskSnapshot) -> Result<f64> {
    check_same_density(&[init, end])?;
    mean_jaccard(&init.mask, &end.mask)
}

/// Fractions of positions kept active (resp. inactive) by every run.
///
/// `kept = |∩ active| / mean |active|`, `removed = |∩ inactive| / mean |inactive|`.
pub fn always_kept_fraction(ends: &[MaskSnapshot]) -> Result<(f64, f64)> {
    let refs: Vec<&MaskSnapshot> = ends.iter().collect();
    check_same_density(&refs)?;
    if ends.iter().any(|s| s.seed != ends[0].seed) {
        return Err(analysis("always-kept statistics compare runs of one seed"));
    }
    let (mut both_on, mut both_off, mut on, mut off) = (0usize, 0usize, 0usize, 0usize);
    for l in 0..ends[0].mask.num_layers() {
        let layers: Vec<&LayerMask> = ends.iter().map(|s| s.mask.layer(l)).collect();
        for i in 0..layers[0].len() {
            both_on += usize::from(layers.iter().all(|m| m.is_active(i)));
            both_off += usize::from(layers.iter().all(|m| !m.is_active(i)));
        }
        on += layers.iter().map(|m| m.active_count()).sum::<usize>();
        off += layers.iter().map(|m| m.inactive_count()).sum::<usize>();
    }
    let runs = ends.len() as f64;
    let ratio = |x: usize, total: usize| if total == 0 { 1.0 } else { x as f64 * runs / total as f64 };
    Ok((ratio(both_on, on), ratio(both_off, off)))
}

/// ITOP ratio after each snapshot, in step order: the exploration union of
/// every snapshot up to that point over the number of maskable positions.
pub fn itop_curve(snapshots: &[MaskSnapshot]) -> Result<Vec<(u64, f64)>> {
    let first = snapshots.first().ok_or_else(|| analysis("no snapshots given"))?;
    let mut ordered: Vec<&MaskSnapshot> = snapshots.iter().collect();
    ordered.sort_by_key(|s| s.step);
    let mut ledger = topology::ExplorationLedger::new(&ordered[0].mask);
    let mut out = Vec::with_capacity(ordered.len());
    for s in ordered {
        check_structure(&first.mask, &s.mask)?;
        ledger.record(&s.mask);
        out.push((s.step, topology::itop_ratio(&ledger)));
    }
    Ok(out)
}

/// Studentized-range quantiles `q_0.05 / √2` for k = 2..=10 methods, from the
/// table of Demšar (2006), "Statistical Comparisons of Classifiers over
/// Multiple Data Sets", JMLR 7, Table 5a.
pub const NEMENYI_Q05: [f64; 9] = [1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164];

/// Critical distance `q·√(k(k+1)/(6N))` at α = 0.05.
pub fn nemenyi_cd(k: usize, n: usize) -> Result<f64> {
    if !(2..=10).contains(&k) || n == 0 {
        return Err(analysis(format!(
            "Nemenyi CD is tabulated for 2 <= k <= 10 methods and N >= 1 settings; got k={k}, N={n}"
        )));
    }
    Ok(NEMENYI_Q05[k - 2] * ((k * (k + 1)) as f64 / (6 * n) as f64).sqrt())
}

/// Ranks (1 = largest value) with ties sharing their average rank.
pub fn rank_descending(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Ranks per setting and their averages.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankTable {
    pub methods: Vec<String>,
    pub settings: Vec<String>,
    /// `ranks[s][m]`.
    pub ranks: Vec<Vec<f64>>,
    pub average: Vec<f64>,
}

impl RankTable {
    pub fn n(&self) -> usize {
        self.settings.len()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("setting");
        for m in &self.methods {
            write!(s, ",{m}").unwrap();
        }
        s.push('\n');
        for (name, row) in self.settings.iter().zip(&self.ranks) {
            s.push_str(name);
            for r in row {
                write!(s, ",{r}").unwrap();
            }
            s.push('\n');
        }
        s.push_str("average");
        for a in &self.average {
            write!(s, ",{a}").unwrap();
        }
        s.push('\n');
        s
    }
}

/// Ranks `(method, setting, value)` rows, higher values ranking first. Rows
/// repeating a `(method, setting)` cell (for example several seeds) are
/// averaged first. Every method must have a value in every setting.
pub fn average_ranks(rows: &[(String, String, f64)]) -> Result<RankTable> {
    let mut cells: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
    let mut methods: Vec<String> = Vec::new();
    let mut settings: Vec<String> = Vec::new();
    for (m, s, v) in rows {
        if !v.is_finite() {
            return Err(analysis(format!("non-finite value for {m} in {s}")));
        }
        if !methods.contains(m) {
            methods.push(m.clone());
        }
        if !settings.contains(s) {
            settings.push(s.clone());
        }
        let e = cells.entry((m.clone(), s.clone())).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    if methods.is_empty() {
        return Err(analysis("empty results table"));
    }
    let missing: Vec<String> = settings
        .iter()
        .flat_map(|s| methods.iter().map(move |m| (m, s)))
        .filter(|(m, s)| !cells.contains_key(&((*m).clone(), (*s).clone())))
        .map(|(m, s)| format!("{m} @ {s}"))
        .collect();
    if !missing.is_empty() {
        return Err(analysis(format!("missing results for: {}", missing.join(", "))));
    }
    let ranks: Vec<Vec<f64>> = settings
        .iter()
        .map(|s| {
            let vals: Vec<f64> = methods
                .iter()
                .map(|m| {
                    let (sum, n) = cells[&(m.clone(), s.clone())];
                    sum / n as f64
                })
                .collect();
            rank_descending(&vals)
        })
        .collect();
    let average = (0..methods.len())
        .map(|m| ranks.iter().map(|r| r[m]).sum::<f64>() / settings.len() as f64)
        .collect();
    Ok(RankTable {
        methods,
        settings,
        ranks,
        average,
    })
}

/// Maximal sets of methods whose average ranks all lie within `cd` of each
/// other, as method indices sorted by average rank.
pub fn cd_groups(average: &[f64], cd: f64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..average.len()).collect();
    order.sort_by(|&a, &b| average[a].total_cmp(&average[b]).then(a.cmp(&b)));
    let mut groups: Vec<(usize, usize)> = Vec::new();
    for start in 0..order.len() {
        let mut end = start;
        while end + 1 < order.len() && average[order[end + 1]] - average[order[start]] <= cd {
            end += 1;
        }
        if groups.last().is_none_or(|&(_, e)| end > e) {
            groups.push((start, end));
        }
    }
    groups.into_iter().map(|(s, e)| order[s..=e].to_vec()).collect()
}

/// Average ranks, critical distance and indistinguishable groups.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CdReport {
    pub methods: Vec<String>,
    pub average_ranks: Vec<f64>,
    pub k: usize,
    pub n: usize,
    pub alpha: f64,
    pub critical_distance: f64,
    pub groups: Vec<Vec<String>>,
}

pub fn cd_report(table: &RankTable) -> Result<CdReport> {
    let k = table.methods.len();
    let cd = nemenyi_cd(k, table.n())?;
    let groups = cd_groups(&table.average, cd)
        .into_iter()
        .map(|g| g.into_iter().map(|i| table.methods[i].clone()).collect())
        .collect();
    Ok(CdReport {
        methods: table.methods.clone(),
        average_ranks: table.average.clone(),
        k,
        n: table.n(),
        alpha: 0.05,
        critical_distance: cd,
        groups,
    })
}
