//! Exhaustive reference search for desk-scale validation.
//!
//! Scores every memory leaf of every sample by the best coarse-to-fine
//! product of cosine similarities over the leaf's ancestor chains under the
//! configured window relation, then keeps the global top-k per query leaf
//! with the exact tie order of the hierarchical search. Both the maximum and
//! the minimum chain product are reported, so results are comparable field
//! by field against a full-beam search run.
//!
//! Cost is quadratic: full per-level similarity matrices are materialized
//! and every cell counts as one comparison. The entry point refuses
//! instances whose estimated work exceeds a configurable ceiling, and
//! refuses sparsified stores outright.

use rayon::prelude::*;

use crate::grid::{Coords, ResolutionSchedule, MAX_DIM};
use crate::memory::MemoryStore;
use crate::pyramid::FeaturePyramid;
use crate::search::{
    cosine_similarity, rank_matches, validate_instance, CorrespondenceMap, Match, WindowMode,
};
use crate::{Error, Result};

/// Oracle window choice and refusal threshold.
#[derive(Debug, Clone)]
pub struct OracleConfig {
    /// Window relation to enumerate chains under; must match the search run
    /// being validated.
    pub window: WindowMode,
    /// Ceiling on estimated work (similarity cells plus chain steps); larger
    /// instances are refused.
    pub max_work: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            window: WindowMode::Hierarchy,
            max_work: 1 << 26,
        }
    }
}

/// Exact top-k correspondences per query leaf under full ancestor-chain
/// product scoring.
///
/// Equals [`crate::search::hierarchical_search`] run with `phi = 1`, a beam
/// wide enough to never truncate, and the same window mode, field for field.
pub fn exhaustive_oracle(
    query: &FeaturePyramid,
    store: &MemoryStore,
    k: usize,
    config: &OracleConfig,
) -> Result<CorrespondenceMap> {
    let views = store.views();
    if views.is_empty() {
        return Err(Error::domain("empty memory"));
    }
    if k == 0 {
        return Err(Error::domain("k must be at least 1"));
    }
    validate_instance(query, &views)?;

    let schedule = query.schedule();
    let n = schedule.num_levels();
    for v in &views {
        for l in 1..=n {
            if v.pyramid.stored_count(l) != schedule.node_count(l) {
                return Err(Error::domain(format!(
                    "oracle needs fully stored samples; {:?} is sparse at level {l}",
                    v.id
                )));
            }
        }
    }
    check_size(schedule, views.len(), config)?;

    // Full per-level similarity matrices, laid out as
    // `sims[l][(q * m + s) * p_l + v]`. Every cell is one comparison.
    let m = views.len();
    let mut sims: Vec<Vec<f64>> = vec![Vec::new()];
    let mut comparisons = 0u64;
    for l in 1..=n {
        let p = schedule.node_count(l);
        let mut mat = vec![0.0f64; p * m * p];
        mat.par_chunks_mut(m * p)
            .enumerate()
            .for_each(|(q_node, row)| {
                let qf = query.feature(l, q_node).expect("dense query");
                for (s, v) in views.iter().enumerate() {
                    for cand in 0..p {
                        let f = v.pyramid.feature(l, cand).expect("fully stored sample");
                        row[s * p + cand] = cosine_similarity(qf, f);
                    }
                }
            });
        comparisons += (p * m * p) as u64;
        sims.push(mat);
    }

    let leaves = schedule.node_count(1);
    let k_eff = k.min(m * leaves);
    let matches: Vec<Vec<Match>> = (0..leaves)
        .into_par_iter()
        .map(|q| {
            let anc = ancestors(schedule, q);
            let mut per_leaf: Vec<Match> = Vec::with_capacity(m * leaves);
            for s in 0..m {
                match config.window {
                    WindowMode::FullLevel => {
                        score_full_level(schedule, &sims, &anc, s, m, &mut per_leaf)
                    }
                    WindowMode::Hierarchy => {
                        score_hierarchy(schedule, &sims, &anc, s, m, &mut per_leaf)
                    }
                }
            }
            per_leaf.sort_unstable_by(|x, y| rank_matches(&views, x, y));
            per_leaf.truncate(k_eff);
            per_leaf
        })
        .collect();

    Ok(CorrespondenceMap::from_parts(
        schedule.res(1).to_vec(),
        k_eff,
        matches,
        comparisons,
    ))
}

/// Structural ancestor on each level of the query leaf's chain; `anc[l]` is
/// the level-l node, `anc[1] = leaf`.
fn ancestors(schedule: &ResolutionSchedule, leaf: usize) -> Vec<usize> {
    let n = schedule.num_levels();
    let dim = schedule.dim();
    let mut anc = vec![0usize; n + 1];
    anc[1] = leaf;
    let mut c = schedule.coords_of(1, leaf);
    for l in 2..=n {
        for ax in 0..dim {
            c[ax] /= 2;
        }
        anc[l] = schedule.index_of(l, c);
    }
    anc
}

fn check_size(schedule: &ResolutionSchedule, m: usize, config: &OracleConfig) -> Result<()> {
    let n = schedule.num_levels();
    let mut cells = 0u64;
    for l in 1..=n {
        let p = schedule.node_count(l) as u64;
        cells += p * p * m as u64;
    }
    let leaves = schedule.node_count(1) as u64;
    let chain_steps = match n {
        1 => leaves * m as u64,
        _ => {
            let fanout = 1u64 << schedule.dim();
            leaves * m as u64 * fanout.pow((n - 1) as u32) * n as u64
        }
    };
    let work = cells + chain_steps;
    if work > config.max_work {
        return Err(Error::SizeGuard(format!(
            "estimated oracle work {work} exceeds the ceiling {}",
            config.max_work
        )));
    }
    Ok(())
}

/// Scores every memory leaf of sample `s` when each level's window is the
/// whole level: the per-level maxima and minima of the running product do
/// not depend on the chain, so one interval fold along the query's ancestor
/// path covers all chains at once.
fn score_full_level(
    schedule: &ResolutionSchedule,
    sims: &[Vec<f64>],
    anc: &[usize],
    s: usize,
    m: usize,
    out: &mut Vec<Match>,
) {
    let n = schedule.num_levels();
    let (mut hi, mut lo) = (1.0f64, 1.0f64);
    for l in (2..=n).rev() {
        let p = schedule.node_count(l);
        let row = &sims[l][(anc[l] * m + s) * p..][..p];
        let mut best = f64::NEG_INFINITY;
        let mut worst = f64::INFINITY;
        for &sim in row {
            let a = hi * sim;
            let b = lo * sim;
            best = best.max(a.max(b));
            worst = worst.min(a.min(b));
        }
        hi = best;
        lo = worst;
    }
    let p1 = schedule.node_count(1);
    let row = &sims[1][(anc[1] * m + s) * p1..][..p1];
    for (f, &sim) in row.iter().enumerate() {
        let a = hi * sim;
        let b = lo * sim;
        out.push(Match {
            sample: s as u32,
            level: 1,
            node: f as u32,
            s_acc: a.max(b),
            s_min: a.min(b),
        });
    }
}

/// Scores every memory leaf of sample `s` under the hierarchical window by
/// enumerating its ancestor chains explicitly: each chain climbs through
/// window-parents, and its product is folded coarse to fine in the same
/// association order the search uses.
fn score_hierarchy(
    schedule: &ResolutionSchedule,
    sims: &[Vec<f64>],
    anc: &[usize],
    s: usize,
    m: usize,
    out: &mut Vec<Match>,
) {
    let n = schedule.num_levels();
    let p1 = schedule.node_count(1);
    let mut path = vec![0usize; n + 1];
    for f in 0..p1 {
        let mut best = f64::NEG_INFINITY;
        let mut worst = f64::INFINITY;
        path[1] = f;
        climb(schedule, sims, anc, s, m, 2, &mut path, &mut best, &mut worst);
        out.push(Match {
            sample: s as u32,
            level: 1,
            node: f as u32,
            s_acc: best,
            s_min: worst,
        });
    }
}

/// Extends `path` upward through every window-parent at `level`; complete
/// chains fold their product top-down into `best`/`worst`.
#[allow(clippy::too_many_arguments)]
fn climb(
    schedule: &ResolutionSchedule,
    sims: &[Vec<f64>],
    anc: &[usize],
    s: usize,
    m: usize,
    level: usize,
    path: &mut Vec<usize>,
    best: &mut f64,
    worst: &mut f64,
) {
    let n = schedule.num_levels();
    if level > n {
        let mut prod = 1.0f64;
        for l in (1..=n).rev() {
            let p = schedule.node_count(l);
            prod *= sims[l][(anc[l] * m + s) * p + path[l]];
        }
        *best = best.max(prod);
        *worst = worst.min(prod);
        return;
    }
    let mut parents = Vec::new();
    window_parents(schedule, level - 1, path[level - 1], &mut parents);
    for u in parents {
        path[level] = u;
        climb(schedule, sims, anc, s, m, level + 1, path, best, worst);
    }
}

/// Nodes one level above `node` whose search window contains it: the inverse
/// of the per-axis child window `[2u - 1, 2u + 2]`.
fn window_parents(
    schedule: &ResolutionSchedule,
    level: usize,
    node: usize,
    out: &mut Vec<usize>,
) {
    let dim = schedule.dim();
    let child = schedule.coords_of(level, node);
    let up = schedule.res(level + 1);
    let mut lo: Coords = [0; MAX_DIM];
    let mut hi: Coords = [0; MAX_DIM];
    for ax in 0..dim {
        let c = child[ax];
        lo[ax] = if c < 2 { 0 } else { (c - 1) / 2 };
        hi[ax] = ((c + 1) / 2).min(up[ax] - 1);
    }
    let mut cur = lo;
    loop {
        out.push(schedule.index_of(level + 1, cur));
        let mut ax = 0;
        loop {
            if ax == dim {
                return;
            }
            cur[ax] += 1;
            if cur[ax] <= hi[ax] {
                break;
            }
            cur[ax] = lo[ax];
            ax += 1;
        }
    }
}

/// Leaf-by-leaf disagreement summary between two correspondence maps.
#[derive(Debug, Clone, PartialEq)]
pub struct MapComparison {
    /// Query leaves compared.
    pub leaves: usize,
    /// Leaves whose match lists differ anywhere: identity, order, or either
    /// score field.
    pub mismatched_leaves: usize,
    /// Fraction of leaves whose top-1 match identity (sample, node) agrees;
    /// a leaf unresolved on one side only counts as a miss.
    pub recall_at_1: f64,
}

/// Compares two correspondence maps over the same grid, typically a pruned
/// search against the oracle.
pub fn compare_maps(a: &CorrespondenceMap, b: &CorrespondenceMap) -> Result<MapComparison> {
    if a.res() != b.res() {
        return Err(Error::domain("maps cover different grids"));
    }
    let leaves = a.node_count();
    let mut mismatched = 0usize;
    let mut hits = 0usize;
    for q in 0..leaves {
        let (ma, mb) = (a.matches(q), b.matches(q));
        if ma != mb {
            mismatched += 1;
        }
        if let (Some(x), Some(y)) = (ma.first(), mb.first()) {
            if (x.sample, x.node) == (y.sample, y.node) {
                hits += 1;
            }
        }
    }
    Ok(MapComparison {
        leaves,
        mismatched_leaves: mismatched,
        recall_at_1: hits as f64 / leaves as f64,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    use super::*;
    use crate::grid::GridTensor;
    use crate::labels::{LabelKind, LabelMap};
    use crate::search::{hierarchical_search, SearchConfig};

    fn random_pyramid(
        schedule: &ResolutionSchedule,
        channels: usize,
        rng: &mut ChaCha20Rng,
    ) -> FeaturePyramid {
        let tensors = (1..=schedule.num_levels())
            .map(|l| {
                let mut t = GridTensor::zeros(schedule.res(l).to_vec(), channels).unwrap();
                for x in t.data_mut() {
                    *x = rng.gen_range(-1.0f32..1.0);
                }
                t
            })
            .collect();
        FeaturePyramid::from_dense(schedule.clone(), tensors).unwrap()
    }

    fn random_store(
        schedule: &ResolutionSchedule,
        m: usize,
        channels: usize,
        rng: &mut ChaCha20Rng,
    ) -> MemoryStore {
        let mut store = MemoryStore::new(schedule.clone(), LabelKind::Classes(3), 0).unwrap();
        let leaves = schedule.node_count(1);
        for i in 0..m {
            let pyr = random_pyramid(schedule, channels, rng);
            let idx = (0..leaves).map(|_| rng.gen_range(0..3u8)).collect();
            let labels = LabelMap::classes(schedule.res(1).to_vec(), 3, idx).unwrap();
            store
                .consolidate_add(&format!("s{i:02}"), &pyr, &labels, "seeded")
                .unwrap();
        }
        store
    }

    fn full_beam(window: WindowMode, k_init: usize) -> SearchConfig {
        SearchConfig {
            phi: 1.0,
            k_init: Some(k_init),
            window,
            chunk: None,
        }
    }

    #[test]
    fn full_beam_search_equals_oracle_on_seeded_instances() {
        for (seed, res, n, m) in [
            (11u64, vec![8usize, 8], 3, 3),
            (12, vec![9, 7], 3, 2),
            (13, vec![16, 16], 4, 4),
            (14, vec![5, 3], 2, 4),
        ] {
            let schedule = ResolutionSchedule::canonical(2, &res, n).unwrap();
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let store = random_store(&schedule, m, 6, &mut rng);
            let query = random_pyramid(&schedule, 6, &mut rng);
            let total = m * schedule.node_count(1);
            for window in [WindowMode::Hierarchy, WindowMode::FullLevel] {
                let got =
                    hierarchical_search(&query, &store, &full_beam(window, total)).unwrap();
                let config = OracleConfig {
                    window,
                    ..OracleConfig::default()
                };
                let want = exhaustive_oracle(&query, &store, total, &config).unwrap();
                for q in 0..schedule.node_count(1) {
                    assert_eq!(got.matches(q), want.matches(q), "seed {seed} leaf {q}");
                }
            }
        }
    }

    #[test]
    fn oracle_counts_every_similarity_cell() {
        let schedule = ResolutionSchedule::canonical(2, &[4, 4], 2).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let store = random_store(&schedule, 2, 4, &mut rng);
        let query = random_pyramid(&schedule, 4, &mut rng);
        let map = exhaustive_oracle(&query, &store, 1, &OracleConfig::default()).unwrap();
        assert_eq!(map.comparisons, 2 * (16 * 16 + 4 * 4));
    }

    #[test]
    fn singleton_memory_scores_its_one_node() {
        let schedule = ResolutionSchedule::canonical(2, &[1, 1], 1).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let store = random_store(&schedule, 1, 5, &mut rng);
        let query = random_pyramid(&schedule, 5, &mut rng);
        let map = exhaustive_oracle(&query, &store, 3, &OracleConfig::default()).unwrap();
        let sim = cosine_similarity(
            query.feature(1, 0).unwrap(),
            store.pyramid_at(0).feature(1, 0).unwrap(),
        );
        assert_eq!(
            map.matches(0),
            &[Match {
                sample: 0,
                level: 1,
                node: 0,
                s_acc: sim,
                s_min: sim,
            }]
        );
    }

    #[test]
    fn two_leaf_products_by_hand() {
        let schedule = ResolutionSchedule::canonical(1, &[2], 2).unwrap();
        let tensors = |rows: [[f32; 2]; 2], top: [f32; 2]| {
            vec![
                GridTensor::new(vec![2], 2, rows.concat()).unwrap(),
                GridTensor::new(vec![1], 2, top.to_vec()).unwrap(),
            ]
        };
        let mem =
            FeaturePyramid::from_dense(schedule.clone(), tensors([[2.0, 0.0], [-5.0, 0.0]], [3.0, 4.0]))
                .unwrap();
        let query =
            FeaturePyramid::from_dense(schedule.clone(), tensors([[1.0, 0.0], [1.0, 0.0]], [1.0, 0.0]))
                .unwrap();
        let mut store = MemoryStore::new(schedule, LabelKind::Scalar, 0).unwrap();
        let labels = LabelMap::scalar(vec![2], vec![0.0, 1.0]).unwrap();
        store.consolidate_add("a", &mem, &labels, "hand").unwrap();

        // Top similarity is 3/5 exactly; leaves score 1 and -1.
        let map = exhaustive_oracle(&query, &store, 2, &OracleConfig::default()).unwrap();
        for q in 0..2 {
            let got = map.matches(q);
            assert_eq!((got[0].node, got[0].s_acc, got[0].s_min), (0, 0.6, 0.6));
            assert_eq!((got[1].node, got[1].s_acc, got[1].s_min), (1, -0.6, -0.6));
        }
        assert_eq!(map.comparisons, 4 + 1);
    }

    #[test]
    fn k_past_every_leaf_returns_all_sorted() {
        let schedule = ResolutionSchedule::canonical(2, &[2, 2], 2).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let store = random_store(&schedule, 2, 4, &mut rng);
        let query = random_pyramid(&schedule, 4, &mut rng);
        let map = exhaustive_oracle(&query, &store, 50, &OracleConfig::default()).unwrap();
        assert_eq!(map.k(), 8);
        for q in 0..4 {
            let got = map.matches(q);
            assert_eq!(got.len(), 8);
            assert!(got.windows(2).all(|w| w[0].s_acc >= w[1].s_acc));
        }
    }

    #[test]
    fn size_guard_refuses_oversized_instances() {
        let schedule = ResolutionSchedule::canonical(2, &[16, 16], 3).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let store = random_store(&schedule, 1, 4, &mut rng);
        let query = random_pyramid(&schedule, 4, &mut rng);
        let config = OracleConfig {
            max_work: 1000,
            ..OracleConfig::default()
        };
        assert!(matches!(
            exhaustive_oracle(&query, &store, 1, &config),
            Err(Error::SizeGuard(_))
        ));
    }

    #[test]
    fn sparsified_store_is_refused() {
        let schedule = ResolutionSchedule::canonical(2, &[4, 4], 2).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut store = MemoryStore::new(schedule.clone(), LabelKind::Classes(3), 1).unwrap();
        let pyr = random_pyramid(&schedule, 4, &mut rng);
        let labels = LabelMap::classes(vec![4, 4], 3, vec![0; 16]).unwrap();
        store.consolidate_add("a", &pyr, &labels, "seeded").unwrap();
        let query = random_pyramid(&schedule, 4, &mut rng);
        let err = exhaustive_oracle(&query, &store, 1, &OracleConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn compare_maps_reports_recall() {
        let schedule = ResolutionSchedule::canonical(2, &[8, 8], 3).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let store = random_store(&schedule, 3, 6, &mut rng);
        let query = random_pyramid(&schedule, 6, &mut rng);
        let oracle = exhaustive_oracle(&query, &store, 4, &OracleConfig::default()).unwrap();

        let against_self = compare_maps(&oracle, &oracle).unwrap();
        assert_eq!(against_self.mismatched_leaves, 0);
        assert_eq!(against_self.recall_at_1, 1.0);

        // A shorter list mismatches on every leaf, yet top-1 still agrees.
        let top1 = exhaustive_oracle(&query, &store, 1, &OracleConfig::default()).unwrap();
        let against_top1 = compare_maps(&top1, &oracle).unwrap();
        assert_eq!(against_top1.leaves, 64);
        assert_eq!(against_top1.mismatched_leaves, 64);
        assert_eq!(against_top1.recall_at_1, 1.0);

        let pruned = hierarchical_search(
            &query,
            &store,
            &SearchConfig {
                phi: 0.5,
                k_init: Some(4),
                window: WindowMode::Hierarchy,
                chunk: None,
            },
        )
        .unwrap();
        let report = compare_maps(&pruned, &oracle).unwrap();
        assert_eq!(report.leaves, 64);
        assert!((0.0..=1.0).contains(&report.recall_at_1));
    }
}
