//! Hierarchical top-k correspondence search over memory pyramids, and
//! softmax-weighted label retrieval across the found matches.
//!
//! The search walks a query pyramid coarse to fine. At the coarsest level
//! every stored node of every sample is a candidate; below that, each query
//! node inherits its structural parent's beam and scores the memory nodes
//! inside the kept parents' search windows. Scores accumulate as the product
//! of per-level cosine similarities along the matched ancestor chain, and a
//! global top-k with a total tie order keeps the beam deterministic. The
//! beam width starts at `k_init` and shrinks by the reduction rate `phi`
//! once per level above the finest.
//!
//! A candidate reachable through several kept parents is stored once. To
//! keep "score of a node = best product over ancestor chains" exact even
//! with negative similarities, entries carry both the maximum and minimum
//! accumulated product: multiplying by a negative similarity swaps which
//! extreme wins, so both are needed to rank later levels correctly. Ranking
//! and reported scores always use the maximum.
//!
//! Sparse memory levels only offer their retained nodes. A kept parent whose
//! whole window was dropped is carried forward unchanged, so sparse samples
//! stay matchable; entries still unresolved after the finest level are
//! dropped from the correspondence map.
//!
//! All accumulation is f64 internally; exported tensors are f32.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::grid::{GridTensor, Parent, ResolutionSchedule, MAX_DIM};
use crate::labels::{LabelKind, LabelMap};
use crate::memory::MemoryStore;
use crate::pyramid::FeaturePyramid;
use crate::{Error, Result};

/// Similarity forced onto matches whose stored label is invalid, pushing
/// their softmax weight to effectively zero.
pub const INVALID_MATCH_SCORE: f64 = -100.0;

/// Candidate window connecting one level to the next during search.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowMode {
    /// The structural-children window (up to `4^dim` nodes per parent).
    Hierarchy,
    /// Every node of the level is a candidate of every parent; exhaustive,
    /// for validation runs.
    FullLevel,
}

/// Search parameters.
#[derive(Debug, Clone)]
pub struct SearchConfig {
    /// Beam reduction rate in (0, 1]; the beam shrinks to `floor(phi * k)`
    /// (never below 1) once per level above the finest.
    pub phi: f64,
    /// Starting beam width; defaults to the number of stored samples.
    pub k_init: Option<usize>,
    /// Candidate window, usually [`WindowMode::Hierarchy`].
    pub window: WindowMode,
    /// Query leaves per sequential chunk; `None` processes all at once.
    /// Chunking changes memory locality, never results.
    pub chunk: Option<usize>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            phi: 0.5,
            k_init: None,
            window: WindowMode::Hierarchy,
            chunk: None,
        }
    }
}

impl SearchConfig {
    fn validate(&self) -> Result<()> {
        if !(self.phi > 0.0 && self.phi <= 1.0) {
            return Err(Error::domain(format!(
                "phi must be in (0, 1], got {}",
                self.phi
            )));
        }
        if self.k_init == Some(0) {
            return Err(Error::domain("k_init must be at least 1"));
        }
        if self.chunk == Some(0) {
            return Err(Error::domain("chunk size must be at least 1"));
        }
        Ok(())
    }
}

/// One match of a query node: a memory node and its accumulated score.
#[derive(Debug, Clone, PartialEq)]
pub struct Match {
    /// Position of the sample in the store's insertion order.
    pub sample: u32,
    /// Pyramid level of the matched node; 1 unless the entry was carried
    /// through fully pruned sparse levels.
    pub level: u8,
    /// Linear node index on that level.
    pub node: u32,
    /// Best accumulated similarity product over ancestor chains.
    pub s_acc: f64,
    /// Worst accumulated product; needed so later negative similarities
    /// rank correctly. Not part of the reported score.
    pub s_min: f64,
}

/// Per-leaf top-k matches of a query against a store.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceMap {
    res: Vec<usize>,
    k: usize,
    /// Per leaf node: matches sorted best-first; may be shorter than `k`
    /// (or empty) where sparse memory left entries unresolved.
    matches: Vec<Vec<Match>>,
    /// Number of similarity evaluations spent building the map.
    pub comparisons: u64,
}

impl CorrespondenceMap {
    pub(crate) fn from_parts(
        res: Vec<usize>,
        k: usize,
        matches: Vec<Vec<Match>>,
        comparisons: u64,
    ) -> Self {
        Self {
            res,
            k,
            matches,
            comparisons,
        }
    }

    /// Finest-level grid resolution.
    pub fn res(&self) -> &[usize] {
        &self.res
    }

    /// Beam width at the finest level.
    pub fn k(&self) -> usize {
        self.k
    }

    /// Matches of one leaf node, best first.
    pub fn matches(&self, leaf: usize) -> &[Match] {
        &self.matches[leaf]
    }

    /// Number of leaf nodes.
    pub fn node_count(&self) -> usize {
        self.matches.len()
    }

    /// Diagnostic tensor holding each leaf's best-match linear node index,
    /// NaN where a leaf has no resolved match.
    pub fn idx_panel(&self) -> GridTensor {
        let data = self
            .matches
            .iter()
            .map(|m| m.first().map_or(f32::NAN, |b| b.node as f32))
            .collect();
        GridTensor::new(self.res.clone(), 1, data).expect("leaf grid shape")
    }

    /// Diagnostic tensor holding each leaf's best accumulated similarity,
    /// NaN where a leaf has no resolved match.
    pub fn sim_panel(&self) -> GridTensor {
        let data = self
            .matches
            .iter()
            .map(|m| m.first().map_or(f32::NAN, |b| b.s_acc as f32))
            .collect();
        GridTensor::new(self.res.clone(), 1, data).expect("leaf grid shape")
    }
}

/// Cosine similarity of two feature vectors, accumulated in f64.
///
/// Zero-norm vectors score 0 (neutral, never NaN). Bitwise-equal vectors
/// score exactly 1: all three accumulators then run the identical operation
/// sequence, and `x / sqrt(x * x)` is exactly 1 for positive finite `x`.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let x = f64::from(*x);
        let y = f64::from(*y);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
}

/// Accumulates a level similarity onto a parent's chain product.
pub fn accumulate(parent_s: f64, level_s: f64) -> f64 {
    parent_s * level_s
}

/// Shrinks the beam width: `floor(phi * k)`, clamped to at least 1.
pub fn reduce_k(k: usize, phi: f64) -> usize {
    ((phi * k as f64).floor() as usize).max(1)
}

/// Borrowed view of one searchable sample.
pub(crate) struct SampleView<'a> {
    pub id: &'a str,
    pub pyramid: &'a FeaturePyramid,
}

/// Runs the hierarchical search of `query` against a store.
///
/// Honors `config.chunk` by processing the query leaves in contiguous
/// chunks; results are independent of the chunking.
pub fn hierarchical_search(
    query: &FeaturePyramid,
    store: &MemoryStore,
    config: &SearchConfig,
) -> Result<CorrespondenceMap> {
    let views = store.views();
    if views.is_empty() {
        return Err(Error::domain("empty memory"));
    }
    search_views(query, &views, config)
}

/// [`hierarchical_search`] with an explicit chunk size.
pub fn windowed_search(
    query: &FeaturePyramid,
    store: &MemoryStore,
    config: &SearchConfig,
    chunk: usize,
) -> Result<CorrespondenceMap> {
    let config = SearchConfig {
        chunk: Some(chunk),
        ..config.clone()
    };
    hierarchical_search(query, store, &config)
}

pub(crate) fn search_views(
    query: &FeaturePyramid,
    views: &[SampleView],
    config: &SearchConfig,
) -> Result<CorrespondenceMap> {
    config.validate()?;
    if views.is_empty() {
        return Err(Error::domain("empty memory"));
    }
    validate_instance(query, views)?;

    let schedule = query.schedule();
    let leaves = schedule.node_count(1);
    let chunk = config.chunk.unwrap_or(leaves).min(leaves);
    let mut matches: Vec<Vec<Match>> = vec![Vec::new(); leaves];
    let mut comparisons = 0u64;
    let mut k_final = 0usize;
    let mut start = 0usize;
    while start < leaves {
        let end = (start + chunk).min(leaves);
        let (chunk_matches, chunk_comparisons, k_leaf) =
            run_chunk(query, views, config, start, end);
        for (slot, m) in matches[start..end].iter_mut().zip(chunk_matches) {
            *slot = m;
        }
        comparisons += chunk_comparisons;
        k_final = k_leaf;
        start = end;
    }

    Ok(CorrespondenceMap {
        res: schedule.res(1).to_vec(),
        k: k_final,
        matches,
        comparisons,
    })
}

/// Rejects query/memory pairings the search cannot score: sparse queries,
/// non-halving schedules, or samples whose schedule or per-level feature
/// widths disagree with the query's.
pub(crate) fn validate_instance(query: &FeaturePyramid, views: &[SampleView]) -> Result<()> {
    if !query.is_dense() {
        return Err(Error::domain("query pyramid must be dense"));
    }
    let schedule = query.schedule();
    if !schedule.is_canonical() {
        return Err(Error::domain("search needs a ceil-halving schedule"));
    }
    for v in views {
        if v.pyramid.schedule() != schedule {
            return Err(Error::domain(format!(
                "sample {:?} and query use different schedules",
                v.id
            )));
        }
        for l in 1..=schedule.num_levels() {
            if v.pyramid.channels(l) != query.channels(l) {
                return Err(Error::domain(format!(
                    "sample {:?} level {l} has {} channels, query has {}",
                    v.id,
                    v.pyramid.channels(l),
                    query.channels(l)
                )));
            }
        }
    }
    Ok(())
}

/// Searches the leaves `[leaf_lo, leaf_hi)`; returns their match lists (the
/// carried remnants already stripped), the comparison count, and the leaf
/// beam width.
fn run_chunk(
    query: &FeaturePyramid,
    views: &[SampleView],
    config: &SearchConfig,
    leaf_lo: usize,
    leaf_hi: usize,
) -> (Vec<Vec<Match>>, u64, usize) {
    let schedule = query.schedule();
    let n = schedule.num_levels();
    let m = views.len();

    // Ancestor closure of the chunk: the nodes whose beams are needed.
    let mut needed: Vec<Vec<usize>> = Vec::with_capacity(n);
    needed.push((leaf_lo..leaf_hi).collect());
    for l in 1..n {
        let mut up: Vec<usize> = needed[l - 1]
            .iter()
            .map(|&v| match schedule.parent_index(l, v).expect("canonical") {
                Parent::Node(p) => p,
                Parent::Root => unreachable!("level {l} is below the top"),
            })
            .collect();
        up.dedup(); // parents of sorted children are non-decreasing
        needed.push(up);
    }

    let roots: Vec<Match> = (0..m)
        .map(|s| Match {
            sample: s as u32,
            level: (n + 1) as u8,
            node: 0,
            s_acc: 1.0,
            s_min: 1.0,
        })
        .collect();

    let mut k = config.k_init.unwrap_or(m).max(1);
    let mut comparisons = 0u64;
    // beams[node] at the level currently processed; full-size per level,
    // only `needed` slots filled.
    let mut parent_beams: Vec<Vec<Match>> = Vec::new();
    for l in (1..=n).rev() {
        if l > 1 {
            k = reduce_k(k, config.phi);
        }
        let k_now = k;
        let results: Vec<(Vec<Match>, u64)> = needed[l - 1]
            .par_iter()
            .map(|&w| {
                let parents: &[Match] = if l == n {
                    &roots
                } else {
                    match schedule.parent_index(l, w).expect("canonical") {
                        Parent::Node(p) => &parent_beams[p],
                        Parent::Root => unreachable!(),
                    }
                };
                select_for_node(query, views, config, l, w, parents, k_now)
            })
            .collect();
        let mut beams: Vec<Vec<Match>> = vec![Vec::new(); schedule.node_count(l)];
        for (&w, (beam, count)) in needed[l - 1].iter().zip(results) {
            beams[w] = beam;
            comparisons += count;
        }
        parent_beams = beams;
    }

    let out = (leaf_lo..leaf_hi)
        .map(|w| {
            let mut beam = std::mem::take(&mut parent_beams[w]);
            beam.retain(|e| e.level == 1);
            beam
        })
        .collect();
    (out, comparisons, k)
}

/// Scores the candidates of one query node and keeps the top `k`.
fn select_for_node(
    query: &FeaturePyramid,
    views: &[SampleView],
    config: &SearchConfig,
    level: usize,
    node: usize,
    parents: &[Match],
    k: usize,
) -> (Vec<Match>, u64) {
    let schedule = query.schedule();
    let q_feat = query.feature(level, node).expect("dense query");

    // (sample, node, max accumulated, min accumulated) before this level's
    // similarity is applied.
    let mut pairs: Vec<(u32, u32, f64, f64)> = Vec::new();
    let mut carried: Vec<Match> = Vec::new();
    for e in parents {
        let before = pairs.len();
        push_candidates(schedule, views, config, level, e, &mut pairs);
        if pairs.len() == before {
            // Whole window pruned away in this sample: the parent rides
            // along unchanged so the sample stays matchable.
            carried.push(e.clone());
        }
    }

    // Merge duplicates reachable through several parents, folding their
    // accumulated extremes.
    pairs.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    let mut selected: Vec<Match> = Vec::with_capacity(pairs.len().min(k) + carried.len());
    let mut count = 0u64;
    let mut i = 0;
    while i < pairs.len() {
        let (sample, cand) = (pairs[i].0, pairs[i].1);
        let mut p_max = pairs[i].2;
        let mut p_min = pairs[i].3;
        i += 1;
        while i < pairs.len() && pairs[i].0 == sample && pairs[i].1 == cand {
            p_max = p_max.max(pairs[i].2);
            p_min = p_min.min(pairs[i].3);
            i += 1;
        }
        let pyramid = views[sample as usize].pyramid;
        let feat = pyramid
            .feature(level, cand as usize)
            .expect("candidates come from stored nodes");
        let sim = cosine_similarity(q_feat, feat);
        count += 1;
        let a = accumulate(p_max, sim);
        let b = accumulate(p_min, sim);
        selected.push(Match {
            sample,
            level: level as u8,
            node: cand,
            s_acc: a.max(b),
            s_min: a.min(b),
        });
    }

    selected.extend(carried);
    selected.sort_unstable_by(|x, y| rank_matches(views, x, y));
    selected.truncate(k);
    (selected, count)
}

/// Total order on matches: score descending, then sample id, level, node
/// ascending. Ids rather than insertion ordinals keep rankings stable when
/// samples are removed and re-added.
pub(crate) fn rank_matches(views: &[SampleView], x: &Match, y: &Match) -> Ordering {
    y.s_acc
        .partial_cmp(&x.s_acc)
        .expect("scores are finite")
        .then_with(|| {
            views[x.sample as usize]
                .id
                .cmp(views[y.sample as usize].id)
        })
        .then_with(|| x.level.cmp(&y.level))
        .then_with(|| x.node.cmp(&y.node))
}

/// Appends `(sample, node, p_max, p_min)` for every stored node inside the
/// entry's window at `level`. Appends nothing if the window is fully pruned.
fn push_candidates(
    schedule: &ResolutionSchedule,
    views: &[SampleView],
    config: &SearchConfig,
    level: usize,
    e: &Match,
    out: &mut Vec<(u32, u32, f64, f64)>,
) {
    let pyramid = views[e.sample as usize].pyramid;
    let n = schedule.num_levels();
    let full_level = config.window == WindowMode::FullLevel || usize::from(e.level) == n + 1;
    if full_level {
        // Root expansion and the exhaustive mode: every stored node.
        match pyramid.retained(level) {
            None => {
                for node in 0..schedule.node_count(level) {
                    out.push((e.sample, node as u32, e.s_acc, e.s_min));
                }
            }
            Some(retained) => {
                for &node in retained {
                    out.push((e.sample, node as u32, e.s_acc, e.s_min));
                }
            }
        }
        return;
    }

    // Per-axis candidate span at `level`: repeated one-level windows
    // [2c-1, 2c+2] of the entry's node, clamped each level, which is the
    // union of the kept parent's windows across any carried gap.
    let dim = schedule.dim();
    let mut lo = schedule.coords_of(usize::from(e.level), e.node as usize);
    let mut hi = lo;
    for l_to in (level..usize::from(e.level)).rev() {
        let res = schedule.res(l_to);
        for a in 0..dim {
            lo[a] = (2 * lo[a]).saturating_sub(1);
            hi[a] = (2 * hi[a] + 2).min(res[a] - 1);
        }
    }

    let res = schedule.res(level);
    match pyramid.retained(level) {
        None => {
            // Dense level: walk the span in ascending node order.
            let mut cur = lo;
            'walk: loop {
                let mut idx = 0usize;
                for a in 0..dim {
                    idx = idx * res[a] + cur[a];
                }
                out.push((e.sample, idx as u32, e.s_acc, e.s_min));
                let mut a = dim;
                loop {
                    if a == 0 {
                        break 'walk;
                    }
                    a -= 1;
                    if cur[a] < hi[a] {
                        cur[a] += 1;
                        break;
                    }
                    cur[a] = lo[a];
                }
            }
        }
        Some(retained) => {
            let volume: usize = (0..dim).map(|a| hi[a] - lo[a] + 1).product();
            if volume <= retained.len() {
                let mut cur = lo;
                'walk2: loop {
                    let mut idx = 0usize;
                    for a in 0..dim {
                        idx = idx * res[a] + cur[a];
                    }
                    if retained.binary_search(&idx).is_ok() {
                        out.push((e.sample, idx as u32, e.s_acc, e.s_min));
                    }
                    let mut a = dim;
                    loop {
                        if a == 0 {
                            break 'walk2;
                        }
                        a -= 1;
                        if cur[a] < hi[a] {
                            cur[a] += 1;
                            break;
                        }
                        cur[a] = lo[a];
                    }
                }
            } else {
                for &node in retained {
                    let c = span_coords(res, dim, node);
                    if (0..dim).all(|a| lo[a] <= c[a] && c[a] <= hi[a]) {
                        out.push((e.sample, node as u32, e.s_acc, e.s_min));
                    }
                }
            }
        }
    }
}

fn span_coords(res: &[usize], dim: usize, mut idx: usize) -> [usize; MAX_DIM] {
    let mut c = [0usize; MAX_DIM];
    for a in (0..dim).rev() {
        c[a] = idx % res[a];
        idx /= res[a];
    }
    c
}

/// Transfers labels across a correspondence map: per leaf, the matches'
/// stored labels are blended with softmax weights over their accumulated
/// similarities. Matches whose stored label is invalid are first forced to
/// [`INVALID_MATCH_SCORE`], making their weight negligible (they still sit
/// in the softmax denominator); a leaf whose matches are all invalid (or
/// absent) becomes an invalid output node.
pub fn retrieve_labels(cmap: &CorrespondenceMap, store: &MemoryStore) -> Result<LabelMap> {
    let res = cmap.res().to_vec();
    let nodes = cmap.node_count();
    match store.label_kind() {
        LabelKind::Classes(classes) => {
            let mut probs = vec![0.0f32; nodes * classes];
            let rows: Vec<Vec<f32>> = (0..nodes)
                .into_par_iter()
                .map(|leaf| {
                    let mut row = vec![0.0f32; classes];
                    let mut scored: Vec<(f64, Option<u8>)> = Vec::new();
                    for m in cmap.matches(leaf) {
                        let class = store.stored_class(m.sample as usize, m.node as usize);
                        let s = if class.is_some() { m.s_acc } else { INVALID_MATCH_SCORE };
                        scored.push((s, class));
                    }
                    if scored.iter().all(|(_, c)| c.is_none()) {
                        row.fill(f32::NAN);
                        return row;
                    }
                    let max = scored.iter().map(|&(s, _)| s).fold(f64::MIN, f64::max);
                    let z: f64 = scored.iter().map(|&(s, _)| (s - max).exp()).sum();
                    let mut acc = vec![0.0f64; classes];
                    for &(s, class) in &scored {
                        if let Some(c) = class {
                            acc[usize::from(c)] += (s - max).exp() / z;
                        }
                    }
                    for (r, a) in row.iter_mut().zip(&acc) {
                        *r = *a as f32;
                    }
                    row
                })
                .collect();
            for (leaf, row) in rows.iter().enumerate() {
                probs[leaf * classes..(leaf + 1) * classes].copy_from_slice(row);
            }
            LabelMap::categorical(res, classes, probs)
        }
        LabelKind::Scalar => {
            let values: Vec<f32> = (0..nodes)
                .into_par_iter()
                .map(|leaf| {
                    let mut scored: Vec<(f64, Option<f32>)> = Vec::new();
                    for m in cmap.matches(leaf) {
                        let value = store.stored_scalar(m.sample as usize, m.node as usize);
                        let s = if value.is_some() { m.s_acc } else { INVALID_MATCH_SCORE };
                        scored.push((s, value));
                    }
                    if scored.iter().all(|(_, v)| v.is_none()) {
                        return f32::NAN;
                    }
                    let max = scored.iter().map(|&(s, _)| s).fold(f64::MIN, f64::max);
                    let z: f64 = scored.iter().map(|&(s, _)| (s - max).exp()).sum();
                    let mut acc = 0.0f64;
                    for &(s, value) in &scored {
                        if let Some(v) = value {
                            acc += (s - max).exp() / z * f64::from(v);
                        }
                    }
                    acc as f32
                })
                .collect();
            LabelMap::scalar(res, values)
        }
    }
}
