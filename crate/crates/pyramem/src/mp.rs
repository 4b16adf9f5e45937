//! Label smoothing by message passing over a query-side neighbor graph.
//!
//! The graph connects each finest-level query node to its top-kappa most
//! similar peers inside the same query, found by running the hierarchical
//! search against the query itself; every node carries a self-loop. Edge
//! weights are a softmax over the accumulated chain scores, so each node's
//! outgoing weights sum to one.
//!
//! Smoothing then relaxes a label field toward the weighted mean of each
//! node's neighborhood. One step moves `y` by `lambda` times the weighted
//! sum of neighbor differences, which keeps any constant field bitwise
//! fixed. Invalid nodes hold their state and contribute nothing; their
//! weight mass is renormalized over the remaining valid neighbors.

use crate::grid::Parent;
use crate::labels::LabelMap;
use crate::pyramid::FeaturePyramid;
use crate::search::{
    cosine_similarity, search_views, SampleView, SearchConfig, WindowMode,
};
use crate::{Error, Result};

/// Top-kappa neighborhood of every finest-level query node, with row-stochastic
/// softmax edge weights.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryGraph {
    res: Vec<usize>,
    kappa: usize,
    /// Per node: up to kappa `(neighbor, weight)` edges, weights summing to 1.
    edges: Vec<Vec<(u32, f64)>>,
    /// Feature comparisons spent building the graph.
    pub comparisons: u64,
}

impl QueryGraph {
    /// Finest-level grid resolution.
    pub fn res(&self) -> &[usize] {
        &self.res
    }

    /// Neighbors kept per node.
    pub fn kappa(&self) -> usize {
        self.kappa
    }

    /// Nodes in the graph.
    pub fn node_count(&self) -> usize {
        self.res.iter().product()
    }

    /// Outgoing `(neighbor, weight)` edges of `node`.
    pub fn edges(&self, node: usize) -> &[(u32, f64)] {
        &self.edges[node]
    }
}

/// Message passing parameters.
#[derive(Debug, Clone)]
pub struct MpConfig {
    /// Step size in (0, 1]; 1 replaces each node by its neighborhood mean.
    pub lambda: f64,
    /// Step ceiling.
    pub max_steps: usize,
    /// Convergence threshold on the mean per-node L2 movement of a step.
    pub tol: f64,
}

impl Default for MpConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            max_steps: 32,
            tol: 1e-6,
        }
    }
}

/// How a smoothing run ended.
#[derive(Debug, Clone, PartialEq)]
pub struct MpReport {
    /// Steps executed.
    pub steps: usize,
    /// Whether the last step moved less than the threshold.
    pub converged: bool,
    /// Mean per-node L2 movement of each executed step.
    pub deltas: Vec<f64>,
}

/// Builds the top-kappa neighbor graph of a query pyramid by searching the
/// query against itself with `phi = 1`.
///
/// Every node appears in its own edge list: it is trivially its own nearest
/// neighbor, so it is force-included with its self chain score should exact
/// score ties push it out of the kept list.
pub fn build_query_graph(query: &FeaturePyramid, kappa: usize) -> Result<QueryGraph> {
    let schedule = query.schedule();
    let leaves = schedule.node_count(1);
    if kappa == 0 {
        return Err(Error::domain("kappa must be at least 1"));
    }
    if kappa > leaves {
        return Err(Error::domain(format!(
            "kappa = {kappa} exceeds the {leaves} finest-level nodes"
        )));
    }
    let view = SampleView {
        id: "query",
        pyramid: query,
    };
    let config = SearchConfig {
        phi: 1.0,
        k_init: Some(kappa),
        window: WindowMode::Hierarchy,
        chunk: None,
    };
    let map = search_views(query, std::slice::from_ref(&view), &config)?;

    let mut edges = Vec::with_capacity(leaves);
    for q in 0..leaves {
        let mut list: Vec<(u32, f64)> = map
            .matches(q)
            .iter()
            .map(|e| (e.node, e.s_acc))
            .collect();
        if !list.iter().any(|&(node, _)| node as usize == q) {
            if list.len() == kappa {
                list.pop();
            }
            list.push((q as u32, self_chain(query, q)));
            list.sort_unstable_by(|x, y| {
                y.1.partial_cmp(&x.1)
                    .expect("scores are finite")
                    .then_with(|| x.0.cmp(&y.0))
            });
        }
        edges.push(softmax_edges(&list));
    }
    Ok(QueryGraph {
        res: schedule.res(1).to_vec(),
        kappa,
        edges,
        comparisons: map.comparisons,
    })
}

/// Chain product of a leaf matched against itself: exactly 1 unless some
/// ancestor feature row is all zeros.
fn self_chain(query: &FeaturePyramid, leaf: usize) -> f64 {
    let schedule = query.schedule();
    let mut prod = 1.0;
    let mut node = leaf;
    for l in 1..=schedule.num_levels() {
        let f = query.feature(l, node).expect("dense query");
        prod *= cosine_similarity(f, f);
        node = match schedule.parent_index(l, node) {
            Ok(Parent::Node(p)) => p,
            _ => 0,
        };
    }
    prod
}

/// Softmax weights over scored neighbors, max-subtracted for stability.
fn softmax_edges(scored: &[(u32, f64)]) -> Vec<(u32, f64)> {
    let mx = scored
        .iter()
        .map(|&(_, s)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<(u32, f64)> = scored
        .iter()
        .map(|&(node, s)| (node, (s - mx).exp()))
        .collect();
    let z: f64 = out.iter().map(|&(_, w)| w).sum();
    for (_, w) in &mut out {
        *w /= z;
    }
    out
}

/// Dense f64 working copy of a label field. Invalid nodes are NaN rows.
struct Field {
    channels: usize,
    rows: Vec<f64>,
    valid: Vec<bool>,
}

impl Field {
    fn from_map(map: &LabelMap) -> Result<Self> {
        let nodes = map.node_count();
        match map {
            LabelMap::Classes { .. } => Err(Error::domain(
                "message passing needs a categorical or scalar field, not class ids",
            )),
            LabelMap::Categorical { classes, probs, .. } => Ok(Self {
                channels: *classes,
                rows: probs.iter().map(|&x| f64::from(x)).collect(),
                valid: (0..nodes).map(|v| map.is_valid(v)).collect(),
            }),
            LabelMap::Scalar { values, .. } => Ok(Self {
                channels: 1,
                rows: values.iter().map(|&x| f64::from(x)).collect(),
                valid: (0..nodes).map(|v| map.is_valid(v)).collect(),
            }),
        }
    }

    fn to_map(&self, template: &LabelMap) -> LabelMap {
        let rows: Vec<f32> = self.rows.iter().map(|&x| x as f32).collect();
        match template {
            LabelMap::Categorical { res, classes, .. } => LabelMap::Categorical {
                res: res.clone(),
                classes: *classes,
                probs: rows,
            },
            LabelMap::Scalar { res, .. } => LabelMap::Scalar {
                res: res.clone(),
                values: rows,
            },
            LabelMap::Classes { .. } => unreachable!("rejected by from_map"),
        }
    }
}

/// One synchronous relaxation step over all valid nodes; returns the mean
/// per-node L2 movement.
fn step(cur: &Field, graph: &QueryGraph, lambda: f64, next: &mut Field) -> f64 {
    let c = cur.channels;
    let mut moved = 0.0f64;
    let mut counted = 0usize;
    for i in 0..cur.valid.len() {
        let row = i * c..(i + 1) * c;
        if !cur.valid[i] {
            next.rows[row.clone()].copy_from_slice(&cur.rows[row]);
            continue;
        }
        counted += 1;
        let mut mass = 0.0f64;
        for &(j, w) in graph.edges(i) {
            if cur.valid[j as usize] {
                mass += w;
            }
        }
        if mass <= 0.0 {
            next.rows[row.clone()].copy_from_slice(&cur.rows[row]);
            continue;
        }
        let mut d2 = 0.0f64;
        for ch in 0..c {
            let y = cur.rows[i * c + ch];
            let mut pull = 0.0f64;
            for &(j, w) in graph.edges(i) {
                let j = j as usize;
                if cur.valid[j] {
                    pull += (w / mass) * (cur.rows[j * c + ch] - y);
                }
            }
            let moved_to = y + lambda * pull;
            next.rows[i * c + ch] = moved_to;
            let d = moved_to - y;
            d2 += d * d;
        }
        moved += d2.sqrt();
    }
    if counted == 0 {
        0.0
    } else {
        moved / counted as f64
    }
}

fn check_inputs(state: &LabelMap, graph: &QueryGraph, lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::domain(format!(
            "lambda must be in (0, 1], got {lambda}"
        )));
    }
    if state.res() != graph.res() {
        return Err(Error::domain(format!(
            "field covers {:?}, graph covers {:?}",
            state.res(),
            graph.res()
        )));
    }
    Ok(())
}

/// One smoothing step of the label field over the graph.
pub fn mp_step(state: &LabelMap, graph: &QueryGraph, lambda: f64) -> Result<LabelMap> {
    check_inputs(state, graph, lambda)?;
    let cur = Field::from_map(state)?;
    let mut next = Field {
        channels: cur.channels,
        rows: vec![0.0; cur.rows.len()],
        valid: cur.valid.clone(),
    };
    step(&cur, graph, lambda, &mut next);
    Ok(next.to_map(state))
}

/// Runs smoothing steps until the mean per-node movement drops below
/// `config.tol` or `config.max_steps` is reached. Categorical fields are
/// renormalized once at the end to counter rounding drift.
pub fn mp_run(
    state: &LabelMap,
    graph: &QueryGraph,
    config: &MpConfig,
) -> Result<(LabelMap, MpReport)> {
    check_inputs(state, graph, config.lambda)?;
    let mut cur = Field::from_map(state)?;
    let mut next = Field {
        channels: cur.channels,
        rows: vec![0.0; cur.rows.len()],
        valid: cur.valid.clone(),
    };
    let mut report = MpReport {
        steps: 0,
        converged: false,
        deltas: Vec::new(),
    };
    for _ in 0..config.max_steps {
        let delta = step(&cur, graph, config.lambda, &mut next);
        std::mem::swap(&mut cur, &mut next);
        report.steps += 1;
        report.deltas.push(delta);
        if delta < config.tol {
            report.converged = true;
            break;
        }
    }
    let mut out = cur.to_map(state);
    out.renormalize_categorical();
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    use super::*;
    use crate::grid::{GridTensor, ResolutionSchedule};

    fn random_query(res: &[usize], n: usize, channels: usize, seed: u64) -> FeaturePyramid {
        let schedule = ResolutionSchedule::canonical(res.len(), res, n).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let tensors = (1..=n)
            .map(|l| {
                let mut t = GridTensor::zeros(schedule.res(l).to_vec(), channels).unwrap();
                for x in t.data_mut() {
                    *x = rng.gen_range(-1.0f32..1.0);
                }
                t
            })
            .collect();
        FeaturePyramid::from_dense(schedule, tensors).unwrap()
    }

    fn hand_graph(res: Vec<usize>, edges: Vec<Vec<(u32, f64)>>) -> QueryGraph {
        QueryGraph {
            res,
            kappa: edges.iter().map(Vec::len).max().unwrap_or(1),
            edges,
            comparisons: 0,
        }
    }

    #[test]
    fn rows_are_stochastic_and_hold_a_self_loop() {
        let query = random_query(&[8, 8], 3, 5, 40);
        let graph = build_query_graph(&query, 4).unwrap();
        assert_eq!(graph.node_count(), 64);
        for q in 0..64 {
            let edges = graph.edges(q);
            assert!(!edges.is_empty() && edges.len() <= 4);
            assert!(edges.iter().any(|&(j, _)| j as usize == q));
            assert!(edges.iter().all(|&(_, w)| w >= 0.0));
            let sum: f64 = edges.iter().map(|&(_, w)| w).sum();
            assert!((sum - 1.0).abs() <= 1e-6, "node {q} sums to {sum}");
        }
    }

    #[test]
    fn tied_scores_split_weight_exactly_evenly() {
        // Constant features: every chain product is exactly 1.
        let schedule = ResolutionSchedule::canonical(2, &[4, 4], 2).unwrap();
        let tensors = (1..=2)
            .map(|l| {
                let nodes: usize = schedule.res(l).iter().product();
                GridTensor::new(schedule.res(l).to_vec(), 2, vec![1.0; nodes * 2]).unwrap()
            })
            .collect();
        let query = FeaturePyramid::from_dense(schedule, tensors).unwrap();
        let graph = build_query_graph(&query, 4).unwrap();
        for q in 0..16 {
            let edges = graph.edges(q);
            assert_eq!(edges.len(), 4);
            assert!(edges.iter().all(|&(_, w)| w == 0.25));
        }
    }

    #[test]
    fn softmax_follows_score_gaps() {
        let w = softmax_edges(&[(0, std::f64::consts::LN_2), (1, 0.0)]);
        assert!((w[0].1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((w[1].1 - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn kappa_one_keeps_only_the_self_loop() {
        let query = random_query(&[4, 4], 2, 3, 41);
        let graph = build_query_graph(&query, 1).unwrap();
        for q in 0..16 {
            assert_eq!(graph.edges(q), &[(q as u32, 1.0)]);
        }
    }

    #[test]
    fn kappa_past_the_leaf_count_is_refused() {
        let query = random_query(&[2, 2], 2, 3, 42);
        assert!(build_query_graph(&query, 5).is_err());
        assert!(build_query_graph(&query, 0).is_err());
    }

    #[test]
    fn constant_field_is_a_bitwise_fixed_point() {
        let query = random_query(&[8, 8], 3, 4, 43);
        let graph = build_query_graph(&query, 6).unwrap();
        let mut probs = Vec::new();
        for v in 0..64 {
            if v % 7 == 3 {
                probs.extend([f32::NAN; 3]);
            } else {
                probs.extend([0.25, 0.5, 0.25]);
            }
        }
        let field = LabelMap::categorical(vec![8, 8], 3, probs).unwrap();
        let stepped = mp_step(&field, &graph, 0.7).unwrap();
        let (ran, report) = mp_run(&field, &graph, &MpConfig::default()).unwrap();
        assert!(report.converged && report.steps == 1);
        for v in 0..64 {
            let want = field.prob_row(v).unwrap();
            for got in [stepped.prob_row(v).unwrap(), ran.prob_row(v).unwrap()] {
                for ch in 0..3 {
                    assert_eq!(got[ch].to_bits(), want[ch].to_bits(), "node {v}");
                }
            }
        }
    }

    #[test]
    fn lambda_interpolates_toward_the_neighborhood_mean() {
        let graph = hand_graph(vec![2], vec![vec![(1, 1.0)], vec![(1, 1.0)]]);
        let field = LabelMap::scalar(vec![2], vec![0.0, 1.0]).unwrap();
        let half = mp_step(&field, &graph, 0.5).unwrap();
        assert_eq!(half.scalar_value(0), Some(0.5));
        assert_eq!(half.scalar_value(1), Some(1.0));
        let full = mp_step(&field, &graph, 1.0).unwrap();
        assert_eq!(full.scalar_value(0), Some(1.0));
    }

    #[test]
    fn invalid_neighbors_lose_their_pull() {
        let graph = hand_graph(
            vec![3],
            vec![
                vec![(0, 0.5), (1, 0.5)],
                vec![(1, 1.0)],
                vec![(1, 1.0)],
            ],
        );
        let field = LabelMap::scalar(vec![3], vec![4.0, f32::NAN, 7.0]).unwrap();
        let out = mp_step(&field, &graph, 1.0).unwrap();
        // Node 0's only valid mass is its self-loop; node 2's only neighbor
        // is invalid, so it keeps its state; node 1 stays invalid.
        assert_eq!(out.scalar_value(0), Some(4.0));
        assert!(!out.is_valid(1));
        assert_eq!(out.scalar_value(2), Some(7.0));
    }

    #[test]
    fn smoothing_stays_inside_the_initial_value_range() {
        let query = random_query(&[8, 8], 3, 4, 44);
        let graph = build_query_graph(&query, 8).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(45);
        let values: Vec<f32> = (0..64).map(|_| rng.gen_range(-3.0..7.0)).collect();
        let (lo, hi) = values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let field = LabelMap::scalar(vec![8, 8], values).unwrap();
        let (out, report) = mp_run(&field, &graph, &MpConfig::default()).unwrap();
        assert_eq!(report.deltas.len(), report.steps);
        for v in 0..64 {
            let y = out.scalar_value(v).unwrap();
            assert!(y >= lo - 1e-6 && y <= hi + 1e-6, "node {v} left the range");
        }
    }

    #[test]
    fn shared_argmax_with_margin_survives_smoothing() {
        let query = random_query(&[4, 4], 2, 4, 46);
        let graph = build_query_graph(&query, 4).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(47);
        let mut probs = Vec::new();
        for _ in 0..16 {
            let a = rng.gen_range(0.0f32..0.3);
            probs.extend([a, 0.7 - a, 0.3]);
        }
        let field = LabelMap::categorical(vec![4, 4], 3, probs).unwrap();
        let (out, _) = mp_run(&field, &graph, &MpConfig::default()).unwrap();
        for v in 0..16 {
            assert_eq!(out.argmax_class(v), Some(1), "node {v}");
        }
    }

    #[test]
    fn class_id_fields_and_bad_lambdas_are_refused() {
        let query = random_query(&[2, 2], 2, 3, 48);
        let graph = build_query_graph(&query, 2).unwrap();
        let ids = LabelMap::classes(vec![2, 2], 3, vec![0, 1, 2, 0]).unwrap();
        assert!(mp_step(&ids, &graph, 1.0).is_err());
        let field = LabelMap::scalar(vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(mp_step(&field, &graph, 0.0).is_err());
        assert!(mp_step(&field, &graph, 1.5).is_err());
        let off_grid = LabelMap::scalar(vec![4, 4], vec![0.0; 16]).unwrap();
        assert!(mp_step(&off_grid, &graph, 1.0).is_err());
    }
}
