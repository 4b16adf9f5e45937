//! End-to-end prediction: featurize a raw input, search the memory,
//! turn the matches into a label field, and smooth it over the query's
//! neighbor graph.

use crate::features::synth_extract;
use crate::grid::GridTensor;
use crate::labels::LabelMap;
use crate::memory::MemoryStore;
use crate::mp::{build_query_graph, mp_run, MpConfig, MpReport};
use crate::pyramid::FeaturePyramid;
use crate::search::{hierarchical_search, retrieve_labels, SearchConfig, WindowMode};
use crate::{Error, Result};

/// Prediction pipeline settings.
#[derive(Debug, Clone)]
pub struct PredictSettings {
    /// Beam reduction rate of the search.
    pub phi: f64,
    /// Starting beam width; `None` uses the stored sample count.
    pub k_init: Option<usize>,
    /// Whether to smooth the retrieved labels over the query graph.
    pub mp: bool,
    /// Neighbors per node of the query graph, clamped to the finest level's
    /// node count.
    pub kappa: usize,
    /// Smoothing step size.
    pub lambda: f64,
    /// Smoothing step ceiling.
    pub mp_steps: usize,
    /// Smoothing convergence threshold.
    pub mp_tol: f64,
    /// Query leaves per sequential search chunk; `None` runs all at once.
    pub chunk: Option<usize>,
}

impl Default for PredictSettings {
    fn default() -> Self {
        Self {
            phi: 0.5,
            k_init: None,
            mp: true,
            kappa: 16,
            lambda: 1.0,
            mp_steps: 32,
            mp_tol: 1e-6,
            chunk: None,
        }
    }
}

/// One prediction with its intermediate products.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Final label field, smoothed when message passing ran.
    pub labels: LabelMap,
    /// Retrieval output before smoothing.
    pub raw: LabelMap,
    /// Smoothing trace, when message passing ran.
    pub mp_report: Option<MpReport>,
    /// Feature comparisons spent on the search and the query graph.
    pub comparisons: u64,
    /// Best-match index panel from the search.
    pub idx: GridTensor,
    /// Best-match accumulated-score panel from the search.
    pub sim: GridTensor,
}

/// Predicts labels for an already featurized query pyramid.
pub fn predict_pyramid(
    store: &MemoryStore,
    query: &FeaturePyramid,
    settings: &PredictSettings,
) -> Result<Prediction> {
    let config = SearchConfig {
        phi: settings.phi,
        k_init: settings.k_init,
        window: WindowMode::Hierarchy,
        chunk: settings.chunk,
    };
    let cmap = hierarchical_search(query, store, &config)?;
    let raw = retrieve_labels(&cmap, store)?;
    let mut comparisons = cmap.comparisons;
    let idx = cmap.idx_panel();
    let sim = cmap.sim_panel();
    let (labels, mp_report) = if settings.mp {
        let kappa = settings.kappa.min(store.schedule().node_count(1));
        let graph = build_query_graph(query, kappa)?;
        comparisons += graph.comparisons;
        let mp_config = MpConfig {
            lambda: settings.lambda,
            max_steps: settings.mp_steps,
            tol: settings.mp_tol,
        };
        let (smoothed, report) = mp_run(&raw, &graph, &mp_config)?;
        (smoothed, Some(report))
    } else {
        (raw.clone(), None)
    };
    Ok(Prediction {
        labels,
        raw,
        mp_report,
        comparisons,
        idx,
        sim,
    })
}

/// Featurizes a raw input with the store's recorded extractor and predicts.
pub fn predict_input(
    store: &MemoryStore,
    input: &GridTensor,
    settings: &PredictSettings,
) -> Result<Prediction> {
    let extractor = store.extractor().ok_or_else(|| {
        Error::domain("store records no extractor; featurize the input upstream")
    })?;
    let query = synth_extract(input, store.schedule(), extractor)?;
    predict_pyramid(store, &query, settings)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    use super::*;
    use crate::features::SyntheticExtractorConfig;
    use crate::grid::ResolutionSchedule;
    use crate::labels::LabelKind;

    fn seeded_input(res: &[usize], channels: usize, seed: u64) -> GridTensor {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let nodes: usize = res.iter().product();
        GridTensor::new(
            res.to_vec(),
            channels,
            (0..nodes * channels).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn two_sample_store(res: &[usize], n: usize) -> MemoryStore {
        let schedule = ResolutionSchedule::canonical(2, res, n).unwrap();
        let mut store = MemoryStore::new(schedule.clone(), LabelKind::Classes(3), 0).unwrap();
        let extractor = SyntheticExtractorConfig::doubling(17, 2, n);
        store.set_extractor(extractor.clone());
        let leaves = schedule.node_count(1);
        for (i, class) in [0u8, 2].iter().enumerate() {
            let input = seeded_input(res, 3, 100 + i as u64);
            let pyramid = synth_extract(&input, &schedule, &extractor).unwrap();
            let labels =
                LabelMap::classes(res.to_vec(), 3, vec![*class; leaves]).unwrap();
            store
                .consolidate_add(&format!("s{i}"), &pyramid, &labels, "test")
                .unwrap();
        }
        store
    }

    #[test]
    fn pipeline_produces_a_full_field_and_is_deterministic() {
        let store = two_sample_store(&[8, 8], 3);
        let input = seeded_input(&[8, 8], 3, 100);
        let settings = PredictSettings::default();
        let a = predict_input(&store, &input, &settings).unwrap();
        let b = predict_input(&store, &input, &settings).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.comparisons, b.comparisons);
        assert_eq!(a.labels.valid_count(), 64);
        assert!(a.mp_report.is_some());
        // The query is sample 0's own input, so its class dominates.
        let classes = a.labels.to_classes().unwrap();
        let zeros = (0..64)
            .filter(|&v| classes.argmax_class(v) == Some(0))
            .count();
        assert!(zeros > 48, "only {zeros} of 64 nodes kept class 0");
    }

    #[test]
    fn disabling_mp_returns_the_raw_field() {
        let store = two_sample_store(&[8, 8], 3);
        let input = seeded_input(&[8, 8], 3, 101);
        let settings = PredictSettings {
            mp: false,
            ..PredictSettings::default()
        };
        let p = predict_input(&store, &input, &settings).unwrap();
        assert_eq!(p.labels, p.raw);
        assert!(p.mp_report.is_none());
    }

    #[test]
    fn missing_extractor_is_reported() {
        let schedule = ResolutionSchedule::canonical(2, &[4, 4], 2).unwrap();
        let store = MemoryStore::new(schedule, LabelKind::Scalar, 0).unwrap();
        let input = seeded_input(&[4, 4], 3, 102);
        assert!(predict_input(&store, &input, &PredictSettings::default()).is_err());
    }
}
