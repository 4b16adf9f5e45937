//! Feature-pyramid provision: a deterministic seeded extractor for
//! self-contained runs, and import of externally computed pyramids.
//!
//! The built-in extractor stands in for a frozen backbone network: level 1
//! is the box-filtered input lifted to a channel target by a fixed random
//! linear map, and each coarser level average-pools the one below and lifts
//! again. Every random weight derives from a counter-based generator keyed
//! by (seed, level), so extraction is a pure function of the input and the
//! seed, independent of platform or thread count.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::grid::{GridTensor, ResolutionSchedule};
use crate::ptns::PtnsFile;
use crate::pyramid::{complete_pyramid, FeaturePyramid};
use crate::resample::{avg_pool_halve, box_filter};
use crate::{Error, Result};

/// Configuration of the built-in extractor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticExtractorConfig {
    /// Seed for all lift weights.
    pub seed: u64,
    /// Output channels per level, finest first.
    pub channels: Vec<usize>,
    /// Box-filter radius applied to the input before the first lift.
    pub smoothing_radius: usize,
}

impl SyntheticExtractorConfig {
    /// Channel schedule that doubles per level from `base`.
    pub fn doubling(seed: u64, base: usize, n_levels: usize) -> Self {
        Self {
            seed,
            channels: (0..n_levels).map(|l| base << l).collect(),
            smoothing_radius: 1,
        }
    }
}

/// Fixed random linear map for one level, entries in [-1, 1) scaled by
/// 1/sqrt(fan-in), drawn from a stream keyed by (seed, level).
fn lift_matrix(seed: u64, level: usize, c_out: usize, c_in: usize) -> Vec<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(level as u64);
    let scale = 1.0 / (c_in as f64).sqrt();
    (0..c_out * c_in)
        .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale)
        .collect()
}

fn apply_lift(t: &GridTensor, matrix: &[f64], c_out: usize) -> GridTensor {
    let c_in = t.channels();
    let nodes = t.node_count();
    let mut out = vec![0.0f32; nodes * c_out];
    for node in 0..nodes {
        let src = t.node(node);
        let dst = &mut out[node * c_out..(node + 1) * c_out];
        for (o, d) in dst.iter_mut().enumerate() {
            let row = &matrix[o * c_in..(o + 1) * c_in];
            let mut acc = 0.0f64;
            for (m, v) in row.iter().zip(src) {
                acc += m * f64::from(*v);
            }
            *d = acc as f32;
        }
    }
    GridTensor::new(t.res().to_vec(), c_out, out).expect("lift preserves the grid")
}

/// Extracts a feature pyramid from a level-1 input grid.
///
/// Identical `(input, config)` pairs produce bit-identical pyramids.
pub fn synth_extract(
    input: &GridTensor,
    schedule: &ResolutionSchedule,
    config: &SyntheticExtractorConfig,
) -> Result<FeaturePyramid> {
    if input.res() != schedule.res(1) {
        return Err(Error::domain(format!(
            "input grid is {:?}, schedule level 1 is {:?}",
            input.res(),
            schedule.res(1)
        )));
    }
    if config.channels.len() != schedule.num_levels() {
        return Err(Error::domain(format!(
            "channel schedule has {} levels, schedule has {}",
            config.channels.len(),
            schedule.num_levels()
        )));
    }
    if !schedule.is_canonical() {
        return Err(Error::domain("extraction needs a ceil-halving schedule"));
    }
    let mut levels = Vec::with_capacity(schedule.num_levels());
    let smoothed = box_filter(input, config.smoothing_radius);
    let m1 = lift_matrix(config.seed, 1, config.channels[0], smoothed.channels());
    levels.push(apply_lift(&smoothed, &m1, config.channels[0]));
    for l in 2..=schedule.num_levels() {
        let pooled = avg_pool_halve(&levels[l - 2]);
        let m = lift_matrix(config.seed, l, config.channels[l - 1], pooled.channels());
        levels.push(apply_lift(&pooled, &m, config.channels[l - 1]));
    }
    FeaturePyramid::from_dense(schedule.clone(), levels)
}

/// Loads pyramid levels from tensor files and completes them onto `target`.
///
/// Each file may hold one level or several; levels are pooled across files,
/// matched to the target schedule by resolution, and the gaps filled by
/// [`complete_pyramid`]. All inputs must be dense.
pub fn import_pyramid(
    paths: &[impl AsRef<Path>],
    target: &ResolutionSchedule,
) -> Result<FeaturePyramid> {
    if paths.is_empty() {
        return Err(Error::domain("no pyramid files given"));
    }
    let mut tensors: Vec<GridTensor> = Vec::new();
    for path in paths {
        let file = PtnsFile::read_from(path.as_ref())?;
        if file.dim as usize != target.dim() {
            return Err(Error::domain(format!(
                "{} is {}-dimensional, target is {}-dimensional",
                path.as_ref().display(),
                file.dim,
                target.dim()
            )));
        }
        let pyramid = FeaturePyramid::from_ptns(&file)?;
        for lv in 1..=pyramid.schedule().num_levels() {
            tensors.push(pyramid.dense_level(lv).map_err(|_| {
                Error::domain(format!(
                    "{} level {lv} is sparse; imports must be dense",
                    path.as_ref().display()
                ))
            })?);
        }
    }
    // Finest first, deterministically: node count descending, then axes.
    tensors.sort_by(|a, b| {
        b.node_count()
            .cmp(&a.node_count())
            .then_with(|| b.res().cmp(a.res()))
    });
    for w in tensors.windows(2) {
        if w[0].res() == w[1].res() {
            return Err(Error::domain(format!(
                "two imported levels share resolution {:?}",
                w[0].res()
            )));
        }
    }
    let res_lists: Vec<Vec<usize>> = tensors.iter().map(|t| t.res().to_vec()).collect();
    let partial_schedule = ResolutionSchedule::new(target.dim(), &res_lists)?;
    let partial = FeaturePyramid::from_dense(partial_schedule, tensors)?;
    complete_pyramid(&partial, target)
}
