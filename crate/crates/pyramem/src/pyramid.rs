//! Feature pyramids: per-level node features, optionally sparse, plus
//! completion of partial pyramids onto a full schedule.

use crate::grid::{GridTensor, ResolutionSchedule};
use crate::ptns::{PtnsFile, PtnsLevel, PtnsPayload};
use crate::resample::{avg_pool_halve, nearest_upsample};
use crate::{Error, Result};

/// One pyramid level: features for all nodes, or for a retained subset.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLevel {
    channels: usize,
    /// Ascending node indices of the stored rows; `None` stores every node.
    retained: Option<Vec<usize>>,
    /// Node-major feature rows, in retained order for sparse levels.
    data: Vec<f32>,
}

impl PyramidLevel {
    fn check(&self, nodes: usize, level: usize) -> Result<()> {
        let at = |msg: String| Error::domain(format!("level {level}: {msg}"));
        if self.channels == 0 {
            return Err(at("zero channels".into()));
        }
        if let Some(r) = &self.retained {
            if !r.windows(2).all(|w| w[0] < w[1]) {
                return Err(at("retained indices must be strictly ascending".into()));
            }
            if r.last().is_some_and(|&v| v >= nodes) {
                return Err(at("retained index out of range".into()));
            }
        }
        let stored = self.retained.as_ref().map_or(nodes, Vec::len);
        if self.data.len() != stored * self.channels {
            return Err(at(format!(
                "data has {} values, expected {}",
                self.data.len(),
                stored * self.channels
            )));
        }
        Ok(())
    }
}

/// Multi-resolution feature stack over one schedule, level 1 finest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    schedule: ResolutionSchedule,
    /// `levels[l - 1]` holds level `l`.
    levels: Vec<PyramidLevel>,
}

impl FeaturePyramid {
    /// Builds a dense pyramid from one tensor per schedule level.
    pub fn from_dense(schedule: ResolutionSchedule, tensors: Vec<GridTensor>) -> Result<Self> {
        if tensors.len() != schedule.num_levels() {
            return Err(Error::domain(format!(
                "got {} tensors for a {}-level schedule",
                tensors.len(),
                schedule.num_levels()
            )));
        }
        let levels = tensors
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if t.res() != schedule.res(i + 1) {
                    return Err(Error::domain(format!(
                        "level {} tensor is {:?}, schedule says {:?}",
                        i + 1,
                        t.res(),
                        schedule.res(i + 1)
                    )));
                }
                Ok(PyramidLevel {
                    channels: t.channels(),
                    retained: None,
                    data: t.data().to_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { schedule, levels })
    }

    /// Builds a pyramid from raw per-level parts, validating shapes.
    pub fn from_parts(schedule: ResolutionSchedule, levels: Vec<PyramidLevel>) -> Result<Self> {
        if levels.len() != schedule.num_levels() {
            return Err(Error::domain(format!(
                "got {} levels for a {}-level schedule",
                levels.len(),
                schedule.num_levels()
            )));
        }
        for (i, level) in levels.iter().enumerate() {
            level.check(schedule.node_count(i + 1), i + 1)?;
        }
        Ok(Self { schedule, levels })
    }

    /// Assembles a level from its parts.
    pub fn level_parts(
        channels: usize,
        retained: Option<Vec<usize>>,
        data: Vec<f32>,
    ) -> PyramidLevel {
        PyramidLevel {
            channels,
            retained,
            data,
        }
    }

    /// The schedule this pyramid lives on.
    pub fn schedule(&self) -> &ResolutionSchedule {
        &self.schedule
    }

    /// Channels of `level` (1-based).
    pub fn channels(&self, level: usize) -> usize {
        self.levels[level - 1].channels
    }

    /// Whether every level stores every node.
    pub fn is_dense(&self) -> bool {
        self.levels.iter().all(|l| l.retained.is_none())
    }

    /// Retained node indices of `level`, if it is sparse.
    pub fn retained(&self, level: usize) -> Option<&[usize]> {
        self.levels[level - 1].retained.as_deref()
    }

    /// Number of stored nodes on `level`.
    pub fn stored_count(&self, level: usize) -> usize {
        self.levels[level - 1]
            .retained
            .as_ref()
            .map_or(self.schedule.node_count(level), Vec::len)
    }

    /// Storage row of `node` on `level`, or `None` if the node was dropped.
    pub fn row_of(&self, level: usize, node: usize) -> Option<usize> {
        match &self.levels[level - 1].retained {
            None => Some(node),
            Some(r) => r.binary_search(&node).ok(),
        }
    }

    /// Feature row by storage index.
    pub fn row(&self, level: usize, row: usize) -> &[f32] {
        let l = &self.levels[level - 1];
        &l.data[row * l.channels..(row + 1) * l.channels]
    }

    /// Feature vector of `node` on `level`, or `None` if dropped.
    pub fn feature(&self, level: usize, node: usize) -> Option<&[f32]> {
        self.row_of(level, node).map(|r| self.row(level, r))
    }

    /// Copies a dense level out as a tensor; sparse levels are refused.
    pub fn dense_level(&self, level: usize) -> Result<GridTensor> {
        let l = &self.levels[level - 1];
        if l.retained.is_some() {
            return Err(Error::domain(format!("level {level} is sparse")));
        }
        GridTensor::new(
            self.schedule.res(level).to_vec(),
            l.channels,
            l.data.clone(),
        )
    }

    /// Serializes the full stack as one tensor file.
    pub fn to_ptns(&self) -> Result<PtnsFile> {
        let dim = self.schedule.dim();
        let levels = (1..=self.schedule.num_levels())
            .map(|lv| {
                let res: Vec<u32> = self
                    .schedule
                    .res(lv)
                    .iter()
                    .map(|&r| {
                        u32::try_from(r)
                            .map_err(|_| Error::domain(format!("level {lv} axis exceeds u32")))
                    })
                    .collect::<Result<_>>()?;
                let l = &self.levels[lv - 1];
                Ok(PtnsLevel {
                    res,
                    channels: l.channels as u32,
                    retained: l
                        .retained
                        .as_ref()
                        .map(|r| r.iter().map(|&v| v as u64).collect()),
                    payload: PtnsPayload::F32(l.data.clone()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PtnsFile {
            dim: dim as u8,
            levels,
        })
    }

    /// Loads a pyramid from a parsed tensor file, keeping its retained lists
    /// exactly as stored.
    pub fn from_ptns(file: &PtnsFile) -> Result<Self> {
        let dim = file.dim as usize;
        let res_lists: Vec<Vec<usize>> = file
            .levels
            .iter()
            .map(|l| l.res.iter().map(|&r| r as usize).collect())
            .collect();
        let schedule = ResolutionSchedule::new(dim, &res_lists)?;
        let levels = file
            .levels
            .iter()
            .map(|l| {
                let data = match &l.payload {
                    PtnsPayload::F32(v) => v.clone(),
                    PtnsPayload::ClassU8(_) => {
                        return Err(Error::domain(
                            "pyramid file must hold f32 features, found class indices",
                        ))
                    }
                };
                Ok(PyramidLevel {
                    channels: l.channels as usize,
                    retained: l
                        .retained
                        .as_ref()
                        .map(|r| r.iter().map(|&v| v as usize).collect()),
                    data,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(schedule, levels)
    }
}

/// Fills the missing levels of a partial pyramid so it covers `target`.
///
/// Levels are matched by resolution. A missing level between two present
/// ones is the distance-weighted blend of the finer level pooled down and
/// the coarser level upsampled, when their channel counts agree; otherwise
/// the nearer level alone is used (ties prefer the finer). Missing levels
/// beyond the extremes continue the nearest present level by average-pooling
/// (coarser) or nearest-neighbor upsampling (finer).
pub fn complete_pyramid(
    partial: &FeaturePyramid,
    target: &ResolutionSchedule,
) -> Result<FeaturePyramid> {
    if !partial.is_dense() {
        return Err(Error::domain("completion needs a dense pyramid"));
    }
    if partial.schedule().dim() != target.dim() {
        return Err(Error::domain(format!(
            "pyramid is {}-dimensional, target is {}-dimensional",
            partial.schedule().dim(),
            target.dim()
        )));
    }
    if !target.is_canonical() {
        return Err(Error::domain("target schedule must be ceil-halving"));
    }

    let n = target.num_levels();
    // present[t - 1] = source tensor whose resolution matches target level t.
    let mut present: Vec<Option<GridTensor>> = vec![None; n];
    for src in 1..=partial.schedule().num_levels() {
        let res = partial.schedule().res(src);
        let slot = (1..=n).find(|&t| target.res(t) == res).ok_or_else(|| {
            Error::domain(format!(
                "source level of resolution {res:?} matches no target level"
            ))
        })?;
        if present[slot - 1].is_some() {
            return Err(Error::domain(format!(
                "two source levels share resolution {res:?}"
            )));
        }
        present[slot - 1] = Some(partial.dense_level(src)?);
    }

    // Pool the finer present neighbor down to level t.
    let pool_down = |present: &[Option<GridTensor>], from: usize, t: usize| {
        let mut cur = present[from - 1].clone().expect("present level");
        for _ in from..t {
            cur = avg_pool_halve(&cur);
        }
        cur
    };
    // Upsample the coarser present neighbor down the chain to level t.
    let up_from = |present: &[Option<GridTensor>], from: usize, t: usize| -> Result<GridTensor> {
        let mut cur = present[from - 1].clone().expect("present level");
        for lv in (t..from).rev() {
            cur = nearest_upsample(&cur, target.res(lv))?;
        }
        Ok(cur)
    };

    let mut filled: Vec<GridTensor> = Vec::with_capacity(n);
    for t in 1..=n {
        if let Some(src) = &present[t - 1] {
            filled.push(src.clone());
            continue;
        }
        let finer = (1..t).rev().find(|&l| present[l - 1].is_some());
        let coarser = (t + 1..=n).find(|&l| present[l - 1].is_some());
        let tensor = match (finer, coarser) {
            (Some(f), Some(c)) => {
                let pooled = pool_down(&present, f, t);
                let upped = up_from(&present, c, t)?;
                if pooled.channels() == upped.channels() {
                    let d_f = (t - f) as f64;
                    let d_c = (c - t) as f64;
                    let w_f = d_c / (d_f + d_c);
                    let w_c = d_f / (d_f + d_c);
                    let data = pooled
                        .data()
                        .iter()
                        .zip(upped.data())
                        .map(|(&a, &b)| (w_f * f64::from(a) + w_c * f64::from(b)) as f32)
                        .collect();
                    GridTensor::new(target.res(t).to_vec(), pooled.channels(), data)?
                } else if t - f <= c - t {
                    pooled
                } else {
                    upped
                }
            }
            (Some(f), None) => pool_down(&present, f, t),
            (None, Some(c)) => up_from(&present, c, t)?,
            (None, None) => unreachable!("at least one source level exists"),
        };
        filled.push(tensor);
    }
    FeaturePyramid::from_dense(target.clone(), filled)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(res: &[usize], channels: usize, scale: f32) -> GridTensor {
        let nodes: usize = res.iter().product();
        let data = (0..nodes * channels).map(|i| i as f32 * scale).collect();
        GridTensor::new(res.to_vec(), channels, data).unwrap()
    }

    fn constant(res: &[usize], channels: usize, v: f32) -> GridTensor {
        GridTensor::new(res.to_vec(), channels, vec![
            v;
            res.iter().product::<usize>()
                * channels
        ])
        .unwrap()
    }

    #[test]
    fn dense_construction_checks_shapes() {
        let s = ResolutionSchedule::canonical(2, &[4, 4], 2).unwrap();
        let ok = FeaturePyramid::from_dense(
            s.clone(),
            vec![ramp(&[4, 4], 3, 1.0), ramp(&[2, 2], 6, 1.0)],
        );
        assert!(ok.is_ok());
        let bad = FeaturePyramid::from_dense(
            s.clone(),
            vec![ramp(&[4, 4], 3, 1.0), ramp(&[3, 2], 6, 1.0)],
        );
        assert!(bad.is_err());
        assert!(FeaturePyramid::from_dense(s, vec![ramp(&[4, 4], 3, 1.0)]).is_err());
    }

    #[test]
    fn sparse_level_lookup() {
        let s = ResolutionSchedule::canonical(1, &[4], 2).unwrap();
        let levels = vec![
            FeaturePyramid::level_parts(2, Some(vec![1, 3]), vec![1.0, 2.0, 3.0, 4.0]),
            FeaturePyramid::level_parts(4, None, vec![0.0; 8]),
        ];
        let p = FeaturePyramid::from_parts(s, levels).unwrap();
        assert!(!p.is_dense());
        assert_eq!(p.stored_count(1), 2);
        assert_eq!(p.feature(1, 1), Some(&[1.0, 2.0][..]));
        assert_eq!(p.feature(1, 3), Some(&[3.0, 4.0][..]));
        assert_eq!(p.feature(1, 0), None);
        assert!(p.dense_level(1).is_err());
        assert!(p.dense_level(2).is_ok());
    }

    #[test]
    fn parts_validation_rejects_bad_lists() {
        let s = ResolutionSchedule::canonical(1, &[4], 1).unwrap();
        let bad_order =
            FeaturePyramid::from_parts(s.clone(), vec![FeaturePyramid::level_parts(
                1,
                Some(vec![3, 1]),
                vec![0.0; 2],
            )]);
        assert!(bad_order.is_err());
        let bad_len = FeaturePyramid::from_parts(s, vec![FeaturePyramid::level_parts(
            1,
            Some(vec![1]),
            vec![0.0; 2],
        )]);
        assert!(bad_len.is_err());
    }

    #[test]
    fn completion_is_identity_when_all_levels_present() {
        let target = ResolutionSchedule::canonical(2, &[8, 8], 3).unwrap();
        let p = FeaturePyramid::from_dense(
            target.clone(),
            vec![
                ramp(&[8, 8], 2, 0.5),
                ramp(&[4, 4], 4, 1.0),
                ramp(&[2, 2], 8, 2.0),
            ],
        )
        .unwrap();
        let done = complete_pyramid(&p, &target).unwrap();
        assert_eq!(done, p);
    }

    #[test]
    fn constant_gap_fills_with_the_constant() {
        let target = ResolutionSchedule::canonical(1, &[4], 3).unwrap();
        let partial_schedule = ResolutionSchedule::new(1, &[vec![4], vec![1]]).unwrap();
        let p = FeaturePyramid::from_dense(
            partial_schedule,
            vec![constant(&[4], 3, 7.5), constant(&[1], 3, 7.5)],
        )
        .unwrap();
        let done = complete_pyramid(&p, &target).unwrap();
        assert!(done.dense_level(2).unwrap().data().iter().all(|&v| v == 7.5));
    }

    #[test]
    fn gap_blend_weights_by_level_distance() {
        // Levels 1 and 3 present with equal channels: level 2 is the mean of
        // pooled level 1 and upsampled level 3.
        let target = ResolutionSchedule::canonical(1, &[4], 3).unwrap();
        let partial_schedule = ResolutionSchedule::new(1, &[vec![4], vec![1]]).unwrap();
        let l1 = GridTensor::new(vec![4], 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let l3 = GridTensor::new(vec![1], 1, vec![10.0]).unwrap();
        let p = FeaturePyramid::from_dense(partial_schedule, vec![l1, l3]).unwrap();
        let done = complete_pyramid(&p, &target).unwrap();
        // pool(l1) = [0.5, 2.5], up(l3) = [10, 10], weights 0.5 / 0.5.
        assert_eq!(done.dense_level(2).unwrap().data(), &[5.25, 6.25]);
    }

    #[test]
    fn gap_with_mismatched_channels_takes_the_nearer_source() {
        let target = ResolutionSchedule::canonical(1, &[4], 3).unwrap();
        let partial_schedule = ResolutionSchedule::new(1, &[vec![4], vec![1]]).unwrap();
        let p = FeaturePyramid::from_dense(
            partial_schedule,
            vec![ramp(&[4], 2, 1.0), constant(&[1], 5, 3.0)],
        )
        .unwrap();
        let done = complete_pyramid(&p, &target).unwrap();
        // Equidistant: the finer (pooled) source wins, keeping 2 channels.
        assert_eq!(done.channels(2), 2);
    }

    #[test]
    fn four_levels_complete_to_nine() {
        let target = ResolutionSchedule::canonical(2, &[256, 256], 9).unwrap();
        let partial_schedule = ResolutionSchedule::canonical(2, &[64, 64], 4).unwrap();
        let tensors = (0..4)
            .map(|i| constant(&[64 >> i, 64 >> i], 4 << i, i as f32))
            .collect();
        let p = FeaturePyramid::from_dense(partial_schedule, tensors).unwrap();
        let done = complete_pyramid(&p, &target).unwrap();
        assert_eq!(done.schedule().num_levels(), 9);
        assert!(done.schedule().is_canonical());
        // The two finest target levels extend the finest source by
        // upsampling; the coarsest three extend the coarsest source by
        // pooling.
        assert_eq!(done.channels(1), 4);
        assert_eq!(done.channels(2), 4);
        assert_eq!(done.channels(9), 32);
        assert_eq!(done.schedule().res(9), &[1, 1]);
    }

    #[test]
    fn ptns_round_trip_preserves_sparse_lists() {
        let s = ResolutionSchedule::canonical(1, &[4], 2).unwrap();
        let p = FeaturePyramid::from_parts(s, vec![
            FeaturePyramid::level_parts(2, Some(vec![0, 2]), vec![1.0, 2.0, 3.0, 4.0]),
            FeaturePyramid::level_parts(3, None, vec![0.5; 6]),
        ])
        .unwrap();
        let file = p.to_ptns().unwrap();
        let bytes = file.to_bytes().unwrap();
        let back = FeaturePyramid::from_ptns(&PtnsFile::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.retained(1), Some(&[0usize, 2][..]));
        // Dense level 2 comes back with the materialized identity list; the
        // bytes are stable across the round trip.
        assert_eq!(back.retained(2), Some(&[0usize, 1][..]));
        assert_eq!(back.to_ptns().unwrap().to_bytes().unwrap(), bytes);
    }
}
