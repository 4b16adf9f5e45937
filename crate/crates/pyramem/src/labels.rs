//! Dense per-node label maps on the finest grid.
//!
//! Three layouts cover ground truth and predictions:
//!
//! * [`LabelMap::Classes`]: one class index per node, ground-truth style;
//!   index 255 marks an unlabeled node.
//! * [`LabelMap::Categorical`]: one probability row per node, prediction
//!   style; an all-NaN row marks a node with no prediction.
//! * [`LabelMap::Scalar`]: one value per node (regression); NaN marks an
//!   invalid node.
//!
//! Validity is always in-band; no side masks are stored.

use crate::ptns::{PtnsFile, PtnsLevel, PtnsPayload, INVALID_CLASS};
use crate::{Error, Result};

/// Dense labels for every node of one grid.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelMap {
    /// Ground-truth class indices; [`INVALID_CLASS`] marks unlabeled nodes.
    Classes {
        /// Grid resolution.
        res: Vec<usize>,
        /// Number of classes; indices run `0..classes`.
        classes: usize,
        /// One index per node, row-major.
        idx: Vec<u8>,
    },
    /// Per-node class probabilities; an all-NaN row marks an invalid node.
    Categorical {
        /// Grid resolution.
        res: Vec<usize>,
        /// Number of classes (row width).
        classes: usize,
        /// Node-major probability rows.
        probs: Vec<f32>,
    },
    /// Per-node scalar values; NaN marks an invalid node.
    Scalar {
        /// Grid resolution.
        res: Vec<usize>,
        /// One value per node, row-major.
        values: Vec<f32>,
    },
}

/// Task family of a label map, without the payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelKind {
    /// Categorical labels over this many classes.
    Classes(usize),
    /// Scalar regression labels.
    Scalar,
}

impl LabelMap {
    /// Ground-truth map from class indices.
    pub fn classes(res: Vec<usize>, classes: usize, idx: Vec<u8>) -> Result<Self> {
        check_res(&res)?;
        if classes == 0 || classes >= usize::from(INVALID_CLASS) {
            return Err(Error::domain(format!(
                "class count must be 1..{INVALID_CLASS}, got {classes}"
            )));
        }
        let nodes: usize = res.iter().product();
        if idx.len() != nodes {
            return Err(Error::domain(format!(
                "label map has {} entries, expected {nodes}",
                idx.len()
            )));
        }
        if let Some(&bad) = idx
            .iter()
            .find(|&&c| c != INVALID_CLASS && usize::from(c) >= classes)
        {
            return Err(Error::domain(format!(
                "class index {bad} out of range for {classes} classes"
            )));
        }
        Ok(LabelMap::Classes { res, classes, idx })
    }

    /// Prediction map from probability rows; rows must be all-finite or
    /// all-NaN.
    pub fn categorical(res: Vec<usize>, classes: usize, probs: Vec<f32>) -> Result<Self> {
        check_res(&res)?;
        if classes == 0 {
            return Err(Error::domain("categorical map needs at least one class"));
        }
        let nodes: usize = res.iter().product();
        if probs.len() != nodes * classes {
            return Err(Error::domain(format!(
                "probability buffer has {} values, expected {}",
                probs.len(),
                nodes * classes
            )));
        }
        for row in probs.chunks_exact(classes) {
            let nans = row.iter().filter(|v| v.is_nan()).count();
            if nans != 0 && nans != classes {
                return Err(Error::domain(
                    "probability rows must be all-finite or all-NaN",
                ));
            }
        }
        Ok(LabelMap::Categorical { res, classes, probs })
    }

    /// Scalar map; NaN entries are invalid nodes.
    pub fn scalar(res: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        check_res(&res)?;
        let nodes: usize = res.iter().product();
        if values.len() != nodes {
            return Err(Error::domain(format!(
                "scalar map has {} values, expected {nodes}",
                values.len()
            )));
        }
        Ok(LabelMap::Scalar { res, values })
    }

    /// Grid resolution.
    pub fn res(&self) -> &[usize] {
        match self {
            LabelMap::Classes { res, .. }
            | LabelMap::Categorical { res, .. }
            | LabelMap::Scalar { res, .. } => res,
        }
    }

    /// Number of grid nodes.
    pub fn node_count(&self) -> usize {
        self.res().iter().product()
    }

    /// Task family of this map.
    pub fn kind(&self) -> LabelKind {
        match self {
            LabelMap::Classes { classes, .. } | LabelMap::Categorical { classes, .. } => {
                LabelKind::Classes(*classes)
            }
            LabelMap::Scalar { .. } => LabelKind::Scalar,
        }
    }

    /// Whether `node` carries a usable label.
    pub fn is_valid(&self, node: usize) -> bool {
        match self {
            LabelMap::Classes { idx, .. } => idx[node] != INVALID_CLASS,
            LabelMap::Categorical { classes, probs, .. } => {
                !probs[node * classes].is_nan()
            }
            LabelMap::Scalar { values, .. } => !values[node].is_nan(),
        }
    }

    /// Number of valid nodes.
    pub fn valid_count(&self) -> usize {
        (0..self.node_count()).filter(|&v| self.is_valid(v)).count()
    }

    /// Most likely class of `node`: the stored index, or the argmax of the
    /// probability row with ties resolved to the lowest class. `None` for
    /// invalid nodes and scalar maps.
    pub fn argmax_class(&self, node: usize) -> Option<u8> {
        match self {
            LabelMap::Classes { idx, .. } => {
                (idx[node] != INVALID_CLASS).then_some(idx[node])
            }
            LabelMap::Categorical { classes, probs, .. } => {
                let row = &probs[node * classes..(node + 1) * classes];
                if row[0].is_nan() {
                    return None;
                }
                let mut best = 0usize;
                for (c, &p) in row.iter().enumerate().skip(1) {
                    if p > row[best] {
                        best = c;
                    }
                }
                Some(best as u8)
            }
            LabelMap::Scalar { .. } => None,
        }
    }

    /// Scalar value of `node`, if this is a valid scalar node.
    pub fn scalar_value(&self, node: usize) -> Option<f32> {
        match self {
            LabelMap::Scalar { values, .. } => {
                (!values[node].is_nan()).then_some(values[node])
            }
            _ => None,
        }
    }

    /// Probability row of `node` for categorical maps.
    pub fn prob_row(&self, node: usize) -> Option<&[f32]> {
        match self {
            LabelMap::Categorical { classes, probs, .. } => {
                Some(&probs[node * classes..(node + 1) * classes])
            }
            _ => None,
        }
    }

    /// Rescales every valid categorical row back onto the simplex: negatives
    /// (floating-point dust) clamp to zero, then the row divides by its sum.
    /// A row summing to zero becomes invalid.
    pub fn renormalize_categorical(&mut self) {
        if let LabelMap::Categorical { classes, probs, .. } = self {
            for row in probs.chunks_exact_mut(*classes) {
                if row[0].is_nan() {
                    continue;
                }
                let mut sum = 0.0f64;
                for v in row.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                    sum += f64::from(*v);
                }
                if sum == 0.0 {
                    row.fill(f32::NAN);
                } else {
                    for v in row.iter_mut() {
                        *v = (f64::from(*v) / sum) as f32;
                    }
                }
            }
        }
    }

    /// Converts to the class-index layout by per-node argmax; scalar maps are
    /// rejected.
    pub fn to_classes(&self) -> Result<LabelMap> {
        match self {
            LabelMap::Classes { .. } => Ok(self.clone()),
            LabelMap::Categorical { res, classes, .. } => {
                let idx = (0..self.node_count())
                    .map(|v| self.argmax_class(v).unwrap_or(INVALID_CLASS))
                    .collect();
                LabelMap::classes(res.clone(), *classes, idx)
            }
            LabelMap::Scalar { .. } => {
                Err(Error::domain("scalar labels have no class layout"))
            }
        }
    }

    /// Serializes as a one-level tensor file.
    pub fn to_ptns(&self) -> PtnsFile {
        let res32 = self.res().iter().map(|&r| r as u32).collect::<Vec<_>>();
        let (channels, payload) = match self {
            LabelMap::Classes { classes, idx, .. } => {
                (*classes as u32, PtnsPayload::ClassU8(idx.clone()))
            }
            LabelMap::Categorical { classes, probs, .. } => {
                (*classes as u32, PtnsPayload::F32(probs.clone()))
            }
            LabelMap::Scalar { values, .. } => (1, PtnsPayload::F32(values.clone())),
        };
        PtnsFile {
            dim: self.res().len() as u8,
            levels: vec![PtnsLevel {
                res: res32,
                channels,
                retained: None,
                payload,
            }],
        }
    }

    /// Reads a one-level dense tensor file back as a label map: class
    /// payloads load as [`LabelMap::Classes`], one-channel f32 as
    /// [`LabelMap::Scalar`], multi-channel f32 as [`LabelMap::Categorical`].
    pub fn from_ptns(file: &PtnsFile) -> Result<Self> {
        if file.levels.len() != 1 {
            return Err(Error::domain(format!(
                "label file must hold one level, found {}",
                file.levels.len()
            )));
        }
        let level = &file.levels[0];
        if level.retained.is_some() && level.stored_count() != level.node_count() {
            return Err(Error::domain("label map must cover the full grid"));
        }
        let res: Vec<usize> = level.res.iter().map(|&r| r as usize).collect();
        match &level.payload {
            PtnsPayload::ClassU8(idx) => {
                Self::classes(res, level.channels as usize, idx.clone())
            }
            PtnsPayload::F32(values) if level.channels == 1 => {
                Self::scalar(res, values.clone())
            }
            PtnsPayload::F32(values) => {
                Self::categorical(res, level.channels as usize, values.clone())
            }
        }
    }
}

fn check_res(res: &[usize]) -> Result<()> {
    if res.is_empty() || res.len() > crate::grid::MAX_DIM || res.iter().any(|&r| r == 0) {
        return Err(Error::domain(format!("bad label grid {res:?}")));
    }
    Ok(())
}
