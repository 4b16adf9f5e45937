//! Resolution schedules, node indexing, and inter-level connectivity.
//!
//! A pyramid over a `dim`-dimensional grid (`dim` in 1..=3) has levels
//! numbered 1 (finest) through `n` (coarsest). Nodes on a level are stored
//! row-major with the last axis fastest, so a node is addressed either by its
//! per-axis coordinates or by a single linear index.
//!
//! Two kernels connect a level to the one below:
//!
//! * the *structural* kernel assigns every node at level `l` the block of up
//!   to `2^dim` level-`(l-1)` nodes it was pooled from (per axis
//!   `[2c, 2c+1]`, clamped to the grid);
//! * the *search window* widens that block by one node on each side (per
//!   axis `[2c-1, 2c+2]`, clamped), giving up to `4^dim` candidates. The
//!   widened window lets a descent recover from a parent choice that is off
//!   by one node.
//!
//! Both kernels require the canonical ceil-halving relation between the two
//! levels; schedules with other level shapes can be stored and completed but
//! not searched.

use crate::{Error, Result};

/// Maximum number of grid axes.
pub const MAX_DIM: usize = 3;

/// Per-axis coordinates, padded with zeros above `dim`.
pub type Coords = [usize; MAX_DIM];

/// Structural parent of a node, one level up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parent {
    /// The node sits on the coarsest level; its parent is the virtual root
    /// whose children are all coarsest-level nodes.
    Root,
    /// Linear index of the parent node on the level above.
    Node(usize),
}

/// Per-level grid resolutions of one pyramid, finest first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolutionSchedule {
    dim: usize,
    /// `levels[l - 1]` holds the per-axis sizes of level `l`; axes at or
    /// above `dim` are 1.
    levels: Vec<Coords>,
}

impl ResolutionSchedule {
    /// Builds a schedule from explicit per-level resolutions, finest first.
    ///
    /// Every level must have `dim` axes, all nonzero. Arbitrary shapes are
    /// accepted; only ceil-halving pairs support the connectivity kernels.
    pub fn new(dim: usize, levels: &[Vec<usize>]) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::domain(format!(
                "grid dimension must be 1..={MAX_DIM}, got {dim}"
            )));
        }
        if levels.is_empty() {
            return Err(Error::domain("schedule needs at least one level"));
        }
        let mut padded = Vec::with_capacity(levels.len());
        for (i, level) in levels.iter().enumerate() {
            if level.len() != dim {
                return Err(Error::domain(format!(
                    "level {} has {} axes, expected {dim}",
                    i + 1,
                    level.len()
                )));
            }
            if level.iter().any(|&r| r == 0) {
                return Err(Error::domain(format!("level {} has a zero axis", i + 1)));
            }
            let mut c: Coords = [1; MAX_DIM];
            c[..dim].copy_from_slice(level);
            padded.push(c);
        }
        Ok(Self {
            dim,
            levels: padded,
        })
    }

    /// Builds the canonical schedule: level 1 is `finest`, and each coarser
    /// level halves every axis, rounding up, for `n_levels` levels in total.
    pub fn canonical(dim: usize, finest: &[usize], n_levels: usize) -> Result<Self> {
        if n_levels == 0 {
            return Err(Error::domain("schedule needs at least one level"));
        }
        if finest.len() != dim {
            return Err(Error::domain(format!(
                "finest level has {} axes, expected {dim}",
                finest.len()
            )));
        }
        let mut levels = Vec::with_capacity(n_levels);
        let mut cur = finest.to_vec();
        for _ in 0..n_levels {
            levels.push(cur.clone());
            for r in &mut cur {
                *r = r.div_ceil(2);
            }
        }
        Self::new(dim, &levels)
    }

    /// Number of grid axes.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of levels; levels are numbered `1..=num_levels()`.
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Per-axis sizes of `level` (1-based), `dim` entries.
    pub fn res(&self, level: usize) -> &[usize] {
        &self.levels[level - 1][..self.dim]
    }

    fn res_padded(&self, level: usize) -> Coords {
        self.levels[level - 1]
    }

    /// Number of nodes on `level`.
    pub fn node_count(&self, level: usize) -> usize {
        self.levels[level - 1].iter().product()
    }

    /// Whether every adjacent level pair is related by per-axis ceil-halving.
    pub fn is_canonical(&self) -> bool {
        (1..self.levels.len()).all(|i| self.is_halving_pair(i + 1))
    }

    /// Whether `coarse_level` is the ceil-halving of the level below it.
    fn is_halving_pair(&self, coarse_level: usize) -> bool {
        let fine = self.levels[coarse_level - 2];
        let coarse = self.levels[coarse_level - 1];
        (0..self.dim).all(|a| coarse[a] == fine[a].div_ceil(2))
    }

    fn require_halving_pair(&self, coarse_level: usize) -> Result<()> {
        if coarse_level < 2 || coarse_level > self.num_levels() {
            return Err(Error::domain(format!(
                "level {coarse_level} has no level below it"
            )));
        }
        if !self.is_halving_pair(coarse_level) {
            return Err(Error::domain(format!(
                "levels {} and {coarse_level} are not ceil-halving related",
                coarse_level - 1
            )));
        }
        Ok(())
    }

    /// Converts a linear node index on `level` to per-axis coordinates.
    pub fn coords_of(&self, level: usize, node: usize) -> Coords {
        let res = self.res_padded(level);
        let mut coords: Coords = [0; MAX_DIM];
        let mut rem = node;
        for a in (0..self.dim).rev() {
            coords[a] = rem % res[a];
            rem /= res[a];
        }
        coords
    }

    /// Converts per-axis coordinates on `level` to a linear node index.
    pub fn index_of(&self, level: usize, coords: Coords) -> usize {
        let res = self.res_padded(level);
        let mut idx = 0;
        for a in 0..self.dim {
            idx = idx * res[a] + coords[a];
        }
        idx
    }

    /// Structural parent of `node` at `level`: per-axis coordinate halving,
    /// or [`Parent::Root`] on the coarsest level.
    pub fn parent_index(&self, level: usize, node: usize) -> Result<Parent> {
        if level == self.num_levels() {
            return Ok(Parent::Root);
        }
        self.require_halving_pair(level + 1)?;
        let coords = self.coords_of(level, node);
        let mut up: Coords = [0; MAX_DIM];
        for a in 0..self.dim {
            up[a] = coords[a] / 2;
        }
        Ok(Parent::Node(self.index_of(level + 1, up)))
    }

    /// Appends the structural children of `node` at `level` to `out`, as
    /// ascending linear indices one level below. At level 1 the node is its
    /// own single leaf child.
    pub fn structural_children(&self, level: usize, node: usize, out: &mut Vec<usize>) -> Result<()> {
        if level == 1 {
            out.push(node);
            return Ok(());
        }
        self.require_halving_pair(level)?;
        self.window(level, node, 0, 1, out);
        Ok(())
    }

    /// Appends the search-window children of `node` at `level` to `out`, as
    /// ascending linear indices one level below: the structural block widened
    /// by one node per side, clamped to the grid. At level 1 the node is its
    /// own single leaf child.
    pub fn children_window(&self, level: usize, node: usize, out: &mut Vec<usize>) -> Result<()> {
        if level == 1 {
            out.push(node);
            return Ok(());
        }
        self.require_halving_pair(level)?;
        self.window(level, node, 1, 2, out);
        Ok(())
    }

    /// Appends per-axis `[2c - lo, 2c + hi]` on the level below `level`,
    /// clamped to the grid, in ascending linear order.
    fn window(&self, level: usize, node: usize, lo: usize, hi: usize, out: &mut Vec<usize>) {
        let coords = self.coords_of(level, node);
        let res = self.res_padded(level - 1);
        let mut start: Coords = [0; MAX_DIM];
        let mut end: Coords = [0; MAX_DIM]; // inclusive
        for a in 0..MAX_DIM {
            if a < self.dim {
                start[a] = (2 * coords[a]).saturating_sub(lo);
                end[a] = (2 * coords[a] + hi).min(res[a] - 1);
            } else {
                start[a] = 0;
                end[a] = 0;
            }
        }
        let mut cur = start;
        loop {
            let mut idx = 0;
            for a in 0..self.dim {
                idx = idx * res[a] + cur[a];
            }
            out.push(idx);
            // Odometer increment, last axis fastest, keeps output ascending.
            let mut a = self.dim;
            loop {
                if a == 0 {
                    return;
                }
                a -= 1;
                if cur[a] < end[a] {
                    cur[a] += 1;
                    break;
                }
                cur[a] = start[a];
            }
        }
    }

    /// Total node count across all levels.
    pub fn total_nodes(&self) -> usize {
        (1..=self.num_levels()).map(|l| self.node_count(l)).sum()
    }
}

/// Dense per-node feature storage on a single grid level.
///
/// Data is node-major: all channels of node 0, then node 1, and so on, with
/// nodes in row-major order (last axis fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct GridTensor {
    res: Vec<usize>,
    channels: usize,
    data: Vec<f32>,
}

impl GridTensor {
    /// Wraps existing node-major data; `data.len()` must equal
    /// `node count * channels`.
    pub fn new(res: Vec<usize>, channels: usize, data: Vec<f32>) -> Result<Self> {
        if res.is_empty() || res.len() > MAX_DIM {
            return Err(Error::domain(format!(
                "tensor rank must be 1..={MAX_DIM}, got {}",
                res.len()
            )));
        }
        if res.iter().any(|&r| r == 0) || channels == 0 {
            return Err(Error::domain("tensor axes and channels must be nonzero"));
        }
        let nodes: usize = res.iter().product();
        let expected = nodes
            .checked_mul(channels)
            .ok_or_else(|| Error::domain("tensor size overflows usize"))?;
        if data.len() != expected {
            return Err(Error::domain(format!(
                "tensor data has {} values, expected {expected}",
                data.len()
            )));
        }
        Ok(Self {
            res,
            channels,
            data,
        })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(res: Vec<usize>, channels: usize) -> Result<Self> {
        let nodes: usize = res.iter().product();
        let len = nodes
            .checked_mul(channels)
            .ok_or_else(|| Error::domain("tensor size overflows usize"))?;
        Self::new(res, channels, vec![0.0; len])
    }

    /// Per-axis sizes.
    pub fn res(&self) -> &[usize] {
        &self.res
    }

    /// Channels per node.
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of grid nodes.
    pub fn node_count(&self) -> usize {
        self.res.iter().product()
    }

    /// Channel values of one node.
    pub fn node(&self, node: usize) -> &[f32] {
        &self.data[node * self.channels..(node + 1) * self.channels]
    }

    /// Mutable channel values of one node.
    pub fn node_mut(&mut self, node: usize) -> &mut [f32] {
        &mut self.data[node * self.channels..(node + 1) * self.channels]
    }

    /// Whole backing buffer, node-major.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable backing buffer, node-major.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Consumes the tensor, returning the backing buffer.
    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}
