//! Grid resampling primitives: pooling, interpolation, padding, cropping.
//!
//! All operations accumulate in f64 and emit f32. Interpolation uses
//! half-pixel-center alignment with edge clamping, so resampling to the same
//! resolution is the identity.

use crate::grid::{GridTensor, MAX_DIM};
use crate::{Error, Result};

fn coords_of(res: &[usize], idx: usize) -> [usize; MAX_DIM] {
    let mut c = [0; MAX_DIM];
    let mut rem = idx;
    for a in (0..res.len()).rev() {
        c[a] = rem % res[a];
        rem /= res[a];
    }
    c
}

fn index_of(res: &[usize], coords: &[usize; MAX_DIM]) -> usize {
    let mut idx = 0;
    for a in 0..res.len() {
        idx = idx * res[a] + coords[a];
    }
    idx
}

/// Average-pools every axis by 2, rounding the output size up; border
/// windows shrink to the nodes that exist.
pub fn avg_pool_halve(t: &GridTensor) -> GridTensor {
    let res = t.res();
    let out_res: Vec<usize> = res.iter().map(|&r| r.div_ceil(2)).collect();
    let channels = t.channels();
    let out_nodes: usize = out_res.iter().product();
    let mut out = vec![0.0f32; out_nodes * channels];
    let mut acc = vec![0.0f64; channels];
    for node in 0..out_nodes {
        let c = coords_of(&out_res, node);
        acc.fill(0.0);
        let mut members = 0usize;
        // Window product over [2c, 2c+1] clamped per axis.
        let mut lo = [0usize; MAX_DIM];
        let mut hi = [0usize; MAX_DIM];
        for a in 0..res.len() {
            lo[a] = 2 * c[a];
            hi[a] = (2 * c[a] + 1).min(res[a] - 1);
        }
        let mut cur = lo;
        'walk: loop {
            let src = t.node(index_of(res, &cur));
            for (s, v) in acc.iter_mut().zip(src) {
                *s += f64::from(*v);
            }
            members += 1;
            let mut a = res.len();
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
        let dst = &mut out[node * channels..(node + 1) * channels];
        for (d, s) in dst.iter_mut().zip(&acc) {
            *d = (*s / members as f64) as f32;
        }
    }
    GridTensor::new(out_res, channels, out).expect("pooled shape is valid")
}

/// Upsamples to `fine_res` by replicating each node over its structural
/// children; `t` must be the ceil-halving of `fine_res`.
pub fn nearest_upsample(t: &GridTensor, fine_res: &[usize]) -> Result<GridTensor> {
    if fine_res.len() != t.res().len()
        || !fine_res
            .iter()
            .zip(t.res())
            .all(|(&f, &c)| c == f.div_ceil(2))
    {
        return Err(Error::domain(format!(
            "nearest upsample needs a ceil-halving pair, got {:?} -> {fine_res:?}",
            t.res()
        )));
    }
    let channels = t.channels();
    let out_nodes: usize = fine_res.iter().product();
    let mut out = vec![0.0f32; out_nodes * channels];
    for node in 0..out_nodes {
        let mut c = coords_of(fine_res, node);
        for a in 0..fine_res.len() {
            c[a] /= 2;
        }
        let src = t.node(index_of(t.res(), &c));
        out[node * channels..(node + 1) * channels].copy_from_slice(src);
    }
    GridTensor::new(fine_res.to_vec(), channels, out)
}

/// Box-filters with the given radius per axis, windows clamped at borders.
/// Radius 0 is the identity.
pub fn box_filter(t: &GridTensor, radius: usize) -> GridTensor {
    if radius == 0 {
        return t.clone();
    }
    let res = t.res();
    let channels = t.channels();
    let nodes = t.node_count();
    let mut out = vec![0.0f32; nodes * channels];
    let mut acc = vec![0.0f64; channels];
    for node in 0..nodes {
        let c = coords_of(res, node);
        acc.fill(0.0);
        let mut members = 0usize;
        let mut lo = [0usize; MAX_DIM];
        let mut hi = [0usize; MAX_DIM];
        for a in 0..res.len() {
            lo[a] = c[a].saturating_sub(radius);
            hi[a] = (c[a] + radius).min(res[a] - 1);
        }
        let mut cur = lo;
        'walk: loop {
            let src = t.node(index_of(res, &cur));
            for (s, v) in acc.iter_mut().zip(src) {
                *s += f64::from(*v);
            }
            members += 1;
            let mut a = res.len();
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
        let dst = &mut out[node * channels..(node + 1) * channels];
        for (d, s) in dst.iter_mut().zip(&acc) {
            *d = (*s / members as f64) as f32;
        }
    }
    GridTensor::new(res.to_vec(), channels, out).expect("same shape")
}

/// Separable linear interpolation to `out_res` with half-pixel centers and
/// edge clamping. Same-size calls return a clone.
///
/// With `masked` set, NaN source nodes are excluded and the remaining corner
/// weights renormalized; a node whose whole support is NaN stays NaN. Use it
/// for label fields carrying in-band invalid markers.
pub fn linear_resample(t: &GridTensor, out_res: &[usize], masked: bool) -> Result<GridTensor> {
    let res = t.res();
    if out_res.len() != res.len() || out_res.iter().any(|&r| r == 0) {
        return Err(Error::domain(format!(
            "bad resample target {out_res:?} for source {res:?}"
        )));
    }
    if out_res == res {
        return Ok(t.clone());
    }
    let dim = res.len();
    let channels = t.channels();
    let out_nodes: usize = out_res.iter().product();
    let mut out = vec![0.0f32; out_nodes * channels];
    let mut acc = vec![0.0f64; channels];

    // Per-axis floor index and fractional weight of each output coordinate.
    let mut axis_lo: Vec<Vec<usize>> = Vec::with_capacity(dim);
    let mut axis_w: Vec<Vec<f64>> = Vec::with_capacity(dim);
    for a in 0..dim {
        let mut lo = Vec::with_capacity(out_res[a]);
        let mut w = Vec::with_capacity(out_res[a]);
        let scale = res[a] as f64 / out_res[a] as f64;
        for i in 0..out_res[a] {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (res[a] - 1) as f64);
            let f = src.floor();
            lo.push(f as usize);
            w.push(src - f);
        }
        axis_lo.push(lo);
        axis_w.push(w);
    }

    let ncorners = 1usize << dim;
    let mut ws = [0.0f64; 1 << MAX_DIM];
    let mut srcs = [0usize; 1 << MAX_DIM];
    for node in 0..out_nodes {
        let c = coords_of(out_res, node);
        for corner in 0..ncorners {
            let mut src = [0usize; MAX_DIM];
            let mut w = 1.0f64;
            for a in 0..dim {
                let frac = axis_w[a][c[a]];
                let lo = axis_lo[a][c[a]];
                if corner >> a & 1 == 1 {
                    w *= frac;
                    src[a] = (lo + 1).min(res[a] - 1);
                } else {
                    w *= 1.0 - frac;
                    src[a] = lo;
                }
            }
            ws[corner] = w;
            srcs[corner] = index_of(res, &src);
        }
        let nan_at = |i: usize| t.node(srcs[i]).iter().any(|v| v.is_nan());
        let dst = &mut out[node * channels..(node + 1) * channels];
        if masked && (0..ncorners).any(|i| ws[i] != 0.0 && nan_at(i)) {
            // Mixed-validity support: renormalize over the valid corners; a
            // fully invalid support stays invalid.
            acc.fill(0.0);
            let mut weight_sum = 0.0f64;
            for i in 0..ncorners {
                if ws[i] == 0.0 || nan_at(i) {
                    continue;
                }
                weight_sum += ws[i];
                for (s, v) in acc.iter_mut().zip(t.node(srcs[i])) {
                    *s += ws[i] * f64::from(*v);
                }
            }
            if weight_sum == 0.0 {
                dst.fill(f32::NAN);
            } else {
                for (d, s) in dst.iter_mut().zip(&acc) {
                    *d = (*s / weight_sum) as f32;
                }
            }
        } else {
            // Anchor-relative accumulation: a node whose corners all carry
            // the same value comes through bit-exact, so resampling a
            // constant grid is the identity.
            let base = t.node(srcs[0]);
            acc.fill(0.0);
            for i in 1..ncorners {
                if ws[i] == 0.0 {
                    continue;
                }
                for ((s, v), b) in acc.iter_mut().zip(t.node(srcs[i])).zip(base) {
                    *s += ws[i] * (f64::from(*v) - f64::from(*b));
                }
            }
            for ((d, s), b) in dst.iter_mut().zip(&acc).zip(base) {
                *d = (f64::from(*b) + *s) as f32;
            }
        }
    }
    GridTensor::new(out_res.to_vec(), channels, out)
}

/// Pads to `out_res` with the content centered and borders mirror-reflected
/// (no edge repetition); singleton axes replicate.
pub fn reflect_pad_to(t: &GridTensor, out_res: &[usize]) -> Result<GridTensor> {
    let res = t.res();
    if out_res.len() != res.len() || out_res.iter().zip(res).any(|(&o, &r)| o < r) {
        return Err(Error::domain(format!(
            "pad target {out_res:?} smaller than source {res:?}"
        )));
    }
    let channels = t.channels();
    let pad_lo: Vec<isize> = out_res
        .iter()
        .zip(res)
        .map(|(&o, &r)| ((o - r) / 2) as isize)
        .collect();
    let out_nodes: usize = out_res.iter().product();
    let mut out = vec![0.0f32; out_nodes * channels];
    for node in 0..out_nodes {
        let c = coords_of(out_res, node);
        let mut src = [0usize; MAX_DIM];
        for a in 0..res.len() {
            let mut x = c[a] as isize - pad_lo[a];
            let r = res[a] as isize;
            if r == 1 {
                x = 0;
            } else {
                // Mirror without repeating the edge sample, period 2r-2.
                loop {
                    if x < 0 {
                        x = -x;
                    } else if x >= r {
                        x = 2 * r - 2 - x;
                    } else {
                        break;
                    }
                }
            }
            src[a] = x as usize;
        }
        out[node * channels..(node + 1) * channels]
            .copy_from_slice(t.node(index_of(res, &src)));
    }
    GridTensor::new(out_res.to_vec(), channels, out)
}

/// Crops the centered block of size `out_res`.
pub fn center_crop(t: &GridTensor, out_res: &[usize]) -> Result<GridTensor> {
    let res = t.res();
    if out_res.len() != res.len() || out_res.iter().zip(res).any(|(&o, &r)| o > r) {
        return Err(Error::domain(format!(
            "crop target {out_res:?} larger than source {res:?}"
        )));
    }
    let channels = t.channels();
    let off: Vec<usize> = res.iter().zip(out_res).map(|(&r, &o)| (r - o) / 2).collect();
    let out_nodes: usize = out_res.iter().product();
    let mut out = vec![0.0f32; out_nodes * channels];
    for node in 0..out_nodes {
        let mut c = coords_of(out_res, node);
        for a in 0..res.len() {
            c[a] += off[a];
        }
        out[node * channels..(node + 1) * channels]
            .copy_from_slice(t.node(index_of(res, &c)));
    }
    GridTensor::new(out_res.to_vec(), channels, out)
}
