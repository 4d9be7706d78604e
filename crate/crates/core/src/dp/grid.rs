use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::Domain;

/// Tensor-product space grid on a box. Node `i_j` on axis `j` sits at
/// `lo_j (1 - s) + hi_j s` with `s = i_j / (n_j - 1)`; nodes are stored
/// row-major with the first axis slowest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceGrid {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub counts: Vec<usize>,
}

impl SpaceGrid {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, counts: Vec<usize>) -> Result<Self> {
        if lo.len() != hi.len() || lo.len() != counts.len() || lo.is_empty() {
            return Err(Error::InvalidArgument("grid lo, hi and counts must share a positive dimension".into()));
        }
        for j in 0..lo.len() {
            if !(lo[j].is_finite() && hi[j].is_finite() && hi[j] > lo[j]) || counts[j] < 3 {
                return Err(Error::InvalidArgument(format!(
                    "grid axis {} needs finite lo < hi and at least 3 nodes",
                    j + 1
                )));
            }
        }
        Ok(SpaceGrid { lo, hi, counts })
    }

    /// Box `[lo, hi]` holding `domain`, with unbounded sides cut at
    /// `±truncate`. The flag reports whether any side was cut.
    pub fn bounds(domain: &Domain, truncate: f64) -> (Vec<f64>, Vec<f64>, bool) {
        let d = domain.dim();
        let (mut lo, mut hi) = match domain {
            Domain::Box { lo, hi } => (lo.clone(), hi.clone()),
            _ => domain
                .bounding_box()
                .unwrap_or((vec![f64::NEG_INFINITY; d], vec![f64::INFINITY; d])),
        };
        let mut cut = false;
        for j in 0..d {
            cut |= !lo[j].is_finite() || !hi[j].is_finite();
            lo[j] = lo[j].max(-truncate);
            hi[j] = hi[j].min(truncate);
        }
        (lo, hi, cut)
    }

    /// Grid over [`SpaceGrid::bounds`] with spacing at most `dx`.
    pub fn covering(domain: &Domain, dx: f64, truncate: f64) -> Result<Self> {
        if !(dx > 0.0) {
            return Err(Error::InvalidArgument("grid spacing must be positive".into()));
        }
        let (lo, hi, _) = SpaceGrid::bounds(domain, truncate);
        let counts = lo
            .iter()
            .zip(&hi)
            .map(|(l, h)| ((h - l) / dx - 1e-9).ceil().max(2.0) as usize + 1)
            .collect();
        SpaceGrid::new(lo, hi, counts)
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.hi[axis] - self.lo[axis]) / (self.counts[axis] - 1) as f64
    }

    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        let s = i as f64 / (self.counts[axis] - 1) as f64;
        self.lo[axis] * (1.0 - s) + self.hi[axis] * s
    }

    /// Row-major stride of `axis`.
    pub fn stride(&self, axis: usize) -> usize {
        self.counts[axis + 1..].iter().product()
    }

    pub fn multi_index(&self, mut node: usize, out: &mut [usize]) {
        for j in (0..self.dim()).rev() {
            out[j] = node % self.counts[j];
            node /= self.counts[j];
        }
    }

    pub fn node_point(&self, node: usize, out: &mut [f64]) {
        let mut idx = vec![0; self.dim()];
        self.multi_index(node, &mut idx);
        for j in 0..self.dim() {
            out[j] = self.coord(j, idx[j]);
        }
    }

    /// True for nodes on the faces of the grid box.
    pub fn on_edge(&self, node: usize) -> bool {
        let mut idx = vec![0; self.dim()];
        self.multi_index(node, &mut idx);
        idx.iter().zip(&self.counts).any(|(&i, &n)| i == 0 || i == n - 1)
    }

    /// Fractional position of `x` along `axis`, snapped to the nearest node
    /// when within 1e-9 of it.
    pub fn position(&self, axis: usize, x: f64) -> f64 {
        let p = (x - self.lo[axis]) / self.spacing(axis);
        let r = p.round();
        if (p - r).abs() < 1e-9 {
            r
        } else {
            p
        }
    }

    /// Nearest node, clamping to the grid box.
    pub fn nearest(&self, x: &[f64]) -> usize {
        let mut node = 0;
        for j in 0..self.dim() {
            let i = self.position(j, x[j]).round().clamp(0.0, (self.counts[j] - 1) as f64) as usize;
            node = node * self.counts[j] + i;
        }
        node
    }

    pub fn contains_point(&self, x: &[f64]) -> bool {
        x.iter()
            .enumerate()
            .all(|(j, &v)| v >= self.lo[j] && v <= self.hi[j])
    }

    /// Interior flags: node strictly inside `domain` and off the grid box
    /// faces (face nodes carry the exterior value).
    pub fn inside_mask(&self, domain: &Domain) -> Vec<bool> {
        let mut x = vec![0.0; self.dim()];
        (0..self.n_nodes())
            .map(|node| {
                self.node_point(node, &mut x);
                !self.on_edge(node) && domain.contains(&x)
            })
            .collect()
    }

    /// Multilinear interpolation of nodal `values` at `x` (inside the box).
    pub fn interpolate(&self, values: &[f64], x: &[f64]) -> f64 {
        let d = self.dim();
        let mut base = 0;
        let mut weights = Vec::with_capacity(d);
        for j in 0..d {
            let p = self.position(j, x[j]);
            let i0 = (p.floor().max(0.0) as usize).min(self.counts[j] - 2);
            let w = (p - i0 as f64).clamp(0.0, 1.0);
            base += i0 * self.stride(j);
            weights.push(w);
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut node = base;
            for (j, &wj) in weights.iter().enumerate() {
                if corner >> (d - 1 - j) & 1 == 1 {
                    w *= wj;
                    node += self.stride(j);
                } else {
                    w *= 1.0 - wj;
                }
            }
            if w != 0.0 {
                acc += w * values[node];
            }
        }
        acc
    }
}
