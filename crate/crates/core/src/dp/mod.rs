//! Grid value function by the explicit upwind Markov-chain recursion
//!
//! `v_k(x) = max_{u ∈ U_n} [ f(t_k,x,u) Δt + Σ_y p(x,y|u) v_{k+1}(y) ]`
//!
//! with `v_N = 0` and `v = 0` at nodes outside `G` or on the grid box faces.
//! Transition weights on axis `j` are
//! `p_± = Δt (a_jj / (2Δx_j²) + b_j^± / Δx_j)` with `a = σσᵀ` and the centre
//! weight takes the remainder, so the scheme is monotone and consistent
//! under the CFL bound `Δt (Σ a_jj/Δx_j² + Σ |b_j|/Δx_j) ≤ 1`.

mod grid;
pub mod io;

use std::sync::Arc;

use rayon::prelude::*;

pub use grid::SpaceGrid;

use crate::error::{Error, Result};
use crate::paths::TimeMesh;
use crate::policy::{ControlPolicy, FeedbackTable};
use crate::problem::{Domain, ProblemSpec};

/// Node count above which the per-step sweep runs in parallel.
const PARALLEL_NODES: usize = 4096;
/// Relative off-diagonal mass of `σσᵀ` tolerated as numerical noise.
const ANISOTROPY_TOL: f64 = 1e-12;

/// Transition weights of one node under one control.
#[derive(Debug, Clone, PartialEq)]
pub struct Stencil {
    /// `f Δt`.
    pub reward: f64,
    pub center: f64,
    pub plus: Vec<f64>,
    pub minus: Vec<f64>,
    /// `Δt · rate`; at most 1 for a valid stencil.
    pub cfl: f64,
}

impl Stencil {
    pub fn weight_sum(&self) -> f64 {
        self.center + self.plus.iter().sum::<f64>() + self.minus.iter().sum::<f64>()
    }
}

/// Builds the stencil at `(t, x, u)`; fails on CFL violation or a
/// non-diagonal diffusion matrix.
pub fn stencil_weights(spec: &ProblemSpec, space: &SpaceGrid, t: f64, x: &[f64], u: &[f64], dt: f64) -> Result<Stencil> {
    let d = spec.state_dim();
    let mut b = vec![0.0; d];
    let mut sigma = vec![0.0; d * d];
    spec.coefficients.drift_into(t, x, u, &mut b)?;
    spec.coefficients.diffusion_into(t, x, u, &mut sigma)?;
    let reward = spec.coefficients.reward(t, x, u)? * dt;
    let mut diag = vec![0.0; d];
    let mut off = 0.0;
    for i in 0..d {
        for j in 0..d {
            let a: f64 = (0..d).map(|l| sigma[i * d + l] * sigma[j * d + l]).sum();
            if i == j {
                diag[i] = a;
            } else {
                off += a.abs();
            }
        }
    }
    let diag_sum: f64 = diag.iter().sum();
    if off > ANISOTROPY_TOL * diag_sum.max(f64::MIN_POSITIVE) {
        return Err(Error::Anisotropic {
            x: x.to_vec(),
            u: u.to_vec(),
            ratio: if diag_sum > 0.0 { off / diag_sum } else { f64::INFINITY },
        });
    }
    let mut plus = vec![0.0; d];
    let mut minus = vec![0.0; d];
    let mut rate = 0.0;
    for j in 0..d {
        let h = space.spacing(j);
        let diffusion = diag[j] / (2.0 * h * h);
        plus[j] = dt * (diffusion + b[j].max(0.0) / h);
        minus[j] = dt * (diffusion + (-b[j]).max(0.0) / h);
        rate += diag[j] / (h * h) + b[j].abs() / h;
    }
    let cfl = dt * rate;
    if cfl > 1.0 + 1e-12 {
        return Err(Error::Cfl {
            x: x.to_vec(),
            u: u.to_vec(),
            rate,
            dt,
            max_dt: 1.0 / rate,
        });
    }
    let center = (1.0 - plus.iter().sum::<f64>() - minus.iter().sum::<f64>()).max(0.0);
    Ok(Stencil {
        reward,
        center,
        plus,
        minus,
        cfl,
    })
}

/// Bookkeeping stored with a solved grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMeta {
    pub spec_hash: String,
    pub level: usize,
    pub horizon: f64,
    pub n_steps: usize,
    pub save_every: usize,
    /// Largest `Δt · rate` met during the solve.
    pub cfl_max: f64,
    /// Smallest transition weight met during the solve.
    pub min_weight: f64,
}

impl GridMeta {
    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }
}

/// Value function on saved time slices of a space grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueGrid {
    pub space: SpaceGrid,
    pub domain: Domain,
    /// Saved slice times, ascending; the last one is `T`.
    pub times: Vec<f64>,
    /// `values[slice * n_nodes + node]`.
    pub values: Vec<f64>,
    /// Index into `controls` of the maximising control per slice and node.
    pub argmax: Option<Vec<u32>>,
    /// Control mesh of the level the grid was solved on.
    pub controls: Vec<Vec<f64>>,
    pub meta: GridMeta,
}

/// Options for [`solve`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub n_steps: usize,
    /// Keep every `save_every`-th time slice (plus `T`).
    pub save_every: usize,
    pub keep_argmax: bool,
}

/// Largest step count `N` such that `T/N` meets the CFL bound with margin
/// `safety`, sampling the coefficients at every node, control and 17 times.
pub fn cfl_limited_steps(spec: &ProblemSpec, space: &SpaceGrid, level: usize, safety: f64) -> Result<usize> {
    let controls = spec.control_space.level(level)?.mesh_points();
    let inside = space.inside_mask(&spec.domain);
    let d = spec.state_dim();
    let times: Vec<f64> = if spec.coefficients.time_dependent() {
        (0..=16).map(|i| spec.horizon * i as f64 / 16.0).collect()
    } else {
        vec![0.0]
    };
    let mut x = vec![0.0; d];
    let mut b = vec![0.0; d];
    let mut sigma = vec![0.0; d * d];
    let mut rate_max: f64 = 0.0;
    for node in (0..space.n_nodes()).filter(|&n| inside[n]) {
        space.node_point(node, &mut x);
        for u in &controls {
            for &t in &times {
                spec.coefficients.drift_into(t, &x, u, &mut b)?;
                spec.coefficients.diffusion_into(t, &x, u, &mut sigma)?;
                let mut rate = 0.0;
                for j in 0..d {
                    let h = space.spacing(j);
                    let a: f64 = (0..d).map(|l| sigma[j * d + l] * sigma[j * d + l]).sum();
                    rate += a / (h * h) + b[j].abs() / h;
                }
                rate_max = rate_max.max(rate);
            }
        }
    }
    if rate_max == 0.0 {
        return Ok(1);
    }
    Ok((spec.horizon * rate_max / safety).ceil().max(1.0) as usize)
}

struct Sweep<'a> {
    spec: &'a ProblemSpec,
    space: &'a SpaceGrid,
    controls: &'a [Vec<f64>],
    nodes: Vec<usize>,
    points: Vec<Vec<f64>>,
    strides: Vec<usize>,
    dt: f64,
    /// Flat `[reward, center, plus.., minus..]` per (node slot, control)
    /// when the coefficients do not depend on time.
    cached: Option<Vec<f64>>,
}

impl Sweep<'_> {
    fn width(&self) -> usize {
        2 + 2 * self.space.dim()
    }

    fn pack(st: &Stencil, out: &mut Vec<f64>) {
        out.push(st.reward);
        out.push(st.center);
        out.extend_from_slice(&st.plus);
        out.extend_from_slice(&st.minus);
    }

    fn stencils_at(&self, t: f64, stats: &mut (f64, f64)) -> Result<Vec<f64>> {
        let per_node: Vec<(Vec<f64>, f64, f64)> = self
            .points
            .par_iter()
            .map(|x| -> Result<(Vec<f64>, f64, f64)> {
                let mut flat = Vec::with_capacity(self.controls.len() * self.width());
                let (mut cfl, mut wmin) = (0.0f64, f64::INFINITY);
                for u in self.controls {
                    let st = stencil_weights(self.spec, self.space, t, x, u, self.dt)?;
                    cfl = cfl.max(st.cfl);
                    wmin = st
                        .plus
                        .iter()
                        .chain(&st.minus)
                        .fold(wmin.min(st.center), |a, &b| a.min(b));
                    Self::pack(&st, &mut flat);
                }
                Ok((flat, cfl, wmin))
            })
            .collect::<Result<_>>()?;
        let mut flat = Vec::with_capacity(self.nodes.len() * self.controls.len() * self.width());
        for (f, cfl, wmin) in per_node {
            flat.extend(f);
            stats.0 = stats.0.max(cfl);
            stats.1 = stats.1.min(wmin);
        }
        Ok(flat)
    }

    /// One backward step at node slot `slot` given the next slice.
    fn node_update(&self, stencils: &[f64], slot: usize, next: &[f64]) -> (f64, u32) {
        let d = self.space.dim();
        let w = self.width();
        let node = self.nodes[slot];
        let mut best = f64::NEG_INFINITY;
        let mut arg = 0u32;
        for c in 0..self.controls.len() {
            let s = &stencils[(slot * self.controls.len() + c) * w..][..w];
            let mut acc = s[1] * next[node];
            for j in 0..d {
                acc += s[2 + j] * next[node + self.strides[j]] + s[2 + d + j] * next[node - self.strides[j]];
            }
            let value = s[0] + acc;
            if value > best {
                best = value;
                arg = c as u32;
            }
        }
        (best, arg)
    }
}

/// Solves the grid recursion from `v(T) = 0` back to `t = 0` for the
/// control mesh of `level`.
pub fn solve(spec: &ProblemSpec, space: &SpaceGrid, level: usize, opts: SolveOptions) -> Result<ValueGrid> {
    let d = spec.state_dim();
    if space.dim() != d {
        return Err(Error::InvalidArgument(format!(
            "grid dimension {} does not match state dimension {d}",
            space.dim()
        )));
    }
    if opts.n_steps == 0 || opts.save_every == 0 {
        return Err(Error::InvalidArgument("n_steps and save_every must be positive".into()));
    }
    let controls = spec.control_space.level(level)?.mesh_points();
    let mesh = TimeMesh::new(0.0, spec.horizon, opts.n_steps)?;
    let inside = space.inside_mask(&spec.domain);
    let nodes: Vec<usize> = (0..space.n_nodes()).filter(|&n| inside[n]).collect();
    let points: Vec<Vec<f64>> = nodes
        .iter()
        .map(|&n| {
            let mut x = vec![0.0; d];
            space.node_point(n, &mut x);
            x
        })
        .collect();
    let mut sweep = Sweep {
        spec,
        space,
        controls: &controls,
        nodes,
        points,
        strides: (0..d).map(|j| space.stride(j)).collect(),
        dt: mesh.dt(),
        cached: None,
    };
    let mut stats = (0.0f64, f64::INFINITY);
    if !spec.coefficients.time_dependent() {
        sweep.cached = Some(sweep.stencils_at(0.0, &mut stats)?);
    }

    let n_nodes = space.n_nodes();
    let n = opts.n_steps;
    let mut next = vec![0.0; n_nodes];
    let mut current = vec![0.0; n_nodes];
    let mut arg_step = vec![0u32; n_nodes];
    let mut saved: Vec<(f64, Vec<f64>, Vec<u32>)> = vec![(mesh.time(n), next.clone(), Vec::new())];
    for k in (0..n).rev() {
        let t = mesh.time(k);
        let fresh;
        let stencils = match &sweep.cached {
            Some(s) => s,
            None => {
                fresh = sweep.stencils_at(t, &mut stats)?;
                &fresh
            }
        };
        let updates: Vec<(f64, u32)> = if sweep.nodes.len() >= PARALLEL_NODES {
            (0..sweep.nodes.len())
                .into_par_iter()
                .map(|slot| sweep.node_update(stencils, slot, &next))
                .collect()
        } else {
            (0..sweep.nodes.len())
                .map(|slot| sweep.node_update(stencils, slot, &next))
                .collect()
        };
        for (slot, (v, a)) in updates.into_iter().enumerate() {
            let node = sweep.nodes[slot];
            current[node] = v;
            arg_step[node] = a;
        }
        if k == n - 1 && opts.keep_argmax {
            saved[0].2 = arg_step.clone();
        }
        if k % opts.save_every == 0 {
            let arg = if opts.keep_argmax { arg_step.clone() } else { Vec::new() };
            saved.push((t, current.clone(), arg));
        }
        std::mem::swap(&mut next, &mut current);
    }
    saved.reverse();
    let times = saved.iter().map(|s| s.0).collect();
    let mut values = Vec::with_capacity(saved.len() * n_nodes);
    let mut argmax = Vec::new();
    for (_, v, a) in saved {
        values.extend(v);
        argmax.extend(a);
    }
    Ok(ValueGrid {
        space: space.clone(),
        domain: spec.domain.clone(),
        times,
        values,
        argmax: opts.keep_argmax.then_some(argmax),
        controls,
        meta: GridMeta {
            spec_hash: spec.hash(),
            level,
            horizon: spec.horizon,
            n_steps: n,
            save_every: opts.save_every,
            cfl_max: stats.0,
            min_weight: stats.1,
        },
    })
}

impl ValueGrid {
    pub fn n_slices(&self) -> usize {
        self.times.len()
    }

    pub fn slice(&self, s: usize) -> &[f64] {
        let n = self.space.n_nodes();
        &self.values[s * n..(s + 1) * n]
    }

    /// `v(t, x)`: linear in time between the bracketing slices, multilinear
    /// in space; zero outside `G` or the grid box, clamped at zero.
    pub fn evaluate(&self, t: f64, x: &[f64]) -> f64 {
        if !self.space.contains_point(x) || !self.domain.contains(x) {
            return 0.0;
        }
        let last = self.times.len() - 1;
        let tol = 1e-9 * self.meta.dt();
        let s = self.times.partition_point(|&s| s <= t + tol);
        let value = if s == 0 {
            self.space.interpolate(self.slice(0), x)
        } else if s > last {
            self.space.interpolate(self.slice(last), x)
        } else {
            let (t0, t1) = (self.times[s - 1], self.times[s]);
            let lam = (t - t0) / (t1 - t0);
            let v0 = self.space.interpolate(self.slice(s - 1), x);
            if lam.abs() <= 1e-9 {
                v0
            } else {
                (1.0 - lam) * v0 + lam * self.space.interpolate(self.slice(s), x)
            }
        };
        value.max(0.0)
    }

    /// Mesh-time index of slice `s`.
    pub fn slice_step(&self, s: usize) -> usize {
        (s * self.meta.save_every).min(self.meta.n_steps)
    }

    /// `(t, x)` coordinates and value of every stored node.
    pub fn sample_points(&self) -> (Vec<Vec<f64>>, Vec<f64>) {
        let d = self.space.dim();
        let mut pts = Vec::with_capacity(self.values.len());
        let mut x = vec![0.0; d];
        for &t in &self.times {
            for node in 0..self.space.n_nodes() {
                self.space.node_point(node, &mut x);
                let mut p = Vec::with_capacity(d + 1);
                p.push(t);
                p.extend_from_slice(&x);
                pts.push(p);
            }
        }
        (pts, self.values.clone())
    }

    /// Largest difference between axis-adjacent stored values (in time or
    /// space).
    pub fn neighbour_modulus(&self) -> f64 {
        let n = self.space.n_nodes();
        let d = self.space.dim();
        let mut idx = vec![0; d];
        let mut best: f64 = 0.0;
        for s in 0..self.n_slices() {
            let v = self.slice(s);
            for node in 0..n {
                self.space.multi_index(node, &mut idx);
                for j in 0..d {
                    if idx[j] + 1 < self.space.counts[j] {
                        best = best.max((v[node + self.space.stride(j)] - v[node]).abs());
                    }
                }
                if s + 1 < self.n_slices() {
                    best = best.max((self.slice(s + 1)[node] - v[node]).abs());
                }
            }
        }
        best
    }

    /// Checks nonnegativity, finiteness, the zero terminal slice and zero
    /// exterior values; returns the problems found.
    pub fn check_invariants(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if let Some(i) = self.values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            problems.push(format!("value {} at flat index {i}", self.values[i]));
        }
        if self.slice(self.n_slices() - 1).iter().any(|&v| v != 0.0) {
            problems.push("terminal slice not zero".into());
        }
        let inside = self.space.inside_mask(&self.domain);
        for s in 0..self.n_slices() {
            if let Some(node) = (0..self.space.n_nodes()).find(|&n| !inside[n] && self.slice(s)[n] != 0.0) {
                problems.push(format!("exterior node {node} nonzero in slice {s}"));
                break;
            }
        }
        problems
    }

    /// Nearest-node lookup policy built from the stored maximisers.
    pub fn extract_policy(&self) -> Result<ControlPolicy> {
        let argmax = self
            .argmax
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("grid was solved without argmax".into()))?;
        let m = self.controls.first().map_or(0, Vec::len);
        let mut controls = Vec::with_capacity(argmax.len() * m);
        for &a in argmax {
            controls.extend_from_slice(&self.controls[a as usize]);
        }
        Ok(ControlPolicy::Table(Arc::new(FeedbackTable {
            space: self.space.clone(),
            slice_times: self.times.clone(),
            controls,
            control_dim: m,
        })))
    }
}
