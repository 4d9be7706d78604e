//! Euler–Maruyama simulation on a discrete canonical path space,
//! concatenation of driving paths, the discrete flow property and the
//! moment-scaling test of the strong solution in its starting point.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::policy::{check_policy_dims, shift_policy, ControlPolicy, StepContext};
use crate::problem::{norm_diff, ControlLevel, Domain, ProblemSpec};
use crate::rng::IncrementStream;

/// Uniform mesh `t_k = t0 + k (T - t0) / n_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeMesh {
    pub t0: f64,
    pub t_end: f64,
    pub n_steps: usize,
}

impl TimeMesh {
    pub fn new(t0: f64, t_end: f64, n_steps: usize) -> Result<Self> {
        if !(t_end > t0) || n_steps == 0 {
            return Err(Error::InvalidArgument(format!(
                "time mesh needs t_end > t0 and n_steps > 0 (got [{t0}, {t_end}], {n_steps})"
            )));
        }
        Ok(TimeMesh { t0, t_end, n_steps })
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t0) / self.n_steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + (self.t_end - self.t0) * (k as f64 / self.n_steps as f64)
    }

    /// Mesh index of `t`, rounding down (a relative slack of 1e-9 steps
    /// absorbs representation error), clamped to `[0, n_steps]`.
    pub fn index_floor(&self, t: f64) -> usize {
        let s = (t - self.t0) / self.dt();
        if s <= 0.0 {
            0
        } else {
            ((s + 1e-9).floor() as usize).min(self.n_steps)
        }
    }
}

/// Anything that yields the Brownian increment of step `k`.
pub trait IncrementSource {
    fn increment(&mut self, k: usize, out: &mut [f64]);
}

impl IncrementSource for IncrementStream {
    fn increment(&mut self, k: usize, out: &mut [f64]) {
        IncrementStream::increment(self, k, out)
    }
}

/// Stored driving noise `ΔW_k`, `k = 0..n_steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianPath {
    pub mesh: TimeMesh,
    pub dim: usize,
    pub increments: Vec<f64>,
    pub seed: u64,
    pub path_index: u64,
}

impl BrownianPath {
    /// Generates the path keyed by `(seed, path_index)`.
    pub fn generate(mesh: TimeMesh, dim: usize, seed: u64, path_index: u64) -> Self {
        let mut stream = IncrementStream::new(seed, path_index, dim, mesh.dt());
        let mut increments = vec![0.0; mesh.n_steps * dim];
        for (k, chunk) in increments.chunks_mut(dim.max(1)).enumerate().take(mesh.n_steps) {
            stream.increment(k, &mut chunk[..dim]);
        }
        BrownianPath {
            mesh,
            dim,
            increments,
            seed,
            path_index,
        }
    }

    pub fn increment_at(&self, k: usize) -> &[f64] {
        &self.increments[k * self.dim..(k + 1) * self.dim]
    }

    /// `W_k = Σ_{j<k} ΔW_j` with `W_0 = 0`.
    pub fn trajectory(&self) -> Trajectory {
        let d = self.dim;
        let mut points = vec![0.0; (self.mesh.n_steps + 1) * d];
        for k in 0..self.mesh.n_steps {
            for j in 0..d {
                points[(k + 1) * d + j] = points[k * d + j] + self.increments[k * d + j];
            }
        }
        Trajectory {
            mesh: self.mesh,
            dim: d,
            points,
        }
    }
}

impl IncrementSource for &BrownianPath {
    fn increment(&mut self, k: usize, out: &mut [f64]) {
        out.copy_from_slice(self.increment_at(k));
    }
}

/// A path `ω` sampled on the mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub mesh: TimeMesh,
    pub dim: usize,
    pub points: Vec<f64>,
}

impl Trajectory {
    pub fn point(&self, k: usize) -> &[f64] {
        &self.points[k * self.dim..(k + 1) * self.dim]
    }

    /// Increments of the trajectory, keyed by `(seed, path_index)` for any
    /// downstream consumer that needs an RNG stream tied to this path.
    pub fn increments(&self, seed: u64, path_index: u64) -> BrownianPath {
        let d = self.dim;
        let n = self.mesh.n_steps;
        let mut increments = vec![0.0; n * d];
        for k in 0..n {
            for j in 0..d {
                increments[k * d + j] = self.points[(k + 1) * d + j] - self.points[k * d + j];
            }
        }
        BrownianPath {
            mesh: self.mesh,
            dim: d,
            increments,
            seed,
            path_index,
        }
    }
}

/// `(ω ⊗_θ ω')(u) = ω(u)` for `u ≤ t_θ` and `ω'(u) - ω'(t_θ) + ω(t_θ)` after.
pub fn concatenate(w: &Trajectory, w2: &Trajectory, theta_index: usize) -> Result<Trajectory> {
    if w.mesh != w2.mesh || w.dim != w2.dim {
        return Err(Error::InvalidArgument(
            "concatenated trajectories must share mesh and dimension".into(),
        ));
    }
    if theta_index > w.mesh.n_steps {
        return Err(Error::InvalidArgument(format!(
            "theta index {theta_index} beyond mesh of {} steps",
            w.mesh.n_steps
        )));
    }
    let d = w.dim;
    let mut points = w.points.clone();
    let anchor = w.point(theta_index);
    let offset = w2.point(theta_index);
    for k in theta_index + 1..=w.mesh.n_steps {
        for j in 0..d {
            points[k * d + j] = w2.points[k * d + j] - offset[j] + anchor[j];
        }
    }
    Ok(Trajectory {
        mesh: w.mesh,
        dim: d,
        points,
    })
}

/// A simulated state path. States before the start index are frozen at the
/// starting point. Paths may be truncated (e.g. at exit) in which case
/// `last_index() < n_steps`.
#[derive(Debug, Clone)]
pub struct SamplePath {
    mesh: TimeMesh,
    domain: Domain,
    start_index: usize,
    last_index: usize,
    dim: usize,
    control_dim: usize,
    states: Vec<f64>,
    controls: Vec<f64>,
    pub seed: u64,
    pub path_index: u64,
}

impl SamplePath {
    pub fn mesh(&self) -> &TimeMesh {
        &self.mesh
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn start_index(&self) -> usize {
        self.start_index
    }

    pub fn last_index(&self) -> usize {
        self.last_index
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    /// Control applied on `[t_k, t_{k+1})`; zeros before the start index.
    pub fn control(&self, k: usize) -> &[f64] {
        &self.controls[k * self.control_dim..(k + 1) * self.control_dim]
    }

    /// Builds a path directly from states (no dynamics); used for exit-time
    /// analysis of given trajectories.
    pub fn from_states(mesh: TimeMesh, domain: Domain, start_index: usize, dim: usize, states: Vec<f64>) -> Result<Self> {
        if !states.len().is_multiple_of(dim) || states.len() / dim == 0 || states.len() / dim > mesh.n_steps + 1 {
            return Err(Error::InvalidArgument("state buffer does not match mesh".into()));
        }
        let last_index = states.len() / dim - 1;
        if start_index > last_index {
            return Err(Error::InvalidArgument("start index past the end of the path".into()));
        }
        Ok(SamplePath {
            mesh,
            domain,
            start_index,
            last_index,
            dim,
            control_dim: 0,
            states,
            controls: Vec::new(),
            seed: 0,
            path_index: 0,
        })
    }

    /// Returns a copy with every state shifted by `delta(k)`.
    pub fn perturbed(&self, mut delta: impl FnMut(usize, &mut [f64])) -> SamplePath {
        let mut out = self.clone();
        for k in 0..=self.last_index {
            delta(k, &mut out.states[k * self.dim..(k + 1) * self.dim]);
        }
        out
    }

    /// CSV with columns `k, t_k, x1..xd, u1..um`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut header = vec!["k".to_string(), "t".to_string()];
        header.extend((1..=self.dim).map(|i| format!("x{i}")));
        header.extend((1..=self.control_dim).map(|i| format!("u{i}")));
        writeln!(w, "{}", header.join(","))?;
        for k in 0..=self.last_index {
            let mut row = vec![k.to_string(), format!("{:?}", self.mesh.time(k))];
            row.extend(self.state(k).iter().map(|v| format!("{v:?}")));
            if k < self.last_index {
                row.extend(self.control(k).iter().map(|v| format!("{v:?}")));
            } else {
                row.extend((0..self.control_dim).map(|_| String::new()));
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Everything fixed for a batch of simulations.
#[derive(Debug, Clone, Copy)]
pub struct Simulator<'a> {
    pub spec: &'a ProblemSpec,
    pub level: &'a ControlLevel,
    pub mesh: TimeMesh,
}

impl<'a> Simulator<'a> {
    pub fn new(spec: &'a ProblemSpec, level: usize, mesh: TimeMesh) -> Result<Self> {
        let level = spec.control_space.level(level)?;
        if mesh.t0 != 0.0 || (mesh.t_end - spec.horizon).abs() > 1e-12 * spec.horizon.max(1.0) {
            return Err(Error::InvalidArgument(format!(
                "simulation mesh must cover [0, T] = [0, {}], got [{}, {}]",
                spec.horizon, mesh.t0, mesh.t_end
            )));
        }
        Ok(Simulator { spec, level, mesh })
    }

    /// Runs the Euler–Maruyama recursion from `(t_{start}, x)`.
    ///
    /// `stop(k, X_k)` is consulted before each step `k ≥ start`; returning
    /// true truncates the path at `k`.
    pub fn run<N: IncrementSource>(
        &self,
        start_index: usize,
        x: &[f64],
        policy: &ControlPolicy,
        noise: &mut N,
        key: (u64, u64),
        mut stop: impl FnMut(usize, &[f64]) -> bool,
    ) -> Result<SamplePath> {
        let spec = self.spec;
        let d = spec.state_dim();
        let m = self.level.dim();
        let n = self.mesh.n_steps;
        if x.len() != d {
            return Err(Error::InvalidArgument(format!(
                "start point has dimension {}, problem has {d}",
                x.len()
            )));
        }
        check_policy_dims(policy, spec, self.level)?;
        let start_index = start_index.min(n);
        let dt = self.mesh.dt();
        let mut states = Vec::with_capacity((n + 1) * d);
        for _ in 0..=start_index {
            states.extend_from_slice(x);
        }
        let mut controls = vec![0.0; start_index * m];
        let mut state = policy.initial_state();
        let mut u = vec![0.0; m];
        let mut b = vec![0.0; d];
        let mut sigma = vec![0.0; d * d];
        let mut dw = vec![0.0; d];
        let mut next = vec![0.0; d];
        let mut last = n;
        for k in start_index..n {
            let xk = &states[k * d..(k + 1) * d];
            if stop(k, xk) {
                last = k;
                break;
            }
            let t = self.mesh.time(k);
            let ctx = StepContext {
                k,
                t,
                x: xk,
                start_index,
                mesh: &self.mesh,
                domain: &spec.domain,
            };
            policy.control(&mut state, &ctx, &mut u)?;
            self.level.clamp(&mut u);
            spec.coefficients.drift_into(t, xk, &u, &mut b)?;
            spec.coefficients.diffusion_into(t, xk, &u, &mut sigma)?;
            noise.increment(k, &mut dw);
            for i in 0..d {
                let mut diff = 0.0;
                for j in 0..d {
                    diff += sigma[i * d + j] * dw[j];
                }
                next[i] = xk[i] + b[i] * dt + diff;
            }
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteState {
                    step: k + 1,
                    path_index: key.1,
                    state: next.clone(),
                });
            }
            controls.extend_from_slice(&u);
            states.extend_from_slice(&next);
        }
        Ok(SamplePath {
            mesh: self.mesh,
            domain: spec.domain.clone(),
            start_index,
            last_index: last,
            dim: d,
            control_dim: m,
            states,
            controls,
            seed: key.0,
            path_index: key.1,
        })
    }

    /// Full path from `(t, x)` driven by a stored Brownian path; `t` is
    /// snapped down to the mesh.
    pub fn simulate(&self, t: f64, x: &[f64], policy: &ControlPolicy, bp: &BrownianPath) -> Result<SamplePath> {
        if bp.mesh != self.mesh || bp.dim != self.spec.state_dim() {
            return Err(Error::InvalidArgument(
                "Brownian path does not match the simulation mesh".into(),
            ));
        }
        check_start_time(t, self.spec.horizon)?;
        let mut noise = bp;
        self.run(
            self.mesh.index_floor(t),
            x,
            policy,
            &mut noise,
            (bp.seed, bp.path_index),
            |_, _| false,
        )
    }

    /// Path keyed by `(seed, path_index)` generated on the fly.
    pub fn simulate_keyed(
        &self,
        start_index: usize,
        x: &[f64],
        policy: &ControlPolicy,
        seed: u64,
        path_index: u64,
        stop: impl FnMut(usize, &[f64]) -> bool,
    ) -> Result<SamplePath> {
        let mut noise = IncrementStream::new(seed, path_index, self.spec.state_dim(), self.mesh.dt());
        self.run(start_index, x, policy, &mut noise, (seed, path_index), stop)
    }
}

pub(crate) fn check_start_time(t: f64, horizon: f64) -> Result<()> {
    if !(0.0..=horizon).contains(&t) {
        return Err(Error::InvalidArgument(format!("start time {t} outside [0, {horizon}]")));
    }
    Ok(())
}

/// Simulates `spec` from `(t, x)` under `policy` and the noise of `bp`.
pub fn simulate(
    spec: &ProblemSpec,
    level: usize,
    t: f64,
    x: &[f64],
    policy: &ControlPolicy,
    bp: &BrownianPath,
) -> Result<SamplePath> {
    Simulator::new(spec, level, bp.mesh)?.simulate(t, x, policy, bp)
}

/// Compares the path driven by `ω ⊗_θ ω'` from `(t, x)` with the path
/// restarted at `(t_θ, X_θ(ω))` under the shifted policy and driven by
/// `ω'`. Returns the largest state discrepancy on `[t_θ, T]`.
#[allow(clippy::too_many_arguments)]
pub fn check_flow_property(
    spec: &ProblemSpec,
    level: usize,
    t: f64,
    x: &[f64],
    policy: &ControlPolicy,
    bp1: &BrownianPath,
    bp2: &BrownianPath,
    theta_index: usize,
) -> Result<f64> {
    let sim = Simulator::new(spec, level, bp1.mesh)?;
    let start = sim.mesh.index_floor(t);
    let theta = theta_index.max(start);
    let joined = concatenate(&bp1.trajectory(), &bp2.trajectory(), theta)?
        .increments(bp1.seed, bp1.path_index);
    let whole = sim.simulate(t, x, policy, &joined)?;
    let prefix = sim.simulate(t, x, policy, bp1)?;
    let shifted = shift_policy(policy, theta, &prefix)?;
    let restarted = sim.simulate(sim.mesh.time(theta), prefix.state(theta), &shifted, bp2)?;
    debug_assert_eq!(restarted.start_index(), theta);
    Ok((theta..=sim.mesh.n_steps)
        .map(|k| norm_diff(whole.state(k), restarted.state(k)))
        .fold(0.0, f64::max))
}

/// One row of the moment-scaling table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingRow {
    /// `(|s - t|² + |y - x|²)^{1/2}`.
    pub h: f64,
    /// Empirical `E sup_u |X^{s,y}_u - X^{t,x}_u|^{2q}`.
    pub moment: f64,
    pub std_error: f64,
}

/// Estimates the sup-moment of the difference of two strong solutions
/// started at `base` and at each perturbed start, both driven by the same
/// Brownian path per sample.
#[allow(clippy::too_many_arguments)]
pub fn continuity_scaling_test(
    spec: &ProblemSpec,
    level: usize,
    policy: &ControlPolicy,
    q: u32,
    base: (f64, &[f64]),
    perturbations: &[(f64, Vec<f64>)],
    mesh: TimeMesh,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<ScalingRow>> {
    let sim = Simulator::new(spec, level, mesh)?;
    check_start_time(base.0, spec.horizon)?;
    for (s, _) in perturbations {
        check_start_time(*s, spec.horizon)?;
    }
    let per_path: Vec<Vec<f64>> = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            let bp = BrownianPath::generate(mesh, spec.state_dim(), seed, i);
            let reference = sim.simulate(base.0, base.1, policy, &bp)?;
            perturbations
                .iter()
                .map(|(s, y)| {
                    let other = sim.simulate(*s, y, policy, &bp)?;
                    Ok((0..=mesh.n_steps)
                        .map(|k| norm_diff(reference.state(k), other.state(k)).powi(2 * q as i32))
                        .fold(0.0, f64::max))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(perturbations
        .iter()
        .enumerate()
        .map(|(j, (s, y))| {
            let samples: Vec<f64> = per_path.iter().map(|row| row[j]).collect();
            let (mean, std_error) = mean_and_error(&samples);
            let dt = s - base.0;
            let dx = norm_diff(y, base.1);
            ScalingRow {
                h: (dt * dt + dx * dx).sqrt(),
                moment: mean,
                std_error,
            }
        })
        .collect())
}

/// Sample mean and standard error, accumulated in index order relative to
/// the first sample (so identical samples give their common value exactly).
pub(crate) fn mean_and_error(samples: &[f64]) -> (f64, f64) {
    let n = samples.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let shift = samples[0];
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    for &v in samples {
        let dv = v - shift;
        sum += dv;
        sum2 += dv * dv;
    }
    let mean_dev = sum / n as f64;
    let mean = shift + mean_dev;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = ((sum2 - sum * mean_dev) / (n - 1) as f64).max(0.0);
    (mean, (var / n as f64).sqrt())
}
