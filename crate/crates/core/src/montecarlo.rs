//! Monte Carlo estimation of `J(t,x,α) = E ∫_t^τ f(s, X_s, α_s) ds`, of the
//! conditional form `E[∫_t^θ f ds + V(θ, X_θ)]`, and the discrete lower
//! semicontinuous envelope of sampled fields.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::dp::ValueGrid;
use crate::dpp::StoppingRule;
use crate::error::{Error, Result};
use crate::exit::{bridge_exit_with, face_variance};
use crate::paths::{check_start_time, mean_and_error, SamplePath, Simulator, TimeMesh};
use crate::policy::{shift_policy, ControlPolicy, StepContext};
use crate::problem::ProblemSpec;
use crate::rng::{derive_seed, tags};

/// Default cap on `n_outer * n_inner` for nested estimation.
pub const DEFAULT_NESTED_CAP: u64 = 50_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// Number of steps where `f` exceeded the configured cap.
    pub saturated: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McOptions {
    pub mesh: TimeMesh,
    pub n_paths: usize,
    pub seed: u64,
    /// Brownian-bridge exit correction (box and halfspace domains only).
    pub bridge: bool,
    /// Per-step cap on `f`; `None` means uncapped.
    pub reward_cap: Option<f64>,
    pub nested_cap: u64,
}

impl McOptions {
    pub fn new(mesh: TimeMesh, n_paths: usize, seed: u64) -> Self {
        McOptions {
            mesh,
            n_paths,
            seed,
            bridge: false,
            reward_cap: None,
            nested_cap: DEFAULT_NESTED_CAP,
        }
    }

    pub fn with_bridge(mut self, bridge: bool) -> Self {
        self.bridge = bridge;
        self
    }
}

/// Continuation value `V(θ, X_θ)` used by [`estimate_conditional_j`].
#[derive(Clone, Copy)]
pub enum Continuation<'a> {
    Zero,
    Grid(&'a ValueGrid),
    Function(&'a (dyn Fn(f64, &[f64]) -> f64 + Sync)),
    /// A fresh inner estimate of `J(θ, X_θ, α^{θ,ω})` per outer path.
    Nested { n_inner: usize },
}

struct PathOutcome {
    value: f64,
    saturated: u64,
}

struct Engine<'a> {
    sim: Simulator<'a>,
    opts: McOptions,
}

impl Engine<'_> {
    fn spec(&self) -> &ProblemSpec {
        self.sim.spec
    }

    fn one_path(
        &self,
        start: usize,
        x: &[f64],
        policy: &ControlPolicy,
        rule: Option<&StoppingRule>,
        cont: Continuation,
        seed: u64,
        path_index: u64,
    ) -> Result<PathOutcome> {
        let spec = self.spec();
        let mesh = self.sim.mesh;
        let domain = &spec.domain;
        let path = self.sim.simulate_keyed(start, x, policy, seed, path_index, |k, xk| {
            if !domain.contains(xk) {
                return true;
            }
            rule.is_some_and(|r| {
                r.fires(&StepContext {
                    k,
                    t: mesh.time(k),
                    x: xk,
                    start_index: start,
                    mesh: &mesh,
                    domain,
                })
            })
        })?;
        let theta = path.last_index();
        let crossing = if self.opts.bridge {
            self.bridge_crossing(&path, start)?
        } else {
            None
        };
        let dt = mesh.dt();
        let mut saturated = 0;
        let mut reward = |k: usize| -> Result<f64> {
            let f = spec
                .coefficients
                .reward(mesh.time(k), path.state(k), path.control(k))?;
            Ok(match self.opts.reward_cap {
                Some(cap) if f > cap => {
                    saturated += 1;
                    cap
                }
                _ => f,
            })
        };
        let mut value = 0.0;
        if let Some(c) = crossing.filter(|&c| c < theta) {
            for k in start..c {
                value += reward(k)? * dt;
            }
            value += reward(c)? * (0.5 * dt);
            return Ok(PathOutcome { value, saturated });
        }
        for k in start..theta {
            value += reward(k)? * dt;
        }
        let x_theta = path.state(theta);
        if theta < mesh.n_steps && domain.contains(x_theta) {
            value += match cont {
                Continuation::Zero => 0.0,
                Continuation::Grid(grid) => grid.evaluate(mesh.time(theta), x_theta),
                Continuation::Function(phi) => phi(mesh.time(theta), x_theta),
                Continuation::Nested { n_inner } => {
                    let shifted = shift_policy(policy, theta, &path)?;
                    let inner_seed = derive_seed(seed, &[tags::NESTED, path_index]);
                    let mut samples = Vec::with_capacity(n_inner);
                    for j in 0..n_inner as u64 {
                        let inner = self.one_path(
                            theta,
                            x_theta,
                            &shifted,
                            None,
                            Continuation::Zero,
                            inner_seed,
                            j,
                        )?;
                        saturated += inner.saturated;
                        samples.push(inner.value);
                    }
                    mean_and_error(&samples).0
                }
            };
        }
        Ok(PathOutcome { value, saturated })
    }

    fn bridge_crossing(&self, path: &SamplePath, start: usize) -> Result<Option<usize>> {
        let spec = self.spec();
        let d = spec.state_dim();
        let mut sigma = vec![0.0; d * d];
        let mut cached = usize::MAX;
        let result = bridge_exit_with(path, &spec.domain, start, &mut |k, face| {
            if cached != k {
                spec.coefficients.diffusion_into(
                    path.mesh().time(k),
                    path.state(k),
                    path.control(k),
                    &mut sigma,
                )?;
                cached = k;
            }
            Ok(face_variance(&spec.domain, face, &sigma, d))
        })?;
        Ok(result.crossing_step)
    }

    fn run(
        &self,
        t: f64,
        x: &[f64],
        policy: &ControlPolicy,
        rule: Option<&StoppingRule>,
        cont: Continuation,
    ) -> Result<Estimate> {
        check_start_time(t, self.spec().horizon)?;
        if self.opts.n_paths == 0 {
            return Err(Error::InvalidArgument("n_paths must be positive".into()));
        }
        if let Continuation::Nested { n_inner } = cont {
            let requested = self.opts.n_paths as u64 * n_inner as u64;
            if requested > self.opts.nested_cap {
                return Err(Error::Budget {
                    requested,
                    cap: self.opts.nested_cap,
                });
            }
        }
        let start = self.sim.mesh.index_floor(t);
        let seed = self.opts.seed;
        let outcomes: Vec<PathOutcome> = (0..self.opts.n_paths as u64)
            .into_par_iter()
            .map(|i| {
                self.one_path(start, x, policy, rule, cont, seed, i)
                    .map_err(|e| match e {
                        Error::NonFiniteState { .. } => e,
                        other => Error::InvalidArgument(format!("path {i}: {other}")),
                    })
            })
            .collect::<Result<_>>()?;
        let values: Vec<f64> = outcomes.iter().map(|o| o.value).collect();
        let (mean, std_error) = mean_and_error(&values);
        Ok(Estimate {
            mean,
            std_error,
            n_paths: self.opts.n_paths,
            seed,
            saturated: outcomes.iter().map(|o| o.saturated).sum(),
        })
    }
}

/// Estimates `J(t, x, α)`: per path, simulate until exit, accumulate
/// `Σ f(t_k, X_k, u_k) Δt` over `[t, τ)` (left end points), average.
pub fn estimate_j(
    spec: &ProblemSpec,
    level: usize,
    t: f64,
    x: &[f64],
    policy: &ControlPolicy,
    opts: &McOptions,
) -> Result<Estimate> {
    let engine = Engine {
        sim: Simulator::new(spec, level, opts.mesh)?,
        opts: *opts,
    };
    engine.run(t, x, policy, None, Continuation::Zero)
}

/// Estimates `E[∫_t^θ f ds + V(θ, X_θ)]` with `θ = rule ∧ τ`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_conditional_j(
    spec: &ProblemSpec,
    level: usize,
    t: f64,
    x: &[f64],
    policy: &ControlPolicy,
    rule: &StoppingRule,
    cont: Continuation,
    opts: &McOptions,
) -> Result<Estimate> {
    let engine = Engine {
        sim: Simulator::new(spec, level, opts.mesh)?,
        opts: *opts,
    };
    engine.run(t, x, policy, Some(rule), cont)
}

/// Result of [`lsc_envelope`].
#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeReport {
    pub envelope: Vec<f64>,
    /// Indices `p` with `envelope[p] < value[p] - tol`.
    pub violations: Vec<usize>,
    pub radius: f64,
    pub tol: f64,
}

/// Discrete lower semicontinuous envelope: `env(p) = min{value(q) : |q - p| ≤ r}`
/// with `r` the smallest positive radius in `radii`.
pub fn lsc_envelope(points: &[Vec<f64>], values: &[f64], radii: &[f64], tol: f64) -> Result<EnvelopeReport> {
    if points.len() != values.len() {
        return Err(Error::InvalidArgument("points and values differ in length".into()));
    }
    let radius = radii
        .iter()
        .copied()
        .filter(|r| *r > 0.0)
        .fold(f64::INFINITY, f64::min);
    if !radius.is_finite() {
        return Err(Error::InvalidArgument("no positive radius given".into()));
    }
    let cell = |p: &[f64]| -> Vec<i64> { p.iter().map(|v| (v / radius).floor() as i64).collect() };
    let mut buckets: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        buckets.entry(cell(p)).or_default().push(i);
    }
    let dim = points.first().map_or(0, Vec::len);
    let offsets: Vec<Vec<i64>> = (0..3usize.pow(dim as u32))
        .map(|mut code| {
            (0..dim)
                .map(|_| {
                    let o = (code % 3) as i64 - 1;
                    code /= 3;
                    o
                })
                .collect()
        })
        .collect();
    let envelope: Vec<f64> = points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let home = cell(p);
            let mut best = values[i];
            for off in &offsets {
                let key: Vec<i64> = home.iter().zip(off).map(|(a, b)| a + b).collect();
                if let Some(list) = buckets.get(&key) {
                    for &q in list {
                        let d2: f64 = p.iter().zip(&points[q]).map(|(a, b)| (a - b) * (a - b)).sum();
                        if d2 <= radius * radius {
                            best = best.min(values[q]);
                        }
                    }
                }
            }
            best
        })
        .collect();
    let violations = (0..points.len())
        .filter(|&i| envelope[i] < values[i] - tol)
        .collect();
    Ok(EnvelopeReport {
        envelope,
        violations,
        radius,
        tol,
    })
}
