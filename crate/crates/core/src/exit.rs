//! Exit times of discrete paths from the open set `G`.

use crate::error::{Error, Result};
use crate::paths::SamplePath;
use crate::problem::{dot, Domain};
use crate::rng::{derive_seed, tags, UniformStream};

/// `τ = inf{t_k ≥ t : X_k ∉ G} ∧ T` on the mesh.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExitResult {
    pub tau_index: usize,
    pub tau: f64,
    pub exited: bool,
    /// Exit time after the Brownian-bridge correction, when requested.
    pub tau_corrected: Option<f64>,
    /// Step `k` on whose interval `(t_k, t_{k+1})` a bridge crossing was
    /// sampled.
    pub crossing_step: Option<usize>,
}

/// `ρ(x, G^c)`: exact for box, ball and halfspace domains, a lower bound
/// for expression domains. 1-Lipschitz in `x`.
pub fn distance_to_complement(x: &[f64], domain: &Domain) -> f64 {
    domain.dist_lb(x)
}

/// Grid-point exit detection from `start_index` (strict membership, so
/// boundary points count as exited). Discrete monitoring misses excursions
/// between mesh points, which biases `τ` upward by `O(√Δt)`.
pub fn exit_time(path: &SamplePath, domain: &Domain, start_index: usize) -> ExitResult {
    let mesh = path.mesh();
    let last = path.last_index();
    let start = start_index.min(last);
    let (tau_index, exited) = (start..=last)
        .find(|&k| !domain.contains(path.state(k)))
        .map_or((last, false), |k| (k, true));
    ExitResult {
        tau_index,
        tau: mesh.time(tau_index).min(mesh.t_end),
        exited,
        tau_corrected: None,
        crossing_step: None,
    }
}

/// Probability that a Brownian bridge with variance rate `var_rate` over a
/// step of length `dt` touches a flat face it starts `d0` from and ends `d1`
/// from (both on the inside).
pub fn crossing_probability(d0: f64, d1: f64, var_rate: f64, dt: f64) -> f64 {
    if d0 <= 0.0 || d1 <= 0.0 {
        return 1.0;
    }
    if var_rate <= 0.0 {
        return 0.0;
    }
    (-2.0 * d0 * d1 / (var_rate * dt)).exp()
}

/// A flat face of a box or halfspace: `axis = Some(j)` for box faces,
/// `None` for the halfspace face.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Face {
    pub axis: Option<usize>,
}

/// Bridge-corrected exit time with a constant scalar diffusion `sigma`
/// (variance rate `sigma²` across every face).
pub fn exit_time_bridge_corrected(path: &SamplePath, domain: &Domain, sigma: f64) -> Result<ExitResult> {
    bridge_exit_with(path, domain, path.start_index(), &mut |_, _| Ok(sigma * sigma))
}

/// Bridge correction with a per-step, per-face variance rate.
///
/// On every step whose end points are both inside `G`, a crossing is drawn
/// with probability `1 - Π_faces (1 - p_face)` from a uniform stream keyed
/// by the path's `(seed, path_index)`. The first sampled crossing on step
/// `k` sets `τ̃ = t_k + Δt/2`.
pub(crate) fn bridge_exit_with(
    path: &SamplePath,
    domain: &Domain,
    start_index: usize,
    variance: &mut dyn FnMut(usize, Face) -> Result<f64>,
) -> Result<ExitResult> {
    let mut faces = Vec::new();
    if !domain.face_distances(path.state(start_index.min(path.last_index())), &mut faces) {
        return Err(Error::UnsupportedDomain(format!(
            "bridge correction needs a box or halfspace domain, got {}",
            domain.kind()
        )));
    }
    let mut result = exit_time(path, domain, start_index);
    let mesh = path.mesh();
    let dt = mesh.dt();
    let mut uniforms = UniformStream::new(derive_seed(path.seed, &[tags::BRIDGE]), path.path_index);
    let mut next_faces = Vec::new();
    let start = start_index.min(path.last_index());
    for k in start..result.tau_index {
        if k + 1 > path.last_index() || !domain.contains(path.state(k + 1)) {
            break;
        }
        domain.face_distances(path.state(k), &mut faces);
        domain.face_distances(path.state(k + 1), &mut next_faces);
        let mut survive = 1.0;
        for (&(axis, _, d0), &(_, _, d1)) in faces.iter().zip(&next_faces) {
            let face = Face {
                axis: (axis != usize::MAX).then_some(axis),
            };
            survive *= 1.0 - crossing_probability(d0, d1, variance(k, face)?, dt);
        }
        uniforms.seek(k as u64);
        if uniforms.next_f64() < 1.0 - survive {
            result.tau_corrected = Some(mesh.time(k) + 0.5 * dt);
            result.crossing_step = Some(k);
            return Ok(result);
        }
    }
    result.tau_corrected = Some(result.tau);
    Ok(result)
}

/// Variance rate of `σ dW` across `face`: `Σ_l σ_{jl}²` for the box face
/// normal to axis `j`, `|σᵀ n̂|²` for a halfspace with unit normal `n̂`.
pub(crate) fn face_variance(domain: &Domain, face: Face, sigma: &[f64], d: usize) -> f64 {
    match face.axis {
        Some(j) => (0..d).map(|l| sigma[j * d + l] * sigma[j * d + l]).sum(),
        None => {
            let Domain::Halfspace { normal, .. } = domain else {
                return 0.0;
            };
            let n = dot(normal, normal).sqrt();
            (0..d)
                .map(|l| {
                    let s: f64 = (0..d).map(|i| normal[i] / n * sigma[i * d + l]).sum();
                    s * s
                })
                .sum()
        }
    }
}

/// `δ = min_{t_k ≤ a} ρ(X_k, G^c)`. Any path `Y` with
/// `max_k |Y_k - X_k| < δ/2` stays in `G` at every mesh time `≤ a`, so its
/// exit time exceeds `a` whenever `a < T`.
pub fn semicontinuity_certificate(path: &SamplePath, a: f64, domain: &Domain) -> Result<f64> {
    let mesh = path.mesh();
    let tol = 1e-12 * mesh.t_end.abs().max(1.0);
    let mut delta = f64::INFINITY;
    for k in path.start_index()..=path.last_index() {
        if mesh.time(k) > a + tol {
            break;
        }
        let x = path.state(k);
        if !domain.contains(x) {
            return Err(Error::ExitsBeforeHorizon { a, index: k });
        }
        delta = delta.min(distance_to_complement(x, domain));
    }
    Ok(delta)
}
