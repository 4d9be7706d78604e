//! Numerical checks of the dynamic programming principle
//!
//! `v(t,x) = sup_α inf_θ E[∫_t^{θ∧τ} f ds + v(θ∧τ, X_{θ∧τ})]
//!         = sup_α sup_θ E[...]`
//!
//! together with the pieces of its proof: stopping rules, half-open covers
//! of the time-space cylinder, stitched policies and lower semicontinuous
//! minorants of the value function.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::dp::ValueGrid;
use crate::error::{Error, Result};
use crate::montecarlo::{estimate_conditional_j, estimate_j, Continuation, Estimate, McOptions};
use crate::paths::SamplePath;
use crate::policy::{ControlPolicy, StepContext};
use crate::problem::{norm_diff, Domain, ProblemSpec};
use crate::rng::{derive_seed, tags, UniformStream};

/// A stopping time adapted to the discrete path filtration: whether it
/// fires at step `k` depends on `X_0..X_k` only.
#[derive(Debug, Clone, PartialEq)]
pub enum StoppingRule {
    /// Deterministic time `s` (snapped down to the mesh).
    Constant(f64),
    /// First time the state leaves the open set `D`.
    ExitOf(Domain),
    /// Earliest of several rules.
    MinOf(Vec<StoppingRule>),
}

impl StoppingRule {
    pub fn fires(&self, ctx: &StepContext) -> bool {
        match self {
            StoppingRule::Constant(s) => ctx.k >= ctx.mesh.index_floor(*s),
            StoppingRule::ExitOf(d) => !d.contains(ctx.x),
            StoppingRule::MinOf(rules) => rules.iter().any(|r| r.fires(ctx)),
        }
    }
}

impl fmt::Display for StoppingRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StoppingRule::Constant(s) => write!(f, "constant({s})"),
            StoppingRule::ExitOf(d) => write!(f, "exit({d})"),
            StoppingRule::MinOf(rules) => {
                write!(f, "min(")?;
                for (i, r) in rules.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{r}")?;
                }
                write!(f, ")")
            }
        }
    }
}

/// `θ ∧ τ` on a simulated path: the first index from the start at which the
/// rule fires or the state is outside `domain`, else the last index.
pub fn realize_stopping(rule: &StoppingRule, path: &SamplePath, domain: &Domain) -> usize {
    let mesh = path.mesh();
    (path.start_index()..=path.last_index())
        .find(|&k| {
            let x = path.state(k);
            !domain.contains(x)
                || rule.fires(&StepContext {
                    k,
                    t: mesh.time(k),
                    x,
                    start_index: path.start_index(),
                    mesh,
                    domain,
                })
        })
        .unwrap_or(path.last_index())
}

/// `C = (t - r, t] × {y : |y - x| < r}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HalfOpenCell {
    pub t: f64,
    pub x: Vec<f64>,
    pub radius: f64,
}

impl HalfOpenCell {
    pub fn contains(&self, t: f64, x: &[f64]) -> bool {
        t > self.t - self.radius && t <= self.t && norm_diff(x, &self.x) < self.radius
    }

    /// True when the lattice box `(t - dt, t] × Π[x_j - h_j/2, x_j + h_j/2]`
    /// lies inside the cell.
    fn contains_box(&self, t: f64, dt: f64, x: &[f64], h: &[f64]) -> bool {
        if t > self.t || t - dt < self.t - self.radius {
            return false;
        }
        let d = x.len();
        let mut corner = vec![0.0; d];
        (0..1usize << d).all(|code| {
            for j in 0..d {
                let sign = if code >> j & 1 == 1 { 0.5 } else { -0.5 };
                corner[j] = x[j] + sign * h[j];
            }
            norm_diff(&corner, &self.x) < self.radius
        })
    }
}

/// Cells `C_1, C_2, ...` whose basic sets `B_i = C_i \ ∪_{j<i} C_j` are
/// disjoint by construction; the owner of a point is the first cell that
/// contains it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cover {
    pub cells: Vec<HalfOpenCell>,
}

impl Cover {
    /// Index of the unique basic set containing `(t, x)`.
    pub fn owner(&self, t: f64, x: &[f64]) -> Option<usize> {
        self.cells.iter().position(|c| c.contains(t, x))
    }

    /// Number of cells (not basic sets) containing `(t, x)`.
    pub fn multiplicity(&self, t: f64, x: &[f64]) -> usize {
        self.cells.iter().filter(|c| c.contains(t, x)).count()
    }
}

/// Time-space box `[t_lo, t_hi] × Π[x_lo_j, x_hi_j]` to be covered.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverRegion {
    pub t_lo: f64,
    pub t_hi: f64,
    pub x_lo: Vec<f64>,
    pub x_hi: Vec<f64>,
}

/// Greedy cover: lattice points are swept in decreasing `t` (then row-major
/// in `x`); a point whose lattice box is not already inside an emitted cell
/// emits the cell centred at it with radius `radius(t, x)`. Every emitted
/// cell contains its own lattice box, so the region is covered.
pub fn build_cover(
    region: &CoverRegion,
    radius: impl Fn(f64, &[f64]) -> f64,
    pitch_t: f64,
    pitch_x: f64,
) -> Result<Cover> {
    let d = region.x_lo.len();
    if region.x_hi.len() != d || d == 0 || !(region.t_hi >= region.t_lo) {
        return Err(Error::InvalidArgument("malformed cover region".into()));
    }
    if !(pitch_t > 0.0 && pitch_x > 0.0) {
        return Err(Error::InvalidArgument("cover pitches must be positive".into()));
    }
    let nt = ((region.t_hi - region.t_lo) / pitch_t - 1e-9).ceil().max(0.0) as usize + 1;
    let nx: Vec<usize> = (0..d)
        .map(|j| ((region.x_hi[j] - region.x_lo[j]) / pitch_x - 1e-9).ceil().max(0.0) as usize + 1)
        .collect();
    let n_spatial: usize = nx.iter().product();
    let h = vec![pitch_x; d];
    let half_diag = 0.5 * pitch_x * (d as f64).sqrt();
    let mut cells: Vec<HalfOpenCell> = Vec::new();
    let mut x = vec![0.0; d];
    for it in 0..nt {
        let t = region.t_hi - it as f64 * pitch_t;
        for flat in 0..n_spatial {
            let mut rem = flat;
            for j in (0..d).rev() {
                x[j] = region.x_lo[j] + (rem % nx[j]) as f64 * pitch_x;
                rem /= nx[j];
            }
            if cells.iter().any(|c| c.contains_box(t, pitch_t, &x, &h)) {
                continue;
            }
            let r = radius(t, &x);
            if !(r > pitch_t && r > half_diag) {
                return Err(Error::CoverPitch(format!(
                    "radius {r} at (t={t}, x={x:?}) must exceed pitch_t {pitch_t} and half lattice diagonal {half_diag}"
                )));
            }
            cells.push(HalfOpenCell {
                t,
                x: x.clone(),
                radius: r,
            });
        }
    }
    Ok(Cover { cells })
}

/// `β`: `base` up to `θ ∧ τ`, then `cell_policies[i]` where `(θ, X_θ)` lies
/// in basic set `i`.
pub fn stitch(
    base: ControlPolicy,
    rule: StoppingRule,
    cover: Arc<Cover>,
    cell_policies: Vec<ControlPolicy>,
) -> Result<ControlPolicy> {
    ControlPolicy::stitched(base, rule, cover, cell_policies)
}

/// `φ_n(z) = min_q [v(q) + n |z - q|]` over the stored nodes `q = (t, x)` of
/// a value grid: an `n`-Lipschitz minorant of `v` on the nodes, increasing in
/// `n`.
#[derive(Debug, Clone)]
pub struct LscMinorant {
    grid: Arc<ValueGrid>,
    n: f64,
}

impl LscMinorant {
    pub fn new(grid: Arc<ValueGrid>, n: f64) -> Result<Self> {
        if !(n > 0.0) {
            return Err(Error::InvalidArgument("minorant slope must be positive".into()));
        }
        Ok(LscMinorant { grid, n })
    }

    pub fn slope(&self) -> f64 {
        self.n
    }

    /// Exact minimum over all nodes; the search is pruned to nodes within
    /// `φ(nearest)/n` of `z`, which is sound because `v ≥ 0`.
    pub fn evaluate(&self, t: f64, x: &[f64]) -> f64 {
        let g = &*self.grid;
        let space = &g.space;
        let d = space.dim();
        let times = &g.times;
        let s0 = times
            .partition_point(|&s| s < t)
            .min(times.len() - 1);
        let s0 = if s0 > 0 && (t - times[s0 - 1]).abs() < (times[s0] - t).abs() {
            s0 - 1
        } else {
            s0
        };
        let mut q = vec![0.0; d];
        let node0 = space.nearest(x);
        space.node_point(node0, &mut q);
        let dist = |ts: f64, q: &[f64]| -> f64 {
            let dx = norm_diff(x, q);
            ((ts - t) * (ts - t) + dx * dx).sqrt()
        };
        let mut best = g.slice(s0)[node0] + self.n * dist(times[s0], &q);
        let reach = best / self.n;
        let s_lo = times.partition_point(|&s| s < t - reach);
        let s_hi = times.partition_point(|&s| s <= t + reach);
        let ranges: Vec<(usize, usize)> = (0..d)
            .map(|j| {
                let lo = space.position(j, x[j] - reach).floor().max(0.0) as usize;
                let hi = (space.position(j, x[j] + reach).ceil().max(0.0) as usize).min(space.counts[j] - 1);
                (lo.min(space.counts[j] - 1), hi)
            })
            .collect();
        let mut idx: Vec<usize> = ranges.iter().map(|r| r.0).collect();
        if ranges.iter().any(|r| r.0 > r.1) {
            return best;
        }
        loop {
            let mut node = 0;
            for j in 0..d {
                q[j] = space.coord(j, idx[j]);
                node = node * space.counts[j] + idx[j];
            }
            for s in s_lo..s_hi {
                let cand = g.slice(s)[node] + self.n * dist(times[s], &q);
                if cand < best {
                    best = cand;
                }
            }
            let mut j = d;
            loop {
                if j == 0 {
                    return best;
                }
                j -= 1;
                if idx[j] < ranges[j].1 {
                    idx[j] += 1;
                    break;
                }
                idx[j] = ranges[j].0;
            }
        }
    }
}

/// Tolerances of the DPP check: `ε_disc = c_disc (√Δt + Δx)` for the
/// discretisation gap between the Monte Carlo paths and the grid, and
/// `ε_opt = opt_per_pitch · pitch(U_n)` for the optimisation gap of the
/// control mesh.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TolModel {
    pub c_disc: f64,
    pub opt_per_pitch: f64,
}

impl Default for TolModel {
    fn default() -> Self {
        TolModel {
            c_disc: 1.0,
            opt_per_pitch: 0.5,
        }
    }
}

impl TolModel {
    pub fn eps_disc(&self, dt: f64, dx: f64) -> f64 {
        self.c_disc * (dt.sqrt() + dx)
    }

    pub fn eps_opt(&self, pitch: f64) -> f64 {
        self.opt_per_pitch * pitch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DppRow {
    pub rule: String,
    pub policy: String,
    pub estimate: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// `v_ref - estimate`.
    pub slack: f64,
    /// `estimate ≤ v_ref + 3σ + ε_disc`.
    pub upper_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RuleSummary {
    pub rule: String,
    pub best_policy: String,
    pub best_estimate: f64,
    pub best_std_error: f64,
    /// `best_estimate ≥ v_ref - 3σ - ε_disc - ε_opt`.
    pub attained: bool,
}

/// Outcome of [`verify_dpp`]. Flag (U): every row is at most `v_ref` up to
/// tolerance. Flag (A): for every rule, the best policy reaches `v_ref` up
/// to tolerance. `sup_inf_*` records the single policy whose worst row over
/// all rules is largest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DppReport {
    pub t: f64,
    pub x: Vec<f64>,
    pub v_ref: f64,
    pub eps_disc: f64,
    pub eps_opt: f64,
    pub tol_model: TolModel,
    pub rows: Vec<DppRow>,
    pub rules: Vec<RuleSummary>,
    pub sup_inf_policy: String,
    pub sup_inf_attained: bool,
    pub flag_upper: bool,
    pub flag_attained: bool,
}

impl DppReport {
    pub fn passed(&self) -> bool {
        self.flag_upper && self.flag_attained
    }
}

/// Runs every (rule, policy) pair through the conditional estimator with the
/// grid as continuation value. Row `i` (rule-major) uses the seed
/// `derive_seed(opts.seed, [VERIFY, i])`.
#[allow(clippy::too_many_arguments)]
pub fn verify_dpp(
    spec: &ProblemSpec,
    level: usize,
    grid: &ValueGrid,
    t: f64,
    x: &[f64],
    rules: &[(String, StoppingRule)],
    policies: &[(String, ControlPolicy)],
    opts: &McOptions,
    tol: &TolModel,
) -> Result<DppReport> {
    if rules.is_empty() || policies.is_empty() {
        return Err(Error::InvalidArgument("need at least one rule and one policy".into()));
    }
    let expected = spec.hash();
    if grid.meta.spec_hash != expected {
        return Err(Error::HashMismatch {
            grid: grid.meta.spec_hash.clone(),
            spec: expected,
        });
    }
    let v_ref = grid.evaluate(t, x);
    let dx = (0..grid.space.dim())
        .map(|j| grid.space.spacing(j))
        .fold(0.0, f64::max);
    let eps_disc = tol.eps_disc(opts.mesh.dt(), dx);
    let eps_opt = tol.eps_opt(spec.control_space.level(level)?.pitch());
    let lower = v_ref - eps_disc - eps_opt;
    let mut rows = Vec::with_capacity(rules.len() * policies.len());
    for (rname, rule) in rules {
        for (pname, policy) in policies {
            let row_opts = McOptions {
                seed: derive_seed(opts.seed, &[tags::VERIFY, rows.len() as u64]),
                ..*opts
            };
            let est = estimate_conditional_j(spec, level, t, x, policy, rule, Continuation::Grid(grid), &row_opts)?;
            rows.push(DppRow {
                rule: rname.clone(),
                policy: pname.clone(),
                estimate: est.mean,
                std_error: est.std_error,
                n_paths: est.n_paths,
                seed: est.seed,
                slack: v_ref - est.mean,
                upper_ok: est.mean <= v_ref + 3.0 * est.std_error + eps_disc,
            });
        }
    }
    let np = policies.len();
    let upper_band = |r: &DppRow| r.estimate + 3.0 * r.std_error;
    let summaries: Vec<RuleSummary> = rules
        .iter()
        .enumerate()
        .map(|(ri, (rname, _))| {
            let block = &rows[ri * np..(ri + 1) * np];
            let best = block
                .iter()
                .fold(&block[0], |a, b| if b.estimate > a.estimate { b } else { a });
            RuleSummary {
                rule: rname.clone(),
                best_policy: best.policy.clone(),
                best_estimate: best.estimate,
                best_std_error: best.std_error,
                attained: upper_band(best) >= lower,
            }
        })
        .collect();
    let worst_per_policy = |pi: usize| {
        (0..rules.len())
            .map(|ri| upper_band(&rows[ri * np + pi]))
            .fold(f64::INFINITY, f64::min)
    };
    let best_pi = (0..np).fold(0, |a, b| if worst_per_policy(b) > worst_per_policy(a) { b } else { a });
    Ok(DppReport {
        t,
        x: x.to_vec(),
        v_ref,
        eps_disc,
        eps_opt,
        tol_model: *tol,
        sup_inf_policy: policies[best_pi].0.clone(),
        sup_inf_attained: worst_per_policy(best_pi) >= lower,
        flag_upper: rows.iter().all(|r| r.upper_ok),
        flag_attained: summaries.iter().all(|s| s.attained),
        rows,
        rules: summaries,
    })
}

/// `count` seeded feedback policies `u_j = a + b·x_1 + c·sin(w·x_1 + e·t)`
/// with coefficients drawn from fixed ranges (clamped to the control set
/// at run time).
pub fn random_feedback_policies(d: usize, m: usize, count: usize, seed: u64) -> Result<Vec<(String, ControlPolicy)>> {
    let mut u = UniformStream::new(derive_seed(seed, &[tags::POLICY]), 0);
    (0..count)
        .map(|i| {
            let exprs: Vec<String> = (0..m)
                .map(|_| {
                    let axis = 1 + (u.next_f64() * d as f64) as usize % d;
                    format!(
                        "{:.6} + {:.6}*x{axis} + {:.6}*sin({:.6}*x{axis} + {:.6}*t)",
                        u.uniform(-0.5, 0.5),
                        u.uniform(-2.0, 2.0),
                        u.uniform(-1.0, 1.0),
                        u.uniform(0.5, 4.0),
                        u.uniform(-1.0, 1.0)
                    )
                })
                .collect();
            let refs: Vec<&str> = exprs.iter().map(String::as_str).collect();
            Ok((format!("random{}", i + 1), ControlPolicy::feedback(&refs, d)?))
        })
        .collect()
}

/// Outcome of [`stitching_improvement_test`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StitchReport {
    pub v_ref: f64,
    pub j_stitched: Estimate,
    /// `E[∫_t^θ f ds + φ(θ, X_θ)]` under the base policy.
    pub bound: Estimate,
    pub eps_declared: f64,
    pub tol: f64,
    /// `J(β) ≥ bound - 3 ε_declared - 3σ - tol`, σ the combined standard
    /// error of both estimates.
    pub lower_ok: bool,
    /// `v_ref ≥ J(β) - 3σ_J - tol`.
    pub upper_ok: bool,
}

/// Compares `J(β)` for a stitched policy with the bound built from the
/// minorant `phi`, both estimated on common random numbers (`β` follows its
/// base policy up to `θ`, so the two estimates share their paths there).
#[allow(clippy::too_many_arguments)]
pub fn stitching_improvement_test(
    spec: &ProblemSpec,
    level: usize,
    stitched: &ControlPolicy,
    phi: &LscMinorant,
    v_ref: f64,
    t: f64,
    x: &[f64],
    opts: &McOptions,
    eps_declared: f64,
    tol: f64,
) -> Result<StitchReport> {
    let ControlPolicy::Stitched(parts) = stitched else {
        return Err(Error::InvalidArgument("policy is not stitched".into()));
    };
    let j_stitched = estimate_j(spec, level, t, x, stitched, opts)?;
    let eval = |s: f64, y: &[f64]| phi.evaluate(s, y);
    let bound = estimate_conditional_j(
        spec,
        level,
        t,
        x,
        &parts.base,
        &parts.rule,
        Continuation::Function(&eval),
        opts,
    )?;
    let sigma = j_stitched.std_error.hypot(bound.std_error);
    Ok(StitchReport {
        v_ref,
        lower_ok: j_stitched.mean >= bound.mean - 3.0 * eps_declared - 3.0 * sigma - tol,
        upper_ok: v_ref >= j_stitched.mean - 3.0 * j_stitched.std_error - tol,
        j_stitched,
        bound,
        eps_declared,
        tol,
    })
}
