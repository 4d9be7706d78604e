//! Exit-time control problems: horizon, open domain `G`, coefficients and
//! the nested control space `U(1) ⊆ U(2) ⊆ ...`.

mod config;
mod domain;

use std::fmt;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::expr::Expression;
use crate::rng::{derive_seed, tags, UniformStream};

pub use config::{
    CoefficientSection, ControlLevelSection, ControlSpaceSection, DomainSection, HorizonSection,
    Matrix, OneOrMany, ProblemFile,
};
pub use domain::Domain;
pub(crate) use domain::{dot, norm_diff};

/// Default half-width of the state box sampled by validation and the
/// Lipschitz estimator.
pub const DEFAULT_ENVELOPE: f64 = 10.0;

/// One level `U(n)`: an axis-aligned box with a finite mesh used by the
/// solvers.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlLevel {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub mesh_counts: Vec<usize>,
}

impl ControlLevel {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, mesh_counts: Vec<usize>) -> Self {
        ControlLevel {
            lo,
            hi,
            mesh_counts,
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    fn axis_points(&self, j: usize) -> Vec<f64> {
        let n = self.mesh_counts[j];
        let (lo, hi) = (self.lo[j], self.hi[j]);
        if n <= 1 {
            return vec![0.5 * (lo + hi)];
        }
        (0..n)
            .map(|i| {
                let s = i as f64 / (n - 1) as f64;
                lo * (1.0 - s) + hi * s
            })
            .collect()
    }

    /// Mesh points in lexicographic order, first axis slowest, each axis
    /// ascending. The solvers break ties by the lowest index in this list.
    pub fn mesh_points(&self) -> Vec<Vec<f64>> {
        let axes: Vec<Vec<f64>> = (0..self.dim()).map(|j| self.axis_points(j)).collect();
        let mut points = vec![Vec::new()];
        for axis in &axes {
            let mut next = Vec::with_capacity(points.len() * axis.len());
            for p in &points {
                for &v in axis {
                    let mut q = p.clone();
                    q.push(v);
                    next.push(q);
                }
            }
            points = next;
        }
        points
    }

    /// Largest spacing between neighbouring mesh points on any axis.
    pub fn pitch(&self) -> f64 {
        (0..self.dim())
            .map(|j| {
                let n = self.mesh_counts[j];
                if n <= 1 {
                    self.hi[j] - self.lo[j]
                } else {
                    (self.hi[j] - self.lo[j]) / (n - 1) as f64
                }
            })
            .fold(0.0, f64::max)
    }

    pub fn clamp(&self, u: &mut [f64]) {
        for (v, (&l, &h)) in u.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *v = v.clamp(l, h);
        }
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        u.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(&v, (&l, &h))| l <= v && v <= h)
    }

    fn is_inside(&self, other: &ControlLevel) -> bool {
        self.lo
            .iter()
            .zip(&self.hi)
            .zip(other.lo.iter().zip(&other.hi))
            .all(|((&l, &h), (&ol, &oh))| ol <= l && h <= oh)
    }
}

/// Nested control levels. Levels are numbered from 1 as in `U(1), U(2), ...`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSpace {
    pub dim: usize,
    pub levels: Vec<ControlLevel>,
}

impl ControlSpace {
    /// Control space of an uncontrolled problem (`m = 0`, one trivial level).
    pub fn none() -> Self {
        ControlSpace {
            dim: 0,
            levels: vec![ControlLevel::new(vec![], vec![], vec![])],
        }
    }

    pub fn single(lo: Vec<f64>, hi: Vec<f64>, mesh_counts: Vec<usize>) -> Self {
        ControlSpace {
            dim: lo.len(),
            levels: vec![ControlLevel::new(lo, hi, mesh_counts)],
        }
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, n: usize) -> Result<&ControlLevel> {
        if n == 0 || n > self.levels.len() {
            return Err(Error::InvalidArgument(format!(
                "control level {n} out of range 1..={}",
                self.levels.len()
            )));
        }
        Ok(&self.levels[n - 1])
    }
}

/// Drift `b` (d entries), diffusion `σ` (d×d, row major) and running reward
/// `f ≥ 0`, all expressions in `(t, x, u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSet {
    pub drift: Vec<Expression>,
    pub diffusion: Vec<Vec<Expression>>,
    pub reward: Expression,
}

impl CoefficientSet {
    /// Builds a coefficient set from expression strings.
    pub fn parse(drift: &[&str], diffusion: &[&[&str]], reward: &str, d: usize, m: usize) -> Result<Self> {
        let parse = |text: &str, context: String| {
            Expression::parse(text, d, m).map_err(|source| Error::Parse { context, source })
        };
        Ok(CoefficientSet {
            drift: drift
                .iter()
                .enumerate()
                .map(|(i, s)| parse(s, format!("b[{}]", i + 1)))
                .collect::<Result<_>>()?,
            diffusion: diffusion
                .iter()
                .enumerate()
                .map(|(i, row)| {
                    row.iter()
                        .enumerate()
                        .map(|(j, s)| parse(s, format!("sigma[{}][{}]", i + 1, j + 1)))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()?,
            reward: parse(reward, "f".into())?,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.drift.len()
    }

    pub fn time_dependent(&self) -> bool {
        self.reward.uses_time()
            || self.drift.iter().any(Expression::uses_time)
            || self.diffusion.iter().flatten().any(Expression::uses_time)
    }

    pub fn drift_into(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<()> {
        for (i, (e, slot)) in self.drift.iter().zip(out.iter_mut()).enumerate() {
            *slot = e.eval(t, x, u).map_err(|source| Error::Eval {
                context: format!("b[{}]", i + 1),
                source,
            })?;
        }
        Ok(())
    }

    /// Writes σ row major into `out` (length d²).
    pub fn diffusion_into(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.diffusion.len();
        for (i, row) in self.diffusion.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                out[i * d + j] = e.eval(t, x, u).map_err(|source| Error::Eval {
                    context: format!("sigma[{}][{}]", i + 1, j + 1),
                    source,
                })?;
            }
        }
        Ok(())
    }

    /// Evaluates `f`; a negative value is a hard error.
    pub fn reward(&self, t: f64, x: &[f64], u: &[f64]) -> Result<f64> {
        let value = self.reward.eval(t, x, u).map_err(|source| Error::Eval {
            context: "f".into(),
            source,
        })?;
        if value < 0.0 {
            return Err(Error::NegativeReward {
                value,
                t,
                x: x.to_vec(),
                u: u.to_vec(),
            });
        }
        Ok(value)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub horizon: f64,
    pub domain: Domain,
    pub coefficients: CoefficientSet,
    pub control_space: ControlSpace,
}

impl ProblemSpec {
    pub fn state_dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn control_dim(&self) -> usize {
        self.control_space.dim
    }

    /// Parses a problem file (TOML sections `[horizon]`, `[domain]`,
    /// `[coefficients]`, `[control_space]`).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ProblemFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        file.into_spec()
    }

    /// SHA-256 of a canonical rendering; ties value grids to the problem
    /// they were solved for.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical().as_bytes());
        hex::encode(h.finalize())
    }

    fn canonical(&self) -> String {
        let c = &self.coefficients;
        let mut s = format!("T={:?};G={};", self.horizon, self.domain.canonical());
        for e in &c.drift {
            s.push_str(&format!("b:{e};"));
        }
        for row in &c.diffusion {
            for e in row {
                s.push_str(&format!("s:{e};"));
            }
        }
        s.push_str(&format!("f:{};m={};", c.reward, self.control_space.dim));
        for l in &self.control_space.levels {
            s.push_str(&format!("U:{:?}{:?}{:?};", l.lo, l.hi, l.mesh_counts));
        }
        s
    }
}

/// A structural problem with a spec.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    HorizonNotPositive(f64),
    DimensionMismatch(String),
    EmptyDomain(String),
    NoLevels,
    LevelsNotNested { level: usize },
    BadLevel { level: usize, reason: String },
    NegativeReward {
        t: f64,
        x: Vec<f64>,
        u: Vec<f64>,
        value: f64,
    },
    NonFinite {
        what: String,
        t: f64,
        x: Vec<f64>,
        u: Vec<f64>,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::HorizonNotPositive(t) => write!(f, "horizon T = {t} is not positive"),
            Violation::DimensionMismatch(s) => write!(f, "dimension mismatch: {s}"),
            Violation::EmptyDomain(s) => write!(f, "empty domain: {s}"),
            Violation::NoLevels => write!(f, "control space has no levels"),
            Violation::LevelsNotNested { level } => {
                write!(f, "levels not nested: U({level}) is not contained in U({})", level + 1)
            }
            Violation::BadLevel { level, reason } => write!(f, "level {level}: {reason}"),
            Violation::NegativeReward { t, x, u, value } => {
                write!(f, "f negative at sample t={t}, x={x:?}, u={u:?}: f = {value}")
            }
            Violation::NonFinite { what, t, x, u } => {
                write!(f, "{what} not finite at sample t={t}, x={x:?}, u={u:?}")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return writeln!(f, "valid");
        }
        for v in &self.violations {
            writeln!(f, "violation: {v}")?;
        }
        Ok(())
    }
}

const VALIDATION_SAMPLES: usize = 512;

/// Checks structural invariants and samples the coefficients on the
/// envelope `t ∈ [0,T]`, `|x_j| ≤ envelope`, `u ∈ U(n)` for every level.
/// Deterministic: the sample stream has a fixed key.
pub fn validate(spec: &ProblemSpec) -> ValidationReport {
    validate_with_envelope(spec, DEFAULT_ENVELOPE)
}

pub fn validate_with_envelope(spec: &ProblemSpec, envelope: f64) -> ValidationReport {
    let mut violations = Vec::new();
    let d = spec.state_dim();
    let m = spec.control_dim();
    let c = &spec.coefficients;

    if !(spec.horizon > 0.0) {
        violations.push(Violation::HorizonNotPositive(spec.horizon));
    }
    if d == 0 {
        violations.push(Violation::DimensionMismatch("state dimension is 0".into()));
    }
    if c.drift.len() != d {
        violations.push(Violation::DimensionMismatch(format!(
            "b has {} entries, domain dimension is {d}",
            c.drift.len()
        )));
    }
    if c.diffusion.len() != d || c.diffusion.iter().any(|r| r.len() != d) {
        violations.push(Violation::DimensionMismatch(format!(
            "sigma must be {d}x{d}"
        )));
    }
    let expr_dims_ok = c
        .drift
        .iter()
        .chain(c.diffusion.iter().flatten())
        .chain(std::iter::once(&c.reward))
        .all(|e| e.state_dim() == d && e.control_dim() == m);
    if !expr_dims_ok {
        violations.push(Violation::DimensionMismatch(format!(
            "coefficient expressions not declared for (d, m) = ({d}, {m})"
        )));
    }

    match &spec.domain {
        Domain::Box { lo, hi } => {
            if lo.len() != hi.len() {
                violations.push(Violation::DimensionMismatch("box corners differ in length".into()));
            } else if lo.iter().zip(hi).any(|(l, h)| !(l < h)) {
                violations.push(Violation::EmptyDomain("box has lo >= hi on some axis".into()));
            }
        }
        Domain::Ball { radius, .. } => {
            if !(*radius > 0.0) {
                violations.push(Violation::EmptyDomain(format!("ball radius {radius}")));
            }
        }
        Domain::Halfspace { normal, offset } => {
            if dot(normal, normal) == 0.0 || !offset.is_finite() {
                violations.push(Violation::EmptyDomain("halfspace normal is zero".into()));
            }
        }
        Domain::Expression { phi, lipschitz, dim } => {
            if phi.uses_time() || phi.uses_control() {
                violations.push(Violation::DimensionMismatch(
                    "domain expression may only use x".into(),
                ));
            }
            if !(*lipschitz > 0.0) {
                violations.push(Violation::EmptyDomain(format!(
                    "expression domain needs a positive Lipschitz bound, got {lipschitz}"
                )));
            }
            let mut stream = UniformStream::new(derive_seed(0, &[tags::VALIDATE, 1]), 0);
            let mut x = vec![0.0; *dim];
            let found = (0..4096).any(|_| {
                x.iter_mut()
                    .for_each(|v| *v = stream.uniform(-envelope, envelope));
                spec.domain.contains(&x)
            }) || spec.domain.contains(&vec![0.0; *dim]);
            if !found {
                violations.push(Violation::EmptyDomain(
                    "no sampled point satisfies phi(x) > 0".into(),
                ));
            }
        }
    }

    let cs = &spec.control_space;
    if cs.levels.is_empty() {
        violations.push(Violation::NoLevels);
    }
    for (i, level) in cs.levels.iter().enumerate() {
        let n = i + 1;
        if level.lo.len() != cs.dim || level.hi.len() != cs.dim || level.mesh_counts.len() != cs.dim
        {
            violations.push(Violation::DimensionMismatch(format!(
                "level {n} does not have control dimension {}",
                cs.dim
            )));
            continue;
        }
        if level.lo.iter().zip(&level.hi).any(|(l, h)| !(l <= h)) {
            violations.push(Violation::BadLevel {
                level: n,
                reason: "lo > hi".into(),
            });
        }
        if level.mesh_counts.iter().any(|&k| k < 1) {
            violations.push(Violation::BadLevel {
                level: n,
                reason: "mesh count below 1".into(),
            });
        }
        if let Some(next) = cs.levels.get(i + 1) {
            if next.lo.len() == cs.dim && !level.is_inside(next) {
                violations.push(Violation::LevelsNotNested { level: n });
            }
        }
    }

    // Coefficient sampling only makes sense once the shapes line up.
    let shapes_ok = violations.iter().all(|v| {
        !matches!(
            v,
            Violation::DimensionMismatch(_) | Violation::NoLevels | Violation::HorizonNotPositive(_)
        )
    });
    if shapes_ok {
        sample_coefficients(spec, envelope, &mut violations);
    }
    ValidationReport { violations }
}

fn sample_coefficients(spec: &ProblemSpec, envelope: f64, violations: &mut Vec<Violation>) {
    let d = spec.state_dim();
    let c = &spec.coefficients;
    let mut x = vec![0.0; d];
    let mut b = vec![0.0; d];
    let mut s = vec![0.0; d * d];
    let mut reported_reward = false;
    let mut reported_drift = false;
    let mut reported_sigma = false;
    for (li, level) in spec.control_space.levels.iter().enumerate() {
        let mut stream = UniformStream::new(derive_seed(0, &[tags::VALIDATE]), li as u64);
        let mesh = level.mesh_points();
        let mut u = vec![0.0; level.dim()];
        for k in 0..VALIDATION_SAMPLES + mesh.len() {
            let t = stream.uniform(0.0, spec.horizon);
            x.iter_mut()
                .for_each(|v| *v = stream.uniform(-envelope, envelope));
            if k < mesh.len() {
                u.copy_from_slice(&mesh[k]);
            } else {
                for (j, v) in u.iter_mut().enumerate() {
                    *v = stream.uniform(level.lo[j], level.hi[j]);
                }
            }
            if !reported_reward {
                match c.reward.eval(t, &x, &u) {
                    Ok(v) if v < 0.0 => {
                        reported_reward = true;
                        violations.push(Violation::NegativeReward {
                            t,
                            x: x.clone(),
                            u: u.clone(),
                            value: v,
                        });
                    }
                    Ok(v) if v.is_finite() => {}
                    _ => {
                        reported_reward = true;
                        violations.push(Violation::NonFinite {
                            what: "f".into(),
                            t,
                            x: x.clone(),
                            u: u.clone(),
                        });
                    }
                }
            }
            if !reported_drift
                && (c.drift_into(t, &x, &u, &mut b).is_err() || b.iter().any(|v| !v.is_finite()))
            {
                reported_drift = true;
                violations.push(Violation::NonFinite {
                    what: "b".into(),
                    t,
                    x: x.clone(),
                    u: u.clone(),
                });
            }
            if !reported_sigma
                && (c.diffusion_into(t, &x, &u, &mut s).is_err()
                    || s.iter().any(|v| !v.is_finite()))
            {
                reported_sigma = true;
                violations.push(Violation::NonFinite {
                    what: "sigma".into(),
                    t,
                    x: x.clone(),
                    u: u.clone(),
                });
            }
        }
    }
}

/// Sampled Lipschitz and linear-growth constants of `(b, σ)` on one level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzEstimate {
    pub k_lip: f64,
    pub k_growth: f64,
}

/// Estimates `K_n` for level `n` by sampling.
///
/// The sample set for level `n` is the union of `n_samples` draws from each
/// of `U(1), ..., U(n)` with per-level streams, so sample sets are nested
/// and the estimate is monotone in `n`. Pairs `(x, y)` use `y = x + h e`
/// with a random unit direction `e` and `h` log-uniform in
/// `[1e-3, 1] * envelope`, so both local and global slopes are probed.
pub fn estimate_lipschitz(
    spec: &ProblemSpec,
    level: usize,
    n_samples: usize,
    seed: u64,
) -> Result<LipschitzEstimate> {
    estimate_lipschitz_with_envelope(spec, level, n_samples, seed, DEFAULT_ENVELOPE)
}

pub fn estimate_lipschitz_with_envelope(
    spec: &ProblemSpec,
    level: usize,
    n_samples: usize,
    seed: u64,
    envelope: f64,
) -> Result<LipschitzEstimate> {
    spec.control_space.level(level)?;
    let d = spec.state_dim();
    let c = &spec.coefficients;
    let mut x = vec![0.0; d];
    let mut y = vec![0.0; d];
    let mut dir = vec![0.0; d];
    let (mut bx, mut by) = (vec![0.0; d], vec![0.0; d]);
    let (mut sx, mut sy) = (vec![0.0; d * d], vec![0.0; d * d]);
    let mut k_lip: f64 = 0.0;
    let mut k_growth: f64 = 0.0;

    let eval = |t: f64, x: &[f64], u: &[f64], b: &mut [f64], s: &mut [f64]| -> Result<()> {
        c.drift_into(t, x, u, b)?;
        c.diffusion_into(t, x, u, s)?;
        if let Some(i) = b.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteCoefficient {
                what: format!("b[{}] = {}", i + 1, c.drift[i]),
                t,
                x: x.to_vec(),
                u: u.to_vec(),
            });
        }
        if let Some(i) = s.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteCoefficient {
                what: format!("sigma[{}][{}] = {}", i / d + 1, i % d + 1, c.diffusion[i / d][i % d]),
                t,
                x: x.to_vec(),
                u: u.to_vec(),
            });
        }
        Ok(())
    };

    for k in 1..=level {
        let lvl = spec.control_space.level(k)?;
        let mut stream = UniformStream::new(derive_seed(seed, &[tags::LIPSCHITZ, k as u64]), 0);
        let mut u = vec![0.0; lvl.dim()];
        for _ in 0..n_samples {
            let t = stream.uniform(0.0, spec.horizon);
            x.iter_mut()
                .for_each(|v| *v = stream.uniform(-envelope, envelope));
            for (j, v) in u.iter_mut().enumerate() {
                *v = stream.uniform(lvl.lo[j], lvl.hi[j]);
            }
            let mut norm = 0.0;
            while norm < 1e-12 {
                for v in dir.iter_mut() {
                    *v = stream.normal_pair().0;
                }
                norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            }
            let h = envelope * 10f64.powf(-3.0 * stream.next_f64());
            for j in 0..d {
                y[j] = x[j] + h * dir[j] / norm;
            }
            eval(t, &x, &u, &mut bx, &mut sx)?;
            eval(t, &y, &u, &mut by, &mut sy)?;
            let dist = norm_diff(&x, &y);
            if dist > 0.0 {
                let num = norm_diff(&bx, &by) + norm_diff(&sx, &sy);
                k_lip = k_lip.max(num / dist);
            }
            let zero_b = vec![0.0; d];
            let zero_s = vec![0.0; d * d];
            for (p, b, s) in [(&x, &bx, &sx), (&y, &by, &sy)] {
                let px = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                let g = (norm_diff(b, &zero_b) + norm_diff(s, &zero_s)) / (1.0 + px);
                k_growth = k_growth.max(g);
            }
        }
    }
    Ok(LipschitzEstimate { k_lip, k_growth })
}
