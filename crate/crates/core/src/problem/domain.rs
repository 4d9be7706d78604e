use std::fmt;

use crate::expr::Expression;

/// The open set `G`. Every kind uses strict inequalities, so boundary
/// points are outside.
#[derive(Debug, Clone, PartialEq)]
pub enum Domain {
    /// `lo_j < x_j < hi_j`; bounds may be infinite.
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// `|x - center| < radius`.
    Ball { center: Vec<f64>, radius: f64 },
    /// `normal · x < offset`.
    Halfspace { normal: Vec<f64>, offset: f64 },
    /// `phi(x) > 0`. `lipschitz` must bound the Lipschitz constant of `phi`;
    /// the distance lower bound `phi(x) / lipschitz` is only as sound as
    /// that bound.
    Expression {
        phi: Expression,
        lipschitz: f64,
        dim: usize,
    },
}

impl Domain {
    pub fn interval(lo: f64, hi: f64) -> Domain {
        Domain::Box {
            lo: vec![lo],
            hi: vec![hi],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Domain::Box { lo, .. } => lo.len(),
            Domain::Ball { center, .. } => center.len(),
            Domain::Halfspace { normal, .. } => normal.len(),
            Domain::Expression { dim, .. } => *dim,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Domain::Box { .. } => "box",
            Domain::Ball { .. } => "ball",
            Domain::Halfspace { .. } => "halfspace",
            Domain::Expression { .. } => "expression",
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Domain::Box { lo, hi } => x
                .iter()
                .zip(lo.iter().zip(hi))
                .all(|(&xi, (&l, &h))| l < xi && xi < h),
            Domain::Ball { center, radius } => norm_diff(x, center) < *radius,
            Domain::Halfspace { normal, offset } => dot(normal, x) < *offset,
            Domain::Expression { phi, .. } => phi.eval(0.0, x, &[]).is_ok_and(|v| v > 0.0),
        }
    }

    /// Lower bound on the distance from `x` to the complement of `G`;
    /// exact for box, ball and halfspace, zero outside `G`.
    pub fn dist_lb(&self, x: &[f64]) -> f64 {
        match self {
            Domain::Box { lo, hi } => {
                let mut d = f64::INFINITY;
                for (&xi, (&l, &h)) in x.iter().zip(lo.iter().zip(hi)) {
                    d = d.min(xi - l).min(h - xi);
                }
                d.max(0.0)
            }
            Domain::Ball { center, radius } => (radius - norm_diff(x, center)).max(0.0),
            Domain::Halfspace { normal, offset } => {
                let n = dot(normal, normal).sqrt();
                ((offset - dot(normal, x)) / n).max(0.0)
            }
            Domain::Expression { phi, lipschitz, .. } => match phi.eval(0.0, x, &[]) {
                Ok(v) if v > 0.0 => v / lipschitz,
                _ => 0.0,
            },
        }
    }

    /// Finite bounding box of `G`, if the domain kind provides one.
    pub fn bounding_box(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        match self {
            Domain::Box { lo, hi } => {
                if lo.iter().chain(hi).all(|v| v.is_finite()) {
                    Some((lo.clone(), hi.clone()))
                } else {
                    None
                }
            }
            Domain::Ball { center, radius } => Some((
                center.iter().map(|c| c - radius).collect(),
                center.iter().map(|c| c + radius).collect(),
            )),
            _ => None,
        }
    }

    /// Faces usable by the Brownian-bridge crossing correction: unit normal
    /// and the distance from `x` to the face along it.
    pub(crate) fn face_distances(&self, x: &[f64], out: &mut Vec<(usize, f64, f64)>) -> bool {
        out.clear();
        match self {
            Domain::Box { lo, hi } => {
                for (j, (&l, &h)) in lo.iter().zip(hi).enumerate() {
                    if l.is_finite() {
                        out.push((j, -1.0, x[j] - l));
                    }
                    if h.is_finite() {
                        out.push((j, 1.0, h - x[j]));
                    }
                }
                true
            }
            Domain::Halfspace { .. } => {
                out.push((usize::MAX, 1.0, self.dist_lb(x)));
                true
            }
            _ => false,
        }
    }

    pub(crate) fn canonical(&self) -> String {
        match self {
            Domain::Box { lo, hi } => format!("box{lo:?}{hi:?}"),
            Domain::Ball { center, radius } => format!("ball{center:?}{radius:?}"),
            Domain::Halfspace { normal, offset } => format!("halfspace{normal:?}{offset:?}"),
            Domain::Expression {
                phi,
                lipschitz,
                dim,
            } => format!("expression({phi}){lipschitz:?}{dim}"),
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::Box { lo, hi } => {
                let parts: Vec<String> = lo
                    .iter()
                    .zip(hi)
                    .map(|(l, h)| format!("({l},{h})"))
                    .collect();
                f.write_str(&parts.join("x"))
            }
            Domain::Ball { center, radius } => write!(f, "B({center:?}, {radius})"),
            Domain::Halfspace { normal, offset } => write!(f, "{{x: {normal:?}.x < {offset}}}"),
            Domain::Expression { phi, .. } => write!(f, "{{x: {phi} > 0}}"),
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
