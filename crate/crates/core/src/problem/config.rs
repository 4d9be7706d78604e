//! Problem file schema (TOML).
//!
//! ```toml
//! [horizon]
//! T = 1.0
//!
//! [domain]
//! kind = "box"            # box | ball | halfspace | expression
//! lo = [-1.0]
//! hi = [1.0]
//!
//! [coefficients]
//! b = "u1"                # one string for d = 1, else a list of d strings
//! sigma = "1"             # one string for d = 1, else d rows of d strings
//! f = "1"
//!
//! [control_space]         # optional; omitted means no control (m = 0)
//! levels = [{ lo = [-1.0], hi = [1.0], mesh = [3] }]
//! ```
//!
//! Unknown keys are rejected.

use serde::Deserialize;

use super::{CoefficientSet, ControlLevel, ControlSpace, Domain, ProblemSpec};
use crate::error::{Error, Result};
use crate::expr::Expression;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub horizon: HorizonSection,
    pub domain: DomainSection,
    pub coefficients: CoefficientSection,
    pub control_space: Option<ControlSpaceSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonSection {
    #[serde(rename = "T")]
    pub t: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DomainSection {
    Box {
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    Ball {
        center: Vec<f64>,
        radius: f64,
    },
    Halfspace {
        normal: Vec<f64>,
        offset: f64,
    },
    Expression {
        expr: String,
        dim: usize,
        #[serde(default = "unit_lipschitz")]
        lipschitz: f64,
    },
}

fn unit_lipschitz() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Matrix {
    Scalar(String),
    Rows(Vec<Vec<String>>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientSection {
    pub b: OneOrMany,
    pub sigma: Matrix,
    pub f: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSpaceSection {
    pub levels: Vec<ControlLevelSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlLevelSection {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub mesh: Vec<usize>,
}

impl DomainSection {
    pub fn into_domain(self) -> Result<Domain> {
        Ok(match self {
            DomainSection::Box { lo, hi } => Domain::Box { lo, hi },
            DomainSection::Ball { center, radius } => Domain::Ball { center, radius },
            DomainSection::Halfspace { normal, offset } => Domain::Halfspace { normal, offset },
            DomainSection::Expression {
                expr,
                dim,
                lipschitz,
            } => {
                let phi = Expression::parse(&expr, dim, 0).map_err(|source| Error::Parse {
                    context: "domain.expr".into(),
                    source,
                })?;
                Domain::Expression {
                    phi,
                    lipschitz,
                    dim,
                }
            }
        })
    }
}

impl ProblemFile {
    pub fn into_spec(self) -> Result<ProblemSpec> {
        let domain = self.domain.into_domain()?;
        let d = domain.dim();
        let control_space = match self.control_space {
            None => ControlSpace::none(),
            Some(cs) if cs.levels.is_empty() => {
                return Err(Error::Config("control_space.levels is empty".into()))
            }
            Some(cs) => ControlSpace {
                dim: cs.levels[0].lo.len(),
                levels: cs
                    .levels
                    .into_iter()
                    .map(|l| ControlLevel::new(l.lo, l.hi, l.mesh))
                    .collect(),
            },
        };
        let m = control_space.dim;
        let parse = |text: &str, context: String| {
            Expression::parse(text, d, m).map_err(|source| Error::Parse { context, source })
        };
        let c = self.coefficients;
        let drift = match c.b {
            OneOrMany::One(s) => vec![parse(&s, "coefficients.b".into())?],
            OneOrMany::Many(v) => v
                .iter()
                .enumerate()
                .map(|(i, s)| parse(s, format!("coefficients.b[{}]", i + 1)))
                .collect::<Result<_>>()?,
        };
        let diffusion = match c.sigma {
            Matrix::Scalar(s) => vec![vec![parse(&s, "coefficients.sigma".into())?]],
            Matrix::Rows(rows) => rows
                .iter()
                .enumerate()
                .map(|(i, row)| {
                    row.iter()
                        .enumerate()
                        .map(|(j, s)| parse(s, format!("coefficients.sigma[{}][{}]", i + 1, j + 1)))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()?,
        };
        let reward = parse(&c.f, "coefficients.f".into())?;
        Ok(ProblemSpec {
            horizon: self.horizon.t,
            domain,
            coefficients: CoefficientSet {
                drift,
                diffusion,
                reward,
            },
            control_space,
        })
    }
}
