//! Control policies: state feedback, open-loop tables, solver lookup tables
//! and stitched composites.

use std::sync::Arc;

use crate::dp::SpaceGrid;
use crate::dpp::{Cover, StoppingRule};
use crate::error::{Error, Result};
use crate::expr::Expression;
use crate::paths::{SamplePath, TimeMesh};
use crate::problem::{ControlLevel, Domain, ProblemSpec};

/// What a policy sees when it picks the control for `[t_k, t_{k+1})`.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub k: usize,
    pub t: f64,
    pub x: &'a [f64],
    pub start_index: usize,
    pub mesh: &'a TimeMesh,
    pub domain: &'a Domain,
}

/// Lookup-table feedback produced by the grid solver: nearest space node,
/// latest stored time slice at or before `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackTable {
    pub space: SpaceGrid,
    pub slice_times: Vec<f64>,
    /// `controls[(slice * n_nodes + node) * m + j]`.
    pub controls: Vec<f64>,
    pub control_dim: usize,
}

impl FeedbackTable {
    pub fn slice_for(&self, t: f64) -> usize {
        let tol = 1e-9 * self.slice_times.last().copied().unwrap_or(1.0).abs().max(1.0);
        match self.slice_times.partition_point(|&s| s <= t + tol) {
            0 => 0,
            n => n - 1,
        }
    }

    pub fn lookup(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let slice = self.slice_for(t);
        let node = self.space.nearest(x);
        let m = self.control_dim;
        let base = (slice * self.space.n_nodes() + node) * m;
        out[..m].copy_from_slice(&self.controls[base..base + m]);
    }
}

/// The composite control `β`: `base` before the stopping time `θ`, then the
/// policy of the unique cover cell containing `(θ, X_θ)`.
///
/// `θ` is clipped by the exit time. If the path has already left `G` when
/// `θ` is reached, no cell is looked up and `base` keeps running; the
/// reward has stopped accruing by then.
#[derive(Debug, Clone)]
pub struct Stitched {
    pub base: ControlPolicy,
    pub rule: StoppingRule,
    pub cover: Arc<Cover>,
    pub cell_policies: Vec<ControlPolicy>,
}

#[derive(Debug, Clone)]
pub enum ControlPolicy {
    /// `u = g(t, x)`, one expression per control axis (parsed with `m = 0`).
    Feedback(Vec<Expression>),
    /// `table[k - start_index]` applies on `[t_k, t_{k+1})`; indices before
    /// the table use its first row and indices past it use the last row.
    OpenLoop {
        start_index: usize,
        table: Vec<Vec<f64>>,
    },
    Table(Arc<FeedbackTable>),
    Stitched(Arc<Stitched>),
}

/// Per-path mutable state (only stitched policies carry any).
#[derive(Debug, Clone)]
pub enum PolicyState {
    Stateless,
    Stitched {
        theta: Option<usize>,
        cell: Option<usize>,
        base: Box<PolicyState>,
        suffix: Option<Box<PolicyState>>,
    },
}

impl ControlPolicy {
    /// Parses feedback expressions in `(t, x)`.
    pub fn feedback(exprs: &[&str], d: usize) -> Result<ControlPolicy> {
        Ok(ControlPolicy::Feedback(
            exprs
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    Expression::parse(s, d, 0).map_err(|source| Error::Parse {
                        context: format!("policy[{}]", i + 1),
                        source,
                    })
                })
                .collect::<Result<_>>()?,
        ))
    }

    /// The zero-dimensional policy of an uncontrolled problem.
    pub fn none() -> ControlPolicy {
        ControlPolicy::Feedback(Vec::new())
    }

    pub fn stitched(
        base: ControlPolicy,
        rule: StoppingRule,
        cover: Arc<Cover>,
        cell_policies: Vec<ControlPolicy>,
    ) -> Result<ControlPolicy> {
        if cell_policies.len() != cover.cells.len() {
            return Err(Error::InvalidArgument(format!(
                "{} cell policies for {} cells",
                cell_policies.len(),
                cover.cells.len()
            )));
        }
        Ok(ControlPolicy::Stitched(Arc::new(Stitched {
            base,
            rule,
            cover,
            cell_policies,
        })))
    }

    pub fn initial_state(&self) -> PolicyState {
        match self {
            ControlPolicy::Stitched(s) => PolicyState::Stitched {
                theta: None,
                cell: None,
                base: Box::new(s.base.initial_state()),
                suffix: None,
            },
            _ => PolicyState::Stateless,
        }
    }

    /// Writes the (unclamped) control for step `ctx.k` into `out`.
    pub fn control(&self, state: &mut PolicyState, ctx: &StepContext, out: &mut [f64]) -> Result<()> {
        match self {
            ControlPolicy::Feedback(exprs) => {
                for (i, (e, slot)) in exprs.iter().zip(out.iter_mut()).enumerate() {
                    *slot = e.eval(ctx.t, ctx.x, &[]).map_err(|source| Error::Eval {
                        context: format!("policy[{}]", i + 1),
                        source,
                    })?;
                }
                Ok(())
            }
            ControlPolicy::OpenLoop { start_index, table } => {
                if table.is_empty() {
                    return Err(Error::InvalidArgument("empty open-loop table".into()));
                }
                let row = ctx.k.saturating_sub(*start_index).min(table.len() - 1);
                out.copy_from_slice(&table[row][..out.len()]);
                Ok(())
            }
            ControlPolicy::Table(table) => {
                table.lookup(ctx.t, ctx.x, out);
                Ok(())
            }
            ControlPolicy::Stitched(s) => {
                let PolicyState::Stitched {
                    theta,
                    cell,
                    base,
                    suffix,
                } = state
                else {
                    unreachable!("stitched policy run with a foreign state");
                };
                if theta.is_none() && s.switches_at(ctx) {
                    *theta = Some(ctx.k);
                    if ctx.domain.contains(ctx.x) {
                        let owner = s.cover.owner(ctx.t, ctx.x).ok_or_else(|| Error::Uncovered {
                            t: ctx.t,
                            x: ctx.x.to_vec(),
                        })?;
                        *cell = Some(owner);
                        *suffix = Some(Box::new(s.cell_policies[owner].initial_state()));
                    }
                }
                match (cell, suffix) {
                    (Some(i), Some(st)) => s.cell_policies[*i].control(st, ctx, out),
                    _ => s.base.control(base, ctx, out),
                }
            }
        }
    }
}

impl Stitched {
    /// `θ` is reached at step `k` when the rule fires or the path is outside
    /// `G` (clipping `θ ≤ τ`).
    fn switches_at(&self, ctx: &StepContext) -> bool {
        self.rule.fires(ctx) || !ctx.domain.contains(ctx.x)
    }
}

/// The shifted control `α^{θ,ω}`: the policy that, started at mesh index
/// `theta_index` on a fresh suffix, reproduces what `policy` does after
/// `theta_index` on the concatenated path.
pub fn shift_policy(policy: &ControlPolicy, theta_index: usize, prefix: &SamplePath) -> Result<ControlPolicy> {
    Ok(match policy {
        ControlPolicy::Feedback(_) | ControlPolicy::Table(_) => policy.clone(),
        ControlPolicy::OpenLoop { start_index, table } => {
            let skip = theta_index.saturating_sub(*start_index).min(table.len().saturating_sub(1));
            ControlPolicy::OpenLoop {
                start_index: start_index + skip,
                table: table[skip..].to_vec(),
            }
        }
        ControlPolicy::Stitched(s) => {
            if theta_index > prefix.last_index() {
                return Err(Error::InvalidArgument(format!(
                    "prefix ends at {} before theta index {theta_index}",
                    prefix.last_index()
                )));
            }
            let mesh = prefix.mesh();
            let mut fired = None;
            for k in prefix.start_index()..=theta_index {
                let ctx = StepContext {
                    k,
                    t: mesh.time(k),
                    x: prefix.state(k),
                    start_index: prefix.start_index(),
                    mesh,
                    domain: prefix.domain(),
                };
                if s.switches_at(&ctx) {
                    fired = Some(ctx);
                    break;
                }
            }
            match fired {
                None => ControlPolicy::Stitched(Arc::new(Stitched {
                    base: shift_policy(&s.base, theta_index, prefix)?,
                    rule: s.rule.clone(),
                    cover: s.cover.clone(),
                    cell_policies: s.cell_policies.clone(),
                })),
                Some(ctx) if ctx.domain.contains(ctx.x) => {
                    let owner = s.cover.owner(ctx.t, ctx.x).ok_or_else(|| Error::Uncovered {
                        t: ctx.t,
                        x: ctx.x.to_vec(),
                    })?;
                    shift_policy(&s.cell_policies[owner], theta_index, prefix)?
                }
                Some(_) => shift_policy(&s.base, theta_index, prefix)?,
            }
        }
    })
}

/// Checks that a policy can run against `spec` at `level`.
pub(crate) fn check_policy_dims(policy: &ControlPolicy, spec: &ProblemSpec, level: &ControlLevel) -> Result<()> {
    let m = level.dim();
    let ok = match policy {
        ControlPolicy::Feedback(e) => {
            e.len() == m && e.iter().all(|e| e.state_dim() == spec.state_dim())
        }
        ControlPolicy::OpenLoop { table, .. } => table.iter().all(|r| r.len() >= m),
        ControlPolicy::Table(t) => t.control_dim == m && t.space.dim() == spec.state_dim(),
        ControlPolicy::Stitched(s) => {
            check_policy_dims(&s.base, spec, level)?;
            for p in &s.cell_policies {
                check_policy_dims(p, spec, level)?;
            }
            true
        }
    };
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "policy does not match problem dimensions (d = {}, m = {m})",
            spec.state_dim()
        )))
    }
}
