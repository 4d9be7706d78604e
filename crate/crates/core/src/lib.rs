//! Controlled diffusions up to the exit time from a cylinder `[0,T) × G`.
//!
//! The crate simulates controlled SDE paths by Euler–Maruyama, computes the
//! value function `v(t,x) = sup_α E ∫_t^τ f ds` on a grid by a monotone
//! backward recursion, and checks the dynamic programming principle
//! numerically: the concatenation and flow identities of discrete paths,
//! the lower semicontinuity of exit times, and ε-optimal policy stitching
//! over a half-open cover.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod dp;
pub mod dpp;
pub mod error;
pub mod exit;
pub mod expr;
pub mod montecarlo;
pub mod paths;
pub mod policy;
pub mod problem;
pub mod rng;

pub use dp::{SpaceGrid, ValueGrid};
pub use dpp::{Cover, StoppingRule};
pub use error::{Error, Result};
pub use expr::Expression;
pub use montecarlo::{Estimate, McOptions};
pub use paths::{BrownianPath, SamplePath, TimeMesh};
pub use policy::ControlPolicy;
pub use problem::{ControlLevel, ControlSpace, CoefficientSet, Domain, ProblemSpec};
