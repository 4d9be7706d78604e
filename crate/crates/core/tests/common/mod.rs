#![allow(dead_code)]

use exitdpp::dp::{cfl_limited_steps, solve, SolveOptions, SpaceGrid, ValueGrid};
use exitdpp::ProblemSpec;

pub const CONTROL_3: &str = "[control_space]\nlevels = [{ lo = [-1.0], hi = [1.0], mesh = [3] }]";

/// One-dimensional problem on `G = (-1, 1)`.
pub fn spec_1d(b: &str, sigma: &str, f: &str, horizon: f64, control: &str) -> ProblemSpec {
    ProblemSpec::from_toml_str(&format!(
        "[horizon]\nT = {horizon:?}\n[domain]\nkind = \"box\"\nlo = [-1.0]\nhi = [1.0]\n\
         [coefficients]\nb = \"{b}\"\nsigma = \"{sigma}\"\nf = \"{f}\"\n{control}"
    ))
    .unwrap()
}

/// Brownian motion with unit reward on `(-1, 1)`: `v(t, x) ≈ 1 - x²` for
/// `T - t` large.
pub fn reference_problem() -> ProblemSpec {
    spec_1d("0", "1", "1", 10.0, "")
}

/// Bounded drift control `b = u ∈ [-1, 1]` with unit reward on `(-1, 1)`.
pub fn controlled_problem() -> ProblemSpec {
    spec_1d("u1", "1", "1", 2.0, CONTROL_3)
}

/// Solves on `[-1, 1]` with `nodes` nodes at 0.95 of the CFL limit,
/// keeping about `slices` time slices.
pub fn solve_1d(spec: &ProblemSpec, nodes: usize, slices: usize) -> ValueGrid {
    let space = SpaceGrid::new(vec![-1.0], vec![1.0], vec![nodes]).unwrap();
    let n_steps = cfl_limited_steps(spec, &space, 1, 0.95).unwrap();
    solve(
        spec,
        &space,
        1,
        SolveOptions {
            n_steps,
            save_every: (n_steps / slices).max(1),
            keep_argmax: true,
        },
    )
    .unwrap()
}
