//! Shared fixtures for the benchmarks.

use exitdpp::ProblemSpec;

/// Brownian motion on `(-1, 1)` with unit reward.
pub fn reference_problem() -> ProblemSpec {
    problem("0", "[horizon]\nT = 10.0\n", "")
}

/// Drift `u ∈ {-1, 0, 1}` on `(-1, 1)`, `T = 2`.
pub fn controlled_problem() -> ProblemSpec {
    problem(
        "u1",
        "[horizon]\nT = 2.0\n",
        "[control_space]\nlevels = [{ lo = [-1.0], hi = [1.0], mesh = [3] }]\n",
    )
}

fn problem(b: &str, horizon: &str, control: &str) -> ProblemSpec {
    ProblemSpec::from_toml_str(&format!(
        "{horizon}[domain]\nkind = \"box\"\nlo = [-1.0]\nhi = [1.0]\n\
         [coefficients]\nb = \"{b}\"\nsigma = \"1\"\nf = \"1\"\n{control}"
    ))
    .expect("fixture problem parses")
}
