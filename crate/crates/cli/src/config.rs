//! Run configuration (TOML). The problem is either inline (`[horizon]`,
//! `[domain]`, `[coefficients]`, `[control_space]`) or loaded from
//! `[run] problem = "file.toml"`, relative to the config file.
//!
//! ```toml
//! [run]
//! seed = 7
//! level = 1
//!
//! [grid]
//! nodes = [401]          # or dx = 0.005
//! slices = 1000
//!
//! [monte_carlo]
//! n_steps = 2000
//! n_paths = 10000
//! bridge = true
//!
//! [query]
//! t = 0.0
//! x = [0.0]
//!
//! [verify]
//! rules = [{ kind = "constant", s = 2.5 }, { kind = "exit", domain = { kind = "box", lo = [-0.5], hi = [0.5] } }]
//! random_policies = 3
//!
//! [verify.stitch]
//! rule = { kind = "constant", s = 1.0 }
//! radius = 0.1
//! ```
//!
//! Unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use exitdpp::dpp::StoppingRule;
use exitdpp::problem::{CoefficientSection, ControlSpaceSection, DomainSection, HorizonSection, ProblemFile};
use exitdpp::ProblemSpec;

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub horizon: Option<HorizonSection>,
    pub domain: Option<DomainSection>,
    pub coefficients: Option<CoefficientSection>,
    pub control_space: Option<ControlSpaceSection>,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub monte_carlo: McSection,
    #[serde(default)]
    pub query: QuerySection,
    #[serde(default)]
    pub estimate: EstimateSection,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub cover: CoverSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub problem: Option<PathBuf>,
    pub seed: u64,
    #[serde(default = "one")]
    pub level: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub nodes: Option<Vec<usize>>,
    pub dx: Option<f64>,
    /// Defaults to the CFL limit scaled by `cfl_safety`.
    pub n_steps: Option<usize>,
    #[serde(default = "default_safety")]
    pub cfl_safety: f64,
    #[serde(default = "default_slices")]
    pub slices: usize,
    #[serde(default = "default_truncate")]
    pub truncate: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            nodes: None,
            dx: None,
            n_steps: None,
            cfl_safety: default_safety(),
            slices: default_slices(),
            truncate: default_truncate(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    #[serde(default = "default_mc_steps")]
    pub n_steps: usize,
    #[serde(default = "default_paths")]
    pub n_paths: usize,
    #[serde(default = "yes")]
    pub bridge: bool,
    pub reward_cap: Option<f64>,
    pub nested_cap: Option<u64>,
}

impl Default for McSection {
    fn default() -> Self {
        McSection {
            n_steps: default_mc_steps(),
            n_paths: default_paths(),
            bridge: true,
            reward_cap: None,
            nested_cap: None,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuerySection {
    #[serde(default)]
    pub t: f64,
    /// Defaults to the centre of the grid box.
    pub x: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateSection {
    /// Feedback expressions in `(t, x)`, one per control axis; `"argmax"`
    /// as the only entry uses the solved grid's policy. Defaults to zero.
    pub policy: Option<Vec<String>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub policy: Option<Vec<String>>,
    #[serde(default = "default_sim_paths")]
    pub n_paths: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            policy: None,
            n_paths: default_sim_paths(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum RuleSection {
    Constant { s: f64 },
    Exit { domain: DomainSection },
    Min { of: Vec<RuleSection> },
}

impl RuleSection {
    pub fn into_rule(self) -> Result<StoppingRule, CliError> {
        Ok(match self {
            RuleSection::Constant { s } => StoppingRule::Constant(s),
            RuleSection::Exit { domain } => StoppingRule::ExitOf(domain.into_domain()?),
            RuleSection::Min { of } => StoppingRule::MinOf(
                of.into_iter()
                    .map(RuleSection::into_rule)
                    .collect::<Result<_, _>>()?,
            ),
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    pub name: String,
    pub u: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    /// Defaults to `T/4`, `T/2` and the exit from `G` shrunk by half.
    pub rules: Option<Vec<RuleSection>>,
    #[serde(default)]
    pub policies: Vec<PolicySection>,
    /// Adds argmax, zero and `±sign(x_1)` feedbacks.
    #[serde(default = "yes")]
    pub default_policies: bool,
    #[serde(default = "three")]
    pub random_policies: usize,
    /// Binary grid to check instead of solving afresh.
    pub grid_file: Option<PathBuf>,
    pub c_disc: Option<f64>,
    pub opt_per_pitch: Option<f64>,
    #[serde(default)]
    pub stitch: StitchSection,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection {
            rules: None,
            policies: Vec::new(),
            default_policies: true,
            random_policies: three(),
            grid_file: None,
            c_disc: None,
            opt_per_pitch: None,
            stitch: StitchSection::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StitchSection {
    #[serde(default = "yes")]
    pub enabled: bool,
    /// Defaults to `Constant(T/2)`.
    pub rule: Option<RuleSection>,
    /// Name of the base policy; defaults to `"zero"`.
    pub base: Option<String>,
    #[serde(default = "default_radius")]
    pub radius: f64,
    pub pitch_t: Option<f64>,
    pub pitch_x: Option<f64>,
    #[serde(default = "default_slope")]
    pub minorant_slope: f64,
    /// Defaults to `ε_disc + ε_opt`.
    pub eps_declared: Option<f64>,
    /// Defaults to `ε_disc`.
    pub tol: Option<f64>,
}

impl Default for StitchSection {
    fn default() -> Self {
        StitchSection {
            enabled: true,
            rule: None,
            base: None,
            radius: default_radius(),
            pitch_t: None,
            pitch_x: None,
            minorant_slope: default_slope(),
            eps_declared: None,
            tol: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoverSection {
    #[serde(default = "default_radius")]
    pub radius: f64,
    pub pitch_t: Option<f64>,
    pub pitch_x: Option<f64>,
    pub t_lo: Option<f64>,
    pub t_hi: Option<f64>,
}

impl Default for CoverSection {
    fn default() -> Self {
        CoverSection {
            radius: default_radius(),
            pitch_t: None,
            pitch_x: None,
            t_lo: None,
            t_hi: None,
        }
    }
}

fn one() -> usize {
    1
}
fn three() -> usize {
    3
}
fn yes() -> bool {
    true
}
fn default_safety() -> f64 {
    0.95
}
fn default_slices() -> usize {
    1000
}
fn default_truncate() -> f64 {
    10.0
}
fn default_mc_steps() -> usize {
    1000
}
fn default_paths() -> usize {
    10_000
}
fn default_sim_paths() -> usize {
    1
}
fn default_radius() -> f64 {
    0.1
}
fn default_slope() -> f64 {
    20.0
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<(RunConfig, ProblemSpec), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let spec = cfg.problem(path.parent().unwrap_or(Path::new(".")))?;
        cfg.check_budgets()?;
        Ok((cfg, spec))
    }

    fn problem(&self, base: &Path) -> Result<ProblemSpec, CliError> {
        let inline = self.horizon.is_some() || self.domain.is_some() || self.coefficients.is_some();
        match (&self.run.problem, inline) {
            (Some(_), true) => Err(CliError::Config(
                "give either run.problem or inline problem sections, not both".into(),
            )),
            (Some(file), false) => {
                let path = base.join(file);
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                Ok(ProblemSpec::from_toml_str(&text)?)
            }
            (None, _) => {
                let missing = |name: &str| CliError::Config(format!("missing [{name}] section"));
                let file = ProblemFile {
                    horizon: self.horizon.clone().ok_or_else(|| missing("horizon"))?,
                    domain: self.domain.clone().ok_or_else(|| missing("domain"))?,
                    coefficients: self.coefficients.clone().ok_or_else(|| missing("coefficients"))?,
                    control_space: self.control_space.clone(),
                };
                Ok(file.into_spec()?)
            }
        }
    }

    fn check_budgets(&self) -> Result<(), CliError> {
        let mc = &self.monte_carlo;
        if mc.n_steps == 0 || mc.n_paths == 0 || self.grid.slices == 0 || self.simulate.n_paths == 0 {
            return Err(CliError::Config("budgets (n_steps, n_paths, slices) must be positive".into()));
        }
        if !(self.grid.cfl_safety > 0.0 && self.grid.cfl_safety <= 1.0) {
            return Err(CliError::Config("grid.cfl_safety must lie in (0, 1]".into()));
        }
        Ok(())
    }
}
