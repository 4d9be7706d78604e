use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde_json::{json, Value};

use exitdpp::dp::{self, io as grid_io, SolveOptions, SpaceGrid, ValueGrid};
use exitdpp::dpp::{
    build_cover, random_feedback_policies, stitch, stitching_improvement_test, verify_dpp, CoverRegion, LscMinorant,
    StoppingRule, TolModel,
};
use exitdpp::montecarlo::{estimate_j, McOptions};
use exitdpp::paths::Simulator;
use exitdpp::problem::{estimate_lipschitz, validate};
use exitdpp::rng::{derive_seed, tags};
use exitdpp::{ControlPolicy, Domain, ProblemSpec, TimeMesh};

use crate::config::RunConfig;
use crate::{Cli, CliError, Command};

struct Ctx<'a> {
    cfg: RunConfig,
    spec: ProblemSpec,
    seed: u64,
    out: &'a Path,
    started: Instant,
}

pub(crate) fn dispatch(cli: &Cli) -> Result<i32, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required".into()))?;
    let (cfg, spec) = RunConfig::load(path)?;
    let seed = cli.seed.unwrap_or(cfg.run.seed);
    spec.control_space.level(cfg.run.level)?;
    fs::create_dir_all(&cli.out)?;
    let ctx = Ctx {
        cfg,
        spec,
        seed,
        out: &cli.out,
        started: Instant::now(),
    };
    match cli.command {
        Command::Check => check(&ctx),
        Command::Solve => solve(&ctx),
        Command::Estimate => estimate(&ctx),
        Command::Simulate => simulate(&ctx),
        Command::Verify => verify(&ctx),
        Command::Cover => cover(&ctx),
    }
}

impl Ctx<'_> {
    fn level(&self) -> usize {
        self.cfg.run.level
    }

    fn space(&self) -> Result<SpaceGrid, CliError> {
        let g = &self.cfg.grid;
        let (lo, hi, cut) = SpaceGrid::bounds(&self.spec.domain, g.truncate);
        if cut {
            eprintln!(
                "warning: unbounded domain truncated to [-{t}, {t}] on the unbounded axes",
                t = g.truncate
            );
        }
        let d = self.spec.state_dim();
        let counts = match (&g.nodes, g.dx) {
            (Some(_), Some(_)) => return Err(CliError::Config("give grid.nodes or grid.dx, not both".into())),
            (Some(n), None) if n.len() == d => n.clone(),
            (Some(n), None) => {
                return Err(CliError::Config(format!("grid.nodes has {} entries, expected {d}", n.len())))
            }
            (None, Some(dx)) => return Ok(SpaceGrid::covering(&self.spec.domain, dx, g.truncate)?),
            (None, None) => vec![101; d],
        };
        Ok(SpaceGrid::new(lo, hi, counts)?)
    }

    fn solve_grid(&self) -> Result<ValueGrid, CliError> {
        let space = self.space()?;
        let g = &self.cfg.grid;
        let n_steps = match g.n_steps {
            Some(n) => n,
            None => dp::cfl_limited_steps(&self.spec, &space, self.level(), g.cfl_safety)?,
        };
        Ok(dp::solve(
            &self.spec,
            &space,
            self.level(),
            SolveOptions {
                n_steps,
                save_every: (n_steps / g.slices).max(1),
                keep_argmax: true,
            },
        )?)
    }

    fn mc_options(&self, seed: u64) -> Result<McOptions, CliError> {
        let mc = &self.cfg.monte_carlo;
        let mut opts = McOptions::new(TimeMesh::new(0.0, self.spec.horizon, mc.n_steps)?, mc.n_paths, seed)
            .with_bridge(mc.bridge && matches!(self.spec.domain, Domain::Box { .. } | Domain::Halfspace { .. }));
        opts.reward_cap = mc.reward_cap;
        if let Some(cap) = mc.nested_cap {
            opts.nested_cap = cap;
        }
        Ok(opts)
    }

    fn query(&self) -> Result<(f64, Vec<f64>), CliError> {
        let x = match &self.cfg.query.x {
            Some(x) if x.len() == self.spec.state_dim() => x.clone(),
            Some(x) => return Err(CliError::Config(format!("query.x has {} entries", x.len()))),
            None => {
                let (lo, hi, _) = SpaceGrid::bounds(&self.spec.domain, self.cfg.grid.truncate);
                lo.iter().zip(&hi).map(|(l, h)| 0.5 * (l + h)).collect()
            }
        };
        Ok((self.cfg.query.t, x))
    }

    fn zero_policy(&self) -> Result<ControlPolicy, CliError> {
        let m = self.spec.control_dim();
        Ok(ControlPolicy::feedback(&vec!["0"; m], self.spec.state_dim())?)
    }

    fn policy(&self, exprs: Option<&Vec<String>>, grid: Option<&ValueGrid>) -> Result<ControlPolicy, CliError> {
        match exprs {
            None => self.zero_policy(),
            Some(v) if v.len() == 1 && v[0] == "argmax" => match grid {
                Some(g) => Ok(g.extract_policy()?),
                None => Err(CliError::Config("argmax policy needs a solved grid".into())),
            },
            Some(v) => {
                let refs: Vec<&str> = v.iter().map(String::as_str).collect();
                Ok(ControlPolicy::feedback(&refs, self.spec.state_dim())?)
            }
        }
    }

    fn write_json(&self, name: &str, value: &Value) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(self.out.join(name), text)?;
        Ok(())
    }

    /// Timing lives apart from the deterministic outputs.
    fn write_meta(&self, command: &str) -> Result<(), CliError> {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        self.write_json(
            "meta.json",
            &json!({
                "command": command,
                "timestamp_unix": now,
                "runtime_seconds": self.started.elapsed().as_secs_f64(),
                "workers": rayon::current_num_threads(),
            }),
        )
    }
}

fn check(ctx: &Ctx) -> Result<i32, CliError> {
    let report = validate(&ctx.spec);
    print!("{report}");
    if !report.is_valid() {
        return Ok(1);
    }
    for level in 1..=ctx.spec.control_space.n_levels() {
        let est = estimate_lipschitz(&ctx.spec, level, 2000, ctx.seed)?;
        println!("level {level}: K_lip = {:.6}, K_growth = {:.6}", est.k_lip, est.k_growth);
    }
    Ok(0)
}

fn grid_summary(grid: &ValueGrid) -> Value {
    json!({
        "spec_hash": grid.meta.spec_hash,
        "level": grid.meta.level,
        "nodes": grid.space.counts,
        "lo": grid.space.lo,
        "hi": grid.space.hi,
        "n_steps": grid.meta.n_steps,
        "dt": grid.meta.dt(),
        "save_every": grid.meta.save_every,
        "slices": grid.n_slices(),
        "cfl_max": grid.meta.cfl_max,
        "cfl_margin": 1.0 - grid.meta.cfl_max,
        "min_weight": grid.meta.min_weight,
    })
}

fn solve(ctx: &Ctx) -> Result<i32, CliError> {
    let grid = ctx.solve_grid()?;
    let (t, x) = ctx.query()?;
    let v = grid.evaluate(t, &x);
    grid_io::write_csv(&grid, BufWriter::new(File::create(ctx.out.join("grid.csv"))?))?;
    grid_io::write_binary(&grid, BufWriter::new(File::create(ctx.out.join("grid.bin"))?))?;
    let mut summary = grid_summary(&grid);
    summary["query"] = json!({ "t": t, "x": x, "v": v });
    ctx.write_json("solve.json", &summary)?;
    ctx.write_meta("solve")?;
    println!("v({t}, {x:?}) = {v:.6}");
    Ok(0)
}

fn estimate(ctx: &Ctx) -> Result<i32, CliError> {
    let exprs = ctx.cfg.estimate.policy.as_ref();
    let grid = match exprs {
        Some(v) if v.len() == 1 && v[0] == "argmax" => Some(ctx.solve_grid()?),
        _ => None,
    };
    let policy = ctx.policy(exprs, grid.as_ref())?;
    let (t, x) = ctx.query()?;
    let est = estimate_j(&ctx.spec, ctx.level(), t, &x, &policy, &ctx.mc_options(ctx.seed)?)?;
    println!("mean,std_error,n_paths,seed,saturated");
    println!("{:?},{:?},{},{},{}", est.mean, est.std_error, est.n_paths, est.seed, est.saturated);
    ctx.write_json("estimate.json", &json!({ "t": t, "x": x, "estimate": est }))?;
    ctx.write_meta("estimate")?;
    Ok(0)
}

fn simulate(ctx: &Ctx) -> Result<i32, CliError> {
    let exprs = ctx.cfg.simulate.policy.as_ref();
    let grid = match exprs {
        Some(v) if v.len() == 1 && v[0] == "argmax" => Some(ctx.solve_grid()?),
        _ => None,
    };
    let policy = ctx.policy(exprs, grid.as_ref())?;
    let (t, x) = ctx.query()?;
    let mesh = TimeMesh::new(0.0, ctx.spec.horizon, ctx.cfg.monte_carlo.n_steps)?;
    let sim = Simulator::new(&ctx.spec, ctx.level(), mesh)?;
    let start = mesh.index_floor(t);
    let domain = &ctx.spec.domain;
    let mut out = BufWriter::new(File::create(ctx.out.join("paths.csv"))?);
    for i in 0..ctx.cfg.simulate.n_paths as u64 {
        let path = sim.simulate_keyed(start, &x, &policy, ctx.seed, i, |_, xk| !domain.contains(xk))?;
        let mut buf = Vec::new();
        path.write_csv(&mut buf)?;
        let text = String::from_utf8(buf).expect("CSV is UTF-8");
        for (j, line) in text.lines().enumerate() {
            if j == 0 {
                if i == 0 {
                    writeln!(out, "path,{line}")?;
                }
            } else {
                writeln!(out, "{i},{line}")?;
            }
        }
    }
    out.flush()?;
    ctx.write_meta("simulate")?;
    Ok(0)
}

fn default_rules(spec: &ProblemSpec) -> Vec<StoppingRule> {
    let t = spec.horizon;
    let mut rules = vec![StoppingRule::Constant(t / 4.0), StoppingRule::Constant(t / 2.0)];
    let inner = match &spec.domain {
        Domain::Box { lo, hi } if lo.iter().chain(hi).all(|v| v.is_finite()) => Some(Domain::Box {
            lo: lo.iter().zip(hi).map(|(l, h)| 0.75 * l + 0.25 * h).collect(),
            hi: lo.iter().zip(hi).map(|(l, h)| 0.25 * l + 0.75 * h).collect(),
        }),
        Domain::Ball { center, radius } => Some(Domain::Ball {
            center: center.clone(),
            radius: 0.5 * radius,
        }),
        _ => None,
    };
    rules.extend(inner.map(StoppingRule::ExitOf));
    rules
}

fn verify(ctx: &Ctx) -> Result<i32, CliError> {
    let spec = &ctx.spec;
    let vcfg = &ctx.cfg.verify;
    let (grid, source) = match &vcfg.grid_file {
        Some(file) => (grid_io::read_binary(File::open(file)?, spec)?, "file"),
        None => (ctx.solve_grid()?, "solved"),
    };
    if grid.meta.level != ctx.level() {
        return Err(CliError::Failed(format!(
            "grid was solved at level {}, run uses level {}",
            grid.meta.level,
            ctx.level()
        )));
    }
    let (t, x) = ctx.query()?;
    let rules: Vec<(String, StoppingRule)> = match &vcfg.rules {
        Some(list) => list
            .iter()
            .cloned()
            .map(|r| r.into_rule().map(|r| (r.to_string(), r)))
            .collect::<Result<_, _>>()?,
        None => default_rules(spec).into_iter().map(|r| (r.to_string(), r)).collect(),
    };
    let d = spec.state_dim();
    let m = spec.control_dim();
    let mut policies: Vec<(String, ControlPolicy)> = Vec::new();
    if vcfg.default_policies {
        if m == 0 {
            policies.push(("trivial".into(), ControlPolicy::none()));
        } else {
            policies.push(("argmax".into(), grid.extract_policy()?));
            policies.push(("zero".into(), ctx.zero_policy()?));
            for sign in ["", "-"] {
                let e = format!("{sign}sign(x1)");
                policies.push((e.clone(), ControlPolicy::feedback(&vec![e.as_str(); m], d)?));
            }
        }
    }
    for p in &vcfg.policies {
        let refs: Vec<&str> = p.u.iter().map(String::as_str).collect();
        policies.push((p.name.clone(), ControlPolicy::feedback(&refs, d)?));
    }
    if m > 0 {
        policies.extend(random_feedback_policies(d, m, vcfg.random_policies, ctx.seed)?);
    }
    if policies.is_empty() {
        return Err(CliError::Config("verify needs at least one policy".into()));
    }
    let defaults = TolModel::default();
    let tol = TolModel {
        c_disc: vcfg.c_disc.unwrap_or(defaults.c_disc),
        opt_per_pitch: vcfg.opt_per_pitch.unwrap_or(defaults.opt_per_pitch),
    };
    let opts = ctx.mc_options(ctx.seed)?;
    let report = verify_dpp(spec, ctx.level(), &grid, t, &x, &rules, &policies, &opts, &tol)?;
    eprintln!(
        "dpp: v_ref = {:.6}, flag U = {}, flag A = {}",
        report.v_ref, report.flag_upper, report.flag_attained
    );

    let st = &vcfg.stitch;
    let stitch_report = if st.enabled {
        let rule = match &st.rule {
            Some(r) => r.clone().into_rule()?,
            None => StoppingRule::Constant(spec.horizon / 2.0),
        };
        let base_name = st.base.clone().unwrap_or_else(|| if m == 0 { "trivial".into() } else { "zero".into() });
        let base = policies
            .iter()
            .find(|(name, _)| *name == base_name)
            .map(|(_, p)| p.clone())
            .ok_or_else(|| CliError::Config(format!("stitch base policy {base_name:?} is not in the policy list")))?;
        let region = CoverRegion {
            t_lo: t,
            t_hi: spec.horizon,
            x_lo: grid.space.lo.clone(),
            x_hi: grid.space.hi.clone(),
        };
        let pitch_t = st.pitch_t.unwrap_or(0.5 * st.radius);
        let pitch_x = st.pitch_x.unwrap_or(st.radius / (d as f64).sqrt());
        let cover = Arc::new(build_cover(&region, |_, _| st.radius, pitch_t, pitch_x)?);
        let cell_policy = if m == 0 { ControlPolicy::none() } else { grid.extract_policy()? };
        let n_cells = cover.cells.len();
        let beta = stitch(base, rule, cover, vec![cell_policy; n_cells])?;
        let phi = LscMinorant::new(Arc::new(grid.clone()), st.minorant_slope)?;
        let stitch_opts = McOptions {
            seed: derive_seed(ctx.seed, &[tags::STITCH]),
            ..opts
        };
        let r = stitching_improvement_test(
            spec,
            ctx.level(),
            &beta,
            &phi,
            report.v_ref,
            t,
            &x,
            &stitch_opts,
            st.eps_declared.unwrap_or(report.eps_disc + report.eps_opt),
            st.tol.unwrap_or(report.eps_disc),
        )?;
        eprintln!("stitch: {n_cells} cells, lower = {}, upper = {}", r.lower_ok, r.upper_ok);
        Some((r, n_cells))
    } else {
        None
    };
    let stitch_ok = stitch_report.as_ref().is_none_or(|(r, _)| r.lower_ok && r.upper_ok);
    let passed = report.passed() && stitch_ok;
    let mut grid_json = grid_summary(&grid);
    grid_json["source"] = json!(source);
    let full = json!({
        "command": "verify",
        "spec_hash": spec.hash(),
        "seed": ctx.seed,
        "level": ctx.level(),
        "grid": grid_json,
        "monte_carlo": {
            "n_steps": opts.mesh.n_steps,
            "dt": opts.mesh.dt(),
            "n_paths": opts.n_paths,
            "bridge": opts.bridge,
        },
        "dpp": report,
        "stitch": stitch_report.as_ref().map(|(r, n)| json!({ "cells": n, "result": r })),
        "passed": passed,
    });
    ctx.write_json("report.json", &full)?;
    ctx.write_meta("verify")?;
    println!("{}", if passed { "PASS" } else { "FAIL" });
    Ok(if passed { 0 } else { 1 })
}

fn cover(ctx: &Ctx) -> Result<i32, CliError> {
    let c = &ctx.cfg.cover;
    let (lo, hi, _) = SpaceGrid::bounds(&ctx.spec.domain, ctx.cfg.grid.truncate);
    let d = lo.len();
    let region = CoverRegion {
        t_lo: c.t_lo.unwrap_or(0.0),
        t_hi: c.t_hi.unwrap_or(ctx.spec.horizon),
        x_lo: lo,
        x_hi: hi,
    };
    let cover = build_cover(
        &region,
        |_, _| c.radius,
        c.pitch_t.unwrap_or(0.5 * c.radius),
        c.pitch_x.unwrap_or(c.radius / (d as f64).sqrt()),
    )?;
    println!("{} cells", cover.cells.len());
    ctx.write_json("cover.json", &json!({ "region": region, "cover": cover }))?;
    ctx.write_meta("cover")?;
    Ok(0)
}
