use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use aaa_core::aaa::{log_spaced, residual_sweep, ModelRef, SweepConfig, ZERO_RESIDUAL};
use aaa_core::gfun::{ratio_distance, solve_g_march, solve_g_picard, GParams, GridSpec, SmoothG};
use aaa_core::mc::{mc_smile, simulate_local_vol, simulate_rough_sabr, simulate_sabr, SimGrid};
use aaa_core::pricing::MarketPoint;
use aaa_core::smile::{
    smile_table, Backbone, Flavor, ForwardVarianceCurve, LocalVolModel, ModelSpec, RoughSabrParams,
    SabrParams, TimeCurve,
};
use anyhow::{bail, Context, Result};
use serde::Serialize;

use crate::config::RunConfig;

/// What a command produced and whether every verdict passed.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub csv: PathBuf,
    pub summary: Vec<String>,
    pub passed: bool,
}

impl Outcome {
    fn new(csv: PathBuf) -> Self {
        Self {
            csv,
            summary: Vec::new(),
            passed: true,
        }
    }

    fn line(&mut self, s: impl Into<String>) {
        self.summary.push(s.into());
    }

    fn verdict(&mut self, name: &str, passed: bool, detail: &str) {
        self.passed &= passed;
        let word = if passed { "PASS" } else { "FAIL" };
        self.line(format!("verdict {name}: {word} ({detail})"));
    }
}

#[derive(Debug, Clone)]
pub enum Model {
    LocalVol(LocalVolModel),
    Sabr(SabrParams),
    Rough(RoughSabrParams),
}

fn backbone(cfg: &RunConfig) -> Result<Backbone> {
    match cfg.str_opt("backbone.kind")?.unwrap_or("cev") {
        "cev" => Ok(Backbone::cev(
            cfg.f64_or("backbone.c", 1.0)?,
            cfg.f64_or("backbone.gamma", 1.0)?,
        )?),
        "table" => {
            let grid = cfg
                .list_opt("backbone.grid")?
                .context("backbone.kind = table needs backbone.grid")?;
            let values = cfg
                .list_opt("backbone.values")?
                .context("backbone.kind = table needs backbone.values")?;
            Ok(Backbone::table(grid, values)?)
        }
        other => bail!("backbone.kind must be cev or table, got {other}"),
    }
}

fn local_vol(cfg: &RunConfig) -> Result<LocalVolModel> {
    match backbone(cfg)? {
        Backbone::Cev { c, gamma } => Ok(LocalVolModel::cev(TimeCurve::constant(c)?, gamma)?),
        Backbone::Table { .. } => {
            let grid = cfg.list_opt("backbone.grid")?.unwrap_or_default();
            let values = cfg.list_opt("backbone.values")?.unwrap_or_default();
            Ok(LocalVolModel::surface(grid, vec![0.0], vec![values])?)
        }
    }
}

/// Builds and validates the model named by `model.type`.
pub fn build_model(cfg: &RunConfig) -> Result<Model> {
    let kind = cfg
        .str_opt("model.type")?
        .context("missing required key model.type")?;
    match kind {
        "localvol" => Ok(Model::LocalVol(local_vol(cfg)?)),
        "sabr" => Ok(Model::Sabr(SabrParams::new(
            cfg.f64_req("model.alpha0")?,
            cfg.f64_req("model.nu")?,
            cfg.f64_req("model.rho")?,
            backbone(cfg)?,
        )?)),
        "roughsabr" => {
            let grid = cfg
                .list_opt("curve.grid")?
                .context("roughsabr needs curve.grid")?;
            let values = cfg
                .list_opt("curve.values")?
                .context("roughsabr needs curve.values")?;
            let params = RoughSabrParams::new(
                cfg.f64_req("model.h")?,
                cfg.f64_req("model.eta")?,
                cfg.f64_req("model.rho")?,
                backbone(cfg)?,
                ForwardVarianceCurve::new(grid, values)?,
            )?;
            GParams::new(params.rho, params.hurst)?;
            Ok(Model::Rough(params))
        }
        other => bail!("model.type must be localvol, sabr or roughsabr, got {other}"),
    }
}

fn grid_spec(cfg: &RunConfig) -> Result<GridSpec> {
    let d = GridSpec::default();
    Ok(GridSpec {
        ymax: cfg.f64_or("gfun.ymax", d.ymax)?,
        n: cfg.usize_or("gfun.n", d.n)?,
    })
}

fn gfun_tol(cfg: &RunConfig) -> Result<f64> {
    let tol = cfg.f64_or("gfun.tol", 1e-11)?;
    if !(tol > 0.0) {
        bail!("gfun.tol must be positive, got {tol}");
    }
    Ok(tol)
}

fn smooth_g(cfg: &RunConfig, m: &RoughSabrParams) -> Result<SmoothG> {
    let sol = solve_g_march(
        GParams::new(m.rho, m.hurst)?,
        grid_spec(cfg)?,
        gfun_tol(cfg)?,
    )?;
    Ok(sol.smooth()?)
}

fn spot(cfg: &RunConfig) -> Result<f64> {
    let s = cfg.f64_or("run.spot", 100.0)?;
    if !(s > 0.0 && s.is_finite()) {
        bail!("run.spot must be positive, got {s}");
    }
    Ok(s)
}

fn positive_list(cfg: &RunConfig, key: &str, default: Vec<f64>) -> Result<Vec<f64>> {
    let v = cfg.list_opt(key)?.unwrap_or(default);
    if v.is_empty() || v.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
        bail!("{key} must be a non-empty list of positive numbers");
    }
    Ok(v)
}

fn desk_ratios() -> Vec<f64> {
    (0..11).map(|i| (90 + 2 * i) as f64 / 100.0).collect()
}

fn csv_path(out: &Path, verb: &str, cfg: &RunConfig) -> PathBuf {
    out.join(format!("{verb}_{}.csv", cfg.tag()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

/// Solves g by Picard iteration and by marching; writes the Picard solution.
pub fn cmd_gfun(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let gp = GParams::new(cfg.f64_req("model.rho")?, cfg.f64_req("model.h")?)?;
    let grid = grid_spec(cfg)?;
    let tol = gfun_tol(cfg)?;
    let max_iter = cfg.usize_or("gfun.max_iter", 10_000)?;
    let picard = solve_g_picard(gp, grid, tol, max_iter)?;
    let march = solve_g_march(gp, grid, tol)?;
    let path = csv_path(out, "gfun", cfg);
    picard.write_csv(create(&path)?)?;
    let mut o = Outcome::new(path);
    let gap = ratio_distance(&picard, &march)?;
    let march_res = march.residuals().iter().fold(0.0f64, |m, r| m.max(r.abs()));
    o.line(format!(
        "rho = {}, H = {}, ymax = {}, n = {}",
        gp.rho, gp.hurst, grid.ymax, grid.n
    ));
    o.line(format!("curvature b = {:.12}", picard.curvature));
    o.line(format!(
        "picard: {} iterations, max residual {:.3e}, {} sandwich checks",
        picard.meta.iterations, picard.meta.max_residual, picard.meta.sandwich_checks
    ));
    o.line(format!(
        "march: {} steps, max residual {march_res:.3e}",
        march.meta.iterations
    ));
    o.verdict(
        "ode residual",
        picard.meta.max_residual <= 1e-8 && march_res <= 1e-8,
        &format!(
            "max {:.3e}, limit 1e-8",
            picard.meta.max_residual.max(march_res)
        ),
    );
    o.verdict(
        "picard vs march",
        gap <= 1e-6,
        &format!("sup |dG| {gap:.3e}, limit 1e-6"),
    );
    Ok(o)
}

/// Formula smile at t = 0.
pub fn cmd_smile(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let model = build_model(cfg)?;
    let spot = spot(cfg)?;
    let maturity = cfg.f64_req("run.maturity")?;
    let p = MarketPoint::spot_start(spot, spot, maturity)?;
    let ratios = positive_list(cfg, "run.strike_ratios", desk_ratios())?;
    let spec = match model {
        Model::LocalVol(m) => ModelSpec::LocalVol(m),
        Model::Sabr(m) => ModelSpec::Sabr(m),
        Model::Rough(m) => {
            let g = smooth_g(cfg, &m)?;
            ModelSpec::RoughSabr {
                params: m,
                g: Arc::new(g),
            }
        }
    };
    let strikes: Vec<f64> = ratios.iter().map(|r| r * spot).collect();
    let table = smile_table(&spec, &strikes, &p);
    let path = csv_path(out, "smile", cfg);
    table.write_csv(create(&path)?)?;
    let mut o = Outcome::new(path);
    o.line(format!("{} strikes, T = {maturity}", table.rows.len()));
    for (i, e) in &table.errors {
        o.line(format!("row {i}: {e}"));
    }
    o.verdict(
        "evaluation",
        table.errors.is_empty(),
        &format!("{} failed cells", table.errors.len()),
    );
    Ok(o)
}

#[derive(Serialize)]
struct ValidateRow {
    strike: f64,
    strike_ratio: f64,
    mc_iv: Option<f64>,
    mc_iv_stderr: Option<f64>,
    formula_iv: f64,
    abs_diff_bp: Option<f64>,
    limit_bp: Option<f64>,
    pass: bool,
}

/// Monte Carlo implied vols against the lognormal formula at t = 0.
pub fn cmd_validate(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let model = build_model(cfg)?;
    let spot = spot(cfg)?;
    let maturity = cfg.f64_req("run.maturity")?;
    let ratios = positive_list(cfg, "run.strike_ratios", desk_ratios())?;
    let paths = cfg.usize_or("sim.paths", 200_000)?;
    let steps = cfg.usize_or("sim.steps", 100)?;
    let seed = cfg.u64_or("sim.seed", 0)?;
    let rough = matches!(model, Model::Rough(_));
    let tol_bp = cfg.f64_or("run.tolerance_bp", if rough { 80.0 } else { 50.0 })?;
    let atm_bp = cfg.f64_or("run.atm_tolerance_bp", if rough { 30.0 } else { tol_bp })?;
    if !(tol_bp >= 0.0 && atm_bp >= 0.0) {
        bail!("tolerances must be non-negative");
    }
    let grid = SimGrid::uniform(maturity, steps)?;
    let strikes: Vec<f64> = ratios.iter().map(|r| r * spot).collect();
    let p0 = MarketPoint::spot_start(spot, spot, maturity)?;
    let (ensemble, spec) = match model {
        Model::LocalVol(m) => (
            simulate_local_vol(&m, spot, &grid, paths, seed)?,
            ModelSpec::LocalVol(m),
        ),
        Model::Sabr(m) => (
            simulate_sabr(&m, spot, &grid, paths, seed)?,
            ModelSpec::Sabr(m),
        ),
        Model::Rough(m) => {
            let g = smooth_g(cfg, &m)?;
            let e = simulate_rough_sabr(&m, spot, &grid, paths, seed)?;
            (
                e,
                ModelSpec::RoughSabr {
                    params: m,
                    g: Arc::new(g),
                },
            )
        }
    };
    let quotes = mc_smile(&ensemble, spot, maturity, &strikes)?;
    let path = csv_path(out, "validate", cfg);
    let mut o = Outcome::new(path.clone());
    let mut w = csv::Writer::from_writer(create(&path)?);
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for (q, ratio) in quotes.iter().zip(&ratios) {
        let formula = spec.sigma(Flavor::Lognormal, &p0.with_strike(q.strike)?)?;
        let atm = (ratio - 1.0).abs() < 1e-12;
        let (diff, limit, pass) = match (q.iv, q.iv_stderr) {
            (Some(iv), Some(se)) => {
                let diff = (iv - formula).abs() * 1e4;
                let limit = (3.0 * se * 1e4).max(if atm { atm_bp } else { tol_bp });
                worst = worst.max(diff);
                (Some(diff), Some(limit), diff <= limit)
            }
            _ => (None, None, false),
        };
        if !pass {
            failures += 1;
        }
        w.serialize(ValidateRow {
            strike: q.strike,
            strike_ratio: *ratio,
            mc_iv: q.iv,
            mc_iv_stderr: q.iv_stderr,
            formula_iv: formula,
            abs_diff_bp: diff,
            limit_bp: limit,
            pass,
        })?;
    }
    w.flush()?;
    o.line(format!(
        "{paths} paths, {steps} steps, seed {seed}, T = {maturity}, scheme {}",
        ensemble.scheme
    ));
    o.line(format!("worst |MC iv - formula| = {worst:.2} bp"));
    o.verdict(
        "mc vs formula",
        failures == 0,
        &format!(
            "{failures} of {} strikes outside max(3 se, tolerance)",
            quotes.len()
        ),
    );
    Ok(o)
}

fn flavor(cfg: &RunConfig) -> Result<Flavor> {
    match cfg.str_opt("run.flavor")?.unwrap_or("lognormal") {
        "lognormal" => Ok(Flavor::Lognormal),
        "normal" => Ok(Flavor::Normal),
        other => bail!("run.flavor must be lognormal or normal, got {other}"),
    }
}

/// Residual decay sweep with its verdicts.
pub fn cmd_residual(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let model = build_model(cfg)?;
    let taus = positive_list(cfg, "run.tau_levels", vec![0.2, 0.1, 0.05, 0.025])?;
    if taus.len() < 3 || taus.windows(2).any(|w| !(w[1] < w[0])) {
        bail!("run.tau_levels needs at least three strictly decreasing values");
    }
    let sweep = SweepConfig {
        flavor: flavor(cfg)?,
        spot: spot(cfg)?,
        t0: cfg.f64_or("sim.t0", 0.1)?,
        taus,
        strike_ratios: positive_list(cfg, "run.strike_ratios", log_spaced(0.8, 1.25, 11))?,
        n_states: cfg.usize_or("sim.paths", 1000)?,
        seed: cfg.u64_or("sim.seed", 0)?,
        dt: cfg.f64_or("sim.dt", 0.001)?,
    };
    let tol = cfg.f64_or("run.exponent_tol", 0.15)?;
    let (mut report, default_exponent) = match &model {
        Model::LocalVol(m) => (residual_sweep(ModelRef::LocalVol(m), &sweep)?, 1.0),
        Model::Sabr(m) => (residual_sweep(ModelRef::Sabr(m), &sweep)?, 1.0),
        Model::Rough(m) => {
            let g = smooth_g(cfg, m)?;
            (
                residual_sweep(ModelRef::Rough { params: m, g: &g }, &sweep)?,
                2.0 * m.hurst,
            )
        }
    };
    let expected = cfg.f64_or("run.expected_exponent", default_exponent)?;
    report.judge_exponent(expected, tol, ZERO_RESIDUAL);
    report.judge_richardson();
    let path = csv_path(out, "residual", cfg);
    report.write_csv(create(&path)?)?;
    let mut o = Outcome::new(path);
    o.line(format!(
        "{} model, {:?} flavor, {} states at t0 = {}",
        report.model, report.flavor, sweep.n_states, sweep.t0
    ));
    for l in &report.levels {
        o.line(format!(
            "tau {:.4}: max median |r| {:.4e}, max |r| {:.4e}, {} skipped",
            l.tau, l.max_median, l.max_abs_r, l.skipped
        ));
    }
    for v in &report.verdicts {
        o.verdict(&v.name, v.passed, &v.detail);
    }
    Ok(o)
}
