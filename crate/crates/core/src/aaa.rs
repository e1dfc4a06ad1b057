//! Drift-condition residuals of the approximation formulas.
//!
//! For a formula `sigma(state, t)` with maturity `T` and strike `K`, the
//! lognormal residual is
//!
//! ```text
//! r = d<k/sigma>/dt - 1 + 2 tau D / sigma - tau d<k, log sigma>/dt - tau^2/4 d<sigma>/dt
//! ```
//!
//! and the normal one keeps the first three terms with `x = K - S` in place
//! of `k`. `D` is the drift of `sigma` along the model, obtained by applying
//! the generator to `sigma` with finite differences. An approximation is
//! asymptotically arbitrage-free when `r -> 0` as `tau -> 0`.
//!
//! The Markov states are `(S)` for local volatility, `(S, alpha)` for SABR
//! and `(S, U)` for rough SABR, where the rough model carries `alpha` and
//! the kernel ratio `R` as frozen coefficients.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{domain, Error, Result};
use crate::gfun::{GFunction, SabrG, SmoothG};
use crate::mc::{simulate_local_vol, simulate_rough_states, simulate_sabr, SimGrid};
use crate::numerics::{linear_fit, median_iqr, LinearFit};
use crate::smile::{
    inv_beta_integral, r_ratio, sigma_core, u_average_vol, Backbone, Flavor, LocalVolModel,
    RoughSabrParams, SabrParams,
};

/// Relative finite-difference steps for the generator, coarse to fine.
pub const GENERATOR_STEPS: [f64; 3] = [5e-3, 2.5e-3, 1.25e-3];
/// Accepted window for the step-halving ratio of a second-order scheme.
pub const RICHARDSON_WINDOW: (f64, f64) = (3.5, 4.5);
/// Halving differences must exceed this multiple of the stencil's rounding
/// error before their ratio counts.
const RICHARDSON_NOISE: f64 = 1e3;
/// A term whose halving difference moves `2 tau D / f` by less than this is
/// settled; its ratio is dominated by higher-order terms and is not checked.
const RICHARDSON_IMPACT: f64 = 1e-9;
/// At the steps used a term's leading error is normally ~1e-4 of the term;
/// a halving difference under 1e-6 of it means that error coefficient
/// nearly cancels and higher orders set the ratio.
const RICHARDSON_RELATIVE: f64 = 1e-6;
const GRADIENT_STEP: f64 = 1e-5;

/// `|g'(Y)^2 (1 + 2 rho Y + Y^2) - 1|` for the closed-form SABR g.
pub fn sabr_qv_identity(y: f64, rho: f64) -> Result<f64> {
    let gp = SabrG::new(rho)?.eval(y)?.1;
    Ok((gp * gp * (1.0 + 2.0 * rho * y + y * y) - 1.0).abs())
}

/// Local coefficients of a Markov model with at most two state variables:
/// state `x`, covariance rate `a` and drift `mu`, frozen at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub x: Vec<f64>,
    pub t: f64,
    pub tau: f64,
    pub a: [[f64; 2]; 2],
    pub mu: [f64; 2],
}

impl Generator {
    fn dim(&self) -> usize {
        self.x.len()
    }

    fn check(&self) -> Result<()> {
        if self.x.is_empty() || self.x.len() > 2 {
            return domain("generator supports one or two state variables");
        }
        if self.x.iter().any(|v| !(*v > 0.0 && v.is_finite())) || !(self.tau > 0.0) {
            return domain("generator state must be positive with tau > 0");
        }
        Ok(())
    }
}

/// Drift estimate with its step-halving diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftEstimate {
    /// Richardson-extrapolated value.
    pub value: f64,
    /// Raw estimates at the three step sizes.
    pub raw: [f64; 3],
    /// Halving ratio `(T(h) - T(h/2)) / (T(h/2) - T(h/4))` furthest from 4
    /// over the stencil terms `T`, or `None` when every term's differences
    /// are at rounding level.
    pub ratio: Option<f64>,
}

impl DriftEstimate {
    pub fn richardson_ok(&self) -> bool {
        self.ratio
            .is_none_or(|r| r >= RICHARDSON_WINDOW.0 && r <= RICHARDSON_WINDOW.1)
    }
}

/// Stencil terms `[f_t, f_1, f_2, f_11, f_12, f_22]` at relative step `h`
/// and the rounding error each one carries.
fn stencil_terms(
    f: &dyn Fn(&[f64], f64) -> Result<f64>,
    g: &Generator,
    h: f64,
    f0: f64,
) -> Result<([f64; 6], [f64; 6])> {
    let d = g.dim();
    let hs: Vec<f64> = g.x.iter().map(|v| h * v).collect();
    let ht = h * g.tau;
    let at = |dx: [f64; 2], dt: f64| -> Result<f64> {
        let x: Vec<f64> = (0..d).map(|i| g.x[i] + dx[i]).collect();
        f(&x, g.t + dt)
    };
    let eps = f64::EPSILON * f0.abs().max(f64::MIN_POSITIVE);
    let mut terms = [0.0; 6];
    let mut noise = [0.0; 6];
    terms[0] = (at([0.0; 2], ht)? - at([0.0; 2], -ht)?) / (2.0 * ht);
    noise[0] = eps / ht;
    for i in 0..d {
        let mut e = [0.0; 2];
        e[i] = hs[i];
        let up = at(e, 0.0)?;
        e[i] = -hs[i];
        let down = at(e, 0.0)?;
        terms[1 + i] = (up - down) / (2.0 * hs[i]);
        noise[1 + i] = eps / hs[i];
        let k = if i == 0 { 3 } else { 5 };
        terms[k] = (up - 2.0 * f0 + down) / (hs[i] * hs[i]);
        noise[k] = 4.0 * eps / (hs[i] * hs[i]);
    }
    if d == 2 {
        let pp = at([hs[0], hs[1]], 0.0)?;
        let pm = at([hs[0], -hs[1]], 0.0)?;
        let mp = at([-hs[0], hs[1]], 0.0)?;
        let mm = at([-hs[0], -hs[1]], 0.0)?;
        terms[4] = (pp - pm - mp + mm) / (4.0 * hs[0] * hs[1]);
        noise[4] = eps / (hs[0] * hs[1]);
    }
    Ok((terms, noise))
}

fn term_weights(g: &Generator) -> [f64; 6] {
    [
        1.0,
        g.mu[0],
        g.mu[1],
        0.5 * g.a[0][0],
        g.a[0][1],
        0.5 * g.a[1][1],
    ]
}

fn assemble(g: &Generator, terms: &[f64; 6]) -> f64 {
    term_weights(g).iter().zip(terms).map(|(w, t)| w * t).sum()
}

/// `D = df/dt + mu . grad f + 1/2 tr(a hess f)` by central differences at
/// three halving steps. Every stencil term is extrapolated on its own and
/// its halving ratio checked for second-order decay whenever the
/// differences stand clear of rounding.
pub fn drift_via_generator(
    f: &dyn Fn(&[f64], f64) -> Result<f64>,
    g: &Generator,
) -> Result<DriftEstimate> {
    g.check()?;
    let f0 = f(&g.x, g.t)?;
    let mut terms = [[0.0; 6]; 3];
    let mut noise = [0.0; 6];
    for (k, &h) in GENERATOR_STEPS.iter().enumerate() {
        let (t, n) = stencil_terms(f, g, h, f0)?;
        terms[k] = t;
        noise = n;
    }
    let weights = term_weights(g);
    let mut extrapolated = [0.0; 6];
    let mut worst: Option<f64> = None;
    for j in 0..6 {
        let d1 = terms[0][j] - terms[1][j];
        let d2 = terms[1][j] - terms[2][j];
        extrapolated[j] = terms[2][j] - d2 / 3.0;
        let impact = (weights[j] * d2 * 2.0 * g.tau / f0).abs();
        let significant = d2.abs() > RICHARDSON_RELATIVE * terms[2][j].abs();
        if d2.abs() > RICHARDSON_NOISE * noise[j] && impact > RICHARDSON_IMPACT && significant {
            let r = d1 / d2;
            if worst.is_none_or(|w| (r - 4.0).abs() > (w - 4.0).abs()) {
                worst = Some(r);
            }
        }
    }
    Ok(DriftEstimate {
        value: assemble(g, &extrapolated),
        raw: [
            assemble(g, &terms[0]),
            assemble(g, &terms[1]),
            assemble(g, &terms[2]),
        ],
        ratio: worst,
    })
}

fn gradient(f: &dyn Fn(&[f64], f64) -> Result<f64>, g: &Generator) -> Result<[f64; 2]> {
    let mut grad = [0.0; 2];
    for i in 0..g.dim() {
        let h = GRADIENT_STEP * g.x[i];
        let mut x = g.x.clone();
        x[i] += h;
        let up = f(&x, g.t)?;
        x[i] -= 2.0 * h;
        let down = f(&x, g.t)?;
        grad[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// A model together with what its formula needs.
#[derive(Clone, Copy)]
pub enum ModelRef<'a> {
    LocalVol(&'a LocalVolModel),
    Sabr(&'a SabrParams),
    Rough {
        params: &'a RoughSabrParams,
        g: &'a SmoothG,
    },
}

impl ModelRef<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            ModelRef::LocalVol(_) => "localvol",
            ModelRef::Sabr(_) => "sabr",
            ModelRef::Rough { .. } => "roughsabr",
        }
    }
}

/// Markov state at evaluation time `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum State {
    LocalVol {
        t: f64,
        s: f64,
    },
    Sabr {
        t: f64,
        s: f64,
        alpha: f64,
    },
    Rough {
        t: f64,
        s: f64,
        alpha: f64,
        u: f64,
        r: f64,
    },
}

impl State {
    pub fn t(&self) -> f64 {
        match *self {
            State::LocalVol { t, .. } | State::Sabr { t, .. } | State::Rough { t, .. } => t,
        }
    }

    pub fn spot(&self) -> f64 {
        match *self {
            State::LocalVol { s, .. } | State::Sabr { s, .. } | State::Rough { s, .. } => s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidualSample {
    pub t: f64,
    pub tau: f64,
    pub strike: f64,
    pub r: f64,
    /// `d<k/sigma>/dt - 1` (or with `x`).
    pub qv: f64,
    /// `2 tau D / sigma`.
    pub drift: f64,
    /// `-tau d<k, log sigma>/dt`; zero for the normal flavor.
    pub cross: f64,
    /// `-tau^2/4 d<sigma>/dt`; zero for the normal flavor.
    pub volqv: f64,
    pub sigma: f64,
    pub richardson_ratio: Option<f64>,
    pub richardson_ok: bool,
    pub raw: [f64; 3],
}

struct Setup<'a> {
    f: Box<dyn Fn(&[f64], f64) -> Result<f64> + 'a>,
    gen: Generator,
    qv: f64,
}

fn sabr_setup<'a>(
    flavor: Flavor,
    m: &'a SabrParams,
    t: f64,
    s: f64,
    alpha: f64,
    strike: f64,
    maturity: f64,
) -> Result<Setup<'a>> {
    let g = SabrG::new(m.rho)?;
    let f = move |x: &[f64], _t: f64| sigma_core(flavor, x[0], strike, &m.backbone, x[1], m.nu, &g);
    let beta = m.backbone.value(s)?;
    let ab = alpha * beta;
    let gen = Generator {
        x: vec![s, alpha],
        t,
        tau: maturity - t,
        a: [
            [ab * ab, m.rho * m.nu * alpha * ab],
            [m.rho * m.nu * alpha * ab, m.nu * m.nu * alpha * alpha],
        ],
        mu: [0.0; 2],
    };
    let y = m.nu / alpha * inv_beta_integral(s, strike, &m.backbone)?;
    let gp = g.eval(y)?.1;
    let qv = gp * gp * (1.0 + 2.0 * m.rho * y + y * y);
    Ok(Setup {
        f: Box::new(f),
        gen,
        qv,
    })
}

fn local_vol_setup<'a>(
    flavor: Flavor,
    m: &'a LocalVolModel,
    t: f64,
    s: f64,
    strike: f64,
    maturity: f64,
) -> Result<Setup<'a>> {
    let b = m.backbone_at(maturity)?;
    let v_now = m.value(s, t)?;
    let v_mat = b.value(s)?;
    let zero = SabrG { rho: 0.0 };
    let f = move |x: &[f64], _t: f64| sigma_core(flavor, x[0], strike, &b, 1.0, 0.0, &zero);
    let gen = Generator {
        x: vec![s],
        t,
        tau: maturity - t,
        a: [[v_now * v_now, 0.0], [0.0, 0.0]],
        mu: [0.0; 2],
    };
    let ratio = v_now / v_mat;
    Ok(Setup {
        f: Box::new(f),
        gen,
        qv: ratio * ratio,
    })
}

#[allow(clippy::too_many_arguments)]
fn rough_setup<'a>(
    flavor: Flavor,
    m: &'a RoughSabrParams,
    sg: &'a SmoothG,
    t: f64,
    s: f64,
    alpha: f64,
    u: f64,
    r: f64,
    strike: f64,
    maturity: f64,
) -> Result<Setup<'a>> {
    let tau = maturity - t;
    let f = move |x: &[f64], tt: f64| {
        sigma_core(
            flavor,
            x[0],
            strike,
            &m.backbone,
            x[1],
            m.zeta(maturity - tt),
            sg,
        )
    };
    let zeta = m.zeta(tau);
    let ab = alpha * m.backbone.value(s)?;
    let vol_u = 0.5 * zeta * r * u;
    let drift_u = 0.5 * u * ((1.0 - alpha * alpha / (u * u)) / tau - 0.25 * zeta * zeta * r * r);
    let gen = Generator {
        x: vec![s, u],
        t,
        tau,
        a: [
            [ab * ab, m.rho * ab * vol_u],
            [m.rho * ab * vol_u, vol_u * vol_u],
        ],
        mu: [0.0, drift_u],
    };
    let y = zeta / u * inv_beta_integral(s, strike, &m.backbone)?;
    let gp = sg.eval(y)?.1;
    let au = alpha / u;
    let qv = gp * gp * (au * au + au * r * m.rho * y + 0.25 * r * r * y * y);
    Ok(Setup {
        f: Box::new(f),
        gen,
        qv,
    })
}

/// Residual at one state and strike, lognormal (`Flavor::Lognormal`) or
/// normal flavor.
pub fn residual(
    flavor: Flavor,
    model: ModelRef<'_>,
    state: &State,
    strike: f64,
    maturity: f64,
) -> Result<ResidualSample> {
    let t = state.t();
    let tau = maturity - t;
    if !(tau > 0.0) {
        return domain(format!("need t < T, got t = {t}, T = {maturity}"));
    }
    if !(strike > 0.0) {
        return domain(format!("strike must be positive, got {strike}"));
    }
    let setup = match (model, *state) {
        (ModelRef::LocalVol(m), State::LocalVol { s, .. }) => {
            local_vol_setup(flavor, m, t, s, strike, maturity)?
        }
        (ModelRef::Sabr(m), State::Sabr { s, alpha, .. }) => {
            sabr_setup(flavor, m, t, s, alpha, strike, maturity)?
        }
        (ModelRef::Rough { params, g }, State::Rough { s, alpha, u, r, .. }) => {
            rough_setup(flavor, params, g, t, s, alpha, u, r, strike, maturity)?
        }
        _ => return domain("state does not match the model"),
    };
    let gen = &setup.gen;
    let sigma = (setup.f)(&gen.x, t)?;
    let d = drift_via_generator(setup.f.as_ref(), gen)?;
    let grad = gradient(setup.f.as_ref(), gen)?;
    let qv = setup.qv - 1.0;
    let drift = 2.0 * tau * d.value / sigma;
    let (cross, volqv) = match flavor {
        Flavor::Lognormal => {
            let dim = gen.dim();
            let mut sig_qv = 0.0;
            let mut k_cross = 0.0;
            for i in 0..dim {
                for j in 0..dim {
                    sig_qv += grad[i] * gen.a[i][j] * grad[j];
                }
                // k = log(K/S) has gradient (-1/S, 0)
                k_cross += -1.0 / gen.x[0] * gen.a[0][i] * grad[i];
            }
            (-tau * k_cross / sigma, -0.25 * tau * tau * sig_qv)
        }
        Flavor::Normal => (0.0, 0.0),
    };
    Ok(ResidualSample {
        t,
        tau,
        strike,
        r: qv + drift + cross + volqv,
        qv,
        drift,
        cross,
        volqv,
        sigma,
        richardson_ratio: d.ratio,
        raw: d.raw,
        richardson_ok: d.richardson_ok(),
    })
}

/// Lognormal residual.
pub fn def3_residual(
    model: ModelRef<'_>,
    state: &State,
    strike: f64,
    maturity: f64,
) -> Result<ResidualSample> {
    residual(Flavor::Lognormal, model, state, strike, maturity)
}

/// Normal (Bachelier) residual.
pub fn def4_residual(
    model: ModelRef<'_>,
    state: &State,
    strike: f64,
    maturity: f64,
) -> Result<ResidualSample> {
    residual(Flavor::Normal, model, state, strike, maturity)
}

/// Leading part of the rough residual once the drift is expanded:
/// `g'^2 (a^2 + a R rho Y + R^2 Y^2 / 4) - 1 + (1-2H)(1 - Y g'/g) + (Y g'/g)(1 - a^2)`
/// with `a = alpha / U`. At `a = 1`, `R = 1/(H + 1/2)` it is the ODE defect.
pub fn rough_main_term(
    y: f64,
    alpha_over_u: f64,
    r: f64,
    rho: f64,
    hurst: f64,
    g: &dyn GFunction,
) -> Result<f64> {
    let (gv, gp) = g.eval(y)?;
    let elasticity = if y == 0.0 { 1.0 } else { y * gp / gv };
    let a2 = alpha_over_u * alpha_over_u;
    Ok(
        gp * gp * (a2 + alpha_over_u * r * rho * y + 0.25 * r * r * y * y) - 1.0
            + (1.0 - 2.0 * hurst) * (1.0 - elasticity)
            + elasticity * (1.0 - a2),
    )
}

/// Settings for a residual decay sweep. States are simulated to `t0`; for
/// each `tau` the maturity is `t0 + tau` and strikes are `ratio * S_t0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub flavor: Flavor,
    pub spot: f64,
    pub t0: f64,
    pub taus: Vec<f64>,
    pub strike_ratios: Vec<f64>,
    pub n_states: usize,
    pub seed: u64,
    /// Simulation step for reaching `t0`.
    pub dt: f64,
}

impl SweepConfig {
    fn validate(&self) -> Result<()> {
        if self.taus.is_empty() || self.taus.iter().any(|t| !(*t > 0.0)) {
            return domain("tau levels must be positive");
        }
        if self.taus.windows(2).any(|w| !(w[1] < w[0])) {
            return domain("tau levels must be strictly decreasing");
        }
        if self.taus.len() < 3 {
            return domain("the decay fit needs at least three tau levels");
        }
        if self.strike_ratios.is_empty() || self.strike_ratios.iter().any(|k| !(*k > 0.0)) {
            return domain("strike ratios must be positive");
        }
        if self.n_states == 0 {
            return domain("need at least one state");
        }
        if !(self.spot > 0.0 && self.t0 > 0.0 && self.dt > 0.0 && self.dt <= self.t0) {
            return domain("spot, t0 and dt must be positive with dt <= t0");
        }
        Ok(())
    }
}

/// `n` strike ratios spaced evenly in log between `lo` and `hi`.
pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![(lo * hi).sqrt()];
    }
    (0..n)
        .map(|i| (lo.ln() + (hi / lo).ln() * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Per-strike statistics at one `tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualLevel {
    pub tau: f64,
    pub strike_ratios: Vec<f64>,
    pub median_abs_r: Vec<f64>,
    pub iqr_r: Vec<f64>,
    /// Largest per-strike median |r|.
    pub max_median: f64,
    pub max_abs_r: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualReport {
    pub model: String,
    pub flavor: Flavor,
    pub levels: Vec<ResidualLevel>,
    /// Least-squares slope of log(max median |r|) on log tau; `None` when
    /// the residual vanishes identically.
    pub fit: Option<LinearFit>,
    pub richardson_checked: usize,
    pub richardson_failed: usize,
    pub verdicts: Vec<Verdict>,
}

impl ResidualReport {
    pub fn exponent(&self) -> Option<f64> {
        self.fit.map(|f| f.slope)
    }

    pub fn max_abs_r(&self) -> f64 {
        self.levels.iter().map(|l| l.max_abs_r).fold(0.0, f64::max)
    }

    /// Adds a verdict on the decay exponent; an identically vanishing
    /// residual passes when `|r| <= zero_tol` everywhere.
    pub fn judge_exponent(&mut self, expected: f64, tol: f64, zero_tol: f64) -> bool {
        let v = match self.fit {
            Some(fit) => Verdict {
                name: "decay exponent".into(),
                passed: (fit.slope - expected).abs() <= tol,
                detail: format!(
                    "fitted {:.4} +- {:.4}, expected {expected} +- {tol}",
                    fit.slope, fit.slope_stderr
                ),
            },
            None => Verdict {
                name: "vanishing residual".into(),
                passed: self.max_abs_r() <= zero_tol,
                detail: format!("max |r| = {:.3e}, limit {zero_tol:.1e}", self.max_abs_r()),
            },
        };
        let passed = v.passed;
        self.verdicts.push(v);
        passed
    }

    pub fn judge_richardson(&mut self) -> bool {
        let passed = self.richardson_failed == 0;
        self.verdicts.push(Verdict {
            name: "richardson ratios".into(),
            passed,
            detail: format!(
                "{} of {} informative ratios outside [{}, {}]",
                self.richardson_failed,
                self.richardson_checked,
                RICHARDSON_WINDOW.0,
                RICHARDSON_WINDOW.1
            ),
        });
        passed
    }

    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.passed)
    }

    /// `tau,strike_ratio,median_abs_r,iqr_r` rows followed by `#` summary
    /// lines.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            tau: f64,
            strike_ratio: f64,
            median_abs_r: f64,
            iqr_r: f64,
        }
        {
            let mut w = csv::Writer::from_writer(&mut out);
            for l in &self.levels {
                for i in 0..l.strike_ratios.len() {
                    w.serialize(Row {
                        tau: l.tau,
                        strike_ratio: l.strike_ratios[i],
                        median_abs_r: l.median_abs_r[i],
                        iqr_r: l.iqr_r[i],
                    })?;
                }
            }
            w.flush()?;
        }
        writeln!(out, "# model,{}", self.model)?;
        match self.fit {
            Some(f) => writeln!(out, "# exponent,{},{}", f.slope, f.slope_stderr)?,
            None => writeln!(out, "# exponent,skipped,max_abs_r={:e}", self.max_abs_r())?,
        }
        writeln!(
            out,
            "# richardson,{},{}",
            self.richardson_checked, self.richardson_failed
        )?;
        for v in &self.verdicts {
            writeln!(
                out,
                "# verdict,{},{},{}",
                v.name,
                if v.passed { "pass" } else { "fail" },
                v.detail
            )?;
        }
        Ok(())
    }
}

/// Below this every residual counts as identically zero and no exponent is
/// fitted.
pub const ZERO_RESIDUAL: f64 = 1e-10;

fn simulate_states(model: ModelRef<'_>, cfg: &SweepConfig) -> Result<Vec<State>> {
    let steps = (cfg.t0 / cfg.dt).round().max(1.0) as usize;
    let t0 = cfg.t0;
    match model {
        ModelRef::LocalVol(m) => {
            let grid = SimGrid::uniform(t0, steps)?;
            let e = simulate_local_vol(m, cfg.spot, &grid, cfg.n_states, cfg.seed)?;
            Ok(e.terminal_s()
                .into_iter()
                .map(|s| State::LocalVol { t: t0, s })
                .collect())
        }
        ModelRef::Sabr(m) => {
            let grid = SimGrid::uniform(t0, steps)?;
            let e = simulate_sabr(m, cfg.spot, &grid, cfg.n_states, cfg.seed)?;
            Ok(e.terminal_s()
                .into_iter()
                .zip(e.terminal_alpha())
                .map(|(s, alpha)| State::Sabr { t: t0, s, alpha })
                .collect())
        }
        ModelRef::Rough { .. } => Err(Error::Invariant("rough states carry curves".into())),
    }
}

fn level_stats(
    tau: f64,
    ratios: &[f64],
    per_state: &[Vec<Option<ResidualSample>>],
) -> (ResidualLevel, usize, usize) {
    let mut level = ResidualLevel {
        tau,
        strike_ratios: ratios.to_vec(),
        median_abs_r: Vec::with_capacity(ratios.len()),
        iqr_r: Vec::with_capacity(ratios.len()),
        max_median: 0.0,
        max_abs_r: 0.0,
        evaluated: 0,
        skipped: 0,
    };
    let (mut checked, mut failed) = (0, 0);
    for j in 0..ratios.len() {
        let samples: Vec<&ResidualSample> =
            per_state.iter().filter_map(|row| row[j].as_ref()).collect();
        level.evaluated += samples.len();
        level.skipped += per_state.len() - samples.len();
        let rs: Vec<f64> = samples.iter().map(|s| s.r).collect();
        let abs: Vec<f64> = rs.iter().map(|r| r.abs()).collect();
        let (med, _) = median_iqr(&abs);
        let (_, iqr) = median_iqr(&rs);
        level.median_abs_r.push(med);
        level.iqr_r.push(iqr);
        level.max_median = level.max_median.max(med);
        level.max_abs_r = abs.iter().cloned().fold(level.max_abs_r, f64::max);
        for s in samples {
            if s.richardson_ratio.is_some() {
                checked += 1;
                if !s.richardson_ok {
                    failed += 1;
                }
            }
        }
    }
    (level, checked, failed)
}

/// Simulates states to `t0`, evaluates residuals over the strike grid at
/// each `tau` and fits the decay exponent of the worst-strike median |r|.
/// Evaluations that fail (for instance |Y| beyond the solved g range) are
/// counted as skipped.
pub fn residual_sweep(model: ModelRef<'_>, cfg: &SweepConfig) -> Result<ResidualReport> {
    cfg.validate()?;
    let t0 = cfg.t0;
    let mut levels = Vec::with_capacity(cfg.taus.len());
    let (mut checked, mut failed) = (0, 0);
    match model {
        ModelRef::Rough { params, .. } => {
            let states = simulate_rough_states(
                params,
                cfg.spot,
                t0,
                cfg.dt,
                cfg.taus[0],
                cfg.n_states,
                cfg.seed,
            )?;
            for &tau in &cfg.taus {
                let maturity = t0 + tau;
                let per_state: Vec<Vec<Option<ResidualSample>>> = states
                    .par_iter()
                    .map(|st| {
                        let u = u_average_vol(&st.curve, t0, maturity).ok();
                        let r = r_ratio(&st.curve, t0, maturity, params.hurst).ok();
                        cfg.strike_ratios
                            .iter()
                            .map(|k| {
                                let state = State::Rough {
                                    t: t0,
                                    s: st.s,
                                    alpha: st.alpha,
                                    u: u?,
                                    r: r?,
                                };
                                residual(cfg.flavor, model, &state, k * st.s, maturity).ok()
                            })
                            .collect()
                    })
                    .collect();
                let (l, c, f) = level_stats(tau, &cfg.strike_ratios, &per_state);
                levels.push(l);
                checked += c;
                failed += f;
            }
        }
        _ => {
            let states = simulate_states(model, cfg)?;
            for &tau in &cfg.taus {
                let maturity = t0 + tau;
                let per_state: Vec<Vec<Option<ResidualSample>>> = states
                    .par_iter()
                    .map(|st| {
                        cfg.strike_ratios
                            .iter()
                            .map(|k| residual(cfg.flavor, model, st, k * st.spot(), maturity).ok())
                            .collect()
                    })
                    .collect();
                let (l, c, f) = level_stats(tau, &cfg.strike_ratios, &per_state);
                levels.push(l);
                checked += c;
                failed += f;
            }
        }
    }
    if levels.iter().any(|l| l.evaluated == 0) {
        return Err(Error::Numeric(
            "a tau level has no valid residual evaluations".into(),
        ));
    }
    let vanishing = levels.iter().all(|l| l.max_abs_r <= ZERO_RESIDUAL);
    let fit = if vanishing {
        None
    } else {
        let x: Vec<f64> = levels.iter().map(|l| l.tau.ln()).collect();
        let y: Vec<f64> = levels.iter().map(|l| l.max_median.ln()).collect();
        Some(linear_fit(&x, &y)?)
    };
    Ok(ResidualReport {
        model: model.name().into(),
        flavor: cfg.flavor,
        levels,
        fit,
        richardson_checked: checked,
        richardson_failed: failed,
        verdicts: Vec::new(),
    })
}

/// Cross-state medians of `|alpha/U - 1|` and `|R - 1/(H + 1/2)|` at one
/// `tau`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LemmaLevel {
    pub tau: f64,
    pub median_alpha_gap: f64,
    pub median_r_gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LemmaReport {
    pub levels: Vec<LemmaLevel>,
}

impl LemmaReport {
    /// Both medians strictly decrease along the (decreasing) tau ladder.
    pub fn decreasing(&self) -> (bool, bool) {
        let a = self
            .levels
            .windows(2)
            .all(|w| w[1].median_alpha_gap < w[0].median_alpha_gap);
        let r = self
            .levels
            .windows(2)
            .all(|w| w[1].median_r_gap < w[0].median_r_gap);
        (a, r)
    }
}

/// Simulated rough states at `t0`, examined over maturities `t0 + tau`.
pub fn lemma_a1_check(
    m: &RoughSabrParams,
    spot: f64,
    t0: f64,
    dt: f64,
    taus: &[f64],
    n_states: usize,
    seed: u64,
) -> Result<LemmaReport> {
    if taus.is_empty() || taus.windows(2).any(|w| !(w[1] < w[0])) {
        return domain("tau levels must be strictly decreasing");
    }
    let states = simulate_rough_states(m, spot, t0, dt, taus[0], n_states, seed)?;
    let r_limit = 1.0 / (m.hurst + 0.5);
    let mut levels = Vec::with_capacity(taus.len());
    for &tau in taus {
        let mut a_gap = Vec::with_capacity(states.len());
        let mut r_gap = Vec::with_capacity(states.len());
        for st in &states {
            let u = u_average_vol(&st.curve, t0, t0 + tau)?;
            let r = r_ratio(&st.curve, t0, t0 + tau, m.hurst)?;
            a_gap.push((st.alpha / u - 1.0).abs());
            r_gap.push((r - r_limit).abs());
        }
        levels.push(LemmaLevel {
            tau,
            median_alpha_gap: median_iqr(&a_gap).0,
            median_r_gap: median_iqr(&r_gap).0,
        });
    }
    Ok(LemmaReport { levels })
}

/// ATM skew `d sigma / dk` at `k = 0` by a central difference in `k`.
pub fn atm_skew(sigma_of_k: &dyn Fn(f64) -> Result<f64>) -> Result<f64> {
    let e = 1e-4;
    Ok((sigma_of_k(e)? - sigma_of_k(-e)?) / (2.0 * e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkewFit {
    pub hurst: f64,
    pub fit: LinearFit,
    pub skews: Vec<f64>,
}

/// Fits `log |skew(tau)|` against `log tau`; the slope is `H - 1/2`.
/// Refuses a vanishing skew.
pub fn skew_powerlaw_fit(skew: &dyn Fn(f64) -> Result<f64>, taus: &[f64]) -> Result<SkewFit> {
    let skews: Vec<f64> = taus.iter().map(|&t| skew(t)).collect::<Result<_>>()?;
    if skews.iter().any(|s| !(s.abs() > 1e-12)) {
        return domain("ATM skew vanishes; no power law to fit");
    }
    let x: Vec<f64> = taus.iter().map(|t| t.ln()).collect();
    let y: Vec<f64> = skews.iter().map(|s| s.abs().ln()).collect();
    let fit = linear_fit(&x, &y)?;
    Ok(SkewFit {
        hurst: fit.slope + 0.5,
        fit,
        skews,
    })
}

/// Backbone-level helper for callers building states by hand.
pub fn backbone_value(b: &Backbone, s: f64) -> Result<f64> {
    b.value(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gfun::{solve_g_march, GParams, GridSpec};
    use crate::smile::TimeCurve;

    #[test]
    fn qv_identity_holds() {
        for (y, rho) in [(0.0, 0.3), (2.0, -0.3), (-5.0, 0.5), (9.5, -0.95)] {
            assert!(sabr_qv_identity(y, rho).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn generator_on_total_vol() {
        // f = sigma sqrt(T - t): only the time derivative survives
        let (sigma, maturity) = (0.3, 1.0);
        let f = |_x: &[f64], t: f64| Ok(sigma * (maturity - t).sqrt());
        let g = Generator {
            x: vec![100.0],
            t: 0.6,
            tau: 0.4,
            a: [[400.0, 0.0], [0.0, 0.0]],
            mu: [0.0; 2],
        };
        let d = drift_via_generator(&f, &g).unwrap();
        let exact = -sigma / (2.0 * 0.4f64.sqrt());
        assert!((d.value - exact).abs() < 1e-6 * exact.abs());
        assert!(d.richardson_ok(), "{:?}", d.ratio);
    }

    #[test]
    fn generator_on_polynomial() {
        // f = x0^3 x1 + x1^2 with a constant covariance: exact drift
        let f = |x: &[f64], _t: f64| Ok(x[0].powi(3) * x[1] + x[1] * x[1]);
        let a = [[0.04, 0.01], [0.01, 0.09]];
        let mu = [0.1, -0.2];
        let x = [1.5, 2.0];
        let g = Generator {
            x: x.to_vec(),
            t: 0.0,
            tau: 1.0,
            a,
            mu,
        };
        let d = drift_via_generator(&f, &g).unwrap();
        let grad = [3.0 * x[0] * x[0] * x[1], x[0].powi(3) + 2.0 * x[1]];
        let hess = [
            [6.0 * x[0] * x[1], 3.0 * x[0] * x[0]],
            [3.0 * x[0] * x[0], 2.0],
        ];
        let mut exact = mu[0] * grad[0] + mu[1] * grad[1];
        for i in 0..2 {
            for j in 0..2 {
                exact += 0.5 * a[i][j] * hess[i][j];
            }
        }
        assert!((d.value - exact).abs() < 1e-9, "{} vs {exact}", d.value);
    }

    #[test]
    fn lognormal_bbf_residual_vanishes() {
        let m = LocalVolModel::lognormal(0.2).unwrap();
        for flavor in [Flavor::Lognormal, Flavor::Normal] {
            let st = State::LocalVol { t: 0.1, s: 97.0 };
            let r = residual(flavor, ModelRef::LocalVol(&m), &st, 110.0, 0.3).unwrap();
            if flavor == Flavor::Lognormal {
                assert!(r.r.abs() < ZERO_RESIDUAL, "{r:?}");
            }
        }
        let normal = LocalVolModel::cev(TimeCurve::constant(15.0).unwrap(), 0.0).unwrap();
        let st = State::LocalVol { t: 0.1, s: 97.0 };
        let r = def4_residual(ModelRef::LocalVol(&normal), &st, 110.0, 0.3).unwrap();
        assert!(r.r.abs() < ZERO_RESIDUAL);
    }

    #[test]
    fn components_sum_and_decay() {
        let m = SabrParams::new(0.2, 0.5, -0.3, Backbone::lognormal()).unwrap();
        let st = State::Sabr {
            t: 0.0,
            s: 100.0,
            alpha: 0.2,
        };
        let mut prev = f64::INFINITY;
        for tau in [0.1, 0.01, 0.001] {
            let r = def3_residual(ModelRef::Sabr(&m), &st, 115.0, tau).unwrap();
            assert!((r.qv + r.drift + r.cross + r.volqv - r.r).abs() <= 1e-12);
            assert!(r.qv.abs() < 1e-13);
            assert!(r.r.abs() < prev);
            prev = r.r.abs();
            assert!(r.richardson_ok);
        }
    }

    #[test]
    fn rough_main_term_is_ode_defect() {
        let gp = GParams::new(-0.3, 0.1).unwrap();
        let sol = solve_g_march(gp, GridSpec::default(), 1e-11).unwrap();
        for y in [-3.0, -0.7, 0.4, 2.5] {
            let main = rough_main_term(y, 1.0, 1.0 / 0.6, -0.3, 0.1, &sol).unwrap();
            let (g, d) = crate::gfun::g_eval(&sol, y).unwrap();
            assert!((main - gp.ode_defect(y, g, d)).abs() < 1e-14);
            assert!(main.abs() < 1e-8);
        }
    }

    #[test]
    fn skew_fit_refuses_zero_correlation() {
        let fit = skew_powerlaw_fit(&|t: f64| Ok(0.3 * t.powf(-0.4)), &[0.01, 0.05, 0.2]).unwrap();
        assert!((fit.hurst - 0.1).abs() < 1e-12);
        assert!(skew_powerlaw_fit(&|_| Ok(0.0), &[0.01, 0.05, 0.2]).is_err());
    }

    #[test]
    fn sweep_validation() {
        let m = SabrParams::new(0.2, 0.5, -0.3, Backbone::lognormal()).unwrap();
        let cfg = SweepConfig {
            flavor: Flavor::Lognormal,
            spot: 100.0,
            t0: 0.1,
            taus: vec![0.05, 0.1],
            strike_ratios: vec![1.0],
            n_states: 10,
            seed: 1,
            dt: 0.01,
        };
        assert!(residual_sweep(ModelRef::Sabr(&m), &cfg).is_err());
        let short = SweepConfig {
            taus: vec![0.1, 0.05],
            ..cfg
        };
        assert!(residual_sweep(ModelRef::Sabr(&m), &short).is_err());
    }
}
