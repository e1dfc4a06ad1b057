//! Monte Carlo simulation of the local-volatility, SABR and rough SABR
//! models.
//!
//! Paths are independent and each draws from its own counter-based streams
//! (see [`crate::rng`]), so ensembles are bit-identical for a given
//! `(seed, grid, n)` whatever the thread count. Brownian increments come
//! from a bridge over the grid, which couples a run to its step-halved twin.
//!
//! The rough model evolves the forward variance curve in buckets
//! `[t_j, t_j + dt)` on the simulation grid. The log of each bucket level
//! receives Gaussian increments whose per-lag variances integrate the
//! squared kernel exactly over each step, so the spot variance
//! `alpha_t^2 = xi_t(t)` is exactly lognormal on the grid.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{domain, Result};
use crate::numerics::mean_stderr;
use crate::pricing::{bs_vega, implied_vol_bs, MarketPoint};
use crate::rng::{fill_normals, path_stream, BrownianBridge};
use crate::smile::{
    kernel, r_ratio, u_average_vol, Backbone, ForwardVarianceCurve, LocalVolModel, RoughSabrParams,
    SabrParams,
};

/// Absorbing level for arithmetic Euler stepping.
pub const ABSORB_LEVEL: f64 = 1e-12;

/// Which grid times an ensemble keeps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Record {
    Terminal,
    All,
    /// Grid indices, increasing.
    Indices(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimGrid {
    times: Vec<f64>,
    record: Record,
}

impl SimGrid {
    pub fn uniform(maturity: f64, steps: usize) -> Result<Self> {
        if !(maturity > 0.0 && maturity.is_finite()) {
            return domain(format!(
                "simulation horizon must be positive, got {maturity}"
            ));
        }
        if steps < 1 {
            return domain("simulation grid needs at least one step");
        }
        let times = (0..=steps)
            .map(|i| maturity * i as f64 / steps as f64)
            .collect();
        Ok(Self {
            times,
            record: Record::Terminal,
        })
    }

    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 || times[0] != 0.0 || times.windows(2).any(|w| !(w[1] > w[0])) {
            return domain("simulation grid must start at 0 and increase strictly");
        }
        Ok(Self {
            times,
            record: Record::Terminal,
        })
    }

    pub fn with_record(mut self, record: Record) -> Result<Self> {
        if let Record::Indices(ix) = &record {
            if ix.is_empty()
                || ix.windows(2).any(|w| w[1] <= w[0])
                || *ix.last().unwrap() > self.steps()
            {
                return domain("record indices must be increasing grid indices");
            }
        }
        self.record = record;
        Ok(self)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn maturity(&self) -> f64 {
        self.times[self.steps()]
    }

    fn record_indices(&self) -> Vec<usize> {
        match &self.record {
            Record::Terminal => vec![self.steps()],
            Record::All => (0..=self.steps()).collect(),
            Record::Indices(ix) => ix.clone(),
        }
    }

    /// Common step if the grid is uniform to rounding.
    fn uniform_step(&self) -> Option<f64> {
        let dt = self.maturity() / self.steps() as f64;
        let ok = self
            .times
            .windows(2)
            .all(|w| ((w[1] - w[0]) - dt).abs() <= 1e-9 * dt);
        ok.then_some(dt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Scheme {
    LocalVolLogEuler,
    LocalVolEuler,
    SabrLogEuler,
    SabrEuler,
    RoughLogEuler,
    RoughEuler,
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::LocalVolLogEuler => "localvol-log-euler",
            Scheme::LocalVolEuler => "localvol-euler-absorbing",
            Scheme::SabrLogEuler => "sabr-exact-alpha-log-euler",
            Scheme::SabrEuler => "sabr-exact-alpha-euler-absorbing",
            Scheme::RoughLogEuler => "rough-bucketed-log-euler",
            Scheme::RoughEuler => "rough-bucketed-euler-absorbing",
        })
    }
}

/// Simulated paths at the recorded grid times, stored path-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub n_paths: usize,
    pub seed: u64,
    pub scheme: Scheme,
    pub times: Vec<f64>,
    pub s: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Rough model only. At the final maturity these hold their `tau -> 0`
    /// limits `alpha` and `1 / (H + 1/2)`.
    pub u: Option<Vec<f64>>,
    pub r: Option<Vec<f64>>,
    pub absorbed: Vec<bool>,
}

impl PathEnsemble {
    fn index(&self, path: usize, j: usize) -> usize {
        path * self.times.len() + j
    }

    pub fn s_at(&self, path: usize, j: usize) -> f64 {
        self.s[self.index(path, j)]
    }

    pub fn alpha_at(&self, path: usize, j: usize) -> f64 {
        self.alpha[self.index(path, j)]
    }

    /// Values of `S` at the last recorded time, one per path.
    pub fn terminal_s(&self) -> Vec<f64> {
        let last = self.times.len() - 1;
        (0..self.n_paths).map(|p| self.s_at(p, last)).collect()
    }

    pub fn terminal_alpha(&self) -> Vec<f64> {
        let last = self.times.len() - 1;
        (0..self.n_paths).map(|p| self.alpha_at(p, last)).collect()
    }

    pub fn absorbed_count(&self) -> usize {
        self.absorbed.iter().filter(|a| **a).count()
    }

    /// `path,time,S,alpha,U,R` rows; U and R are empty outside the rough model.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            path: usize,
            time: f64,
            #[serde(rename = "S")]
            s: f64,
            alpha: f64,
            #[serde(rename = "U")]
            u: Option<f64>,
            #[serde(rename = "R")]
            r: Option<f64>,
        }
        let mut w = csv::Writer::from_writer(out);
        for p in 0..self.n_paths {
            for (j, &time) in self.times.iter().enumerate() {
                let i = self.index(p, j);
                w.serialize(Row {
                    path: p,
                    time,
                    s: self.s[i],
                    alpha: self.alpha[i],
                    u: self.u.as_ref().map(|v| v[i]),
                    r: self.r.as_ref().map(|v| v[i]),
                })?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

struct PathOut {
    s: Vec<f64>,
    alpha: Vec<f64>,
    u: Vec<f64>,
    r: Vec<f64>,
    absorbed: bool,
}

struct Scratch {
    z: Vec<f64>,
    bridge_path: Vec<f64>,
    dw: Vec<f64>,
    dw_perp: Vec<f64>,
    logxi: Vec<f64>,
}

impl Scratch {
    fn new(steps: usize, buckets: usize) -> Self {
        Self {
            z: vec![0.0; steps],
            bridge_path: vec![0.0; steps + 1],
            dw: vec![0.0; steps],
            dw_perp: vec![0.0; steps],
            logxi: vec![0.0; buckets],
        }
    }

    /// Bridge increments for Brownian dimension `dim` into `dw` (dim 0) or
    /// `dw_perp` (dim 1).
    fn draw(&mut self, bridge: &BrownianBridge, seed: u64, path: u64, dim: u32) {
        let mut rng = path_stream(seed, path, dim);
        fill_normals(&mut rng, &mut self.z);
        let out = if dim == 0 {
            &mut self.dw
        } else {
            &mut self.dw_perp
        };
        bridge.increments(&self.z, &mut self.bridge_path, out);
    }
}

fn check_paths(n: usize) -> Result<()> {
    if n == 0 {
        return domain("need at least one path");
    }
    Ok(())
}

fn assemble(
    outs: Vec<PathOut>,
    n: usize,
    seed: u64,
    scheme: Scheme,
    times: Vec<f64>,
    rough: bool,
) -> PathEnsemble {
    let cap = n * times.len();
    let mut e = PathEnsemble {
        n_paths: n,
        seed,
        scheme,
        times,
        s: Vec::with_capacity(cap),
        alpha: Vec::with_capacity(cap),
        u: rough.then(|| Vec::with_capacity(cap)),
        r: rough.then(|| Vec::with_capacity(cap)),
        absorbed: Vec::with_capacity(n),
    };
    for o in outs {
        e.s.extend_from_slice(&o.s);
        e.alpha.extend_from_slice(&o.alpha);
        if let Some(u) = e.u.as_mut() {
            u.extend_from_slice(&o.u);
        }
        if let Some(r) = e.r.as_mut() {
            r.extend_from_slice(&o.r);
        }
        e.absorbed.push(o.absorbed);
    }
    e
}

/// One Euler step of `dS = vol dZ`, either in log scale or arithmetic with
/// absorption. Returns the new level and whether it is absorbed.
#[inline]
fn step_spot(s: f64, local: f64, dz: f64, dt: f64, log_scale: bool) -> (f64, bool) {
    if log_scale {
        // local = vol / S, constant in S for proportional backbones
        (s * (local * dz - 0.5 * local * local * dt).exp(), false)
    } else {
        let next = s + local * dz;
        if next <= ABSORB_LEVEL {
            (ABSORB_LEVEL, true)
        } else {
            (next, false)
        }
    }
}

/// Backbone value for simulation; tabulated backbones extend flat beyond
/// their grid.
fn beta_sim(b: &Backbone, s: f64) -> f64 {
    let (lo, hi) = b.domain();
    match b {
        Backbone::Cev { c, gamma } => c * s.powf(*gamma),
        Backbone::Table { .. } => b.value(s.clamp(lo, hi)).unwrap_or(f64::NAN),
    }
}

/// Euler-Maruyama for `dS = v(S, t) dW`; log-Euler when `v` is proportional
/// to `S`.
pub fn simulate_local_vol(
    m: &LocalVolModel,
    spot: f64,
    grid: &SimGrid,
    n: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    check_paths(n)?;
    if !(spot > 0.0) {
        return domain(format!("spot must be positive, got {spot}"));
    }
    let times = grid.times().to_vec();
    let steps = grid.steps();
    let backbones: Vec<Backbone> = times[..steps]
        .iter()
        .map(|&t| m.backbone_at(t))
        .collect::<Result<_>>()?;
    let log_scale = m.is_proportional();
    let bridge = BrownianBridge::new(&times)?;
    let rec = grid.record_indices();
    let outs: Vec<PathOut> = (0..n)
        .into_par_iter()
        .map_init(
            || Scratch::new(steps, 0),
            |sc, p| {
                sc.draw(&bridge, seed, p as u64, 0);
                let mut s = spot;
                let mut absorbed = false;
                let mut out = PathOut {
                    s: Vec::with_capacity(rec.len()),
                    alpha: Vec::with_capacity(rec.len()),
                    u: Vec::new(),
                    r: Vec::new(),
                    absorbed: false,
                };
                let mut next_rec = 0;
                for i in 0..=steps {
                    if next_rec < rec.len() && rec[next_rec] == i {
                        out.s.push(s);
                        out.alpha.push(1.0);
                        next_rec += 1;
                    }
                    if i == steps {
                        break;
                    }
                    if absorbed {
                        continue;
                    }
                    let dt = times[i + 1] - times[i];
                    let beta = beta_sim(&backbones[i], s);
                    let local = if log_scale { beta / s } else { beta };
                    let (next, hit) = step_spot(s, local, sc.dw[i], dt, log_scale);
                    s = next;
                    absorbed = hit;
                }
                out.absorbed = absorbed;
                out
            },
        )
        .collect();
    let scheme = if log_scale {
        Scheme::LocalVolLogEuler
    } else {
        Scheme::LocalVolEuler
    };
    Ok(assemble(
        outs,
        n,
        seed,
        scheme,
        rec.iter().map(|&i| times[i]).collect(),
        false,
    ))
}

/// SABR with `alpha` stepped exactly as a geometric Brownian motion and `S`
/// by Euler against `Z = rho W + sqrt(1 - rho^2) W_perp`.
pub fn simulate_sabr(
    m: &SabrParams,
    spot: f64,
    grid: &SimGrid,
    n: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    check_paths(n)?;
    if !(spot > 0.0) {
        return domain(format!("spot must be positive, got {spot}"));
    }
    let times = grid.times().to_vec();
    let steps = grid.steps();
    let log_scale = m.backbone.is_proportional();
    let bridge = BrownianBridge::new(&times)?;
    let rec = grid.record_indices();
    let rho_perp = (1.0 - m.rho * m.rho).sqrt();
    let outs: Vec<PathOut> = (0..n)
        .into_par_iter()
        .map_init(
            || Scratch::new(steps, 0),
            |sc, p| {
                sc.draw(&bridge, seed, p as u64, 0);
                sc.draw(&bridge, seed, p as u64, 1);
                let mut s = spot;
                let mut alpha = m.alpha0;
                let mut absorbed = false;
                let mut out = PathOut {
                    s: Vec::with_capacity(rec.len()),
                    alpha: Vec::with_capacity(rec.len()),
                    u: Vec::new(),
                    r: Vec::new(),
                    absorbed: false,
                };
                let mut next_rec = 0;
                for i in 0..=steps {
                    if next_rec < rec.len() && rec[next_rec] == i {
                        out.s.push(s);
                        out.alpha.push(alpha);
                        next_rec += 1;
                    }
                    if i == steps {
                        break;
                    }
                    let dt = times[i + 1] - times[i];
                    let dw = sc.dw[i];
                    if !absorbed {
                        let dz = m.rho * dw + rho_perp * sc.dw_perp[i];
                        let beta = beta_sim(&m.backbone, s);
                        let local = if log_scale {
                            alpha * beta / s
                        } else {
                            alpha * beta
                        };
                        let (next, hit) = step_spot(s, local, dz, dt, log_scale);
                        s = next;
                        absorbed = hit;
                    }
                    alpha *= (m.nu * dw - 0.5 * m.nu * m.nu * dt).exp();
                }
                out.absorbed = absorbed;
                out
            },
        )
        .collect();
    let scheme = if log_scale {
        Scheme::SabrLogEuler
    } else {
        Scheme::SabrEuler
    };
    Ok(assemble(
        outs,
        n,
        seed,
        scheme,
        rec.iter().map(|&i| times[i]).collect(),
        false,
    ))
}

/// Per-lag standard deviations `c_m` (index `m - 1`) of the log bucket
/// increments on a uniform step `dt`, chosen so that
/// `c_m^2 dt = int_{(m-1) dt}^{m dt} zeta(v)^2 dv`.
fn lag_kernel(m: &RoughSabrParams, dt: f64, lags: usize) -> Vec<f64> {
    let two_h = 2.0 * m.hurst;
    let scale = m.eta * m.eta * dt.powf(two_h) / dt;
    (1..=lags)
        .map(|l| {
            let l = l as f64;
            (scale * (l.powf(two_h) - (l - 1.0).powf(two_h))).sqrt()
        })
        .collect()
}

/// Uniform bucket layout shared by the path and state simulators.
struct RoughLayout {
    dt: f64,
    steps: usize,
    buckets: usize,
    c: Vec<f64>,
    log_xi0: Vec<f64>,
}

impl RoughLayout {
    fn new(m: &RoughSabrParams, dt: f64, steps: usize, buckets: usize) -> Self {
        let c = lag_kernel(m, dt, buckets.max(1));
        let log_xi0 = (0..buckets).map(|j| m.xi0.at(j as f64 * dt).ln()).collect();
        Self {
            dt,
            steps,
            buckets,
            c,
            log_xi0,
        }
    }

    /// Runs one path for `steps` steps. `on_step(i, s, logxi)` sees the
    /// state at grid time `i` before stepping (and once more at the end).
    /// Returns `(S, absorbed)` at the end.
    #[allow(clippy::too_many_arguments)]
    fn run(
        &self,
        m: &RoughSabrParams,
        spot: f64,
        dw: &[f64],
        dw_perp: &[f64],
        logxi: &mut [f64],
        log_scale: bool,
        mut on_step: impl FnMut(usize, f64, &[f64]),
    ) -> (f64, bool) {
        logxi.copy_from_slice(&self.log_xi0);
        let rho_perp = (1.0 - m.rho * m.rho).sqrt();
        let mut s = spot;
        let mut absorbed = false;
        for i in 0..=self.steps {
            on_step(i, s, logxi);
            if i == self.steps {
                break;
            }
            let alpha = (0.5 * logxi[i]).exp();
            if !absorbed {
                let dz = m.rho * dw[i] + rho_perp * dw_perp[i];
                let beta = beta_sim(&m.backbone, s);
                let local = if log_scale {
                    alpha * beta / s
                } else {
                    alpha * beta
                };
                let (next, hit) = step_spot(s, local, dz, self.dt, log_scale);
                s = next;
                absorbed = hit;
            }
            let w = dw[i];
            for (lx, c) in logxi[i + 1..].iter_mut().zip(&self.c) {
                *lx += c * w - 0.5 * c * c * self.dt;
            }
        }
        (s, absorbed)
    }
}

/// Current forward variance curve seen at grid time `i`, from bucket `i` on.
fn bucket_curve(logxi: &[f64], i: usize, dt: f64) -> Result<ForwardVarianceCurve> {
    let grid = (i..logxi.len()).map(|j| j as f64 * dt).collect();
    let values = logxi[i..].iter().map(|v| v.exp()).collect();
    ForwardVarianceCurve::new(grid, values)
}

fn check_rough_grid(grid: &SimGrid) -> Result<f64> {
    if grid.steps() < 10 {
        return domain(format!(
            "rough simulation needs at least 10 steps to resolve the kernel, got {}",
            grid.steps()
        ));
    }
    grid.uniform_step()
        .ok_or_else(|| crate::error::Error::Domain("rough simulation needs a uniform grid".into()))
}

/// Rough SABR: bucketed lognormal forward variance, `alpha_t = sqrt(xi_t(t))`
/// and Euler for `S`. U and R are evaluated from the bucket curve at the
/// recorded times.
pub fn simulate_rough_sabr(
    m: &RoughSabrParams,
    spot: f64,
    grid: &SimGrid,
    n: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    check_paths(n)?;
    if !(spot > 0.0) {
        return domain(format!("spot must be positive, got {spot}"));
    }
    let dt = check_rough_grid(grid)?;
    let times = grid.times().to_vec();
    let steps = grid.steps();
    let maturity = grid.maturity();
    let layout = RoughLayout::new(m, dt, steps, steps);
    let log_scale = m.backbone.is_proportional();
    let bridge = BrownianBridge::new(&times)?;
    let rec = grid.record_indices();
    let r_limit = 1.0 / (m.hurst + 0.5);
    let outs: Vec<PathOut> = (0..n)
        .into_par_iter()
        .map_init(
            || Scratch::new(steps, layout.buckets),
            |sc, p| {
                sc.draw(&bridge, seed, p as u64, 0);
                sc.draw(&bridge, seed, p as u64, 1);
                let mut out = PathOut {
                    s: Vec::with_capacity(rec.len()),
                    alpha: Vec::with_capacity(rec.len()),
                    u: Vec::with_capacity(rec.len()),
                    r: Vec::with_capacity(rec.len()),
                    absorbed: false,
                };
                let mut next_rec = 0;
                let mut last_alpha = f64::NAN;
                let (_, absorbed) = layout.run(
                    m,
                    spot,
                    &sc.dw,
                    &sc.dw_perp,
                    &mut sc.logxi,
                    log_scale,
                    |i, s, logxi| {
                        // alpha at the final time continues the last bucket
                        let alpha = if i < steps {
                            (0.5 * logxi[i]).exp()
                        } else {
                            last_alpha
                        };
                        last_alpha = alpha;
                        if next_rec < rec.len() && rec[next_rec] == i {
                            out.s.push(s);
                            out.alpha.push(alpha);
                            if i < steps {
                                let curve = bucket_curve(logxi, i, dt).expect("positive buckets");
                                let t = times[i];
                                out.u
                                    .push(u_average_vol(&curve, t, maturity).unwrap_or(f64::NAN));
                                out.r.push(
                                    r_ratio(&curve, t, maturity, m.hurst).unwrap_or(f64::NAN),
                                );
                            } else {
                                out.u.push(alpha);
                                out.r.push(r_limit);
                            }
                            next_rec += 1;
                        }
                    },
                );
                out.absorbed = absorbed;
                out
            },
        )
        .collect();
    let scheme = if log_scale {
        Scheme::RoughLogEuler
    } else {
        Scheme::RoughEuler
    };
    Ok(assemble(
        outs,
        n,
        seed,
        scheme,
        rec.iter().map(|&i| times[i]).collect(),
        true,
    ))
}

/// Rough SABR state at an intermediate time: spot, spot volatility and the
/// forward variance curve in calendar time.
#[derive(Debug, Clone, PartialEq)]
pub struct RoughState {
    pub t: f64,
    pub s: f64,
    pub alpha: f64,
    pub curve: ForwardVarianceCurve,
}

/// Simulates `n` independent rough SABR states at `t0` on a uniform step
/// `dt` (which must divide `t0`), keeping forward variance buckets out to
/// `t0 + horizon`.
pub fn simulate_rough_states(
    m: &RoughSabrParams,
    spot: f64,
    t0: f64,
    dt: f64,
    horizon: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<RoughState>> {
    check_paths(n)?;
    if !(spot > 0.0 && t0 > 0.0 && dt > 0.0 && horizon > 0.0) {
        return domain("spot, t0, dt and horizon must be positive");
    }
    let steps = (t0 / dt).round() as usize;
    if steps < 10 || ((steps as f64) * dt - t0).abs() > 1e-9 * t0 {
        return domain(format!("t0 = {t0} must be at least 10 whole steps of {dt}"));
    }
    let buckets = steps + (horizon / dt).ceil() as usize;
    let layout = RoughLayout::new(m, dt, steps, buckets);
    let grid = SimGrid::uniform(t0, steps)?;
    let bridge = BrownianBridge::new(grid.times())?;
    let log_scale = m.backbone.is_proportional();
    (0..n)
        .into_par_iter()
        .map_init(
            || Scratch::new(steps, buckets),
            |sc, p| {
                sc.draw(&bridge, seed, p as u64, 0);
                sc.draw(&bridge, seed, p as u64, 1);
                let (s, _) = layout.run(
                    m,
                    spot,
                    &sc.dw,
                    &sc.dw_perp,
                    &mut sc.logxi,
                    log_scale,
                    |_, _, _| {},
                );
                let curve = bucket_curve(&sc.logxi, steps, dt)?;
                Ok(RoughState {
                    t: t0,
                    s,
                    alpha: (0.5 * sc.logxi[steps]).exp(),
                    curve,
                })
            },
        )
        .collect()
}

/// Discounting-free call price and its standard error from terminal spots.
pub fn mc_call_price(e: &PathEnsemble, strike: f64) -> Result<(f64, f64)> {
    if e.n_paths == 0 {
        return domain("empty ensemble");
    }
    let payoff: Vec<f64> = e
        .terminal_s()
        .iter()
        .map(|s| (s - strike).max(0.0))
        .collect();
    mean_stderr(&payoff)
}

/// Call price from the out-of-the-money side: below the spot the put payoff
/// is averaged and converted by parity `C = P + S0 - K`, which holds exactly
/// under the martingale model and has far smaller variance than the
/// in-the-money call payoff.
pub fn mc_otm_call_price(e: &PathEnsemble, spot: f64, strike: f64) -> Result<(f64, f64)> {
    if e.n_paths == 0 {
        return domain("empty ensemble");
    }
    if strike >= spot {
        return mc_call_price(e, strike);
    }
    let payoff: Vec<f64> = e
        .terminal_s()
        .iter()
        .map(|s| (strike - s).max(0.0))
        .collect();
    let (put, se) = mean_stderr(&payoff)?;
    Ok((put + spot - strike, se))
}

/// One strike of a Monte Carlo smile.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McQuote {
    pub strike: f64,
    pub price: f64,
    pub price_stderr: f64,
    /// Black-Scholes implied vol; `None` when the price is outside the
    /// no-arbitrage bounds.
    pub iv: Option<f64>,
    /// Price standard error mapped through the vega.
    pub iv_stderr: Option<f64>,
}

/// Implied volatilities from [`mc_otm_call_price`].
pub fn mc_smile(
    e: &PathEnsemble,
    spot: f64,
    maturity: f64,
    strikes: &[f64],
) -> Result<Vec<McQuote>> {
    strikes
        .iter()
        .map(|&k| {
            let (price, se) = mc_otm_call_price(e, spot, k)?;
            let p = MarketPoint::spot_start(spot, k, maturity)?;
            let iv = implied_vol_bs(price, &p).ok();
            let iv_stderr = match iv {
                Some(v) => Some(se / bs_vega(&p, v)?),
                None => None,
            };
            Ok(McQuote {
                strike: k,
                price,
                price_stderr: se,
                iv,
                iv_stderr,
            })
        })
        .collect()
}

/// `int_0^t zeta(s - u)^2 du`, the variance of `log xi_t(s)`.
pub fn log_xi_variance(m: &RoughSabrParams, t: f64, s: f64) -> f64 {
    let two_h = 2.0 * m.hurst;
    m.eta * m.eta * (s.powf(two_h) - (s - t).powf(two_h))
}

/// Kernel value at lag `t`, re-exported for callers that simulate states.
pub fn zeta(m: &RoughSabrParams, t: f64) -> f64 {
    kernel(t, m.hurst, m.eta)
}
