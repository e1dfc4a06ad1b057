//! BBF, SABR and rough SABR implied-volatility approximations in lognormal
//! (Black-Scholes) and normal (Bachelier) flavors.
//!
//! All six formulas share one shape. With `I = int_S^K ds / beta(s)` and
//! `A = k / I` (lognormal) or `A = x / I` (normal),
//!
//! ```text
//! sigma = scale * A / G(Y),   Y = (volvol / scale) * I,   G(y) = g(y) / y,
//! ```
//!
//! where `(scale, volvol)` is `(alpha, nu)` for SABR, `(U, zeta(tau))` for
//! rough SABR, and `(1, 0)` for BBF with `beta = v(., T)`. Writing it this
//! way keeps every piece finite at the money; `A` switches to its Taylor
//! expansion for `|k| < 1e-8`.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{domain, Error, Result};
use crate::gfun::{GFunction, SabrG};
use crate::numerics::{adaptive_simpson, CubicHermite};
use crate::pricing::MarketPoint;

/// Below this |log(K/S)| the moneyness ratio uses its expansion.
pub const ATM_THRESHOLD: f64 = 1e-8;

/// Which implied volatility a formula approximates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flavor {
    Lognormal,
    Normal,
}

/// Positive local diffusion shape `beta(s)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Backbone {
    /// `c * s^gamma` on `(0, inf)`.
    Cev { c: f64, gamma: f64 },
    /// Shape-preserving cubic through tabulated values.
    Table {
        interp: CubicHermite,
        min_value: f64,
    },
}

impl Backbone {
    pub fn cev(c: f64, gamma: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return domain(format!("CEV scale must be positive, got {c}"));
        }
        if !gamma.is_finite() {
            return domain("CEV exponent must be finite");
        }
        Ok(Backbone::Cev { c, gamma })
    }

    /// `beta(s) = s`.
    pub fn lognormal() -> Self {
        Backbone::Cev { c: 1.0, gamma: 1.0 }
    }

    pub fn table(grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if grid.first().is_some_and(|&s| !(s > 0.0)) {
            return domain("backbone grid must be positive");
        }
        if values.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return domain("backbone values must be positive");
        }
        let min_value = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let interp = CubicHermite::monotone(grid, values)?;
        Ok(Backbone::Table { interp, min_value })
    }

    fn from_hermite(interp: CubicHermite) -> Self {
        let min_value = interp
            .nodes()
            .1
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        Backbone::Table { interp, min_value }
    }

    /// True when `beta(s) = c * s`, which keeps `log S` a clean diffusion.
    pub fn is_proportional(&self) -> bool {
        matches!(self, Backbone::Cev { gamma, .. } if *gamma == 1.0)
    }

    pub fn domain(&self) -> (f64, f64) {
        match self {
            Backbone::Cev { .. } => (0.0, f64::INFINITY),
            Backbone::Table { interp, .. } => (interp.x_min(), interp.x_max()),
        }
    }

    fn check(&self, s: f64) -> Result<()> {
        let (lo, hi) = self.domain();
        let inside = match self {
            Backbone::Cev { .. } => s > lo && s < hi,
            Backbone::Table { .. } => s >= lo && s <= hi,
        };
        if !inside {
            return domain(format!(
                "spot level {s} outside backbone domain [{lo}, {hi}]"
            ));
        }
        Ok(())
    }

    pub fn value(&self, s: f64) -> Result<f64> {
        self.check(s)?;
        Ok(match self {
            Backbone::Cev { c, gamma } => c * s.powf(*gamma),
            Backbone::Table { interp, .. } => interp.eval(s).map(|v| v.0).unwrap_or(f64::NAN),
        })
    }

    /// `(beta, beta', beta'')`. Tabulated second derivatives come from
    /// central differences of the interpolant slope.
    pub fn derivs(&self, s: f64) -> Result<(f64, f64, f64)> {
        self.check(s)?;
        match self {
            Backbone::Cev { c, gamma } => {
                let v = c * s.powf(*gamma);
                Ok((v, gamma * v / s, gamma * (gamma - 1.0) * v / (s * s)))
            }
            Backbone::Table { interp, .. } => {
                let (v, d) = interp.eval(s).unwrap_or((f64::NAN, f64::NAN));
                let e = 1e-4 * s;
                let lo = (s - e).max(interp.x_min());
                let hi = (s + e).min(interp.x_max());
                let dl = interp.eval(lo).map(|v| v.1).unwrap_or(d);
                let dh = interp.eval(hi).map(|v| v.1).unwrap_or(d);
                Ok((v, d, (dh - dl) / (hi - lo)))
            }
        }
    }
}

/// Signed `int_S^K ds / beta(s)`.
pub fn inv_beta_integral(s: f64, k: f64, b: &Backbone) -> Result<f64> {
    b.check(s)?;
    b.check(k)?;
    if s == k {
        return Ok(0.0);
    }
    match b {
        Backbone::Cev { c, gamma } => {
            let e = 1.0 - gamma;
            if e == 0.0 {
                Ok((k / s).ln() / c)
            } else {
                // (K^e - S^e) / (c e) written to stay accurate for K near S
                Ok(s.powf(e) * (e * (k / s).ln()).exp_m1() / (c * e))
            }
        }
        Backbone::Table { interp, min_value } => {
            let tol = 1e-10 * (k - s).abs() / min_value;
            adaptive_simpson(
                |u| 1.0 / interp.eval(u).map(|v| v.0).unwrap_or(f64::NAN),
                s,
                k,
                tol,
            )
        }
    }
}

/// Moneyness over backbone integral, `(A, I)`, with the near-the-money
/// expansion of `A` for `|k| < ATM_THRESHOLD`.
pub fn moneyness_ratio(flavor: Flavor, s: f64, k: f64, b: &Backbone) -> Result<(f64, f64)> {
    let lk = (k / s).ln();
    let integral = inv_beta_integral(s, k, b)?;
    if lk.abs() < ATM_THRESHOLD {
        let (beta, dbeta, _) = b.derivs(s)?;
        let a = match flavor {
            Flavor::Lognormal => beta / s * (1.0 - 0.5 * (1.0 - s * dbeta / beta) * lk),
            Flavor::Normal => beta * (1.0 + 0.5 * dbeta * (k - s) / beta),
        };
        return Ok((a, integral));
    }
    let m = match flavor {
        Flavor::Lognormal => lk,
        Flavor::Normal => k - s,
    };
    Ok((m / integral, integral))
}

/// `scale * A / G((volvol / scale) * I)`.
pub fn sigma_core(
    flavor: Flavor,
    s: f64,
    k: f64,
    b: &Backbone,
    scale: f64,
    volvol: f64,
    g: &dyn GFunction,
) -> Result<f64> {
    if !(scale > 0.0 && scale.is_finite()) {
        return domain(format!("volatility scale must be positive, got {scale}"));
    }
    let (a, integral) = moneyness_ratio(flavor, s, k, b)?;
    let y = volvol / scale * integral;
    let ratio = if y == 0.0 { 1.0 } else { g.ratio(y)? };
    let sigma = scale * a / ratio;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Numeric(format!(
            "formula produced non-positive volatility {sigma}"
        )));
    }
    Ok(sigma)
}

/// `zeta(t) = eta sqrt(2H) t^(H - 1/2)`.
pub fn kernel(t: f64, hurst: f64, eta: f64) -> f64 {
    eta * (2.0 * hurst).sqrt() * t.powf(hurst - 0.5)
}

/// Piecewise-linear positive function of time, flat outside its nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeCurve {
    times: Vec<f64>,
    values: Vec<f64>,
}

impl TimeCurve {
    pub fn constant(v: f64) -> Result<Self> {
        Self::new(vec![0.0], vec![v])
    }

    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() {
            return domain("time curve needs matching, non-empty grids");
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return domain("time nodes must be strictly increasing");
        }
        if values.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return domain("time curve values must be positive");
        }
        Ok(Self { times, values })
    }

    /// Interpolation weight: value = w * values[i] + (1 - w) * values[i+1].
    fn locate(&self, t: f64) -> (usize, f64) {
        let n = self.times.len();
        if n == 1 || t <= self.times[0] {
            return (0, 1.0);
        }
        if t >= self.times[n - 1] {
            return (n - 1, 1.0);
        }
        let i = self.times.partition_point(|&x| x <= t) - 1;
        let w = (self.times[i + 1] - t) / (self.times[i + 1] - self.times[i]);
        (i, w)
    }

    pub fn at(&self, t: f64) -> f64 {
        let (i, w) = self.locate(t);
        if w == 1.0 {
            self.values[i]
        } else {
            w * self.values[i] + (1.0 - w) * self.values[i + 1]
        }
    }
}

/// Local volatility `v(s, t)`.
#[derive(Debug, Clone, PartialEq)]
pub enum LocalVolModel {
    /// `v(s, t) = c(t) s^gamma`.
    Cev { scale: TimeCurve, gamma: f64 },
    /// Shape-preserving cubic in `s` at each time node sharing one spot
    /// grid, linear in `t` between nodes and flat outside.
    Surface {
        times: Vec<f64>,
        slices: Vec<CubicHermite>,
    },
}

impl LocalVolModel {
    /// `v(s, t) = sigma s`.
    pub fn lognormal(sigma: f64) -> Result<Self> {
        Ok(LocalVolModel::Cev {
            scale: TimeCurve::constant(sigma)?,
            gamma: 1.0,
        })
    }

    pub fn cev(scale: TimeCurve, gamma: f64) -> Result<Self> {
        if !gamma.is_finite() {
            return domain("CEV exponent must be finite");
        }
        Ok(LocalVolModel::Cev { scale, gamma })
    }

    /// `values[i][j] = v(spots[j], times[i])`.
    pub fn surface(spots: Vec<f64>, times: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() {
            return domain("surface needs one row of values per time node");
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return domain("surface time nodes must be strictly increasing");
        }
        if !(spots.first().is_some_and(|&s| s > 0.0)) {
            return domain("surface spot grid must be positive");
        }
        let mut slices = Vec::with_capacity(times.len());
        for row in values {
            if row.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return domain("local volatility must be positive");
            }
            slices.push(CubicHermite::monotone(spots.clone(), row)?);
        }
        Ok(LocalVolModel::Surface { times, slices })
    }

    /// `v(., t)` as a backbone. For surfaces the blend of two Hermite slices
    /// on a common grid is itself a Hermite interpolant.
    pub fn backbone_at(&self, t: f64) -> Result<Backbone> {
        match self {
            LocalVolModel::Cev { scale, gamma } => Backbone::cev(scale.at(t), *gamma),
            LocalVolModel::Surface { times, slices } => {
                let curve = TimeCurve {
                    times: times.clone(),
                    values: vec![1.0; times.len()],
                };
                let (i, w) = curve.locate(t);
                if w == 1.0 {
                    return Ok(Backbone::from_hermite(slices[i].clone()));
                }
                let (xs, y0, d0) = slices[i].nodes();
                let (_, y1, d1) = slices[i + 1].nodes();
                let ys = y0
                    .iter()
                    .zip(y1)
                    .map(|(a, b)| w * a + (1.0 - w) * b)
                    .collect();
                let ds = d0
                    .iter()
                    .zip(d1)
                    .map(|(a, b)| w * a + (1.0 - w) * b)
                    .collect();
                Ok(Backbone::from_hermite(CubicHermite::with_slopes(
                    xs.to_vec(),
                    ys,
                    ds,
                )?))
            }
        }
    }

    pub fn value(&self, s: f64, t: f64) -> Result<f64> {
        match self {
            LocalVolModel::Cev { scale, gamma } => {
                if !(s > 0.0) {
                    return domain(format!("spot level {s} must be positive"));
                }
                Ok(scale.at(t) * s.powf(*gamma))
            }
            LocalVolModel::Surface { .. } => self.backbone_at(t)?.value(s),
        }
    }

    /// True when `v(s, t) = c(t) s`.
    pub fn is_proportional(&self) -> bool {
        matches!(self, LocalVolModel::Cev { gamma, .. } if *gamma == 1.0)
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho.abs() < 1.0) {
        return domain(format!("rho must lie in (-1, 1), got {rho}"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SabrParams {
    pub alpha0: f64,
    pub nu: f64,
    pub rho: f64,
    pub backbone: Backbone,
}

impl SabrParams {
    /// `nu = 0` is accepted as the degenerate local-volatility limit.
    pub fn new(alpha0: f64, nu: f64, rho: f64, backbone: Backbone) -> Result<Self> {
        if !(alpha0 > 0.0 && alpha0.is_finite()) {
            return domain(format!("alpha0 must be positive, got {alpha0}"));
        }
        if !(nu >= 0.0 && nu.is_finite()) {
            return domain(format!("nu must be non-negative, got {nu}"));
        }
        check_rho(rho)?;
        Ok(Self {
            alpha0,
            nu,
            rho,
            backbone,
        })
    }
}

/// Forward variance `xi(s)` as a right-continuous step function of calendar
/// time, extended flat beyond both ends.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardVarianceCurve {
    grid: Vec<f64>,
    values: Vec<f64>,
}

impl ForwardVarianceCurve {
    pub fn new(grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if grid.is_empty() || grid.len() != values.len() {
            return domain("forward variance curve needs matching, non-empty grids");
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return domain("forward variance grid must be strictly increasing");
        }
        if values.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return domain("forward variances must be positive");
        }
        Ok(Self { grid, values })
    }

    pub fn flat(xi: f64) -> Result<Self> {
        Self::new(vec![0.0], vec![xi])
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn piece(&self, s: f64) -> usize {
        self.grid.partition_point(|&x| x <= s).saturating_sub(1)
    }

    pub fn at(&self, s: f64) -> f64 {
        self.values[self.piece(s)]
    }

    /// Calls `f(lo, hi, xi)` for each constant piece overlapping `[a, b]`.
    fn for_pieces(&self, a: f64, b: f64, mut f: impl FnMut(f64, f64, f64)) {
        let mut i = self.piece(a);
        let mut lo = a;
        while lo < b {
            let hi = self.grid.get(i + 1).map_or(b, |&x| x.min(b));
            if hi > lo {
                f(lo, hi, self.values[i]);
            }
            lo = hi;
            i += 1;
        }
    }

    /// `int_a^b xi(s) ds`.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        let mut acc = 0.0;
        self.for_pieces(a, b, |lo, hi, v| acc += v * (hi - lo));
        acc
    }

    /// `int_a^b zeta(s - t) xi(s) ds` for `a >= t`, exact per piece.
    pub fn kernel_integral(&self, t: f64, a: f64, b: f64, hurst: f64, eta: f64) -> f64 {
        let p = hurst + 0.5;
        let c = eta * (2.0 * hurst).sqrt() / p;
        let mut acc = 0.0;
        self.for_pieces(a, b, |lo, hi, v| {
            acc += v * c * ((hi - t).powf(p) - (lo - t).powf(p))
        });
        acc
    }
}

/// `U = sqrt(int_t^T xi(s) ds / (T - t))`.
pub fn u_average_vol(curve: &ForwardVarianceCurve, t: f64, maturity: f64) -> Result<f64> {
    if !(maturity > t) {
        return domain(format!("need t < T, got t = {t}, T = {maturity}"));
    }
    Ok((curve.integral(t, maturity) / (maturity - t)).sqrt())
}

/// `R = int_t^T zeta(s-t) xi(s) ds / (zeta(T-t) int_t^T xi(s) ds)`.
/// Independent of `eta`; on a flat curve it equals `1 / (H + 1/2)`.
pub fn r_ratio(curve: &ForwardVarianceCurve, t: f64, maturity: f64, hurst: f64) -> Result<f64> {
    if !(maturity > t) {
        return domain(format!("need t < T, got t = {t}, T = {maturity}"));
    }
    let num = curve.kernel_integral(t, t, maturity, hurst, 1.0);
    Ok(num / (kernel(maturity - t, hurst, 1.0) * curve.integral(t, maturity)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoughSabrParams {
    pub hurst: f64,
    pub eta: f64,
    pub rho: f64,
    pub backbone: Backbone,
    pub xi0: ForwardVarianceCurve,
}

impl RoughSabrParams {
    /// `eta = 0` is accepted as the degenerate frozen-curve limit.
    pub fn new(
        hurst: f64,
        eta: f64,
        rho: f64,
        backbone: Backbone,
        xi0: ForwardVarianceCurve,
    ) -> Result<Self> {
        if !(hurst > 0.0 && hurst <= 0.5) {
            return domain(format!("Hurst exponent must lie in (0, 1/2], got {hurst}"));
        }
        if !(eta >= 0.0 && eta.is_finite()) {
            return domain(format!("eta must be non-negative, got {eta}"));
        }
        check_rho(rho)?;
        Ok(Self {
            hurst,
            eta,
            rho,
            backbone,
            xi0,
        })
    }

    pub fn zeta(&self, tau: f64) -> f64 {
        kernel(tau, self.hurst, self.eta)
    }
}

/// BBF in either flavor with `v(., T)` as the backbone.
pub fn bbf_sigma(flavor: Flavor, p: &MarketPoint, m: &LocalVolModel) -> Result<f64> {
    let b = m.backbone_at(p.maturity)?;
    sigma_core(flavor, p.spot, p.strike, &b, 1.0, 0.0, &SabrG { rho: 0.0 })
}

pub fn bbf_sigma_bs(p: &MarketPoint, m: &LocalVolModel) -> Result<f64> {
    bbf_sigma(Flavor::Lognormal, p, m)
}

pub fn bbf_sigma_bachelier(p: &MarketPoint, m: &LocalVolModel) -> Result<f64> {
    bbf_sigma(Flavor::Normal, p, m)
}

/// SABR at the current volatility state `alpha`.
pub fn sabr_sigma(flavor: Flavor, p: &MarketPoint, m: &SabrParams, alpha: f64) -> Result<f64> {
    let g = SabrG::new(m.rho)?;
    sigma_core(flavor, p.spot, p.strike, &m.backbone, alpha, m.nu, &g)
}

pub fn sabr_sigma_bs(p: &MarketPoint, m: &SabrParams, alpha: f64) -> Result<f64> {
    sabr_sigma(Flavor::Lognormal, p, m, alpha)
}

pub fn sabr_sigma_bachelier(p: &MarketPoint, m: &SabrParams, alpha: f64) -> Result<f64> {
    sabr_sigma(Flavor::Normal, p, m, alpha)
}

/// Rough SABR from the average volatility `u` over the remaining life.
pub fn rough_sabr_sigma_from_u(
    flavor: Flavor,
    p: &MarketPoint,
    m: &RoughSabrParams,
    u: f64,
    g: &dyn GFunction,
) -> Result<f64> {
    sigma_core(flavor, p.spot, p.strike, &m.backbone, u, m.zeta(p.tau()), g)
}

/// Rough SABR with the current curve `curve` (calendar time).
pub fn rough_sabr_sigma(
    flavor: Flavor,
    p: &MarketPoint,
    m: &RoughSabrParams,
    curve: &ForwardVarianceCurve,
    g: &dyn GFunction,
) -> Result<f64> {
    let u = u_average_vol(curve, p.time, p.maturity)?;
    rough_sabr_sigma_from_u(flavor, p, m, u, g)
}

pub fn rough_sabr_sigma_bs(
    p: &MarketPoint,
    m: &RoughSabrParams,
    curve: &ForwardVarianceCurve,
    g: &dyn GFunction,
) -> Result<f64> {
    rough_sabr_sigma(Flavor::Lognormal, p, m, curve, g)
}

pub fn rough_sabr_sigma_bachelier(
    p: &MarketPoint,
    m: &RoughSabrParams,
    curve: &ForwardVarianceCurve,
    g: &dyn GFunction,
) -> Result<f64> {
    rough_sabr_sigma(Flavor::Normal, p, m, curve, g)
}

/// A model plus whatever its formula needs to evaluate.
#[derive(Clone)]
pub enum ModelSpec {
    LocalVol(LocalVolModel),
    Sabr(SabrParams),
    RoughSabr {
        params: RoughSabrParams,
        g: Arc<dyn GFunction + Send + Sync>,
    },
}

impl ModelSpec {
    /// Formula value at the model's initial state.
    pub fn sigma(&self, flavor: Flavor, p: &MarketPoint) -> Result<f64> {
        match self {
            ModelSpec::LocalVol(m) => bbf_sigma(flavor, p, m),
            ModelSpec::Sabr(m) => sabr_sigma(flavor, p, m, m.alpha0),
            ModelSpec::RoughSabr { params, g } => {
                rough_sabr_sigma(flavor, p, params, &params.xi0, g.as_ref())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmileRow {
    pub strike: f64,
    pub k: f64,
    pub x: f64,
    pub sigma_bs: Option<f64>,
    pub sigma_bachelier: Option<f64>,
}

/// Formula smile over a strike list. Failed evaluations leave empty cells
/// and are listed in `errors` by row index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SmileTable {
    pub rows: Vec<SmileRow>,
    pub errors: Vec<(usize, String)>,
}

pub fn smile_table(model: &ModelSpec, strikes: &[f64], p: &MarketPoint) -> SmileTable {
    let mut sorted = strikes.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut table = SmileTable::default();
    for (i, &strike) in sorted.iter().enumerate() {
        let mut row = SmileRow {
            strike,
            k: (strike / p.spot).ln(),
            x: strike - p.spot,
            sigma_bs: None,
            sigma_bachelier: None,
        };
        match p.with_strike(strike) {
            Ok(q) => {
                for flavor in [Flavor::Lognormal, Flavor::Normal] {
                    match model.sigma(flavor, &q) {
                        Ok(v) => match flavor {
                            Flavor::Lognormal => row.sigma_bs = Some(v),
                            Flavor::Normal => row.sigma_bachelier = Some(v),
                        },
                        Err(e) => table.errors.push((i, e.to_string())),
                    }
                }
            }
            Err(e) => table.errors.push((i, e.to_string())),
        }
        table.rows.push(row);
    }
    table
}

impl SmileTable {
    /// `strike,k,x,sigma_bs,sigma_bachelier` rows.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        if self.rows.is_empty() {
            w.write_record(["strike", "k", "x", "sigma_bs", "sigma_bachelier"])?;
        }
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}
