//! The g-functions that divide log-moneyness in the SABR and rough SABR
//! smile formulas.
//!
//! For SABR the function is available in closed form. For rough SABR it is
//! the unique solution of
//!
//! ```text
//! g'(y)^2 q(y) = 1 - (1 - 2H)(1 - y g'(y) / g(y)),   g(0) = 0, g'(0) > 0,
//! q(y) = 1 + 2 rho y / (2H + 1) + y^2 / (2H + 1)^2,
//! ```
//!
//! which we solve two independent ways: the fixed-point iteration
//! `g <- int_0^y phi(u, u / g(u)) du` seeded with `phi(u, 0)`, and an adaptive
//! Runge-Kutta march outward from a second-order series start. `phi` is the
//! positive root of the ODE read as a quadratic in `g'`.

use crate::error::{domain, Error, Result};
use crate::numerics::{uniform_derivative, Chebyshev, CubicHermite};

/// Largest accepted |rho|; q(y) degenerates as |rho| -> 1.
pub const RHO_LIMIT: f64 = 0.999;

/// Correlation and Hurst exponent defining the rough-SABR g-function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GParams {
    pub rho: f64,
    pub hurst: f64,
}

impl GParams {
    pub fn new(rho: f64, hurst: f64) -> Result<Self> {
        if !(rho.abs() <= RHO_LIMIT) {
            return domain(format!("rho must satisfy |rho| <= {RHO_LIMIT}, got {rho}"));
        }
        if !(hurst > 0.0 && hurst <= 0.5) {
            return domain(format!("Hurst exponent must lie in (0, 1/2], got {hurst}"));
        }
        Ok(Self { rho, hurst })
    }

    pub fn q(&self, y: f64) -> f64 {
        let a = 2.0 * self.hurst + 1.0;
        1.0 + 2.0 * self.rho * y / a + y * y / (a * a)
    }

    /// Left side minus right side of the ODE for a candidate `(y, g, g')`.
    /// At `y = 0` the `y g'/g` term takes its limit 1.
    pub fn ode_defect(&self, y: f64, g: f64, gp: f64) -> f64 {
        let ratio = if y == 0.0 { 1.0 } else { y * gp / g };
        gp * gp * self.q(y) - 1.0 + (1.0 - 2.0 * self.hurst) * (1.0 - ratio)
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho.abs() < 1.0) {
        return domain(format!("rho must lie in (-1, 1), got {rho}"));
    }
    Ok(())
}

/// Closed-form SABR g: `-log((sqrt(1 + 2 rho y + y^2) - y - rho) / (1 - rho))`.
pub fn sabr_g(y: f64, rho: f64) -> Result<f64> {
    check_rho(rho)?;
    let root = (1.0 + 2.0 * rho * y + y * y).sqrt();
    if y + rho >= 0.0 {
        // Rationalised form; avoids cancellation in root - y - rho for y >> 1.
        Ok(((root + y + rho) / (1.0 + rho)).ln())
    } else {
        // root - y - rho - (1 - rho) = (2 rho y + y^2)/(root + 1) - y
        let num = (2.0 * rho * y + y * y) / (root + 1.0) - y;
        Ok(-(num / (1.0 - rho)).ln_1p())
    }
}

pub fn sabr_g_prime(y: f64, rho: f64) -> Result<f64> {
    check_rho(rho)?;
    Ok(1.0 / (1.0 + 2.0 * rho * y + y * y).sqrt())
}

/// `phi(y, z) = ((1-2H) z + sqrt((1-2H)^2 z^2 + 8 H q(y))) / (2 q(y))` for
/// `z >= 0`.
pub fn phi_resolvent(y: f64, z: f64, gp: &GParams) -> f64 {
    let q = gp.q(y);
    let a = 1.0 - 2.0 * gp.hurst;
    (a * z + (a * a * z * z + 8.0 * gp.hurst * q).sqrt()) / (2.0 * q)
}

/// `-4 rho / ((1 + 2H)(3 + 2H))`, the second derivative of g at 0.
pub fn curvature_closed_form(gp: &GParams) -> f64 {
    -4.0 * gp.rho / ((1.0 + 2.0 * gp.hurst) * (3.0 + 2.0 * gp.hurst))
}

/// `b = phi_y(0,1) / (1 + phi_z(0,1) / 2)` with the partial derivatives taken
/// by fourth-order central differences, cross-checked against the closed
/// form.
pub fn curvature_coeff(gp: &GParams) -> Result<f64> {
    let h = 1e-3;
    let d =
        |f: &dyn Fn(f64) -> f64| (f(-2.0 * h) - 8.0 * f(-h) + 8.0 * f(h) - f(2.0 * h)) / (12.0 * h);
    let phi_y = d(&|e| phi_resolvent(e, 1.0, gp));
    let phi_z = d(&|e| phi_resolvent(0.0, 1.0 + e, gp));
    let b = phi_y / (1.0 + 0.5 * phi_z);
    let closed = curvature_closed_form(gp);
    if (b - closed).abs() > 1e-8 {
        return Err(Error::Invariant(format!(
            "curvature from phi derivatives {b} disagrees with closed form {closed}"
        )));
    }
    Ok(closed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMethod {
    Picard,
    March,
}

impl std::fmt::Display for SolveMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolveMethod::Picard => "picard",
            SolveMethod::March => "march",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverMeta {
    pub method: SolveMethod,
    /// Picard iterations, or accepted Runge-Kutta steps for the march.
    pub iterations: usize,
    pub tol: f64,
    /// Final sup-norm change of g(y)/y (Picard) or 0 (march).
    pub last_gap: f64,
    pub max_residual: f64,
    /// Number of pointwise sandwich inequalities checked (Picard only).
    pub sandwich_checks: usize,
}

/// Tabulated g on a symmetric uniform grid, with g', the ratio
/// `G(y) = g(y)/y` (`G(0) = 1`) and its slope, plus interpolants.
#[derive(Debug, Clone)]
pub struct GSolution {
    pub params: GParams,
    pub ymax: f64,
    pub ys: Vec<f64>,
    pub g: Vec<f64>,
    pub gprime: Vec<f64>,
    pub ratio: Vec<f64>,
    pub curvature: f64,
    pub meta: SolverMeta,
    residuals: Vec<f64>,
    g_interp: CubicHermite,
    ratio_interp: CubicHermite,
}

/// Grid and tolerance settings shared by both solvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub ymax: f64,
    pub n: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { ymax: 8.0, n: 4097 }
    }
}

impl GridSpec {
    fn validate(&self) -> Result<()> {
        if !(self.ymax > 0.0 && self.ymax.is_finite()) {
            return domain(format!("ymax must be positive, got {}", self.ymax));
        }
        if self.n < 13 || self.n % 2 == 0 {
            return domain(format!(
                "grid size must be odd and at least 13, got {}",
                self.n
            ));
        }
        Ok(())
    }

    fn half(&self) -> usize {
        (self.n - 1) / 2
    }

    fn step(&self) -> f64 {
        self.ymax / self.half() as f64
    }

    fn nodes(&self) -> Vec<f64> {
        let m = self.half() as i64;
        let h = self.step();
        (-m..=m).map(|i| i as f64 * h).collect()
    }
}

impl GSolution {
    fn from_values(
        params: GParams,
        grid: GridSpec,
        g: Vec<f64>,
        mut meta: SolverMeta,
    ) -> Result<Self> {
        let ys = grid.nodes();
        let c = grid.half();
        let h = grid.step();
        if g[c] != 0.0 {
            return Err(Error::Invariant(format!("g(0) = {} != 0", g[c])));
        }
        for (i, (&y, &v)) in ys.iter().zip(&g).enumerate() {
            if i != c && !(y * v > 0.0) {
                return Err(Error::Invariant(format!("y g(y) <= 0 at y = {y}")));
            }
        }
        if g.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Invariant("g is not strictly increasing".into()));
        }
        let mut gprime = uniform_derivative(&g, h)?;
        // stencil error shrinks like h^6; allow generous slack on coarse grids
        if (gprime[c] - 1.0).abs() > 1e-7f64.max(h.powi(4)) {
            return Err(Error::Invariant(format!(
                "finite-difference g'(0) = {} deviates from 1",
                gprime[c]
            )));
        }
        gprime[c] = 1.0;
        if gprime.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::Invariant("g' is not positive on the grid".into()));
        }
        let curvature = curvature_coeff(&params)?;
        let ratio: Vec<f64> = ys
            .iter()
            .zip(&g)
            .map(|(&y, &v)| if y == 0.0 { 1.0 } else { v / y })
            .collect();
        let ratio_slope: Vec<f64> = ys
            .iter()
            .zip(ratio.iter().zip(&gprime))
            .map(|(&y, (&r, &d))| {
                if y == 0.0 {
                    0.5 * curvature
                } else {
                    (d - r) / y
                }
            })
            .collect();
        let residuals: Vec<f64> = ys
            .iter()
            .zip(g.iter().zip(&gprime))
            .map(|(&y, (&v, &d))| params.ode_defect(y, v, d).abs())
            .collect();
        meta.max_residual = residuals.iter().cloned().fold(0.0, f64::max);
        let g_interp = CubicHermite::monotone_with_slopes(ys.clone(), g.clone(), gprime.clone())?;
        let ratio_interp = CubicHermite::with_slopes(ys.clone(), ratio.clone(), ratio_slope)?;
        Ok(Self {
            params,
            ymax: grid.ymax,
            ys,
            g,
            gprime,
            ratio,
            curvature,
            meta,
            residuals,
            g_interp,
            ratio_interp,
        })
    }

    /// Pointwise |ODE defect| at each grid node.
    pub fn residuals(&self) -> &[f64] {
        &self.residuals
    }

    /// Fails when the largest grid residual exceeds `limit`.
    pub fn check_residual(&self, limit: f64) -> Result<()> {
        if !(self.meta.max_residual <= limit) {
            return Err(Error::Invariant(format!(
                "max ODE residual {:.3e} exceeds {limit:.3e}",
                self.meta.max_residual
            )));
        }
        Ok(())
    }

    /// Writes `y,g,gprime,residual` rows.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for i in 0..self.ys.len() {
            w.serialize(GRow {
                y: self.ys[i],
                g: self.g[i],
                gprime: self.gprime[i],
                residual: self.residuals[i],
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn grid_step(&self) -> f64 {
        self.ys[1] - self.ys[0]
    }

    fn check_range(&self, y: f64) -> Result<()> {
        if !(y.abs() <= self.ymax) {
            return Err(Error::Range {
                what: "Y",
                value: y,
                limit: self.ymax,
            });
        }
        Ok(())
    }

    /// Finite-difference regularity diagnostics at `|y| = eps`:
    /// `(G(eps) - 1)/eps`, `(g'(eps) - 1)/eps` and the second difference of g,
    /// which should approach b/2, b and b.
    pub fn regularity(&self, eps: f64) -> Result<[f64; 3]> {
        let (gp_plus, dp) = g_eval(self, eps)?;
        let (gp_minus, _) = g_eval(self, -eps)?;
        let ratio_slope = (gp_plus / eps - 1.0) / eps;
        let slope = (dp - 1.0) / eps;
        let second = (gp_plus + gp_minus) / (eps * eps);
        Ok([ratio_slope, slope, second])
    }

    /// Chebyshev representation of the ratio for callers that differentiate
    /// twice through g (the interpolant itself is only C^1).
    pub fn smooth(&self) -> Result<SmoothG> {
        SmoothG::fit(self)
    }
}

#[derive(serde::Serialize)]
struct GRow {
    y: f64,
    g: f64,
    gprime: f64,
    residual: f64,
}

/// Interpolated `(g(y), g'(y))`; no extrapolation beyond the grid.
pub fn g_eval(sol: &GSolution, y: f64) -> Result<(f64, f64)> {
    sol.check_range(y)?;
    sol.g_interp.eval(y).ok_or(Error::Range {
        what: "Y",
        value: y,
        limit: sol.ymax,
    })
}

/// max_i |g'(y_i)^2 q(y_i) - 1 + (1-2H)(1 - y_i g'(y_i)/g(y_i))|.
pub fn ode_residual(ys: &[f64], g: &[f64], gprime: &[f64], gp: &GParams) -> f64 {
    ys.iter()
        .zip(g.iter().zip(gprime))
        .map(|(&y, (&v, &d))| gp.ode_defect(y, v, d).abs())
        .fold(0.0, f64::max)
}

/// Anything that can stand in for g inside the smile formulas.
pub trait GFunction {
    /// `G(y) = g(y) / y` with `G(0) = g'(0) = 1`.
    fn ratio(&self, y: f64) -> Result<f64>;
    /// `(g(y), g'(y))`.
    fn eval(&self, y: f64) -> Result<(f64, f64)>;
    /// Second derivative of g at 0.
    fn curvature(&self) -> f64;
}

/// The closed-form SABR g.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SabrG {
    pub rho: f64,
}

impl SabrG {
    pub fn new(rho: f64) -> Result<Self> {
        check_rho(rho)?;
        Ok(Self { rho })
    }
}

impl GFunction for SabrG {
    fn ratio(&self, y: f64) -> Result<f64> {
        if y.abs() < 1e-8 {
            return Ok(1.0 - 0.5 * self.rho * y);
        }
        Ok(sabr_g(y, self.rho)? / y)
    }

    fn eval(&self, y: f64) -> Result<(f64, f64)> {
        Ok((sabr_g(y, self.rho)?, sabr_g_prime(y, self.rho)?))
    }

    fn curvature(&self) -> f64 {
        -self.rho
    }
}

impl GFunction for GSolution {
    fn ratio(&self, y: f64) -> Result<f64> {
        self.check_range(y)?;
        Ok(self.ratio_interp.eval(y).map(|v| v.0).unwrap_or(f64::NAN))
    }

    fn eval(&self, y: f64) -> Result<(f64, f64)> {
        g_eval(self, y)
    }

    fn curvature(&self) -> f64 {
        self.curvature
    }
}

const SMOOTH_TOL: f64 = 1e-13;
const SMOOTH_SERIES: f64 = 1e-7;

/// Chebyshev fit of `G(y) = g(y)/y` over the solved range. Globally smooth,
/// so second finite differences through it are clean.
#[derive(Debug, Clone)]
pub struct SmoothG {
    ymax: f64,
    curvature: f64,
    series: Chebyshev,
}

impl SmoothG {
    /// Samples g afresh along one tight march through the Chebyshev nodes,
    /// so the fit inherits no interpolation kinks from the grid.
    fn fit(sol: &GSolution) -> Result<Self> {
        let n = 769;
        let nodes = Chebyshev::nodes(-sol.ymax, sol.ymax, n)?;
        let b = sol.curvature;
        let mut samples = vec![0.0; n];
        // nodes decrease, so the positive half runs backwards from the middle
        let pos: Vec<usize> = (0..n)
            .rev()
            .filter(|&j| nodes[j] >= SMOOTH_SERIES)
            .collect();
        let neg: Vec<usize> = (0..n).filter(|&j| nodes[j] <= -SMOOTH_SERIES).collect();
        for idx in [pos, neg] {
            let targets: Vec<f64> = idx.iter().map(|&j| nodes[j]).collect();
            let (values, _) = march_through(&sol.params, &targets, SMOOTH_TOL, 1e-3)?;
            for (&j, v) in idx.iter().zip(values) {
                samples[j] = v / nodes[j];
            }
        }
        for (j, &y) in nodes.iter().enumerate() {
            if y.abs() < SMOOTH_SERIES {
                samples[j] = 1.0 + 0.5 * b * y;
            }
        }
        let series = Chebyshev::from_samples(-sol.ymax, sol.ymax, &samples)?;
        Ok(Self {
            ymax: sol.ymax,
            curvature: b,
            series,
        })
    }

    /// `(G, G', G'')`.
    pub fn ratio_derivs(&self, y: f64) -> Result<(f64, f64, f64)> {
        if !(y.abs() <= self.ymax) {
            return Err(Error::Range {
                what: "Y",
                value: y,
                limit: self.ymax,
            });
        }
        Ok(self.series.eval2(y))
    }
}

impl GFunction for SmoothG {
    fn ratio(&self, y: f64) -> Result<f64> {
        Ok(self.ratio_derivs(y)?.0)
    }

    fn eval(&self, y: f64) -> Result<(f64, f64)> {
        let (r, dr, _) = self.ratio_derivs(y)?;
        Ok((y * r, r + y * dr))
    }

    fn curvature(&self) -> f64 {
        self.curvature
    }
}

/// Cumulative integral from the origin of equally spaced samples
/// `f[j] = f(j * h)` (`h` may be negative): Simpson pairs at even offsets,
/// Simpson 3/8 on the last three panels at odd offsets >= 3, and a
/// five-point rule for the first panel.
fn cumulative_from_origin(f: &[f64], h: f64, out: &mut [f64]) {
    out[0] = 0.0;
    // g(y)/y near the origin inherits the first-panel error divided by h,
    // so this panel needs more order than the rest.
    out[1] = h / 720.0 * (251.0 * f[0] + 646.0 * f[1] - 264.0 * f[2] + 106.0 * f[3] - 19.0 * f[4]);
    for j in 2..f.len() {
        out[j] = if j % 2 == 0 {
            out[j - 2] + h / 3.0 * (f[j - 2] + 4.0 * f[j - 1] + f[j])
        } else {
            out[j - 3] + 3.0 * h / 8.0 * (f[j - 3] + 3.0 * (f[j - 2] + f[j - 1]) + f[j])
        };
    }
}

/// Absolute slack on g(y)/y when checking the sandwich ordering; covers
/// rounding once consecutive iterates agree to machine precision.
const SANDWICH_SLACK: f64 = 1e-12;

/// Picard iteration for the integral form `g = Phi[g]` on a uniform grid.
///
/// The iterates alternate around the fixed point: even iterates of g(y)/y
/// increase, odd ones decrease, and every even one lies below every odd one.
/// That ordering is checked at every grid point and iteration.
pub fn solve_g_picard(gp: GParams, grid: GridSpec, tol: f64, max_iter: usize) -> Result<GSolution> {
    grid.validate()?;
    if !(tol > 0.0) {
        return domain(format!("tolerance must be positive, got {tol}"));
    }
    let m = grid.half();
    let h = grid.step();
    let offsets: Vec<f64> = (0..=m).map(|j| j as f64 * h).collect();

    // Each side of the origin is its own integral from 0; index 0 is y = 0.
    // ratio[s][j] holds g(y)/y at y = sign_s * j * h (the limit g'(0) at j = 0).
    let signs = [1.0, -1.0];
    let mut ratio: [Vec<f64>; 2] = [vec![0.0; m + 1], vec![0.0; m + 1]];
    let mut integrand = vec![0.0; m + 1];
    let mut cum = vec![0.0; m + 1];

    let mut apply = |ratio_in: Option<&[Vec<f64>; 2]>, out: &mut [Vec<f64>; 2]| {
        for (s, &sign) in signs.iter().enumerate() {
            for j in 0..=m {
                let z = match ratio_in {
                    None => 0.0,
                    Some(r) => 1.0 / r[s][j],
                };
                integrand[j] = phi_resolvent(sign * offsets[j], z, &gp);
            }
            cumulative_from_origin(&integrand, sign * h, &mut cum);
            out[s][0] = integrand[0];
            for j in 1..=m {
                out[s][j] = cum[j] / (sign * offsets[j]);
            }
        }
    };

    apply(None, &mut ratio);
    let seed = ratio.clone();
    let mut last_even: Option<[Vec<f64>; 2]> = Some(seed.clone());
    let mut last_odd: Option<[Vec<f64>; 2]> = None;
    let mut next: [Vec<f64>; 2] = [vec![0.0; m + 1], vec![0.0; m + 1]];
    let mut checks = 0usize;
    let mut gap = f64::INFINITY;

    for iter in 1..=max_iter {
        apply(Some(&ratio), &mut next);
        gap = 0.0;
        for s in 0..2 {
            for j in 0..=m {
                let v = next[s][j];
                if !(v > 0.0) {
                    return Err(Error::Invariant(format!(
                        "iterate {iter} has g(y)/y = {v} <= 0 at y = {}",
                        signs[s] * offsets[j]
                    )));
                }
                if v < seed[s][j] - SANDWICH_SLACK {
                    return Err(sandwich_error(
                        iter,
                        signs[s] * offsets[j],
                        "below the seed",
                    ));
                }
                gap = gap.max((v - ratio[s][j]).abs());
            }
        }
        let (same, other) = if iter % 2 == 0 {
            (&last_even, &last_odd)
        } else {
            (&last_odd, &last_even)
        };
        for s in 0..2 {
            for j in 0..=m {
                let v = next[s][j];
                let y = signs[s] * offsets[j];
                if let Some(prev) = same {
                    // even iterates increase, odd iterates decrease
                    let ok = if iter % 2 == 0 {
                        v >= prev[s][j] - SANDWICH_SLACK
                    } else {
                        v <= prev[s][j] + SANDWICH_SLACK
                    };
                    if !ok {
                        return Err(sandwich_error(iter, y, "monotone subsequence broken"));
                    }
                    checks += 1;
                }
                if let Some(o) = other {
                    let ok = if iter % 2 == 0 {
                        v <= o[s][j] + SANDWICH_SLACK
                    } else {
                        v >= o[s][j] - SANDWICH_SLACK
                    };
                    if !ok {
                        return Err(sandwich_error(iter, y, "even iterate above odd iterate"));
                    }
                    checks += 1;
                }
            }
        }
        if iter % 2 == 0 {
            last_even = Some(next.clone());
        } else {
            last_odd = Some(next.clone());
        }
        std::mem::swap(&mut ratio, &mut next);
        if gap <= tol {
            let mut g = vec![0.0; grid.n];
            for j in 1..=m {
                g[m + j] = ratio[0][j] * offsets[j];
                g[m - j] = -ratio[1][j] * offsets[j];
            }
            let meta = SolverMeta {
                method: SolveMethod::Picard,
                iterations: iter,
                tol,
                last_gap: gap,
                max_residual: 0.0,
                sandwich_checks: checks,
            };
            return GSolution::from_values(gp, grid, g, meta);
        }
    }
    Err(Error::NoConvergence {
        what: "Picard iteration for g",
        iterations: max_iter,
        last_gap: gap,
    })
}

fn sandwich_error(iter: usize, y: f64, what: &str) -> Error {
    Error::Invariant(format!(
        "sandwich ordering violated at iterate {iter}, y = {y}: {what}"
    ))
}

/// Dormand-Prince 5(4) coefficients.
const DP_C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const DP_B: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const DP_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Adaptive Runge-Kutta march of `g' = phi(y, y/g)` from the series start
/// `g(y_s) = y_s + b y_s^2 / 2` outward to each end of the grid, landing on
/// every node.
pub fn solve_g_march(gp: GParams, grid: GridSpec, tol: f64) -> Result<GSolution> {
    grid.validate()?;
    if !(tol > 0.0) {
        return domain(format!("tolerance must be positive, got {tol}"));
    }
    let m = grid.half();
    let h = grid.step();
    let mut g = vec![0.0; grid.n];
    let mut accepted = 0usize;
    for sign in [1.0, -1.0] {
        let targets: Vec<f64> = (1..=m).map(|j| sign * j as f64 * h).collect();
        let (values, steps) = march_through(&gp, &targets, tol, (0.1 * h).min(1e-3))?;
        accepted += steps;
        for (j, v) in values.into_iter().enumerate() {
            g[(m as isize + sign as isize * (j as isize + 1)) as usize] = v;
        }
    }
    let meta = SolverMeta {
        method: SolveMethod::March,
        iterations: accepted,
        tol,
        last_gap: 0.0,
        max_residual: 0.0,
        sandwich_checks: 0,
    };
    GSolution::from_values(gp, grid, g, meta)
}

/// Integrates `g' = phi(y, y/g)` away from the origin with adaptive
/// Dormand-Prince steps, landing exactly on each target. Targets share one
/// sign and increase in magnitude. Returns the values and accepted steps.
fn march_through(
    gp: &GParams,
    targets: &[f64],
    tol: f64,
    first_step: f64,
) -> Result<(Vec<f64>, usize)> {
    let Some(&first) = targets.first() else {
        return Ok((Vec::new(), 0));
    };
    let sign = first.signum();
    let b = curvature_coeff(gp)?;
    // Truncation of the two-term series is O(y^3).
    let y_seed = tol.cbrt().min(0.25 * first.abs());
    let rhs = |y: f64, g: f64| -> Result<f64> {
        if !(y * g > 0.0) {
            return Err(Error::Invariant(format!("g crossed zero at y = {y}")));
        }
        Ok(phi_resolvent(y, y / g, gp))
    };
    let step_tol = 0.01 * tol;
    let mut out = Vec::with_capacity(targets.len());
    let mut accepted = 0usize;
    let mut y = sign * y_seed;
    let mut v = y + 0.5 * b * y * y;
    let mut step = sign * first_step;
    for &target in targets {
        while (target - y) * sign > 0.0 {
            let mut dy = step;
            let last = (y + dy - target) * sign >= 0.0;
            if last {
                dy = target - y;
            }
            let mut k = [0.0; 7];
            for s in 0..7 {
                let mut vs = v;
                for (a, kk) in DP_A[s].iter().zip(&k).take(s) {
                    vs += dy * a * kk;
                }
                k[s] = rhs(y + DP_C[s] * dy, vs)?;
            }
            let next: f64 = v + dy * DP_B.iter().zip(&k).map(|(b, kk)| b * kk).sum::<f64>();
            let err = (dy * DP_E.iter().zip(&k).map(|(e, kk)| e * kk).sum::<f64>()).abs();
            let scale = step_tol * (1.0 + next.abs());
            if err <= scale {
                y = if last { target } else { y + dy };
                v = next;
                accepted += 1;
            }
            let factor = if err == 0.0 {
                5.0
            } else {
                (0.9 * (scale / err).powf(0.2)).clamp(0.2, 5.0)
            };
            if !last || err > scale {
                step = dy * factor;
            }
            if step.abs() < 1e-14 {
                return Err(Error::Numeric(format!("step size underflow at y = {y}")));
            }
        }
        out.push(v);
    }
    Ok((out, accepted))
}

/// Sup over the grid of |G_a(y) - G_b(y)| for two solutions on the same grid.
pub fn ratio_distance(a: &GSolution, b: &GSolution) -> Result<f64> {
    if a.ys.len() != b.ys.len() || a.ymax != b.ymax {
        return domain("solutions live on different grids");
    }
    Ok(a.ratio
        .iter()
        .zip(&b.ratio)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sabr_g_reference_values() {
        for rho in [-0.9, -0.3, 0.0, 0.5] {
            assert_eq!(sabr_g(0.0, rho).unwrap(), 0.0);
        }
        assert!((sabr_g(1.0, 0.0).unwrap() - 1f64.asinh()).abs() < 1e-15);
        // 40-digit evaluation of the closed form
        assert!((sabr_g(1.0, -0.3).unwrap() - 0.989_655_874_568_131_3).abs() < 1e-14);
        assert!(sabr_g(0.5, 1.0).is_err());
        assert!(sabr_g(0.5, -1.2).is_err());
    }

    #[test]
    fn sabr_g_branches_agree_and_match_derivative() {
        for rho in [-0.95, -0.3, 0.0, 0.4, 0.95] {
            let mut y = -10.0;
            while y <= 10.0 {
                let v = sabr_g(y, rho).unwrap();
                assert!(y == 0.0 || y * v > 0.0);
                let e = 1e-6 * (1.0 + y.abs());
                let fd = (sabr_g(y + e, rho).unwrap() - sabr_g(y - e, rho).unwrap()) / (2.0 * e);
                assert!(
                    (fd - sabr_g_prime(y, rho).unwrap()).abs() < 1e-8,
                    "rho {rho} y {y}"
                );
                y += 0.173;
            }
        }
    }

    #[test]
    fn phi_resolvent_values() {
        for (rho, h) in [(-0.7, 0.05), (0.0, 0.25), (0.3, 0.5)] {
            let gp = GParams::new(rho, h).unwrap();
            assert!((phi_resolvent(0.0, 1.0, &gp) - 1.0).abs() < 1e-15);
            // defining quadratic
            let (y, z) = (1.3, 0.7);
            let p = phi_resolvent(y, z, &gp);
            let a = 1.0 - 2.0 * h;
            assert!((gp.q(y) * p * p - a * z * p - 2.0 * h).abs() < 1e-14);
        }
        let half = GParams::new(-0.3, 0.5).unwrap();
        assert!((phi_resolvent(0.0, 0.0, &half) - 1.0).abs() < 1e-15);
        // d phi / dz at (0, 1) = (1-2H)/(1+2H)
        let gp = GParams::new(0.2, 0.1).unwrap();
        let e = 1e-5;
        let d = (phi_resolvent(0.0, 1.0 + e, &gp) - phi_resolvent(0.0, 1.0 - e, &gp)) / (2.0 * e);
        assert!((d - 2.0 / 3.0).abs() < 1e-9);
        let mut prev = 0.0;
        for i in 0..100 {
            let v = phi_resolvent(0.4, i as f64 * 0.1, &gp);
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn curvature_values() {
        let b = |rho, h| curvature_coeff(&GParams::new(rho, h).unwrap()).unwrap();
        assert_eq!(b(0.0, 0.3), 0.0);
        assert!((b(-0.3, 0.5) - 0.15).abs() < 1e-15);
        assert!((b(-0.3, 0.1) - 0.3125).abs() < 1e-15);
    }

    #[test]
    fn params_validation() {
        assert!(GParams::new(1.0, 0.1).is_err());
        assert!(GParams::new(-0.9995, 0.1).is_err());
        assert!(GParams::new(0.0, 0.0).is_err());
        assert!(GParams::new(0.0, 0.6).is_err());
        assert!(GParams::new(0.0, 0.5).is_ok());
    }

    #[test]
    fn cumulative_rule_is_exact_for_cubics() {
        let h = 0.1;
        let f: Vec<f64> = (0..12)
            .map(|j| {
                let x = j as f64 * h;
                1.0 + x - 2.0 * x * x + 0.5 * x * x * x
            })
            .collect();
        let mut out = vec![0.0; 12];
        cumulative_from_origin(&f, h, &mut out);
        for (j, v) in out.iter().enumerate() {
            let x = j as f64 * h;
            let exact = x + 0.5 * x * x - 2.0 / 3.0 * x * x * x + 0.125 * x.powi(4);
            assert!((v - exact).abs() < 1e-14, "offset {j}");
        }
    }

    fn small_grid() -> GridSpec {
        GridSpec { ymax: 4.0, n: 1025 }
    }

    #[test]
    fn picard_at_half_is_the_rescaled_sabr_g() {
        let gp = GParams::new(-0.4, 0.5).unwrap();
        let sol = solve_g_picard(gp, small_grid(), 1e-11, 100).unwrap();
        // at H = 1/2 the seed already solves the ODE
        assert!(sol.meta.iterations <= 2);
        for (y, v) in sol.ys.iter().zip(&sol.g) {
            let exact = 2.0 * sabr_g(y / 2.0, -0.4).unwrap();
            assert!((v - exact).abs() < 1e-9, "y {y}: {v} vs {exact}");
        }
        let worst = sol
            .residuals()
            .iter()
            .cloned()
            .enumerate()
            .fold((0, 0.0), |a, b| if b.1 > a.1 { b } else { a });
        assert!(
            sol.meta.max_residual < 1e-8,
            "residual {:?} at y {}",
            worst,
            sol.ys[worst.0]
        );
    }

    #[test]
    fn picard_and_march_agree() {
        let gp = GParams::new(-0.3, 0.1).unwrap();
        let grid = GridSpec { ymax: 5.0, n: 2049 };
        let p = solve_g_picard(gp, grid, 1e-11, 5000).unwrap();
        let m = solve_g_march(gp, grid, 1e-11).unwrap();
        let d = ratio_distance(&p, &m).unwrap();
        assert!(d < 1e-6, "distance {d}");
        assert!(p.meta.sandwich_checks > 0);
        let (g0, d0) = g_eval(&p, 0.0).unwrap();
        assert_eq!((g0, d0), (0.0, 1.0));
    }

    #[test]
    fn residual_exact_solution_and_perturbation() {
        let gp = GParams::new(0.35, 0.5).unwrap();
        let ys: Vec<f64> = (-40..=40).map(|i| i as f64 * 0.1).collect();
        let g: Vec<f64> = ys
            .iter()
            .map(|y| 2.0 * sabr_g(y / 2.0, 0.35).unwrap())
            .collect();
        let d: Vec<f64> = ys
            .iter()
            .map(|y| sabr_g_prime(y / 2.0, 0.35).unwrap())
            .collect();
        assert!(ode_residual(&ys, &g, &d, &gp) < 1e-12);
        let perturbed = |eps: f64| {
            let gg: Vec<f64> = ys.iter().zip(&g).map(|(y, v)| v + eps * y * y).collect();
            let dd: Vec<f64> = ys.iter().zip(&d).map(|(y, v)| v + 2.0 * eps * y).collect();
            ode_residual(&ys, &gg, &dd, &gp)
        };
        let r1 = perturbed(1e-6);
        let r2 = perturbed(2e-6);
        assert!(r1 > 1e-7);
        assert!((r2 / r1 - 2.0).abs() < 1e-3);
    }

    #[test]
    fn csv_dump_has_fixed_header() {
        let gp = GParams::new(-0.3, 0.1).unwrap();
        let sol = solve_g_march(gp, GridSpec { ymax: 2.0, n: 41 }, 1e-9).unwrap();
        let mut buf = Vec::new();
        sol.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("y,g,gprime,residual"));
        assert_eq!(lines.count(), 41);
    }

    #[test]
    fn g_eval_out_of_range() {
        let gp = GParams::new(0.0, 0.25).unwrap();
        let sol = solve_g_picard(gp, small_grid(), 1e-10, 2000).unwrap();
        assert!(matches!(g_eval(&sol, 4.5), Err(Error::Range { .. })));
        let node = 37;
        let (v, d) = g_eval(&sol, sol.ys[node]).unwrap();
        assert_eq!(v, sol.g[node]);
        assert_eq!(d, sol.gprime[node]);
    }
}
