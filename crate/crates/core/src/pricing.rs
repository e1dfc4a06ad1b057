//! Black-Scholes and Bachelier call prices, Gaussian helpers and implied
//! volatility inversion.
//!
//! Rates and dividends are zero throughout. Time to expiry is always passed
//! explicitly as `tau`; nothing here does date arithmetic.

use libm::erfc;

use crate::error::{domain, Error, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const MAX_INVERSION_ITER: usize = 300;

/// One option quote location: spot, strike, maturity and valuation time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarketPoint {
    pub spot: f64,
    pub strike: f64,
    pub maturity: f64,
    pub time: f64,
}

impl MarketPoint {
    pub fn new(spot: f64, strike: f64, maturity: f64, time: f64) -> Result<Self> {
        if !(spot > 0.0 && spot.is_finite()) {
            return domain(format!("spot must be positive, got {spot}"));
        }
        if !(strike > 0.0 && strike.is_finite()) {
            return domain(format!("strike must be positive, got {strike}"));
        }
        if !(maturity > 0.0 && maturity.is_finite()) {
            return domain(format!("maturity must be positive, got {maturity}"));
        }
        if !(time >= 0.0 && time < maturity) {
            return domain(format!("valuation time {time} must lie in [0, {maturity})"));
        }
        Ok(Self {
            spot,
            strike,
            maturity,
            time,
        })
    }

    /// Quote at `t = 0` with maturity `tau`.
    pub fn spot_start(spot: f64, strike: f64, tau: f64) -> Result<Self> {
        Self::new(spot, strike, tau, 0.0)
    }

    pub fn tau(&self) -> f64 {
        self.maturity - self.time
    }

    /// `k = log(K/S)`.
    pub fn log_moneyness(&self) -> f64 {
        (self.strike / self.spot).ln()
    }

    /// `x = K - S`.
    pub fn normal_moneyness(&self) -> f64 {
        self.strike - self.spot
    }

    pub fn intrinsic(&self) -> f64 {
        (self.spot - self.strike).max(0.0)
    }

    pub fn with_strike(&self, strike: f64) -> Result<Self> {
        Self::new(self.spot, strike, self.maturity, self.time)
    }
}

/// Implied volatilities of one quote; either flavor may be missing.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VolQuote {
    pub lognormal: Option<f64>,
    pub normal: Option<f64>,
}

impl VolQuote {
    pub fn new(lognormal: Option<f64>, normal: Option<f64>) -> Result<Self> {
        for v in [lognormal, normal].into_iter().flatten() {
            if !(v > 0.0 && v.is_finite()) {
                return domain(format!(
                    "implied volatility must be positive and finite, got {v}"
                ));
            }
        }
        Ok(Self { lognormal, normal })
    }
}

pub fn norm_pdf(u: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * u * u).exp()
}

pub fn norm_cdf(u: f64) -> f64 {
    0.5 * erfc(-u / std::f64::consts::SQRT_2)
}

fn check_vol(p: &MarketPoint, sigma: f64, what: &str) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return domain(format!("{what} must be positive, got {sigma}"));
    }
    if !(p.tau() > 0.0) {
        return domain(format!("time to expiry must be positive, got {}", p.tau()));
    }
    Ok(())
}

/// Time value `P - max(S-K, 0)` of a Black-Scholes call with total
/// volatility `w = sigma * sqrt(tau)`. In the money the put side is used so
/// the small quantity is never formed by cancellation against intrinsic.
fn bs_time_value(spot: f64, strike: f64, w: f64) -> f64 {
    if w <= 0.0 {
        return 0.0;
    }
    let k = (strike / spot).ln();
    let d_plus = -k / w + 0.5 * w;
    let d_minus = d_plus - w;
    let tv = if strike < spot {
        strike * norm_cdf(-d_minus) - spot * norm_cdf(-d_plus)
    } else {
        spot * norm_cdf(d_plus) - strike * norm_cdf(d_minus)
    };
    tv.max(0.0)
}

fn bs_vega_w(spot: f64, strike: f64, w: f64) -> f64 {
    let k = (strike / spot).ln();
    let d_plus = -k / w + 0.5 * w;
    spot * norm_pdf(d_plus)
}

pub fn bs_call_price(p: &MarketPoint, sigma: f64) -> Result<f64> {
    check_vol(p, sigma, "volatility")?;
    let w = sigma * p.tau().sqrt();
    let price = p.intrinsic() + bs_time_value(p.spot, p.strike, w);
    debug_assert!(price >= p.intrinsic() && price <= p.spot);
    Ok(price.min(p.spot))
}

/// dP/dsigma.
pub fn bs_vega(p: &MarketPoint, sigma: f64) -> Result<f64> {
    check_vol(p, sigma, "volatility")?;
    let sqrt_tau = p.tau().sqrt();
    Ok(bs_vega_w(p.spot, p.strike, sigma * sqrt_tau) * sqrt_tau)
}

fn bachelier_time_value(x: f64, w: f64) -> f64 {
    if w <= 0.0 {
        return 0.0;
    }
    let d = x.abs() / w;
    (w * norm_pdf(d) - x.abs() * norm_cdf(-d)).max(0.0)
}

pub fn bachelier_call_price(p: &MarketPoint, sigma_n: f64) -> Result<f64> {
    check_vol(p, sigma_n, "normal volatility")?;
    let w = sigma_n * p.tau().sqrt();
    Ok(p.intrinsic() + bachelier_time_value(p.spot - p.strike, w))
}

pub fn bachelier_vega(p: &MarketPoint, sigma_n: f64) -> Result<f64> {
    check_vol(p, sigma_n, "normal volatility")?;
    let sqrt_tau = p.tau().sqrt();
    let d = (p.spot - p.strike) / (sigma_n * sqrt_tau);
    Ok(sqrt_tau * norm_pdf(d))
}

/// Time-value model used by the shared inversion loop.
trait TimeValue {
    fn time_value(&self, w: f64) -> f64;
    fn vega_w(&self, w: f64) -> f64;
}

struct BsTv {
    spot: f64,
    strike: f64,
}

impl TimeValue for BsTv {
    fn time_value(&self, w: f64) -> f64 {
        bs_time_value(self.spot, self.strike, w)
    }
    fn vega_w(&self, w: f64) -> f64 {
        bs_vega_w(self.spot, self.strike, w)
    }
}

struct BachelierTv {
    x: f64,
}

impl TimeValue for BachelierTv {
    fn time_value(&self, w: f64) -> f64 {
        bachelier_time_value(self.x, w)
    }
    fn vega_w(&self, w: f64) -> f64 {
        norm_pdf(self.x / w)
    }
}

/// Solves `tv(w) = target` for total volatility `w`.
///
/// Bracket from a log-spaced scan, then Newton on `log tv` (which is close to
/// linear in `w` far out of the money) safeguarded by bisection.
fn invert_total_vol(model: &impl TimeValue, target: f64, w_ceiling: f64) -> Result<f64> {
    let mut w = 1e-3;
    let (mut lo, mut hi);
    if model.time_value(w) >= target {
        hi = w;
        loop {
            w *= 0.1;
            if w < 1e-300 {
                return Err(Error::Numeric(format!(
                    "no volatility bracket found for time value {target:e}"
                )));
            }
            if model.time_value(w) < target {
                lo = w;
                break;
            }
            hi = w;
        }
    } else {
        lo = w;
        loop {
            w *= 10f64.sqrt();
            if w > w_ceiling {
                return Err(Error::Numeric(format!(
                    "no volatility bracket found below {w_ceiling:e} for time value {target:e}"
                )));
            }
            if model.time_value(w) >= target {
                hi = w;
                break;
            }
            lo = w;
        }
    }

    let ln_target = target.ln();
    let mut w = (lo * hi).sqrt();
    let mut last_gap = f64::INFINITY;
    for _ in 0..MAX_INVERSION_ITER {
        let tv = model.time_value(w);
        if tv == target {
            return Ok(w);
        }
        if tv < target {
            lo = w;
        } else {
            hi = w;
        }
        last_gap = (hi - lo) / w;
        if last_gap <= 4.0 * f64::EPSILON {
            return Ok(w);
        }
        let vega = model.vega_w(w);
        let mut next = f64::NAN;
        if tv > 0.0 && vega > 0.0 {
            next = w - (tv.ln() - ln_target) * tv / vega;
        }
        if !(next > lo && next < hi) {
            next = if hi / lo > 4.0 {
                (lo * hi).sqrt()
            } else {
                0.5 * (lo + hi)
            };
        }
        if ((next - w) / w).abs() <= f64::EPSILON {
            return Ok(next);
        }
        w = next;
    }
    Err(Error::NoConvergence {
        what: "implied volatility",
        iterations: MAX_INVERSION_ITER,
        last_gap,
    })
}

/// Black-Scholes implied volatility of a call price.
pub fn implied_vol_bs(price: f64, p: &MarketPoint) -> Result<f64> {
    let lower = p.intrinsic();
    let upper = p.spot;
    if !(price > lower && price < upper) {
        return Err(Error::ArbitrageBound {
            price,
            lower,
            upper,
        });
    }
    if !(p.tau() > 0.0) {
        return domain("time to expiry must be positive");
    }
    let model = BsTv {
        spot: p.spot,
        strike: p.strike,
    };
    let w = invert_total_vol(&model, price - lower, 1e3)?;
    let sigma = w / p.tau().sqrt();
    let reprice = bs_call_price(p, sigma)?;
    if (reprice - price).abs() > 1e-12 * p.spot {
        return Err(Error::Numeric(format!(
            "implied vol {sigma} reprices to {reprice}, target {price}"
        )));
    }
    Ok(sigma)
}

/// Bachelier (normal) implied volatility of a call price.
pub fn implied_vol_bachelier(price: f64, p: &MarketPoint) -> Result<f64> {
    let lower = p.intrinsic();
    if !(price > lower && price.is_finite()) {
        return Err(Error::ArbitrageBound {
            price,
            lower,
            upper: f64::INFINITY,
        });
    }
    if !(p.tau() > 0.0) {
        return domain("time to expiry must be positive");
    }
    let model = BachelierTv {
        x: p.spot - p.strike,
    };
    // The loop works in units of the spot so the scan range is scale free.
    let scale = p.spot;
    let scaled = ScaledTv {
        inner: &model,
        scale,
    };
    let w = invert_total_vol(&scaled, (price - lower) / scale, 1e12)? * scale;
    let sigma = w / p.tau().sqrt();
    let reprice = bachelier_call_price(p, sigma)?;
    if (reprice - price).abs() > 1e-12 * p.spot {
        return Err(Error::Numeric(format!(
            "normal implied vol {sigma} reprices to {reprice}, target {price}"
        )));
    }
    Ok(sigma)
}

struct ScaledTv<'a, M> {
    inner: &'a M,
    scale: f64,
}

impl<M: TimeValue> TimeValue for ScaledTv<'_, M> {
    fn time_value(&self, w: f64) -> f64 {
        self.inner.time_value(w * self.scale) / self.scale
    }
    fn vega_w(&self, w: f64) -> f64 {
        self.inner.vega_w(w * self.scale)
    }
}
