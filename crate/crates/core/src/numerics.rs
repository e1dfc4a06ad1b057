//! Small numerical building blocks shared by the model modules: order-stable
//! summation and robust statistics, least squares, adaptive Simpson
//! quadrature, monotone cubic Hermite interpolation and Chebyshev series.

use crate::error::{domain, Error, Result};

/// Pairwise (cascade) summation. The association order depends only on the
/// slice length, so a fixed input order gives bit-identical sums.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if xs.len() <= BLOCK {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Sample mean and standard error of the mean (sample std / sqrt(n)).
pub fn mean_stderr(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.is_empty() {
        return domain("mean of an empty sample");
    }
    let n = xs.len() as f64;
    let mean = pairwise_sum(xs) / n;
    if xs.len() == 1 {
        return Ok((mean, 0.0));
    }
    let sq: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&sq) / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

/// Linear-interpolated quantile (type 7) of an unsorted sample.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    quantile_sorted(&v, q)
}

pub fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Median and interquartile range.
pub fn median_iqr(xs: &[f64]) -> (f64, f64) {
    let mut v: Vec<f64> = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    (
        quantile_sorted(&v, 0.5),
        quantile_sorted(&v, 0.75) - quantile_sorted(&v, 0.25),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
}

/// Ordinary least squares `y = intercept + slope * x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    if x.len() != y.len() {
        return domain("fit inputs differ in length");
    }
    if x.len() < 3 {
        return domain(format!("fit needs at least 3 points, got {}", x.len()));
    }
    let n = x.len() as f64;
    let mx = pairwise_sum(x) / n;
    let my = pairwise_sum(y) / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx <= 0.0 {
        return domain("degenerate fit: all abscissae equal");
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let e = b - intercept - slope * a;
            e * e
        })
        .sum();
    let slope_stderr = (sse / (n - 2.0) / sxx).sqrt();
    Ok(LinearFit {
        slope,
        intercept,
        slope_stderr,
    })
}

/// Adaptive Simpson quadrature with the usual Richardson-corrected panel
/// acceptance test.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, abs_tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    let v = simpson_step(
        &f,
        a,
        b,
        fa,
        fm,
        fb,
        whole,
        abs_tol.max(f64::MIN_POSITIVE),
        48,
    )?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("non-finite integral on [{a}, {b}]")));
    }
    Ok(v)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> Result<f64> {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if delta.abs() <= 15.0 * tol || (m - a).abs() <= 4.0 * f64::EPSILON * m.abs() {
        return Ok(left + right + delta / 15.0);
    }
    if depth == 0 {
        return Err(Error::NoConvergence {
            what: "adaptive Simpson",
            iterations: 48,
            last_gap: delta.abs(),
        });
    }
    Ok(
        simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)?
            + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)?,
    )
}

/// Piecewise cubic Hermite interpolant. The `monotone*` constructors apply
/// Fritsch-Carlson slope limiting so monotone data give a monotone
/// interpolant. Node values are reproduced exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct CubicHermite {
    xs: Vec<f64>,
    ys: Vec<f64>,
    ds: Vec<f64>,
}

impl CubicHermite {
    /// Monotone interpolant through `(xs, ys)` with centred-difference slopes.
    pub fn monotone(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        check_nodes(&xs, ys.len())?;
        let n = xs.len();
        let secant: Vec<f64> = (0..n - 1)
            .map(|i| (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i]))
            .collect();
        let mut ds = vec![0.0; n];
        ds[0] = secant[0];
        ds[n - 1] = secant[n - 2];
        for i in 1..n - 1 {
            ds[i] = if secant[i - 1] * secant[i] <= 0.0 {
                0.0
            } else {
                let h0 = xs[i] - xs[i - 1];
                let h1 = xs[i + 1] - xs[i];
                (h1 * secant[i - 1] + h0 * secant[i]) / (h0 + h1)
            };
        }
        Self::monotone_with_slopes(xs, ys, ds)
    }

    /// Plain Hermite interpolant with caller-supplied slopes.
    pub fn with_slopes(xs: Vec<f64>, ys: Vec<f64>, ds: Vec<f64>) -> Result<Self> {
        check_nodes(&xs, ys.len())?;
        if ds.len() != xs.len() {
            return domain("slope count differs from node count");
        }
        Ok(Self { xs, ys, ds })
    }

    /// Caller-supplied slopes, limited only where they would break
    /// monotonicity.
    pub fn monotone_with_slopes(xs: Vec<f64>, ys: Vec<f64>, mut ds: Vec<f64>) -> Result<Self> {
        check_nodes(&xs, ys.len())?;
        if ds.len() != xs.len() {
            return domain("slope count differs from node count");
        }
        for i in 0..xs.len() - 1 {
            let secant = (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i]);
            if secant == 0.0 {
                continue;
            }
            let a = ds[i] / secant;
            let b = ds[i + 1] / secant;
            if a < 0.0 {
                ds[i] = 0.0;
            }
            if b < 0.0 {
                ds[i + 1] = 0.0;
            }
            let r2 = a * a + b * b;
            if r2 > 9.0 {
                let t = 3.0 / r2.sqrt();
                ds[i] = t * a * secant;
                ds[i + 1] = t * b * secant;
            }
        }
        Ok(Self { xs, ys, ds })
    }

    pub fn x_min(&self) -> f64 {
        self.xs[0]
    }

    pub fn x_max(&self) -> f64 {
        self.xs[self.xs.len() - 1]
    }

    pub fn nodes(&self) -> (&[f64], &[f64], &[f64]) {
        (&self.xs, &self.ys, &self.ds)
    }

    fn interval(&self, x: f64) -> usize {
        match self.xs.binary_search_by(|v| v.total_cmp(&x)) {
            Ok(i) => i.min(self.xs.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.xs.len() - 2),
        }
    }

    /// Value and first derivative; `None` outside the node range.
    pub fn eval(&self, x: f64) -> Option<(f64, f64)> {
        if !(x >= self.x_min() && x <= self.x_max()) {
            return None;
        }
        let i = self.interval(x);
        if x == self.xs[i] {
            return Some((self.ys[i], self.ds[i]));
        }
        if x == self.xs[i + 1] {
            return Some((self.ys[i + 1], self.ds[i + 1]));
        }
        let h = self.xs[i + 1] - self.xs[i];
        let t = (x - self.xs[i]) / h;
        let (y0, y1) = (self.ys[i], self.ys[i + 1]);
        let (m0, m1) = (self.ds[i] * h, self.ds[i + 1] * h);
        let t2 = t * t;
        let t3 = t2 * t;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        let y = h00 * y0 + h10 * m0 + h01 * y1 + h11 * m1;
        let dh00 = 6.0 * t2 - 6.0 * t;
        let dh10 = 3.0 * t2 - 4.0 * t + 1.0;
        let dh01 = -dh00;
        let dh11 = 3.0 * t2 - 2.0 * t;
        let dy = (dh00 * y0 + dh10 * m0 + dh01 * y1 + dh11 * m1) / h;
        Some((y, dy))
    }
}

fn check_nodes(xs: &[f64], n_values: usize) -> Result<()> {
    if xs.len() < 2 {
        return domain("interpolation needs at least two nodes");
    }
    if xs.len() != n_values {
        return domain("value count differs from node count");
    }
    if xs.windows(2).any(|w| !(w[1] > w[0])) {
        return domain("interpolation nodes must be strictly increasing");
    }
    Ok(())
}

/// Finite-difference weights for the `order`-th derivative at `x0` from
/// values at `nodes` (Fornberg's recursion).
pub fn fd_weights(x0: f64, nodes: &[f64], order: usize) -> Vec<f64> {
    let n = nodes.len();
    let mut c = vec![vec![0.0; order + 1]; n];
    c[0][0] = 1.0;
    let mut c1 = 1.0;
    let mut c4 = nodes[0] - x0;
    for i in 1..n {
        let mn = i.min(order);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = nodes[i] - x0;
        for j in 0..i {
            let c3 = nodes[i] - nodes[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[i][k] = c1 * (k as f64 * c[i - 1][k - 1] - c5 * c[i - 1][k]) / c2;
                }
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            for k in (1..=mn).rev() {
                c[j][k] = (c4 * c[j][k] - k as f64 * c[j][k - 1]) / c3;
            }
            c[j][0] = c4 * c[j][0] / c3;
        }
        c1 = c2;
    }
    c.into_iter().map(|row| row[order]).collect()
}

/// First derivative of uniformly spaced samples with a 7-point stencil
/// (sixth order), shifted one-sided near the ends.
pub fn uniform_derivative(ys: &[f64], h: f64) -> Result<Vec<f64>> {
    const W: usize = 7;
    let n = ys.len();
    if n < W {
        return domain(format!("derivative stencil needs {W} samples, got {n}"));
    }
    let mut cache: Vec<Option<Vec<f64>>> = vec![None; W];
    let mut out = vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate() {
        let start = i.saturating_sub(W / 2).min(n - W);
        let offset = i - start;
        let w = cache[offset].get_or_insert_with(|| {
            let nodes: Vec<f64> = (0..W).map(|j| j as f64).collect();
            fd_weights(offset as f64, &nodes, 1)
        });
        *o = w
            .iter()
            .zip(&ys[start..start + W])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / h;
    }
    Ok(out)
}

/// Chebyshev series on `[lo, hi]` with first and second derivative series,
/// evaluated by Clenshaw recurrence. A global polynomial, so its
/// derivatives are smooth everywhere in the interval.
#[derive(Debug, Clone, PartialEq)]
pub struct Chebyshev {
    lo: f64,
    hi: f64,
    c: Vec<f64>,
    dc: Vec<f64>,
    d2c: Vec<f64>,
}

impl Chebyshev {
    /// Interpolates `f` at `n` Chebyshev points of the first kind and drops
    /// trailing coefficients below `1e-16` of the largest.
    pub fn fit<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, n: usize) -> Result<Self> {
        let samples: Vec<f64> = Self::nodes(lo, hi, n)?.into_iter().map(f).collect();
        Self::from_samples(lo, hi, &samples)
    }

    /// The `n` Chebyshev points of the first kind on `[lo, hi]`, in
    /// decreasing order.
    pub fn nodes(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
        if !(hi > lo) || n < 2 {
            return domain("Chebyshev fit needs hi > lo and n >= 2");
        }
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        Ok((0..n)
            .map(|j| {
                let theta = std::f64::consts::PI * (j as f64 + 0.5) / n as f64;
                mid + half * theta.cos()
            })
            .collect())
    }

    /// Interpolant through values taken at [`Chebyshev::nodes`].
    pub fn from_samples(lo: f64, hi: f64, samples: &[f64]) -> Result<Self> {
        let n = samples.len();
        if !(hi > lo) || n < 2 {
            return domain("Chebyshev fit needs hi > lo and n >= 2");
        }
        let half = 0.5 * (hi - lo);
        let nf = n as f64;
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite sample in Chebyshev fit".into()));
        }
        let mut c: Vec<f64> = (0..n)
            .map(|k| {
                let s: f64 = samples
                    .iter()
                    .enumerate()
                    .map(|(j, v)| {
                        v * (std::f64::consts::PI * k as f64 * (j as f64 + 0.5) / nf).cos()
                    })
                    .sum();
                2.0 * s / nf
            })
            .collect();
        c[0] *= 0.5;
        let cmax = c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        while c.len() > 2 && c[c.len() - 1].abs() < 1e-16 * cmax {
            c.pop();
        }
        let dc = derivative_coeffs(&c, half);
        let d2c = derivative_coeffs(&dc, half);
        Ok(Self { lo, hi, c, dc, d2c })
    }

    pub fn degree(&self) -> usize {
        self.c.len() - 1
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    fn t(&self, x: f64) -> f64 {
        (2.0 * x - self.lo - self.hi) / (self.hi - self.lo)
    }

    pub fn value(&self, x: f64) -> f64 {
        clenshaw(&self.c, self.t(x))
    }

    /// Value, first and second derivative.
    pub fn eval2(&self, x: f64) -> (f64, f64, f64) {
        let t = self.t(x);
        (
            clenshaw(&self.c, t),
            clenshaw(&self.dc, t),
            clenshaw(&self.d2c, t),
        )
    }
}

/// Coefficients (c_0 already halved) of the derivative series.
fn derivative_coeffs(c: &[f64], half_width: f64) -> Vec<f64> {
    let n = c.len();
    if n < 2 {
        return vec![0.0];
    }
    // Work with the unhalved convention for the recurrence.
    let mut full = c.to_vec();
    full[0] *= 2.0;
    let mut d = vec![0.0; n + 1];
    for k in (1..n).rev() {
        d[k - 1] = d[k + 1] + 2.0 * k as f64 * full[k];
    }
    d.truncate(n - 1);
    d[0] *= 0.5;
    for v in d.iter_mut() {
        *v /= half_width;
    }
    d
}

fn clenshaw(c: &[f64], t: f64) -> f64 {
    let mut b1 = 0.0;
    let mut b2 = 0.0;
    for &ck in c.iter().skip(1).rev() {
        let b0 = 2.0 * t * b1 - b2 + ck;
        b2 = b1;
        b1 = b0;
    }
    t * b1 - b2 + c[0]
}
