//! The totally skewed α-stable laws `F_α` with Lévy spectral function
//! `x^{-α}` and no Gaussian part.
//!
//! For `u > 0` the characteristic function is `exp(-a u^α + i θ(u))` with
//! `a = Γ(1-α) cos(πα/2)` and `θ(u) = Γ(1-α) sin(πα/2) u^α` when `α ≠ 1`.
//! For `α = 1` it is `exp(iu(1-γ) - (π/2)|u|(1 + (2/π) i sign(u) log|u|))`,
//! `γ` Euler's constant: the Lévy–Khintchine exponent of `x^{-2}dx` with
//! truncation at 1.

use std::sync::{Arc, OnceLock};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma, ln_gamma};

use crate::error::{Error, Result};
use crate::quadrature::{integrate, QuadratureConfig};
use crate::rng::RngStream;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
const PI: f64 = std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionConfig {
    /// Target absolute error of the inverted CDF or density.
    pub abs_tol: f64,
    /// The integral is truncated where `|cf(u)|` drops below this.
    pub cf_cutoff: f64,
    /// Bypass the tail series and the cached table.
    pub force_inversion: bool,
    pub table_nodes: usize,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            abs_tol: 1e-10,
            cf_cutoff: 1e-12,
            force_inversion: false,
            table_nodes: 1024,
        }
    }
}

/// Cubic Hermite table of `F` and `f` on nodes uniform in `asinh x`.
#[derive(Debug)]
struct Table {
    v: Vec<f64>,
    cdf: Vec<f64>,
    /// `dF/dv = f(x) cosh v`.
    slope: Vec<f64>,
}

impl Table {
    fn eval(&self, x: f64) -> Option<(f64, f64)> {
        let v = x.asinh();
        let (lo, hi) = (self.v[0], *self.v.last()?);
        if !(v >= lo && v <= hi) {
            return None;
        }
        let h = self.v[1] - self.v[0];
        let i = (((v - lo) / h).floor() as usize).min(self.v.len() - 2);
        let s = (v - self.v[i]) / h;
        let (p0, p1, m0, m1) = (
            self.cdf[i],
            self.cdf[i + 1],
            self.slope[i] * h,
            self.slope[i + 1] * h,
        );
        let s2 = s * s;
        let s3 = s2 * s;
        let f = (2.0 * s3 - 3.0 * s2 + 1.0) * p0
            + (s3 - 2.0 * s2 + s) * m0
            + (-2.0 * s3 + 3.0 * s2) * p1
            + (s3 - s2) * m1;
        let df = ((6.0 * s2 - 6.0 * s) * p0
            + (3.0 * s2 - 4.0 * s + 1.0) * m0
            + (-6.0 * s2 + 6.0 * s) * p1
            + (3.0 * s2 - 2.0 * s) * m1)
            / h;
        Some((f.clamp(0.0, 1.0), (df / v.cosh()).max(0.0)))
    }
}

/// `F_α`, optionally translated by `shift_a`.
#[derive(Clone, Debug)]
pub struct StableLaw {
    pub alpha: f64,
    /// Gaussian variance; always zero for these laws.
    pub sigma2: f64,
    /// Location `a` from the drift condition; the law is that of `X + a`.
    pub shift_a: f64,
    table: Arc<OnceLock<Option<Table>>>,
}

impl StableLaw {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 2.0) {
            return Err(Error::Config(format!(
                "stable index must lie in (0,2), got {alpha}"
            )));
        }
        Ok(Self {
            alpha,
            sigma2: 0.0,
            shift_a: 0.0,
            table: Arc::new(OnceLock::new()),
        })
    }

    pub fn with_shift(mut self, a: f64) -> Self {
        self.shift_a = a;
        self
    }

    /// `L̃(x) = x^{-α}` on `(0, ∞)`.
    pub fn levy_spectral(&self, x: f64) -> f64 {
        if x > 0.0 {
            x.powf(-self.alpha)
        } else {
            f64::INFINITY
        }
    }

    fn is_one(&self) -> bool {
        self.alpha == 1.0
    }

    /// `Γ(1-α)`; the tail-series constant.
    fn c(&self) -> f64 {
        gamma(1.0 - self.alpha)
    }

    /// Decay rate `a` in `|cf(u)| = exp(-a|u|^α)`.
    pub fn modulus_rate(&self) -> f64 {
        if self.is_one() {
            PI / 2.0
        } else {
            self.c() * (PI * self.alpha / 2.0).cos()
        }
    }

    /// Phase `θ(u)` of the unshifted law for `u > 0`.
    fn phase(&self, u: f64) -> f64 {
        if self.is_one() {
            u * (1.0 - EULER_GAMMA) - u * u.ln()
        } else {
            self.c() * (PI * self.alpha / 2.0).sin() * u.powf(self.alpha)
        }
    }

    /// `|dθ/du|` at `u`, used to size oscillation panels.
    fn phase_rate(&self, u: f64) -> f64 {
        if self.is_one() {
            (1.0 - EULER_GAMMA - u.ln() - 1.0).abs()
        } else {
            (self.c() * (PI * self.alpha / 2.0).sin() * self.alpha * u.powf(self.alpha - 1.0)).abs()
        }
    }

    pub fn cf(&self, u: f64) -> Complex64 {
        if u == 0.0 {
            return Complex64::new(1.0, 0.0);
        }
        let au = u.abs();
        let log = Complex64::new(-self.modulus_rate() * au.powf(self.alpha), self.phase(au));
        let base = if u > 0.0 { log.exp() } else { log.conj().exp() };
        base * Complex64::new(0.0, u * self.shift_a).exp()
    }

    /// Point beyond which `|cf| < cutoff`.
    fn truncation(&self, cutoff: f64) -> f64 {
        (-cutoff.ln() / self.modulus_rate()).powf(1.0 / self.alpha)
    }

    /// `∫₀^U g(u) du` for `g(u) = e^{-a u^α} k(θ(u) - ux)`, by a power
    /// substitution near zero and panels of about half an oscillation beyond.
    fn oscillatory<K: Fn(f64) -> f64>(
        &self,
        x: f64,
        kernel: K,
        divide_by_u: bool,
        cfg: &InversionConfig,
    ) -> Result<(f64, f64)> {
        let a = self.modulus_rate();
        let upper = self.truncation(cfg.cf_cutoff);
        let g = |u: f64| {
            if u <= 0.0 {
                return 0.0;
            }
            let v = (-a * u.powf(self.alpha)).exp() * kernel(self.phase(u) - u * x);
            if divide_by_u {
                v / u
            } else {
                v
            }
        };
        let freq = x.abs()
            + self
                .phase_rate(upper)
                .max(self.phase_rate(PI / (x.abs() + 1.0)));
        let width = PI / freq.max(1.0);
        let u1 = width.min(upper);
        let panels = ((upper - u1) / width).ceil() as usize;
        let per_panel = cfg.abs_tol / (panels as f64 + 1.0);
        let qcfg = QuadratureConfig {
            rel_tol: 1e-14,
            abs_tol: per_panel,
            max_subdivisions: 400,
        };
        let q = (1.0 / self.alpha).max(2.0);
        let head = integrate(
            |s: f64| g(u1 * s.powf(q)) * q * u1 * s.powf(q - 1.0),
            0.0,
            1.0,
            &qcfg,
        )?;
        let (mut value, mut err) = (head.value, head.error);
        for k in 0..panels {
            let lo = u1 + k as f64 * width;
            let hi = (lo + width).min(upper);
            let r = integrate(g, lo, hi, &qcfg)?;
            value += r.value;
            err += r.error;
        }
        Ok((value, err))
    }

    /// Gil-Pelaez inversion `F(x) = 1/2 - (1/π)∫₀^∞ Im(e^{-iux}cf(u))/u du`
    /// for the unshifted law.
    fn invert_cdf(&self, x: f64, cfg: &InversionConfig) -> Result<f64> {
        let (v, e) = self.oscillatory(x, f64::sin, true, cfg)?;
        if e / PI > cfg.abs_tol {
            return Err(Error::Quadrature {
                achieved: e / PI,
                requested: cfg.abs_tol,
            });
        }
        Ok((0.5 - v / PI).clamp(0.0, 1.0))
    }

    /// `f(x) = (1/π)∫₀^∞ Re(e^{-iux}cf(u)) du` for the unshifted law.
    fn invert_density(&self, x: f64, cfg: &InversionConfig) -> Result<f64> {
        let (v, e) = self.oscillatory(x, f64::cos, false, cfg)?;
        if e / PI > cfg.abs_tol {
            return Err(Error::Quadrature {
                achieved: e / PI,
                requested: cfg.abs_tol,
            });
        }
        Ok((v / PI).max(0.0))
    }

    /// Tail expansion `1 - F(x) = (1/π) Σ (-1)^{k+1} Γ(kα)/k! sin(kπα) c^k x^{-kα}`
    /// and its derivative; `None` unless the terms fall below `tol`.
    fn tail_series(&self, x: f64, tol: f64) -> Option<(f64, f64)> {
        if self.is_one() || x <= 0.0 {
            return None;
        }
        let alpha = self.alpha;
        let c = self.c();
        let lx = x.ln();
        let (mut tail, mut dens) = (0.0, 0.0);
        let mut prev = f64::INFINITY;
        for k in 1..200 {
            let kf = k as f64;
            let log_mag =
                ln_gamma(kf * alpha) - ln_gamma(kf + 1.0) + kf * c.abs().ln() - kf * alpha * lx;
            let mag = log_mag.exp();
            if mag > prev && k > 2 {
                // asymptotic series started to diverge
                return None;
            }
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 }
                * if c < 0.0 && k % 2 == 1 { -1.0 } else { 1.0 };
            let s = (kf * PI * alpha).sin();
            let term = sign * s * mag / PI;
            tail += term;
            dens += term * kf * alpha / x;
            if mag < tol * 1e-3 {
                return Some((tail, dens));
            }
            prev = mag;
        }
        None
    }

    /// Left end below which `F` is negligible and right end beyond which the
    /// tail series (or, for `α = 1`, the first-order tail) is used.
    fn table_range(&self, cfg: &InversionConfig) -> (f64, f64) {
        let right = if self.is_one() {
            1e3
        } else {
            let mut x = 1.0;
            while self.tail_series(x, cfg.abs_tol).is_none() && x < 1e8 {
                x *= 1.25;
            }
            x
        };
        let left = if self.alpha < 1.0 {
            // F(x) ≈ 0 well before the bulk; search downward on a log grid
            let mut x = 1.0;
            while x > 1e-6 {
                match self.invert_cdf(x, cfg) {
                    Ok(f) if f < 1e-9 => break,
                    _ => x *= 0.8,
                }
            }
            x
        } else {
            let mut x = -1.0;
            while x > -1e3 {
                match self.invert_cdf(x, cfg) {
                    Ok(f) if f < 1e-9 => break,
                    _ => x *= 1.25,
                }
            }
            x
        };
        (left, right)
    }

    fn build_table(&self) -> Option<Table> {
        let cfg = InversionConfig::default();
        let (left, right) = self.table_range(&cfg);
        let (v0, v1) = (left.asinh(), right.asinh());
        let n = cfg.table_nodes.max(16);
        let v: Vec<f64> = (0..n)
            .map(|i| v0 + (v1 - v0) * i as f64 / (n - 1) as f64)
            .collect();
        let nodes: Vec<Result<(f64, f64)>> = v
            .par_iter()
            .map(|&vi| {
                let x = vi.sinh();
                Ok((
                    self.invert_cdf(x, &cfg)?,
                    self.invert_density(x, &cfg)? * vi.cosh(),
                ))
            })
            .collect();
        let mut cdf = Vec::with_capacity(n);
        let mut slope = Vec::with_capacity(n);
        for r in nodes {
            let (f, s) = r.ok()?;
            cdf.push(f);
            slope.push(s);
        }
        Some(Table { v, cdf, slope })
    }

    fn table(&self) -> Option<&Table> {
        self.table.get_or_init(|| self.build_table()).as_ref()
    }

    /// `(F(x), f(x))` of the unshifted law.
    fn cdf_density(&self, x: f64, cfg: &InversionConfig) -> Result<(f64, f64)> {
        if self.alpha < 1.0 && x <= 0.0 {
            return Ok((0.0, 0.0));
        }
        if cfg.force_inversion {
            return Ok((self.invert_cdf(x, cfg)?, self.invert_density(x, cfg)?));
        }
        if let Some((tail, dens)) = self.tail_series(x, cfg.abs_tol) {
            return Ok(((1.0 - tail).clamp(0.0, 1.0), dens.max(0.0)));
        }
        if let Some(table) = self.table() {
            if let Some(r) = table.eval(x) {
                return Ok(r);
            }
            if x > 0.0 && self.is_one() && x > table.v.last().unwrap().sinh() {
                return Ok((1.0 - 1.0 / x, 1.0 / (x * x)));
            }
            if x < table.v[0].sinh() {
                return Ok((0.0, 0.0));
            }
        }
        Ok((self.invert_cdf(x, cfg)?, self.invert_density(x, cfg)?))
    }

    pub fn cdf(&self, x: f64, cfg: &InversionConfig) -> Result<f64> {
        if x == f64::INFINITY {
            return Ok(1.0);
        }
        if x == f64::NEG_INFINITY {
            return Ok(0.0);
        }
        Ok(self.cdf_density(x - self.shift_a, cfg)?.0)
    }

    pub fn density(&self, x: f64, cfg: &InversionConfig) -> Result<f64> {
        if !x.is_finite() {
            return Ok(0.0);
        }
        Ok(self.cdf_density(x - self.shift_a, cfg)?.1)
    }

    /// One draw by the Chambers–Mallows–Stuck transform with skewness 1
    /// and scale `σ^α = Γ(1-α)cos(πα/2)` (`σ = π/2`, location `1-γ` for α = 1).
    pub fn sample(&self, rng: &mut RngStream) -> f64 {
        let v = PI * (rng.open01() - 0.5);
        let w = rng.exp1();
        let alpha = self.alpha;
        let x = if self.is_one() {
            let sigma = PI / 2.0;
            let h = PI / 2.0 + v;
            let z = (2.0 / PI) * (h * v.tan() - ((PI / 2.0) * w * v.cos() / h).ln());
            sigma * z + (2.0 / PI) * sigma * sigma.ln() + (1.0 - EULER_GAMMA)
        } else {
            let sigma = self.modulus_rate().powf(1.0 / alpha);
            let t = (PI * alpha / 2.0).tan();
            let b = t.atan() / alpha;
            let s = (1.0 + t * t).powf(1.0 / (2.0 * alpha));
            let z = s * (alpha * (v + b)).sin() / v.cos().powf(1.0 / alpha)
                * ((v - alpha * (v + b)).cos() / w).powf((1.0 - alpha) / alpha);
            sigma * z
        };
        let x = if alpha < 1.0 { x.max(0.0) } else { x };
        x + self.shift_a
    }

    /// Maps a sum of `n` i.i.d. draws of the unshifted law back onto it.
    pub fn normalize_sum(&self, sum: f64, n: usize) -> f64 {
        let nf = n as f64;
        if self.is_one() {
            sum / nf - nf.ln()
        } else {
            sum / nf.powf(1.0 / self.alpha)
        }
    }

    /// KS distance of `samples` to this law.
    pub fn ks(&self, samples: &[f64]) -> Result<f64> {
        let cfg = InversionConfig::default();
        let mut err = None;
        let d = ks_statistic(samples, |x| {
            self.cdf(x, &cfg).unwrap_or_else(|e| {
                err.get_or_insert(e);
                f64::NAN
            })
        })?;
        match err {
            Some(e) => Err(e),
            None => Ok(d),
        }
    }
}

/// `sup_x |F_n(x) - F(x)|` for the empirical CDF of `samples`.
pub fn ks_statistic<F: FnMut(f64) -> f64>(samples: &[f64], mut cdf: F) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Domain(
            "KS statistic needs at least one sample".into(),
        ));
    }
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i + 1) as f64 / n - f).max(f - i as f64 / n);
    }
    Ok(d)
}

/// The 95% KS acceptance band `1.36/√n`.
pub fn ks_band(n: usize) -> f64 {
    1.36 / (n as f64).sqrt()
}

/// Hill estimate of the tail index from the top `k` order statistics:
/// `1 / mean(log(X_(i) / X_(k+1)))`.
pub fn hill_estimator(samples: &[f64], k: usize) -> Result<f64> {
    let n = samples.len();
    if !(k >= 1 && k < n) {
        return Err(Error::Domain(format!(
            "Hill estimator needs 1 <= k < n, got k = {k}, n = {n}"
        )));
    }
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| b.total_cmp(a));
    let threshold = xs[k];
    if !(threshold > 0.0) {
        return Err(Error::Domain(
            "Hill estimator needs a positive threshold order statistic".into(),
        ));
    }
    let mean = xs[..k].iter().map(|x| (x / threshold).ln()).sum::<f64>() / k as f64;
    Ok(1.0 / mean)
}

/// Power-law fit of a Lévy spectral function and the stability verdict.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PetrovVerdict {
    pub exponent: f64,
    pub constant: f64,
    pub sigma2: f64,
    pub stable: bool,
}

/// Fits `L̃(x) = c x^{-e}` by least squares in log-log coordinates. The limit
/// is labelled stable only if `σ² = 0` (within `sigma2_tol`) and `|e - α| ≤ 0.1`.
pub fn petrov_verdict(
    points: &[(f64, f64)],
    sigma2: f64,
    alpha: f64,
    sigma2_tol: f64,
) -> Result<PetrovVerdict> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, l)| *x > 0.0 && *l > 0.0)
        .map(|(x, l)| (x.ln(), l.ln()))
        .collect();
    if pts.len() < 2 {
        return Err(Error::Domain(
            "power-law fit needs two positive points".into(),
        ));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain(
            "power-law fit needs two distinct abscissae".into(),
        ));
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let exponent = -slope;
    let constant = (my - slope * mx).exp();
    Ok(PetrovVerdict {
        exponent,
        constant,
        sigma2,
        stable: sigma2.abs() <= sigma2_tol && (exponent - alpha).abs() <= 0.1,
    })
}
