//! Adaptive Gauss–Kronrod quadrature and log-space integration of
//! sharply peaked exponentials.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadratureConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_subdivisions: usize,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-11,
            abs_tol: 0.0,
            max_subdivisions: 2000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadResult {
    pub value: f64,
    pub error: f64,
}

// 15-point Kronrod nodes (non-negative half) and weights, with the embedded
// 7-point Gauss weights on the odd-indexed nodes.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// One G7/K15 panel: returns (kronrod estimate, |kronrod - gauss|).
pub fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = fc * WGK[7];
    let mut g = fc * WG[3];
    for j in 0..7 {
        let dx = h * XGK[j];
        let s = f(c - dx) + f(c + dx);
        k += WGK[j] * s;
        if j % 2 == 1 {
            g += WG[j / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

/// Globally adaptive integration of `f` over the finite interval `[a, b]`.
pub fn integrate<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    cfg: &QuadratureConfig,
) -> Result<QuadResult> {
    if a == b {
        return Ok(QuadResult {
            value: 0.0,
            error: 0.0,
        });
    }
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::Domain(format!(
            "integration bounds must be finite: [{a}, {b}]"
        )));
    }
    let (v, e) = gk15(&f, a, b);
    // (a, b, value, error)
    let mut panels = vec![(a, b, v, e)];
    let mut total = v;
    let mut total_err = e;
    loop {
        let tol = cfg.abs_tol.max(cfg.rel_tol * total.abs());
        if total_err <= tol || !total_err.is_finite() {
            break;
        }
        if panels.len() >= cfg.max_subdivisions {
            return Err(Error::Quadrature {
                achieved: total_err,
                requested: tol,
            });
        }
        let (idx, _) = panels
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .expect("non-empty panel list");
        let (pa, pb, pv, pe) = panels.swap_remove(idx);
        let mid = 0.5 * (pa + pb);
        if mid <= pa || mid >= pb {
            // panel cannot be split further in floating point
            return Err(Error::Quadrature {
                achieved: total_err,
                requested: tol,
            });
        }
        let (v1, e1) = gk15(&f, pa, mid);
        let (v2, e2) = gk15(&f, mid, pb);
        total += v1 + v2 - pv;
        total_err += e1 + e2 - pe;
        panels.push((pa, mid, v1, e1));
        panels.push((mid, pb, v2, e2));
    }
    if !total.is_finite() {
        return Err(Error::Quadrature {
            achieved: f64::INFINITY,
            requested: cfg.rel_tol,
        });
    }
    // re-sum to shed accumulated rounding from the running updates
    let value = panels.iter().map(|p| p.2).sum();
    let error = panels.iter().map(|p| p.3).sum();
    Ok(QuadResult { value, error })
}

/// Drop below the peak (in log units) at which the integrand is truncated.
const LOG_CUTOFF: f64 = 60.0;

/// Computes `log ∫_a^b exp(g(x)) dx` for a unimodal log-integrand `g`.
///
/// Bounds may be infinite. `hint` is any point of `[a, b]` near the mode and
/// `scale` a typical width; both only affect speed, not the result.
pub fn log_integral_exp<G: Fn(f64) -> f64>(
    g: G,
    a: f64,
    b: f64,
    hint: f64,
    scale: f64,
    cfg: &QuadratureConfig,
) -> Result<f64> {
    if !(a < b) {
        return Err(Error::Domain(format!("empty integration range [{a}, {b}]")));
    }
    let scale = if scale.is_finite() && scale > 0.0 {
        scale
    } else {
        1.0
    };
    let mode = find_mode(&g, a, b, hint.clamp(a, b), scale);
    let gmax = g(mode);
    if !gmax.is_finite() {
        if gmax == f64::NEG_INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        return Err(Error::Domain(
            "log-integrand is not finite at its mode".into(),
        ));
    }
    let lo = expand_to_cutoff(&g, mode, a, -scale, gmax);
    let hi = expand_to_cutoff(&g, mode, b, scale, gmax);
    let f = |x: f64| {
        let v = g(x) - gmax;
        if v.is_nan() {
            0.0
        } else {
            v.exp()
        }
    };
    // split at the mode so the peak sits on a panel boundary
    // rounding in g(x) - gmax limits the attainable relative accuracy
    let local = QuadratureConfig {
        rel_tol: cfg.rel_tol.max(64.0 * f64::EPSILON * gmax.abs()),
        ..*cfg
    };
    let mut sum = 0.0;
    let mut err = 0.0;
    for (p, q) in [(lo, mode), (mode, hi)] {
        if q > p {
            let r = integrate(f, p, q, &local)?;
            sum += r.value;
            err += r.error;
        }
    }
    if sum <= 0.0 {
        return Err(Error::Quadrature {
            achieved: err,
            requested: cfg.rel_tol,
        });
    }
    Ok(gmax + sum.ln())
}

fn expand_to_cutoff<G: Fn(f64) -> f64>(g: &G, from: f64, limit: f64, step0: f64, gmax: f64) -> f64 {
    let mut step = step0;
    let mut x = from;
    for _ in 0..2000 {
        let next = x + step;
        let beyond = if step > 0.0 {
            next >= limit
        } else {
            next <= limit
        };
        if beyond {
            return limit;
        }
        x = next;
        let v = g(x);
        if !(v > gmax - LOG_CUTOFF) {
            return x;
        }
        step *= 1.5;
    }
    x
}

/// Golden-section search for the maximiser of a unimodal function, after
/// bracketing outward from `hint`.
fn find_mode<G: Fn(f64) -> f64>(g: &G, a: f64, b: f64, hint: f64, scale: f64) -> f64 {
    let val = |x: f64| {
        let v = g(x);
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    };
    // bracket: walk uphill from the hint
    let mut x0 = hint;
    let mut f0 = val(x0);
    let mut dir = 0.0;
    for s in [scale, -scale] {
        let x1 = (x0 + s).clamp(a, b);
        if x1 != x0 && val(x1) > f0 {
            dir = s.signum();
            break;
        }
    }
    let (mut lo, mut hi);
    if dir == 0.0 {
        lo = (x0 - scale).max(a);
        hi = (x0 + scale).min(b);
    } else {
        let mut step = scale;
        loop {
            let x1 = (x0 + dir * step).clamp(a, b);
            let f1 = val(x1);
            if f1 <= f0 || x1 == x0 {
                let prev = x0 - dir * step / 1.5;
                let (p, q) = if dir > 0.0 { (prev, x1) } else { (x1, prev) };
                lo = p.max(a);
                hi = q.min(b);
                break;
            }
            x0 = x1;
            f0 = f1;
            step *= 1.5;
            if !step.is_finite() {
                lo = a;
                hi = b;
                break;
            }
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        return hint;
    }
    let inv_phi = 0.618_033_988_749_894_8;
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let mut fc = val(c);
    let mut fd = val(d);
    for _ in 0..200 {
        if (hi - lo).abs() <= 1e-12 * (1.0 + c.abs()) {
            break;
        }
        if fc > fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = val(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = val(d);
        }
    }
    let m = 0.5 * (lo + hi);
    if val(hint) > val(m) {
        hint
    } else {
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_is_exact() {
        let r = integrate(
            |x| x * x * x - 2.0 * x,
            0.0,
            3.0,
            &QuadratureConfig::default(),
        )
        .unwrap();
        assert!((r.value - (81.0 / 4.0 - 9.0)).abs() < 1e-12);
    }

    #[test]
    fn oscillatory_integral() {
        let cfg = QuadratureConfig {
            abs_tol: 1e-13,
            ..Default::default()
        };
        let r = integrate(|x| (10.0 * x).sin(), 0.0, std::f64::consts::PI, &cfg).unwrap();
        assert!(r.value.abs() < 1e-12);
    }

    #[test]
    fn sqrt_singularity() {
        let cfg = QuadratureConfig {
            rel_tol: 1e-9,
            ..Default::default()
        };
        let r = integrate(|x: f64| 1.0 / x.sqrt().max(1e-300), 0.0, 1.0, &cfg).unwrap();
        assert!((r.value - 2.0).abs() < 1e-6);
    }

    #[test]
    fn gaussian_in_log_space() {
        // log ∫ exp(-(x-500)^2) dx over the real line = log sqrt(pi)
        let v = log_integral_exp(
            |x| -(x - 500.0) * (x - 500.0),
            f64::NEG_INFINITY,
            f64::INFINITY,
            0.0,
            1.0,
            &QuadratureConfig::default(),
        )
        .unwrap();
        assert!((v - std::f64::consts::PI.sqrt().ln()).abs() < 1e-10);
    }

    #[test]
    fn huge_exponent_half_line() {
        // log ∫_0^∞ exp(1000 - x) dx = 1000
        let v = log_integral_exp(
            |x| 1000.0 - x,
            0.0,
            f64::INFINITY,
            3.0,
            1.0,
            &QuadratureConfig::default(),
        )
        .unwrap();
        assert!((v - 1000.0).abs() < 1e-10);
    }

    #[test]
    fn mode_at_upper_bound() {
        // log ∫_{-∞}^{2} e^{x} dx = 2
        let v = log_integral_exp(
            |x| x,
            f64::NEG_INFINITY,
            2.0,
            -10.0,
            1.0,
            &QuadratureConfig::default(),
        )
        .unwrap();
        assert!((v - 2.0).abs() < 1e-10);
    }
}
