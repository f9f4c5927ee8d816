//! Closed-form surrogate for the law of a block eigenvalue.
//!
//! With the error terms set to zero, the principal eigenvalue of a block of
//! `n` sites is modelled as `μ = max{ξ(x)} - χ` over `n` i.i.d. sites, so
//! `P(μ > h) = 1 - (1 - e^{-φ(h+χ)})^n`. For `κ = 0` and `χ = 0` this is the
//! exact law of the block maximum.

use crate::error::{Error, Result};
use crate::potential::PotentialSpec;
use crate::quadrature::{log_integral_exp, QuadratureConfig};
use crate::scalings::h_of_t;

/// `log(1 - (1-p)^n)` given `log p` and `log n`, accurate when `p` underflows.
pub fn log_max_tail(log_p: f64, log_n: f64) -> f64 {
    if log_p >= 0.0 {
        return 0.0;
    }
    if log_p == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    // z = -n log(1-p)
    let log_z = if log_p < -20.0 {
        let p = log_p.exp();
        log_n + log_p + (0.5 * p).ln_1p()
    } else {
        log_n + (-(-log_p.exp()).ln_1p()).ln()
    };
    if log_z < -18.0 {
        let z = log_z.exp();
        log_z - 0.5 * z
    } else {
        let z = log_z.exp();
        if z > 40.0 {
            -(-z).exp()
        } else {
            (-(-z).exp_m1()).ln()
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockLaw<'a> {
    pub spec: &'a PotentialSpec,
    pub chi: f64,
    /// `log n`, the log of the number of sites per block.
    pub log_sites: f64,
}

impl<'a> BlockLaw<'a> {
    pub fn new(spec: &'a PotentialSpec, chi: f64, log_sites: f64) -> Self {
        Self {
            spec,
            chi,
            log_sites,
        }
    }

    /// Lower end of the support of μ.
    pub fn lower_end(&self) -> f64 {
        -self.chi
    }

    /// `log P(μ > level)` under the exact maximum law.
    pub fn log_tail(&self, level: f64) -> f64 {
        log_max_tail(self.spec.log_tail(level + self.chi), self.log_sites)
    }

    /// `log(n e^{-φ(level + χ)})`, the first-order surrogate.
    pub fn log_tail_linear(&self, level: f64) -> f64 {
        self.log_sites + self.spec.log_tail(level + self.chi)
    }

    /// `log E[e^{pY} 1{y_lo < Y ≤ y_hi}]` for `Y = tμ - log_b`.
    ///
    /// Uses `∫_{(a,b]} e^{py} dF = e^{pa}G(a) - e^{pb}G(b) + p∫_a^b e^{py}G(y) dy`
    /// with `G` the tail of `Y`; when `a` reaches the lower end of the support
    /// the left limit `G = 1` is used so the atom there is included.
    pub fn log_partial_moment(
        &self,
        t: f64,
        log_b: f64,
        p: f64,
        y_lo: f64,
        y_hi: f64,
        quad: &QuadratureConfig,
    ) -> Result<f64> {
        if !(t > 0.0 && p > 0.0) {
            return Err(Error::Domain("partial moments need t > 0 and p > 0".into()));
        }
        let y0 = t * self.lower_end() - log_b;
        let log_g = |y: f64| self.log_tail((log_b + y) / t);
        let (a, log_ga) = if y_lo <= y0 {
            (y0, 0.0)
        } else {
            (y_lo, log_g(y_lo))
        };
        let b = y_hi;
        if !(b > a) {
            return Ok(f64::NEG_INFINITY);
        }
        let first = p * a + log_ga;
        let second = if b.is_finite() {
            p * b + log_g(b)
        } else {
            f64::NEG_INFINITY
        };

        let level_hint = h_of_t(self.spec, p * t).unwrap_or(0.0) - self.chi;
        let y_hint = (t * level_hint - log_b).clamp(a, if b.is_finite() { b } else { f64::MAX });
        let width = {
            let s = self.spec.phi_second((level_hint + self.chi).max(1e-6));
            (t / s.sqrt()).clamp(1e-3, 1e3)
        };
        let integral = log_integral_exp(|y| p * y + log_g(y), a, b, y_hint, width, quad)?;
        let third = p.ln() + integral;

        let m = first.max(third);
        let val = (first - m).exp() + (third - m).exp() - (second - m).exp();
        if !(val > 0.0) {
            return Err(Error::Quadrature {
                achieved: val.abs(),
                requested: quad.rel_tol,
            });
        }
        Ok(m + val.ln())
    }
}
