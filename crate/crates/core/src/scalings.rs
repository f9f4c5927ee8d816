//! Time- and index-dependent scales: the Legendre point `h_t`, box volumes
//! `L_α(t)`, normalisers `B_α(t)`, block radius `l(t)`, centerings and
//! annealed moments.
//!
//! Conventions:
//! * `L_α(t) = exp(φ(h_{αt}))` is the site count of the large box.
//! * `log B_α(t) = t (h_{αt} - χ)`, the unspecified `o(1)` set to zero.
//! * `h̃_{αt} = h_{αt} + χ`.
//! * `l(t) = max(t² log² t, H(4t))` is a radius, `|Q_l| = (2⌊l⌋+1)^d`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::potential::{Family, PotentialSpec};
use crate::quadrature::{log_integral_exp, QuadratureConfig};
use crate::surrogate::BlockLaw;

/// Maximiser of `s·h - φ(h)` over `h ≥ 0` by safeguarded Newton on `φ'(h) = s`.
pub fn h_of_t(spec: &PotentialSpec, s: f64) -> Result<f64> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::Domain(format!("h_of_t needs s > 0, got {s}")));
    }
    let g = |h: f64| spec.phi_prime(h) - s;
    if g(0.0) >= 0.0 {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut expansions = 0;
    while g(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
        expansions += 1;
        if expansions > 1100 || !hi.is_finite() {
            return Err(Error::NoConvergence {
                iterations: expansions,
                residual: g(lo),
            });
        }
    }
    let mut h = 0.5 * (lo + hi);
    for iter in 0..300 {
        let r = g(h);
        if r == 0.0 {
            return Ok(h);
        }
        if r < 0.0 {
            lo = h;
        } else {
            hi = h;
        }
        let d = spec.phi_second(h);
        let newton = h - r / d;
        let next = if d > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        let converged = (next - h).abs() <= 4.0 * f64::EPSILON * h.max(1e-300)
            || hi - lo <= 4.0 * f64::EPSILON * hi;
        h = next;
        if converged {
            verify_maximum(spec, s, h)?;
            return Ok(h);
        }
        if iter == 299 {
            return Err(Error::NoConvergence {
                iterations: 300,
                residual: g(h),
            });
        }
    }
    unreachable!()
}

fn verify_maximum(spec: &PotentialSpec, s: f64, h: f64) -> Result<()> {
    let obj = |x: f64| s * x - spec.phi_unchecked(x);
    let delta = 1e-4 * h.max(1e-3);
    let center = obj(h);
    let slack = 1e-12 * center.abs().max(1.0);
    if obj(h + delta) > center + slack || (h > delta && obj(h - delta) > center + slack) {
        return Err(Error::NoConvergence {
            iterations: 0,
            residual: obj(h + delta) - center,
        });
    }
    Ok(())
}

/// How χ is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ChiPolicy {
    Explicit(f64),
    /// `χ(0) = 0`, `χ(∞) = 2dκ`, and `χ = 0` whenever `κ = 0`.
    Endpoint,
}

impl ChiPolicy {
    pub fn resolve(&self, spec: &PotentialSpec, kappa: f64, d: usize) -> Result<f64> {
        let upper = 2.0 * d as f64 * kappa;
        match *self {
            ChiPolicy::Explicit(chi) => {
                if !(chi >= 0.0 && chi <= upper) {
                    return Err(Error::Config(format!(
                        "chi must lie in [0, 2dκ] = [0, {upper}], got {chi}"
                    )));
                }
                Ok(chi)
            }
            ChiPolicy::Endpoint => {
                let rho = spec.rho_assumption;
                if kappa == 0.0 || rho == 0.0 {
                    Ok(0.0)
                } else if rho.is_infinite() {
                    Ok(upper)
                } else {
                    Err(Error::Config(format!(
                        "chi for intermediate rho = {rho} must be supplied explicitly"
                    )))
                }
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScalingBundle {
    pub family: String,
    pub alpha: f64,
    pub t: f64,
    pub kappa: f64,
    pub d: usize,
    pub chi: f64,
    pub h_alpha_t: f64,
    pub log_l_alpha: f64,
    pub log_b_alpha: f64,
    pub l_t: f64,
    pub log_block_sites: f64,
    pub h_tilde_alpha_t: f64,
    /// `log A(t)`; `None` when `A(t) = 0`.
    pub log_centering_a: Option<f64>,
    /// `log Ã(t)` for block sums; `None` when `Ã(t) = 0`.
    pub log_block_centering_a_tilde: Option<f64>,
}

/// Regime of the stable index, which selects the centering.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlphaRegime {
    Below1,
    One,
    Above1,
}

impl AlphaRegime {
    pub fn of(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 2.0) {
            return Err(Error::Config(format!(
                "alpha must lie in (0,2), got {alpha}"
            )));
        }
        Ok(if alpha < 1.0 {
            AlphaRegime::Below1
        } else if alpha == 1.0 {
            AlphaRegime::One
        } else {
            AlphaRegime::Above1
        })
    }
}

/// `l(t) = max(t² log² t, H(4t))`.
pub fn block_radius(spec: &PotentialSpec, t: f64, quad: &QuadratureConfig) -> Result<f64> {
    let lt = t.ln();
    Ok((t * t * lt * lt).max(spec.cumulant(4.0 * t, quad)?))
}

/// `log |Q_r| = d log(2⌊r⌋ + 1)`.
pub fn log_box_sites(radius: f64, d: usize) -> f64 {
    d as f64 * (2.0 * radius.floor() + 1.0).ln()
}

pub fn make_bundle(
    spec: &PotentialSpec,
    alpha: f64,
    t: f64,
    kappa: f64,
    d: usize,
    chi_policy: ChiPolicy,
    quad: &QuadratureConfig,
) -> Result<ScalingBundle> {
    let regime = AlphaRegime::of(alpha)?;
    if !(t > 0.0) {
        return Err(Error::Config(format!("t must be positive, got {t}")));
    }
    if !(kappa >= 0.0) || d == 0 {
        return Err(Error::Config("kappa must be >= 0 and d >= 1".into()));
    }
    let chi = chi_policy.resolve(spec, kappa, d)?;
    if kappa == 0.0 && chi != 0.0 {
        return Err(Error::Config("chi must be 0 when kappa = 0".into()));
    }
    let h = h_of_t(spec, alpha * t)?;
    let log_l = spec.phi(h)?;
    let log_b = t * (h - chi);
    let l_t = block_radius(spec, t, quad)?;
    let log_block_sites = log_box_sites(l_t, d);

    let method = if kappa == 0.0 {
        MomentMethod::ExactQuadrature
    } else {
        MomentMethod::LaplaceIntegral
    };
    let log_a = match regime {
        AlphaRegime::Below1 => None,
        AlphaRegime::Above1 => Some(annealed_moment(spec, 1.0, t, kappa, chi, method, quad)?),
        AlphaRegime::One => Some(truncated_annealed_mean(spec, t, kappa, chi, log_b, quad)?),
    };
    let law = BlockLaw::new(spec, chi, log_block_sites);
    let log_a_tilde = match regime {
        AlphaRegime::Below1 => None,
        AlphaRegime::Above1 => {
            Some(law.log_partial_moment(t, 0.0, 1.0, f64::NEG_INFINITY, f64::INFINITY, quad)?)
        }
        AlphaRegime::One => {
            Some(law.log_partial_moment(t, 0.0, 1.0, f64::NEG_INFINITY, log_b, quad)?)
        }
    };
    Ok(ScalingBundle {
        family: spec.label(),
        alpha,
        t,
        kappa,
        d,
        chi,
        h_alpha_t: h,
        log_l_alpha: log_l,
        log_b_alpha: log_b,
        l_t,
        log_block_sites,
        h_tilde_alpha_t: h + chi,
        log_centering_a: log_a,
        log_block_centering_a_tilde: log_a_tilde,
    })
}

/// `log⟨u(t,0) 1{u(t,0) ≤ B}⟩`: exact for κ = 0, Laplace surrogate otherwise.
fn truncated_annealed_mean(
    spec: &PotentialSpec,
    t: f64,
    kappa: f64,
    chi: f64,
    log_b: f64,
    quad: &QuadratureConfig,
) -> Result<f64> {
    if kappa == 0.0 {
        spec.log_truncated_exp_moment(t, log_b / t, quad)
    } else {
        laplace_integral(spec, t, chi, log_b / t, quad)
    }
}

/// Closed-form table values `(log L_α(t), log B_α(t))` for built-in families.
///
/// The `log B` column carries the table's `-2dκαt` (Weibull) and
/// `-χαt` (double-exponential) terms, which differ from the `-χt` of the
/// definitional convention used in [`make_bundle`].
pub fn table_row(
    spec: &PotentialSpec,
    alpha: f64,
    t: f64,
    kappa: f64,
    d: usize,
    chi_policy: ChiPolicy,
) -> Result<(f64, f64)> {
    AlphaRegime::of(alpha)?;
    match spec.family {
        Family::Weibull { gamma } => {
            let base = alpha * t / gamma;
            let log_l = base.powf(gamma / (gamma - 1.0));
            let log_b = t * base.powf(1.0 / (gamma - 1.0)) - 2.0 * d as f64 * kappa * alpha * t;
            Ok((log_l, log_b))
        }
        Family::DoubleExponential { rho } => {
            let chi = chi_policy.resolve(spec, kappa, d)?;
            let log_l = rho * alpha * t;
            let log_b = t * rho * (rho * alpha * t).ln() - chi * alpha * t;
            Ok((log_l, log_b))
        }
        Family::Custom(_) => Err(Error::Config(
            "table rows exist only for built-in families".into(),
        )),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentMethod {
    /// `H(pt) - ptχ`.
    Gm98Asymptotic,
    /// `log(pt ∫_0^∞ exp(pth - φ(h+χ)) dh)`.
    LaplaceIntegral,
    /// `H(pt)`, exact for κ = 0.
    ExactQuadrature,
}

/// Estimate of `log⟨u(t,0)^p⟩`.
pub fn annealed_moment(
    spec: &PotentialSpec,
    p: f64,
    t: f64,
    kappa: f64,
    chi: f64,
    method: MomentMethod,
    quad: &QuadratureConfig,
) -> Result<f64> {
    if !(p > 0.0) {
        return Err(Error::Domain(format!(
            "moment order must be positive, got {p}"
        )));
    }
    match method {
        MomentMethod::Gm98Asymptotic => Ok(spec.cumulant(p * t, quad)? - p * t * chi),
        MomentMethod::LaplaceIntegral => laplace_integral(spec, p * t, chi, f64::INFINITY, quad),
        MomentMethod::ExactQuadrature => {
            if kappa != 0.0 {
                return Err(Error::Config(
                    "exact quadrature of moments requires kappa = 0".into(),
                ));
            }
            spec.cumulant(p * t, quad)
        }
    }
}

/// `log(s ∫_0^upper exp(s h - φ(h + χ)) dh)`.
fn laplace_integral(
    spec: &PotentialSpec,
    s: f64,
    chi: f64,
    upper: f64,
    quad: &QuadratureConfig,
) -> Result<f64> {
    if !(upper > 0.0) {
        return Ok(f64::NEG_INFINITY);
    }
    let peak = (h_of_t(spec, s)? - chi).max(0.0).min(upper);
    let width = (1.0 / spec.phi_second((peak + chi).max(1e-6)))
        .sqrt()
        .clamp(1e-6, 1e6);
    let v = log_integral_exp(
        |h| s * h - spec.phi_unchecked(h + chi),
        0.0,
        upper,
        peak,
        width,
        quad,
    )?;
    Ok(s.ln() + v)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SllnRadius {
    pub log_sites: f64,
    /// `None` when the radius overflows a double.
    pub radius: Option<f64>,
}

/// Box radius with `log|Q_r| = H(2t) - 2H(t) + margin·t`.
pub fn slln_radius(
    spec: &PotentialSpec,
    t: f64,
    d: usize,
    margin: f64,
    quad: &QuadratureConfig,
) -> Result<SllnRadius> {
    if !(margin > 0.0) {
        return Err(Error::Config(format!(
            "margin must be positive, got {margin}"
        )));
    }
    let log_sites = spec.cumulant(2.0 * t, quad)? - 2.0 * spec.cumulant(t, quad)? + margin * t;
    let side = (log_sites / d as f64).exp();
    let radius = side.is_finite().then(|| (side - 1.0) / 2.0);
    Ok(SllnRadius { log_sites, radius })
}
