//! Marginal law of the i.i.d. potential, described by its tail exponent
//! `φ(x) = -log P(ξ(0) > x)`.
//!
//! Built-in laws live on `[0, ∞)`: `P(ξ > x) = exp(-φ(x))` for `x ≥ 0` and
//! `P(ξ < 0) = 0`. For the double-exponential family `φ(0) = 1`, so the law
//! carries an atom of mass `1 - 1/e` at the origin.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{log_integral_exp, QuadratureConfig};
use crate::rng::RngStream;
use crate::scalings::h_of_t;

type RealFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A user-supplied tail exponent with its first two derivatives.
#[derive(Clone)]
pub struct CustomPhi {
    pub name: String,
    pub phi: RealFn,
    pub phi_prime: RealFn,
    pub phi_second: RealFn,
}

impl fmt::Debug for CustomPhi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomPhi")
            .field("name", &self.name)
            .finish()
    }
}

#[derive(Clone, Debug)]
pub enum Family {
    /// `φ(x) = x^γ`, `γ > 1`.
    Weibull {
        gamma: f64,
    },
    /// `φ(x) = exp(x/ρ)`, `ρ > 0`.
    DoubleExponential {
        rho: f64,
    },
    Custom(CustomPhi),
}

#[derive(Clone, Debug)]
pub struct PotentialSpec {
    pub family: Family,
    /// The regularity parameter ρ ∈ [0, ∞]; `f64::INFINITY` for Weibull tails.
    pub rho_assumption: f64,
}

impl PotentialSpec {
    pub fn weibull(gamma: f64) -> Result<Self> {
        if !(gamma > 1.0 && gamma.is_finite()) {
            return Err(Error::Config(format!(
                "weibull gamma must be > 1, got {gamma}"
            )));
        }
        Ok(Self {
            family: Family::Weibull { gamma },
            rho_assumption: f64::INFINITY,
        })
    }

    pub fn double_exponential(rho: f64) -> Result<Self> {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::Config(format!(
                "double-exponential rho must be > 0, got {rho}"
            )));
        }
        Ok(Self {
            family: Family::DoubleExponential { rho },
            rho_assumption: rho,
        })
    }

    pub fn custom(phi: CustomPhi, rho_assumption: f64) -> Result<Self> {
        if !(rho_assumption >= 0.0) {
            return Err(Error::Config("rho must lie in [0, inf]".into()));
        }
        Ok(Self {
            family: Family::Custom(phi),
            rho_assumption,
        })
    }

    pub fn is_builtin(&self) -> bool {
        !matches!(self.family, Family::Custom(_))
    }

    /// Short label, `weibull(gamma=2)` style.
    pub fn label(&self) -> String {
        match &self.family {
            Family::Weibull { gamma } => format!("weibull(gamma={gamma})"),
            Family::DoubleExponential { rho } => format!("double_exp(rho={rho})"),
            Family::Custom(c) => format!("custom({})", c.name),
        }
    }

    /// `φ(x) = -log P(ξ > x)` on `x ≥ 0`.
    pub fn phi(&self, x: f64) -> Result<f64> {
        if !(x >= 0.0) {
            return Err(Error::Domain(format!("phi is defined on x >= 0, got {x}")));
        }
        Ok(self.phi_unchecked(x))
    }

    pub(crate) fn phi_unchecked(&self, x: f64) -> f64 {
        match &self.family {
            Family::Weibull { gamma } => x.powf(*gamma),
            Family::DoubleExponential { rho } => (x / rho).exp(),
            Family::Custom(c) => (c.phi)(x),
        }
    }

    pub fn phi_prime(&self, x: f64) -> f64 {
        match &self.family {
            Family::Weibull { gamma } => gamma * x.powf(gamma - 1.0),
            Family::DoubleExponential { rho } => (x / rho).exp() / rho,
            Family::Custom(c) => (c.phi_prime)(x),
        }
    }

    pub fn phi_second(&self, x: f64) -> f64 {
        match &self.family {
            Family::Weibull { gamma } => gamma * (gamma - 1.0) * x.powf(gamma - 2.0),
            Family::DoubleExponential { rho } => (x / rho).exp() / (rho * rho),
            Family::Custom(c) => (c.phi_second)(x),
        }
    }

    /// `log P(ξ > x)` for any real `x` (zero below the support).
    pub fn log_tail(&self, x: f64) -> f64 {
        if x < 0.0 {
            0.0
        } else {
            -self.phi_unchecked(x)
        }
    }

    /// Left-continuous inverse `ψ(s) = min{r ≥ 0 : φ(r) ≥ s}`.
    pub fn psi(&self, s: f64) -> Result<f64> {
        if !(s >= 0.0) {
            return Err(Error::Domain(format!("psi is defined on s >= 0, got {s}")));
        }
        if s == f64::INFINITY {
            return Ok(f64::INFINITY);
        }
        Ok(match &self.family {
            Family::Weibull { gamma } => s.powf(1.0 / gamma),
            Family::DoubleExponential { rho } => {
                if s <= 1.0 {
                    0.0
                } else {
                    rho * s.ln()
                }
            }
            Family::Custom(c) => generic_inverse(&*c.phi, s),
        })
    }

    /// Inverse-transform draw `ψ(E)` from a given standard exponential value.
    pub fn sample_from_exponential(&self, e: f64) -> f64 {
        self.psi(e.max(0.0)).unwrap_or(0.0)
    }

    pub fn sample(&self, rng: &mut RngStream) -> f64 {
        let e = rng.exp1();
        match &self.family {
            Family::Weibull { gamma } if *gamma == 2.0 => e.sqrt(),
            _ => self.sample_from_exponential(e),
        }
    }

    /// Cumulant generating function `H(t) = log⟨exp(tξ)⟩` by quadrature of
    /// the tail representation `⟨e^{tξ}⟩ = 1 + t ∫_0^∞ e^{tx - φ(x)} dx`.
    pub fn cumulant(&self, t: f64, quad: &QuadratureConfig) -> Result<f64> {
        if !(t >= 0.0) {
            return Err(Error::Domain(format!("cumulant needs t >= 0, got {t}")));
        }
        if t == 0.0 {
            return Ok(0.0);
        }
        let peak = h_of_t(self, t).unwrap_or(1.0);
        let width = (1.0 / self.phi_second(peak.max(1e-6)))
            .sqrt()
            .clamp(1e-6, 1e6);
        let log_i = log_integral_exp(
            |x| t * x - self.phi_unchecked(x),
            0.0,
            f64::INFINITY,
            peak,
            width,
            quad,
        )?;
        Ok(log_add(0.0, t.ln() + log_i))
    }

    /// Laplace asymptotic `t·h_t - φ(h_t)` of the cumulant. Kept separate
    /// from [`Self::cumulant`] and never substituted for it.
    pub fn cumulant_laplace(&self, t: f64) -> Result<f64> {
        let h = h_of_t(self, t)?;
        Ok(t * h - self.phi_unchecked(h))
    }

    /// `log⟨e^{tξ} 1{ξ ≤ b}⟩` by the density form
    /// `P(ξ = 0) + ∫_0^b φ'(x) e^{tx - φ(x)} dx`.
    pub fn log_truncated_exp_moment(&self, t: f64, b: f64, quad: &QuadratureConfig) -> Result<f64> {
        if b < 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        let atom = -(-self.phi_unchecked(0.0)).exp_m1();
        let log_atom = if atom > 0.0 {
            atom.ln()
        } else {
            f64::NEG_INFINITY
        };
        if b == 0.0 {
            return Ok(log_atom);
        }
        let peak = h_of_t(self, t.max(1e-12)).unwrap_or(0.0).min(b);
        let width = (1.0 / self.phi_second(peak.max(1e-6)))
            .sqrt()
            .clamp(1e-6, 1e6);
        let log_i = log_integral_exp(
            |x| {
                let d = self.phi_prime(x);
                if d > 0.0 {
                    d.ln() + t * x - self.phi_unchecked(x)
                } else {
                    f64::NEG_INFINITY
                }
            },
            0.0,
            b,
            peak.max(b.min(1e-3)),
            width.min(b),
            quad,
        );
        match log_i {
            Ok(v) => Ok(log_add(log_atom, v)),
            // vanishing density on (0, b], e.g. Weibull at tiny b and t
            Err(Error::Domain(_)) => Ok(log_atom),
            Err(e) => Err(e),
        }
    }

    /// Assumption F diagnostic: `ψ(ct) - ψ(t)` along `t_grid`.
    pub fn check_assumption_f(&self, c: f64, t_grid: &[f64]) -> Result<AssumptionReport> {
        check_grid(c, t_grid)?;
        let values = t_grid
            .iter()
            .map(|&t| Ok(self.psi(c * t)? - self.psi(t)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(AssumptionReport::build(
            "F",
            c,
            self.rho_assumption,
            t_grid.to_vec(),
            values,
        ))
    }

    /// Assumption H diagnostic: `(H(ct) - cH(t))/t` along `t_grid`.
    pub fn check_assumption_h(
        &self,
        c: f64,
        t_grid: &[f64],
        quad: &QuadratureConfig,
    ) -> Result<AssumptionReport> {
        check_grid(c, t_grid)?;
        let values = t_grid
            .iter()
            .map(|&t| Ok((self.cumulant(c * t, quad)? - c * self.cumulant(t, quad)?) / t))
            .collect::<Result<Vec<_>>>()?;
        Ok(AssumptionReport::build(
            "H",
            c,
            self.rho_assumption,
            t_grid.to_vec(),
            values,
        ))
    }
}

fn check_grid(c: f64, t_grid: &[f64]) -> Result<()> {
    if !(c > 0.0 && c <= 1.0) {
        return Err(Error::Domain(format!("c must lie in (0,1], got {c}")));
    }
    if t_grid.is_empty() || t_grid.windows(2).any(|w| !(w[0] < w[1])) || t_grid[0] <= 0.0 {
        return Err(Error::Domain(
            "t_grid must be positive and strictly increasing".into(),
        ));
    }
    Ok(())
}

/// `log(e^a + e^b)` without overflow.
pub fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

fn generic_inverse(phi: &(dyn Fn(f64) -> f64 + Send + Sync), s: f64) -> f64 {
    if phi(0.0) >= s {
        return 0.0;
    }
    let mut hi = 1.0;
    while phi(hi) < s {
        hi *= 2.0;
        if !hi.is_finite() {
            return f64::INFINITY;
        }
    }
    let mut lo = 0.0;
    // invariant: phi(lo) < s <= phi(hi)
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if phi(mid) >= s {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// The limiting value an assumption report is compared with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Target {
    Finite(f64),
    /// ρ = ∞: the printed right-hand side is undefined.
    Diverges,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub assumption: String,
    pub c: f64,
    pub rho: Option<f64>,
    pub t_grid: Vec<f64>,
    pub values: Vec<f64>,
    /// Two-point extrapolation assuming an `a/t` correction.
    pub extrapolated_limit: f64,
    /// `ρ c log c` as printed for both assumptions.
    pub target: Target,
    /// `ρ log c`, the value the difference `ψ(ct) - ψ(t)` attains for
    /// `ψ(s) = ρ log s`.
    pub target_without_c: Target,
    pub converged: bool,
    /// Observed power-law growth exponent of `|value|` in `t` when diverging.
    pub divergence_rate: Option<f64>,
}

impl AssumptionReport {
    fn build(name: &str, c: f64, rho: f64, t_grid: Vec<f64>, values: Vec<f64>) -> Self {
        let n = values.len();
        let last = values[n - 1];
        let extrapolated_limit = if n >= 2 {
            let (t1, v1, t2, v2) = (t_grid[n - 2], values[n - 2], t_grid[n - 1], last);
            (t2 * v2 - t1 * v1) / (t2 - t1)
        } else {
            last
        };
        let clogc = if c == 1.0 { 0.0 } else { c * c.ln() };
        let (target, target_without_c) = if c == 1.0 {
            (Target::Finite(0.0), Target::Finite(0.0))
        } else if rho.is_infinite() {
            (Target::Diverges, Target::Diverges)
        } else {
            (Target::Finite(rho * clogc), Target::Finite(rho * c.ln()))
        };
        let divergence_rate =
            if n >= 2 && values[n - 2].abs() > 0.0 && last.abs() > values[n - 2].abs() {
                Some((last / values[n - 2]).abs().ln() / (t_grid[n - 1] / t_grid[n - 2]).ln())
            } else {
                None
            };
        let converged = if n >= 2 {
            let spread = (last - values[n - 2]).abs();
            spread <= 1e-2 * last.abs().max(1e-3) && divergence_rate.is_none_or(|r| r < 0.05)
        } else {
            false
        };
        Self {
            assumption: name.to_string(),
            c,
            rho: rho.is_finite().then_some(rho),
            t_grid,
            values,
            extrapolated_limit,
            target,
            target_without_c,
            converged,
            divergence_rate,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn weibull2() -> PotentialSpec {
        PotentialSpec::weibull(2.0).unwrap()
    }

    fn dexp(rho: f64) -> PotentialSpec {
        PotentialSpec::double_exponential(rho).unwrap()
    }

    #[test]
    fn phi_examples() {
        assert_eq!(weibull2().phi(3.0).unwrap(), 9.0);
        assert_eq!(weibull2().phi(0.0).unwrap(), 0.0);
        assert_eq!(dexp(1.0).phi(0.0).unwrap(), 1.0);
        assert!(matches!(weibull2().phi(-1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn psi_examples() {
        assert!((weibull2().psi(4.0).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(weibull2().psi(0.0).unwrap(), 0.0);
        assert!((dexp(1.0).psi(std::f64::consts::E).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(dexp(1.0).psi(0.5).unwrap(), 0.0);
        assert!(weibull2().psi(-0.1).is_err());
    }

    #[test]
    fn psi_inverts_phi() {
        for spec in [
            weibull2(),
            PotentialSpec::weibull(3.5).unwrap(),
            dexp(1.0),
            dexp(0.3),
        ] {
            for i in 1..200 {
                let x = 0.037 * i as f64;
                let back = spec.psi(spec.phi(x).unwrap()).unwrap();
                assert!(
                    (back - x).abs() <= 1e-12 * x.max(1.0),
                    "{} at {x}: {back}",
                    spec.label()
                );
            }
        }
    }

    #[test]
    fn psi_is_left_continuous_inverse() {
        let delta = 1e-7;
        for spec in [weibull2(), dexp(2.0)] {
            for i in 1..100 {
                let s = 0.31 * i as f64;
                let r = spec.psi(s).unwrap();
                assert!(spec.phi(r).unwrap() >= s * (1.0 - 1e-14));
                if r > delta {
                    assert!(spec.phi(r - delta).unwrap() < s);
                }
            }
        }
    }

    #[test]
    fn custom_inverse_matches_closed_form() {
        let c = CustomPhi {
            name: "cube".into(),
            phi: Arc::new(|x: f64| x.powi(3)),
            phi_prime: Arc::new(|x: f64| 3.0 * x * x),
            phi_second: Arc::new(|x: f64| 6.0 * x),
        };
        let spec = PotentialSpec::custom(c, f64::INFINITY).unwrap();
        assert!((spec.psi(27.0).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn sample_examples() {
        assert_eq!(weibull2().sample_from_exponential(0.25), 0.5);
        assert_eq!(
            weibull2().sample_from_exponential(0.0),
            weibull2().psi(0.0).unwrap()
        );
        assert_eq!(dexp(1.0).sample_from_exponential(1e-12), 0.0);
    }

    #[test]
    fn cumulant_at_zero() {
        let q = QuadratureConfig::default();
        assert_eq!(weibull2().cumulant(0.0, &q).unwrap(), 0.0);
        assert_eq!(dexp(1.0).cumulant(0.0, &q).unwrap(), 0.0);
    }

    #[test]
    fn weibull_cumulant_laplace_ratio() {
        let q = QuadratureConfig::default();
        let h = weibull2().cumulant(40.0, &q).unwrap();
        let ratio = h / 400.0;
        assert!((ratio - 1.0).abs() < 0.1, "ratio {ratio}");
        assert!((weibull2().cumulant_laplace(40.0).unwrap() - 400.0).abs() < 1e-9);
    }

    #[test]
    fn weibull2_cumulant_closed_form() {
        // 1 + t ∫_0^∞ e^{tx-x²} dx = 1 + t √π e^{t²/4} Φ(t/√2)
        let q = QuadratureConfig::default();
        for t in [0.5, 1.0, 2.0, 4.0, 10.0] {
            let phi_cdf = 0.5 * statrs::function::erf::erfc(-t / 2.0);
            let exact =
                (1.0 + t * std::f64::consts::PI.sqrt() * (t * t / 4.0).exp() * phi_cdf).ln();
            let got = weibull2().cumulant(t, &q).unwrap();
            assert!(
                ((got - exact) / exact).abs() < 1e-10,
                "t={t}: {got} vs {exact}"
            );
        }
    }

    #[test]
    fn double_exp_cumulant_vs_density_grid() {
        // independent route: atom at 0 plus a fine trapezoid grid of
        // e^{tx} f(x) with density f = φ' e^{-φ}
        let spec = dexp(1.0);
        let t = 1.0;
        let n = 400_000;
        let upper = 4.0;
        let h = upper / n as f64;
        let f = |x: f64| (t * x).exp() * x.exp() * (-x.exp()).exp();
        let mut s = 0.5 * (f(0.0) + f(upper));
        for i in 1..n {
            s += f(i as f64 * h);
        }
        let oracle = ((1.0 - (-1.0f64).exp()) + s * h).ln();
        let got = spec.cumulant(t, &QuadratureConfig::default()).unwrap();
        assert!(((got - oracle) / oracle).abs() < 1e-6, "{got} vs {oracle}");
    }

    #[test]
    fn cumulant_is_convex() {
        let q = QuadratureConfig::default();
        for spec in [weibull2(), dexp(1.0)] {
            let h = 0.05;
            for i in 1..60 {
                let t = 0.1 + 0.2 * i as f64;
                let d2 = spec.cumulant(t + h, &q).unwrap() - 2.0 * spec.cumulant(t, &q).unwrap()
                    + spec.cumulant(t - h, &q).unwrap();
                assert!(d2 >= -1e-8, "{} t={t}: {d2}", spec.label());
            }
        }
    }

    #[test]
    fn truncated_moment_limits() {
        let q = QuadratureConfig::default();
        for spec in [weibull2(), dexp(1.0)] {
            let full = spec.cumulant(3.0, &q).unwrap();
            let trunc = spec.log_truncated_exp_moment(3.0, 50.0, &q).unwrap();
            assert!((full - trunc).abs() < 1e-9, "{}", spec.label());
            let atom = spec.log_truncated_exp_moment(3.0, 0.0, &q).unwrap();
            assert!((atom.exp() - (1.0 - (-spec.phi(0.0).unwrap()).exp())).abs() < 1e-15);
        }
    }

    #[test]
    fn empirical_tail_matches() {
        let mut rng = RngStream::new(11);
        let n = 1_000_000;
        for spec in [weibull2(), dexp(1.0)] {
            let x = 1.0;
            let p = (-spec.phi(x).unwrap()).exp();
            let hits = (0..n).filter(|_| spec.sample(&mut rng) > x).count() as f64;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((hits / n as f64 - p).abs() < 4.0 * se, "{}", spec.label());
        }
    }

    #[test]
    fn sample_ks_against_law() {
        let spec = PotentialSpec::weibull(1.7).unwrap();
        let mut rng = RngStream::new(3);
        let n = 100_000;
        let mut xs: Vec<f64> = (0..n).map(|_| spec.sample(&mut rng)).collect();
        xs.sort_by(f64::total_cmp);
        let mut d: f64 = 0.0;
        for (i, &x) in xs.iter().enumerate() {
            let f = 1.0 - (-spec.phi(x).unwrap()).exp();
            d = d
                .max((f - i as f64 / n as f64).abs())
                .max(((i + 1) as f64 / n as f64 - f).abs());
        }
        // p = 0.001 critical value of the one-sample KS test
        assert!(d * (n as f64).sqrt() < 1.95, "KS {d}");
    }

    #[test]
    fn assumption_f_double_exponential() {
        let spec = dexp(2.0);
        let grid: Vec<f64> = (1..=6).map(|k| 10f64.powi(k)).collect();
        let rep = spec.check_assumption_f(0.5, &grid).unwrap();
        for v in &rep.values {
            assert!((v + 2.0 * 2f64.ln()).abs() < 1e-12);
        }
        assert!(rep.converged);
        assert_eq!(rep.target_without_c, Target::Finite(-2.0 * 2f64.ln()));
        match rep.target {
            Target::Finite(v) => assert!((v + 2f64.ln()).abs() < 1e-15),
            _ => panic!(),
        }
    }

    #[test]
    fn assumption_f_weibull_diverges() {
        let spec = weibull2();
        let grid = [1e2, 1e3, 1e4, 1e5];
        let rep = spec.check_assumption_f(0.5, &grid).unwrap();
        for (t, v) in grid.iter().zip(&rep.values) {
            assert!((v - t.sqrt() * (0.5f64.sqrt() - 1.0)).abs() < 1e-9 * t.sqrt());
        }
        assert_eq!(rep.target, Target::Diverges);
        assert!(!rep.converged);
        assert!((rep.divergence_rate.unwrap() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn assumption_targets_at_c_one() {
        let rep = dexp(1.0).check_assumption_f(1.0, &[1.0, 2.0]).unwrap();
        assert_eq!(rep.target, Target::Finite(0.0));
        let rep = weibull2()
            .check_assumption_h(1.0, &[1.0, 2.0], &QuadratureConfig::default())
            .unwrap();
        assert_eq!(rep.target, Target::Finite(0.0));
    }

    #[test]
    fn assumption_h_double_exponential() {
        let spec = dexp(1.0);
        let grid = [250.0, 500.0, 1000.0, 2000.0, 4000.0];
        let rep = spec
            .check_assumption_h(0.5, &grid, &QuadratureConfig::default())
            .unwrap();
        let target = -0.5 * 2f64.ln();
        assert!(
            ((rep.extrapolated_limit - target) / target).abs() < 0.05,
            "{rep:?}"
        );
    }

    #[test]
    fn assumption_h_weibull_diverges() {
        let spec = weibull2();
        let grid = [20.0, 40.0, 80.0];
        let rep = spec
            .check_assumption_h(0.5, &grid, &QuadratureConfig::default())
            .unwrap();
        for (t, v) in grid.iter().zip(&rep.values) {
            let laplace = t / 4.0 * (0.25 - 0.5);
            assert!(((v - laplace) / laplace).abs() < 0.1);
        }
        assert_eq!(rep.target, Target::Diverges);
        assert!(rep.divergence_rate.unwrap() > 0.8);
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(PotentialSpec::weibull(1.0).is_err());
        assert!(PotentialSpec::double_exponential(0.0).is_err());
        assert!(weibull2()
            .cumulant(-1.0, &QuadratureConfig::default())
            .is_err());
    }
}
