//! Solutions of `∂u/∂t = κΔ⁰u + ξu` on a box: Krylov propagation, spectral
//! expansion and Feynman–Kac Monte Carlo, plus the block decomposition of a
//! large box into independent Dirichlet problems.

use std::io::Write;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::krylov::{self, SymmetricOperator};
use crate::lattice::{
    full_spectrum, principal_eigenpair, write_header, write_site, HamiltonianOperator, LatticeBox,
    PotentialField, DEFAULT_DENSE_LIMIT,
};
use crate::rng::RngStream;

/// Krylov subspace dimension for the propagator.
pub const KRYLOV_DIM: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    OdeKrylov,
    Spectral,
    FeynmanKacMC,
}

#[derive(Clone, Debug, PartialEq)]
pub enum InitialCondition {
    Constant(f64),
    Field(Vec<f64>),
}

impl InitialCondition {
    fn describe(u0: &[f64]) -> Self {
        match u0.first() {
            Some(&c) if u0.iter().all(|&v| v == c) => InitialCondition::Constant(c),
            _ => InitialCondition::Field(u0.to_vec()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SolutionField {
    pub lattice: LatticeBox,
    pub t: f64,
    pub values: Vec<f64>,
    pub method: Method,
    /// Standard error for Monte Carlo, a relative residual bound otherwise.
    pub error_estimate: f64,
    /// Per-site error column written to CSV.
    pub stderr: Vec<f64>,
    pub u0: InitialCondition,
}

impl SolutionField {
    pub fn mass(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write_header(&mut w, self.lattice.d, &["u", "stderr"])?;
        for (i, (u, e)) in self.values.iter().zip(&self.stderr).enumerate() {
            write_site(&mut w, &self.lattice.site(i))?;
            writeln!(w, "{u:e},{e:e}")?;
        }
        Ok(())
    }
}

fn check_inputs(h: &HamiltonianOperator, t: f64, u0: &[f64]) -> Result<()> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::Domain(format!(
            "time must be finite and >= 0, got {t}"
        )));
    }
    if u0.len() != h.dim() {
        return Err(Error::IndexMismatch(format!(
            "u0 has {} values for {} sites",
            u0.len(),
            h.dim()
        )));
    }
    Ok(())
}

fn deterministic(
    h: &HamiltonianOperator,
    t: f64,
    u0: &[f64],
    values: Vec<f64>,
    method: Method,
    err: f64,
) -> SolutionField {
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    SolutionField {
        lattice: h.lattice().clone(),
        t,
        stderr: vec![err * scale; values.len()],
        values,
        method,
        error_estimate: err,
        u0: InitialCondition::describe(u0),
    }
}

/// Krylov solution in scaled form, so block masses can be formed without
/// overflow.
fn propagate(h: &HamiltonianOperator, t: f64, u0: &[f64], tol: f64) -> Result<krylov::ExpmAction> {
    krylov::expm_action(h, h.norm1(), t, u0, KRYLOV_DIM, tol)
}

/// `u(t) = exp(tH)u0` by Krylov propagation; small boxes fall back to the
/// spectral method when the step size underflows.
pub fn solve_ode(h: &HamiltonianOperator, t: f64, u0: &[f64], tol: f64) -> Result<SolutionField> {
    check_inputs(h, t, u0)?;
    if t == 0.0 {
        return Ok(deterministic(h, t, u0, u0.to_vec(), Method::OdeKrylov, 0.0));
    }
    if h.kappa == 0.0 {
        let values = h
            .diagonal()
            .iter()
            .zip(u0)
            .map(|(d, u)| (t * d).exp() * u)
            .collect();
        return Ok(deterministic(h, t, u0, values, Method::OdeKrylov, 0.0));
    }
    match propagate(h, t, u0, tol) {
        Ok(res) => {
            let err = res.error;
            let mut values = res.into_values();
            // round-off can leave tiny negative entries far from the mass
            values.iter_mut().for_each(|v| *v = v.max(0.0));
            Ok(deterministic(h, t, u0, values, Method::OdeKrylov, err))
        }
        Err(Error::StiffFailure { .. }) if h.dim() <= DEFAULT_DENSE_LIMIT => {
            let mut sol = solve_spectral(h, t, u0)?;
            sol.method = Method::OdeKrylov;
            Ok(sol)
        }
        Err(e) => Err(e),
    }
}

/// `u(t,x) = Σ_k e^{λ_k t} e_k(x) ⟨e_k, u0⟩`.
pub fn solve_spectral(h: &HamiltonianOperator, t: f64, u0: &[f64]) -> Result<SolutionField> {
    check_inputs(h, t, u0)?;
    if t == 0.0 {
        return Ok(deterministic(h, t, u0, u0.to_vec(), Method::Spectral, 0.0));
    }
    let (vals, vecs) = full_spectrum(h)?;
    let n = h.dim();
    let mut values = vec![0.0; n];
    for (l, e) in vals.iter().zip(&vecs) {
        let c = (l * t).exp() * krylov::dot(e, u0);
        for (v, x) in values.iter_mut().zip(e) {
            *v += c * x;
        }
    }
    values.iter_mut().for_each(|v| *v = v.max(0.0));
    let err = 8.0 * f64::EPSILON * n as f64;
    Ok(deterministic(h, t, u0, values, Method::Spectral, err))
}

/// `Σ_{x,y} Σ_k e^{λ_k t} e_k(x) e_k(y)`, the mass for `u0 ≡ 1`.
pub fn spectral_mass(lambdas: &[f64], vectors: &[Vec<f64>], t: f64) -> f64 {
    lambdas
        .iter()
        .zip(vectors)
        .map(|(l, e)| (l * t).exp() * e.iter().sum::<f64>().powi(2))
        .sum()
}

/// Mean and standard error of a Monte Carlo estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Default)]
struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn finish(&self) -> McEstimate {
        let var = if self.n > 1 {
            self.m2 / (self.n - 1) as f64
        } else {
            0.0
        };
        McEstimate {
            mean: self.mean,
            stderr: (var / self.n as f64).sqrt(),
        }
    }
}

/// Outcome of one walk: `∫₀^t ξ(X_s) ds` and the final site, or `None` if the
/// walk left `domain`; also whether it left `inner` before `t`.
struct Walk {
    integral: f64,
    end: Option<usize>,
    left_inner: bool,
}

fn walk(
    field: &PotentialField,
    kappa: f64,
    t: f64,
    start: usize,
    inner: Option<&LatticeBox>,
    rng: &mut RngStream,
) -> Walk {
    let lattice = &field.lattice;
    let d = lattice.d;
    let rate = 2.0 * d as f64 * kappa;
    let mut x = lattice.site(start);
    let mut idx = start;
    let mut time = 0.0;
    let mut integral = 0.0;
    let mut left_inner = false;
    loop {
        let hold = if rate > 0.0 {
            rng.exp1() / rate
        } else {
            f64::INFINITY
        };
        if time + hold >= t {
            integral += (t - time) * field.values[idx];
            return Walk {
                integral,
                end: Some(idx),
                left_inner,
            };
        }
        integral += hold * field.values[idx];
        time += hold;
        let dir = (rng.next_u64() % (2 * d) as u64) as usize;
        x[dir / 2] += if dir.is_multiple_of(2) { 1 } else { -1 };
        match lattice.index_of(&x) {
            Some(j) => idx = j,
            None => {
                return Walk {
                    integral,
                    end: None,
                    left_inner: true,
                }
            }
        }
        if let Some(b) = inner {
            if !left_inner && !b.contains(&x) {
                left_inner = true;
            }
        }
    }
}

/// Per-site Feynman–Kac estimate `E_x exp{∫₀^t ξ(X_s)ds} u0(X_t) 1{τ > t}`
/// with event-driven walks of total jump rate `2dκ`, killed on leaving the
/// box. Each site gets its own stream forked from `rng`, so the result does
/// not depend on the number of worker threads.
pub fn feynman_kac_mc(
    field: &PotentialField,
    kappa: f64,
    t: f64,
    u0: &[f64],
    n_paths: usize,
    rng: &mut RngStream,
) -> Result<SolutionField> {
    let n = field.lattice.len();
    if u0.len() != n {
        return Err(Error::IndexMismatch(format!(
            "u0 has {} values for {n} sites",
            u0.len()
        )));
    }
    if n_paths == 0 {
        return Err(Error::Config("n_paths must be >= 1".into()));
    }
    if !(t >= 0.0 && kappa >= 0.0) {
        return Err(Error::Domain("t and kappa must be >= 0".into()));
    }
    let base = rng.next_u64();
    let estimates: Vec<McEstimate> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = RngStream::derive(base, &[i as u64]);
            let mut acc = Welford::default();
            for _ in 0..n_paths {
                let w = walk(field, kappa, t, i, None, &mut r);
                acc.push(w.end.map_or(0.0, |j| w.integral.exp() * u0[j]));
            }
            acc.finish()
        })
        .collect();
    let values: Vec<f64> = estimates.iter().map(|e| e.mean).collect();
    let stderr: Vec<f64> = estimates.iter().map(|e| e.stderr).collect();
    Ok(SolutionField {
        lattice: field.lattice.clone(),
        t,
        error_estimate: stderr.iter().copied().fold(0.0, f64::max),
        values,
        stderr,
        method: Method::FeynmanKacMC,
        u0: InitialCondition::describe(u0),
    })
}

/// `E_x exp{∫₀^t ξ(X_s)ds} 1{X leaves inner before t}` for walks killed on
/// leaving the field's box. Paths do not depend on `inner`, so reusing the
/// seed across nested inner boxes gives pathwise monotone estimates.
pub fn escape_mass(
    field: &PotentialField,
    inner: &LatticeBox,
    kappa: f64,
    t: f64,
    x: &[i64],
    n_paths: usize,
    rng: &mut RngStream,
) -> Result<McEstimate> {
    let start = inner
        .index_of(x)
        .and_then(|_| field.lattice.index_of(x))
        .ok_or_else(|| Error::IndexMismatch(format!("site {x:?} must lie in both boxes")))?;
    if n_paths == 0 {
        return Err(Error::Config("n_paths must be >= 1".into()));
    }
    if t == 0.0 || kappa == 0.0 {
        return Ok(McEstimate {
            mean: 0.0,
            stderr: 0.0,
        });
    }
    let mut acc = Welford::default();
    for _ in 0..n_paths {
        let w = walk(field, kappa, t, start, Some(inner), rng);
        let v = match w.end {
            Some(_) if w.left_inner => w.integral.exp(),
            _ => 0.0,
        };
        acc.push(v);
    }
    Ok(acc.finish())
}

/// Per-block output of the decomposition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockStatistic {
    pub block_index: usize,
    /// `(1/t) log Σ_x u(t,x)` on the block.
    pub mu_t: f64,
    pub lambda1: f64,
    pub eps_tilde: f64,
    /// `ξ^{(1)}` on the block.
    pub xi_max: f64,
}

impl BlockStatistic {
    /// `ε̄ = λ₁ - (ξ^{(1)} - χ)`.
    pub fn eps_bar(&self, chi: f64) -> f64 {
        self.lambda1 - (self.xi_max - chi)
    }
}

pub fn write_blocks_csv<W: Write>(blocks: &[BlockStatistic], mut w: W) -> Result<()> {
    writeln!(w, "block,mu_t,lambda1,eps_tilde")?;
    for b in blocks {
        writeln!(
            w,
            "{},{:e},{:e},{:e}",
            b.block_index, b.mu_t, b.lambda1, b.eps_tilde
        )?;
    }
    Ok(())
}

/// Tiles of `Q_l` inside `big`, starting from its lowest corner, in
/// lexicographic order of the tile coordinates. The incomplete rim is dropped.
pub fn tile(big: &LatticeBox, l: f64) -> Result<Vec<LatticeBox>> {
    if !(l >= 0.0) {
        return Err(Error::Config(format!("block radius must be >= 0, got {l}")));
    }
    let side = 2 * l.floor() as usize + 1;
    let counts: Vec<usize> = big.sides().iter().map(|s| s / side).collect();
    let total: usize = counts.iter().product();
    if total == 0 {
        return Err(Error::Config(format!(
            "block radius {l} does not fit into a box with sides {:?}",
            big.sides()
        )));
    }
    let half = l.floor() as i64;
    let mut out = Vec::with_capacity(total);
    for b in 0..total {
        let mut rem = b;
        let mut center = vec![0i64; big.d];
        for k in (0..big.d).rev() {
            let c = rem % counts[k];
            rem /= counts[k];
            center[k] = big.lower()[k] + (c * side) as i64 + half;
        }
        out.push(LatticeBox::new(big.d, l, &center)?);
    }
    Ok(out)
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Solves every block of the tiling with Dirichlet boundary and `u0 ≡ 1`.
pub fn block_decompose_and_solve(
    field: &PotentialField,
    kappa: f64,
    t: f64,
    l: f64,
    tol: f64,
) -> Result<Vec<BlockStatistic>> {
    if !(t > 0.0) {
        return Err(Error::Domain(format!(
            "block statistics need t > 0, got {t}"
        )));
    }
    let blocks = tile(&field.lattice, l)?;
    blocks
        .par_iter()
        .enumerate()
        .map(|(i, b)| {
            let f = field.restrict(b)?;
            let xi_max = f.max().1;
            let (log_mass, lambda1) = if kappa == 0.0 {
                (log_sum_exp(f.values.iter().map(|v| t * v)), xi_max)
            } else {
                let h = HamiltonianOperator::assemble(&f, kappa)?;
                let ones = vec![1.0; h.dim()];
                let log_mass = match propagate(&h, t, &ones, tol) {
                    Ok(res) => res.log_scale + res.vector.iter().sum::<f64>().ln(),
                    Err(Error::StiffFailure { .. }) if h.dim() <= DEFAULT_DENSE_LIMIT => {
                        let (vals, vecs) = full_spectrum(&h)?;
                        spectral_mass(&vals, &vecs, t).ln()
                    }
                    Err(e) => return Err(e),
                };
                (log_mass, principal_eigenpair(&h, 1e-10)?.0)
            };
            let mu_t = log_mass / t;
            Ok(BlockStatistic {
                block_index: i,
                mu_t,
                lambda1,
                eps_tilde: mu_t - lambda1,
                xi_max,
            })
        })
        .collect()
}
