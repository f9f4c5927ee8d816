//! Seeded experiment harnesses: the stable limit of rescaled spatial sums,
//! the deterministic ratio and truncated-moment checks behind Condition P, the strong
//! law, and exponent diagnostics.
//!
//! Every replica draws from its own stream derived from
//! `(master_seed, t-index, replica)`, and results are collected in replica
//! order, so records do not depend on the number of worker threads.

use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::krylov::SymmetricOperator;
use crate::lattice::{principal_eigenpair, HamiltonianOperator, LatticeBox, PotentialField};
use crate::potential::PotentialSpec;
use crate::quadrature::{integrate, QuadratureConfig};
use crate::rng::{RngStream, DERIVATION};
use crate::scalings::{
    annealed_moment, block_radius, log_box_sites, make_bundle, AlphaRegime, ChiPolicy,
    MomentMethod, ScalingBundle,
};
use crate::solver::{block_decompose_and_solve, escape_mass, solve_ode};
use crate::stable_law::{hill_estimator, ks_band, petrov_verdict, StableLaw};
use crate::surrogate::BlockLaw;

/// Caps on the work an experiment may do.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    /// Sites drawn per replica and time point in the i.i.d. (κ = 0) mode.
    pub max_sites_per_replica: u64,
    /// Sites drawn over all replicas of one time point.
    pub max_total_sites: u64,
    /// Largest box handed to the deterministic solvers (κ > 0).
    pub max_solver_sites: u64,
    /// Feynman–Kac paths per estimate.
    pub max_paths: u64,
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            max_sites_per_replica: 10_000_000,
            max_total_sites: 100_000_000,
            max_solver_sites: 20_000,
            max_paths: 10_000_000,
        }
    }
}

impl Budget {
    fn validate(&self) -> Result<()> {
        if self.max_sites_per_replica == 0
            || self.max_total_sites == 0
            || self.max_solver_sites == 0
            || self.max_paths == 0
        {
            return Err(Error::Config("budget caps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub spec: PotentialSpec,
    pub alpha: f64,
    pub kappa: f64,
    pub d: usize,
    pub chi: f64,
    pub t_grid: Vec<f64>,
    pub replicas: usize,
    pub master_seed: u64,
    pub budget: Budget,
    pub quad: QuadratureConfig,
}

impl ExperimentConfig {
    pub fn new(
        spec: PotentialSpec,
        alpha: f64,
        t_grid: Vec<f64>,
        replicas: usize,
        master_seed: u64,
    ) -> Self {
        Self {
            spec,
            alpha,
            kappa: 0.0,
            d: 1,
            chi: 0.0,
            t_grid,
            replicas,
            master_seed,
            budget: Budget::default(),
            quad: QuadratureConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        AlphaRegime::of(self.alpha)?;
        validate_common(self.kappa, self.d, self.chi, &self.t_grid, self.replicas)?;
        self.budget.validate()
    }

    /// Canonical `key=value` echo; its SHA-256 is the config hash.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "family={}", self.spec.label());
        let _ = writeln!(s, "alpha={}", self.alpha);
        let _ = writeln!(s, "kappa={}", self.kappa);
        let _ = writeln!(s, "d={}", self.d);
        let _ = writeln!(s, "chi={}", self.chi);
        let _ = writeln!(s, "t_grid={}", join(&self.t_grid));
        let _ = writeln!(s, "replicas={}", self.replicas);
        let _ = writeln!(s, "master_seed={}", self.master_seed);
        echo_budget(&mut s, &self.budget);
        let _ = writeln!(s, "quad_rel_tol={}", self.quad.rel_tol);
        s
    }

    pub fn hash(&self) -> String {
        sha256_hex(&self.echo())
    }

    fn bundle(&self, t: f64) -> Result<ScalingBundle> {
        make_bundle(
            &self.spec,
            self.alpha,
            t,
            self.kappa,
            self.d,
            ChiPolicy::Explicit(self.chi),
            &self.quad,
        )
    }
}

fn validate_common(kappa: f64, d: usize, chi: f64, t_grid: &[f64], replicas: usize) -> Result<()> {
    if replicas == 0 {
        return Err(Error::Config("replicas must be >= 1".into()));
    }
    if d == 0 {
        return Err(Error::Config("d must be >= 1".into()));
    }
    if !(kappa >= 0.0 && kappa.is_finite()) {
        return Err(Error::Config(format!(
            "kappa must be finite and >= 0, got {kappa}"
        )));
    }
    if !(chi >= 0.0 && chi <= 2.0 * d as f64 * kappa) {
        return Err(Error::Config(format!(
            "chi must lie in [0, 2dκ], got {chi}"
        )));
    }
    if t_grid.is_empty() || t_grid.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
        return Err(Error::Config(
            "t_grid must be non-empty with positive entries".into(),
        ));
    }
    if t_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("t_grid must be strictly increasing".into()));
    }
    Ok(())
}

fn echo_budget(s: &mut String, b: &Budget) {
    let _ = writeln!(s, "max_sites_per_replica={}", b.max_sites_per_replica);
    let _ = writeln!(s, "max_total_sites={}", b.max_total_sites);
    let _ = writeln!(s, "max_solver_sites={}", b.max_solver_sites);
    let _ = writeln!(s, "max_paths={}", b.max_paths);
}

fn join(xs: &[f64]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

pub fn sha256_hex(s: &str) -> String {
    Sha256::digest(s.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Done,
    BudgetExceeded,
}

/// Statistics of one time point of the stable-limit experiment.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LimitTStats {
    pub t: f64,
    pub status: Status,
    pub bundle: ScalingBundle,
    /// Sites per replica.
    pub n_sites: u64,
    /// `A(t)/B_α(t)` per site as used in the pipeline (0 for α < 1).
    pub centering_over_b: f64,
    /// Per replica `Σ_x (u(t,x) - A(t)) / B_α(t)`.
    pub samples: Vec<f64>,
    /// Per replica `Σ_i (e^{tμ_t^{(i)}} - Ã(t)) / B_α(t)` over complete blocks.
    pub block_samples: Vec<f64>,
    pub block_sites: u64,
    pub blocks_per_replica: u64,
    /// Sites per block in the pool used for the Hill estimate.
    pub hill_block_sites: u64,
    pub hill_k: usize,
    pub ks: Option<f64>,
    pub ks_band: f64,
    pub hill: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub config_hash: String,
    pub config_echo: String,
    pub master_seed: u64,
    pub rng_derivation: String,
    pub per_t: Vec<LimitTStats>,
    pub largest_feasible_t: Option<f64>,
}

/// Per-replica output: rescaled sum, block sum and the pooled candidates
/// for the Hill estimate.
struct ReplicaOut {
    sum: f64,
    block_sum: f64,
    /// Un-centered block variables `e^{tμ}/B`, top `keep` only.
    top_blocks: Vec<f64>,
    /// Un-centered site variables `e^{tξ}/B`, top `keep` only.
    top_sites: Vec<f64>,
}

fn keep_top(mut xs: Vec<f64>, keep: usize) -> Vec<f64> {
    if xs.len() > keep {
        let cut = xs.len() - keep;
        xs.select_nth_unstable_by(cut, f64::total_cmp);
        xs.drain(..cut);
    }
    xs
}

/// Sites of the box `Q_r` with the odd side nearest to `n^{1/d}`.
fn box_for_sites(n: f64, d: usize) -> Result<LatticeBox> {
    let side = n.powf(1.0 / d as f64);
    let r = ((side - 1.0) / 2.0).round().max(0.0);
    LatticeBox::centered(d, r)
}

/// Coarse-grained stable limit: for each `t`, `replicas` independent boxes of
/// `|Q_{L_α(t)}|` sites, rescaled centered sums, KS distance to `F_α`, and the
/// Hill index of the pooled block variables.
pub fn stable_limit_experiment(cfg: &ExperimentConfig) -> Result<ExperimentRecord> {
    cfg.validate()?;
    let law = StableLaw::new(cfg.alpha)?;
    let regime = AlphaRegime::of(cfg.alpha)?;
    let keep = cfg.replicas + 1;
    let mut per_t = Vec::with_capacity(cfg.t_grid.len());
    let mut largest_feasible = None;
    for (ti, &t) in cfg.t_grid.iter().enumerate() {
        let bundle = cfg.bundle(t)?;
        let n_sites = bundle.log_l_alpha.exp().round().max(1.0);
        let block_sites = bundle.log_block_sites.exp().round().max(1.0);
        let log_b = bundle.log_b_alpha;
        let mut stats = LimitTStats {
            t,
            status: Status::BudgetExceeded,
            n_sites: n_sites.min(u64::MAX as f64) as u64,
            centering_over_b: 0.0,
            samples: Vec::new(),
            block_samples: Vec::new(),
            block_sites: block_sites.min(u64::MAX as f64) as u64,
            blocks_per_replica: 0,
            hill_block_sites: 0,
            hill_k: 0,
            ks: None,
            ks_band: ks_band(cfg.replicas),
            hill: None,
            bundle,
        };
        let outs = if cfg.kappa == 0.0 {
            let feasible = n_sites <= cfg.budget.max_sites_per_replica as f64
                && n_sites * cfg.replicas as f64 <= cfg.budget.max_total_sites as f64;
            if !feasible {
                per_t.push(stats);
                continue;
            }
            let n = n_sites as u64;
            let per_site = match regime {
                AlphaRegime::Below1 => 0.0,
                _ => (stats.bundle.log_centering_a.unwrap_or(f64::NEG_INFINITY) - log_b).exp(),
            };
            let per_block = match regime {
                AlphaRegime::Below1 => 0.0,
                _ => (stats
                    .bundle
                    .log_block_centering_a_tilde
                    .unwrap_or(f64::NEG_INFINITY)
                    - log_b)
                    .exp(),
            };
            stats.centering_over_b = per_site;
            let bs = block_sites as u64;
            stats.blocks_per_replica = n / bs;
            (0..cfg.replicas)
                .into_par_iter()
                .map(|r| {
                    let mut rng = RngStream::derive(cfg.master_seed, &[ti as u64, r as u64]);
                    iid_replica(
                        &cfg.spec, t, log_b, n, bs, per_site, per_block, keep, &mut rng,
                    )
                })
                .collect::<Vec<_>>()
        } else {
            let lattice = box_for_sites(n_sites, cfg.d);
            let lattice = match lattice {
                Ok(b) if (b.len() as u64) <= cfg.budget.max_solver_sites => b,
                _ => {
                    per_t.push(stats);
                    continue;
                }
            };
            stats.n_sites = lattice.len() as u64;
            let r = lattice.r.floor();
            let l_used = stats.bundle.l_t.min(r);
            stats.block_sites = (2.0 * l_used.floor() + 1.0).powi(cfg.d as i32) as u64;
            stats.blocks_per_replica = crate::solver::tile(&lattice, l_used)?.len() as u64;
            let solved = solve_replicas(cfg, ti, t, &lattice, l_used)?;
            centre_replicas(solved, regime, keep, &mut stats)
        };
        finish_t(&mut stats, outs, &law, cfg.replicas)?;
        largest_feasible = Some(t);
        per_t.push(stats);
    }
    if largest_feasible.is_none() {
        return Err(Error::Budget(format!(
            "no time point of {:?} fits the budget; largest feasible t: none",
            cfg.t_grid
        )));
    }
    Ok(ExperimentRecord {
        config_hash: cfg.hash(),
        config_echo: cfg.echo(),
        master_seed: cfg.master_seed,
        rng_derivation: DERIVATION.to_string(),
        per_t,
        largest_feasible_t: largest_feasible,
    })
}

#[allow(clippy::too_many_arguments)]
fn iid_replica(
    spec: &PotentialSpec,
    t: f64,
    log_b: f64,
    n: u64,
    block_sites: u64,
    per_site: f64,
    per_block: f64,
    keep: usize,
    rng: &mut RngStream,
) -> ReplicaOut {
    let mut sum = 0.0;
    let mut block_sum = 0.0;
    let mut acc = 0.0;
    let mut blocks = Vec::new();
    let mut sites = Vec::with_capacity(keep.min(n as usize) * 2);
    for i in 0..n {
        let z = (t * spec.sample(rng) - log_b).exp();
        sum += z;
        acc += z;
        sites.push(z);
        if sites.len() >= 4 * keep {
            sites = keep_top(sites, keep);
        }
        if (i + 1) % block_sites == 0 {
            blocks.push(acc);
            block_sum += acc - per_block;
            acc = 0.0;
        }
    }
    ReplicaOut {
        sum: sum - n as f64 * per_site,
        block_sum,
        top_blocks: keep_top(blocks, keep),
        top_sites: keep_top(sites, keep),
    }
}

/// Raw per-replica solver output before centering: site solution and block
/// masses, both divided by `B`.
struct Solved {
    u_over_b: Vec<f64>,
    blocks_over_b: Vec<f64>,
}

fn solve_replicas(
    cfg: &ExperimentConfig,
    ti: usize,
    t: f64,
    lattice: &LatticeBox,
    l: f64,
) -> Result<Vec<Solved>> {
    let log_b = cfg.bundle(t)?.log_b_alpha;
    (0..cfg.replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = RngStream::derive(cfg.master_seed, &[ti as u64, r as u64]);
            let field = PotentialField::sample(lattice.clone(), &cfg.spec, &mut rng);
            let h = HamiltonianOperator::assemble(&field, cfg.kappa)?;
            let u = solve_ode(&h, t, &vec![1.0; h.dim()], 1e-10)?;
            let blocks = block_decompose_and_solve(&field, cfg.kappa, t, l, 1e-10)?;
            Ok(Solved {
                u_over_b: u.values.iter().map(|v| v / log_b.exp()).collect(),
                blocks_over_b: blocks.iter().map(|b| (t * b.mu_t - log_b).exp()).collect(),
            })
        })
        .collect()
}

/// Monte Carlo centerings for κ > 0: pooled means of `u/B` (α > 1) or
/// `u/B·1{u ≤ B}` (α = 1), per site and per block.
fn centre_replicas(
    solved: Vec<Solved>,
    regime: AlphaRegime,
    keep: usize,
    stats: &mut LimitTStats,
) -> Vec<ReplicaOut> {
    let centre = |xs: &mut dyn Iterator<Item = f64>| -> f64 {
        let (mut s, mut n) = (0.0, 0usize);
        for x in xs {
            s += match regime {
                AlphaRegime::One if x > 1.0 => 0.0,
                _ => x,
            };
            n += 1;
        }
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    };
    let (per_site, per_block) = match regime {
        AlphaRegime::Below1 => (0.0, 0.0),
        _ => (
            centre(&mut solved.iter().flat_map(|s| s.u_over_b.iter().copied())),
            centre(&mut solved.iter().flat_map(|s| s.blocks_over_b.iter().copied())),
        ),
    };
    stats.centering_over_b = per_site;
    solved
        .into_iter()
        .map(|s| ReplicaOut {
            sum: s.u_over_b.iter().map(|u| u - per_site).sum(),
            block_sum: s.blocks_over_b.iter().map(|b| b - per_block).sum(),
            top_blocks: keep_top(s.blocks_over_b, keep),
            top_sites: keep_top(s.u_over_b, keep),
        })
        .collect()
}

fn finish_t(
    stats: &mut LimitTStats,
    outs: Vec<ReplicaOut>,
    law: &StableLaw,
    replicas: usize,
) -> Result<()> {
    stats.status = Status::Done;
    stats.samples = outs.iter().map(|o| o.sum).collect();
    stats.block_samples = outs.iter().map(|o| o.block_sum).collect();
    stats.ks = Some(law.ks(&stats.samples)?);
    let k = replicas;
    let blocks: Vec<f64> = outs
        .iter()
        .flat_map(|o| o.top_blocks.iter().copied())
        .collect();
    let (pool, sites_per) = if blocks.len() > k {
        (blocks, stats.block_sites)
    } else {
        (
            outs.iter()
                .flat_map(|o| o.top_sites.iter().copied())
                .collect::<Vec<_>>(),
            1,
        )
    };
    if pool.len() > k {
        stats.hill = hill_estimator(&pool, k).ok();
        stats.hill_k = k;
        stats.hill_block_sites = sites_per;
    }
    Ok(())
}

/// `|Q_{L_α(t)}| e^{-φ(log B_α(t)/t + log x/t + χ)}` with `|Q_L| = e^{φ(h_{αt})}`,
/// i.e. `exp(φ(h_{αt}) - φ(h_{αt} + log x / t))`.
pub fn lemma_alpha_ratio(
    spec: &PotentialSpec,
    alpha: f64,
    chi: f64,
    t: f64,
    x: f64,
) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::Domain(format!("ratio needs x > 0, got {x}")));
    }
    let h = crate::scalings::h_of_t(spec, alpha * t)?;
    let log_b_over_t = h - chi;
    Ok((spec.phi(h)? + spec.log_tail(log_b_over_t + x.ln() / t + chi)).exp())
}

/// The truncated-moment expression of the moment proposition and its limit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentCheck {
    pub numeric: f64,
    pub target: f64,
}

impl MomentCheck {
    pub fn rel_error(&self) -> f64 {
        if self.target == 0.0 {
            self.numeric.abs()
        } else {
            ((self.numeric - self.target) / self.target).abs()
        }
    }
}

/// Scales shared by the Condition P quantities at one `t`.
struct Surrogate<'a> {
    law: BlockLaw<'a>,
    t: f64,
    log_b: f64,
    /// `log(|Q_L| / |Q_l|)`.
    log_ratio: f64,
}

impl<'a> Surrogate<'a> {
    fn new(
        spec: &'a PotentialSpec,
        alpha: f64,
        chi: f64,
        d: usize,
        t: f64,
        quad: &QuadratureConfig,
    ) -> Result<Self> {
        let h = crate::scalings::h_of_t(spec, alpha * t)?;
        let log_l = spec.phi(h)?;
        let log_sites = log_box_sites(block_radius(spec, t, quad)?, d);
        Ok(Self {
            law: BlockLaw::new(spec, chi, log_sites),
            t,
            log_b: t * (h - chi),
            log_ratio: log_l - log_sites,
        })
    }

    /// `(|Q_L|/|Q_l|) E[Z^p 1{lo < Z ≤ hi}]` for `Z = e^{tμ}/B`.
    fn scaled_moment(&self, p: f64, lo: f64, hi: f64, quad: &QuadratureConfig) -> Result<f64> {
        let y_lo = if lo > 0.0 { lo.ln() } else { f64::NEG_INFINITY };
        let y_hi = hi.ln();
        Ok((self.log_ratio
            + self
                .law
                .log_partial_moment(self.t, self.log_b, p, y_lo, y_hi, quad)?)
        .exp())
    }

    fn raw_moment(&self, p: f64, lo: f64, hi: f64, quad: &QuadratureConfig) -> Result<f64> {
        let y_lo = if lo > 0.0 { lo.ln() } else { f64::NEG_INFINITY };
        Ok(self
            .law
            .log_partial_moment(self.t, self.log_b, p, y_lo, hi.ln(), quad)?
            .exp())
    }

    /// `P(Z ≥ level)`.
    fn tail(&self, level: f64) -> f64 {
        self.law.log_tail((self.log_b + level.ln()) / self.t).exp()
    }
}

/// `(|Q_L|/|Q_l|)⟨(e^{tμ}/B)^p 1{·}⟩` under the κ = 0 surrogate law of `μ_t`,
/// with the truncation `Z ≤ τ` for `p > α`, `Z > τ` for `p < α`, and
/// `1{Z ≤ τ} - 1{Z ≤ 1}` for `p = α`.
#[allow(clippy::too_many_arguments)]
pub fn momente_check(
    spec: &PotentialSpec,
    alpha: f64,
    chi: f64,
    d: usize,
    p: f64,
    tau: f64,
    t: f64,
    quad: &QuadratureConfig,
) -> Result<MomentCheck> {
    if !(tau > 0.0 && p > 0.0) {
        return Err(Error::Domain(format!(
            "need tau > 0 and p > 0, got tau = {tau}, p = {p}"
        )));
    }
    let s = Surrogate::new(spec, alpha, chi, d, t, quad)?;
    let (numeric, target) = if p > alpha {
        (
            s.scaled_moment(p, 0.0, tau, quad)?,
            alpha / (p - alpha) * tau.powf(p - alpha),
        )
    } else if p < alpha {
        (
            s.scaled_moment(p, tau, f64::INFINITY, quad)?,
            alpha / (alpha - p) * tau.powf(p - alpha),
        )
    } else {
        let v = if tau >= 1.0 {
            if tau == 1.0 {
                0.0
            } else {
                s.scaled_moment(p, 1.0, tau, quad)?
            }
        } else {
            -s.scaled_moment(p, tau, 1.0, quad)?
        };
        (v, alpha * tau.ln())
    };
    Ok(MomentCheck { numeric, target })
}

/// `∫₀^τ x³/(1+x²) dL(x) - ∫_τ^∞ x/(1+x²) dL(x)` for `dL = α x^{-α-1} dx`.
pub fn levy_drift_integrals(alpha: f64, tau: f64, quad: &QuadratureConfig) -> Result<f64> {
    let inner = integrate(
        |x: f64| alpha * x.powf(2.0 - alpha) / (1.0 + x * x),
        0.0,
        tau,
        quad,
    )?
    .value;
    // x = τ/s maps (τ, ∞) onto (0, 1)
    let outer = integrate(
        |s: f64| alpha * tau.powf(1.0 - alpha) * s.powf(alpha) / (s * s + tau * tau),
        0.0,
        1.0,
        quad,
    )?
    .value;
    Ok(inner - outer)
}

/// The drift constant `a` of `F_α` in the `x/(1+x²)` compensation:
/// `α(π/2)/cos(πα/2)` for α ≠ 1 and 0 for α = 1.
pub fn drift_constant(alpha: f64) -> f64 {
    if alpha == 1.0 {
        0.0
    } else {
        let pi = std::f64::consts::PI;
        alpha * (pi / 2.0) / (pi * alpha / 2.0).cos()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TruncatedVariance {
    pub tau: f64,
    pub value: f64,
    /// `α/(2-α) τ^{2-α}`.
    pub second_moment_target: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DriftEntry {
    pub tau: f64,
    /// `k E[Z 1{Z ≤ τ}] - k Ã/B` with `k = |Q_L|/|Q_l|`.
    pub drift: f64,
    pub implied_a: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConditionPRow {
    pub t: f64,
    pub log_blocks: f64,
    /// `max_i P(e^{tμ}/B ≥ ε)`; all blocks share one law.
    pub infinitesimal: f64,
    pub spectral_points: Vec<(f64, f64)>,
    pub spectral_exponent: f64,
    pub spectral_constant: f64,
    pub truncated_variance: Vec<TruncatedVariance>,
    pub drift: Vec<DriftEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConditionPReport {
    pub alpha: f64,
    pub epsilon: f64,
    pub rows: Vec<ConditionPRow>,
    pub theoretical_a: f64,
    /// Stability verdict at the largest `t` (σ² read off the smallest τ).
    pub stable: bool,
}

pub const SPECTRAL_GRID: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
pub const TAU_GRID: [f64; 3] = [1.0, 0.5, 0.25];

/// The four items of Condition P evaluated deterministically along `t_grid`.
pub fn condition_p_report(
    spec: &PotentialSpec,
    alpha: f64,
    chi: f64,
    d: usize,
    t_grid: &[f64],
    epsilon: f64,
    quad: &QuadratureConfig,
) -> Result<ConditionPReport> {
    let regime = AlphaRegime::of(alpha)?;
    if !(epsilon > 0.0) {
        return Err(Error::Domain(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let mut rows = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let s = Surrogate::new(spec, alpha, chi, d, t, quad)?;
        let spectral_points = SPECTRAL_GRID
            .iter()
            .map(|&x| Ok((x, lemma_alpha_ratio(spec, alpha, chi, t, x)?)))
            .collect::<Result<Vec<_>>>()?;
        let fit = petrov_verdict(&spectral_points, 0.0, alpha, f64::INFINITY)?;
        let mut truncated_variance = Vec::new();
        let mut drift = Vec::new();
        let k = s.log_ratio.exp();
        let centre = match regime {
            AlphaRegime::Below1 => 0.0,
            AlphaRegime::Above1 => s.raw_moment(1.0, 0.0, f64::INFINITY, quad)?,
            AlphaRegime::One => s.raw_moment(1.0, 0.0, 1.0, quad)?,
        };
        for &tau in &TAU_GRID {
            let m1 = s.raw_moment(1.0, 0.0, tau, quad)?;
            let m2 = s.scaled_moment(2.0, 0.0, tau, quad)?;
            truncated_variance.push(TruncatedVariance {
                tau,
                value: m2 - k * m1 * m1,
                second_moment_target: alpha / (2.0 - alpha) * tau.powf(2.0 - alpha),
            });
            let dval = k * (m1 - centre);
            drift.push(DriftEntry {
                tau,
                drift: dval,
                implied_a: dval - levy_drift_integrals(alpha, tau, quad)?,
            });
        }
        rows.push(ConditionPRow {
            t,
            log_blocks: s.log_ratio,
            infinitesimal: s.tail(epsilon),
            spectral_exponent: fit.exponent,
            spectral_constant: fit.constant,
            spectral_points,
            truncated_variance,
            drift,
        });
    }
    let stable = match rows.last() {
        Some(last) => {
            let sigma2 = last
                .truncated_variance
                .last()
                .map_or(f64::INFINITY, |v| v.value);
            // σ² is the τ → 0 limit; the τ^{2-α} target at the smallest τ
            // bounds what a vanishing limit may leave at finite τ
            let allowance = last
                .truncated_variance
                .last()
                .map_or(0.0, |v| 2.0 * v.second_moment_target);
            petrov_verdict(&last.spectral_points, sigma2, alpha, allowance)?.stable
        }
        None => false,
    };
    Ok(ConditionPReport {
        alpha,
        epsilon,
        rows,
        theoretical_a: drift_constant(alpha),
        stable,
    })
}

#[derive(Clone, Debug)]
pub struct SllnConfig {
    pub spec: PotentialSpec,
    pub kappa: f64,
    pub chi: f64,
    pub d: usize,
    pub t_grid: Vec<f64>,
    /// `log|Q_r| = H(2t) - 2H(t) + margin·t` unless `sites` is given.
    pub margin: f64,
    pub sites: Option<u64>,
    pub replicas: usize,
    pub band: f64,
    pub master_seed: u64,
    pub budget: Budget,
    pub quad: QuadratureConfig,
}

impl SllnConfig {
    pub fn new(spec: PotentialSpec, t_grid: Vec<f64>, replicas: usize, master_seed: u64) -> Self {
        Self {
            spec,
            kappa: 0.0,
            chi: 0.0,
            d: 1,
            t_grid,
            margin: 1.0,
            sites: None,
            replicas,
            band: 0.1,
            master_seed,
            budget: Budget::default(),
            quad: QuadratureConfig::default(),
        }
    }

    pub fn echo(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "family={}", self.spec.label());
        let _ = writeln!(s, "kappa={}", self.kappa);
        let _ = writeln!(s, "d={}", self.d);
        let _ = writeln!(s, "chi={}", self.chi);
        let _ = writeln!(s, "t_grid={}", join(&self.t_grid));
        let _ = writeln!(s, "margin={}", self.margin);
        let _ = writeln!(
            s,
            "sites={}",
            self.sites.map_or("auto".to_string(), |n| n.to_string())
        );
        let _ = writeln!(s, "replicas={}", self.replicas);
        let _ = writeln!(s, "band={}", self.band);
        let _ = writeln!(s, "master_seed={}", self.master_seed);
        echo_budget(&mut s, &self.budget);
        let _ = writeln!(s, "quad_rel_tol={}", self.quad.rel_tol);
        s
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SllnTStats {
    pub t: f64,
    pub status: Status,
    pub n_sites: u64,
    pub log_normaliser: f64,
    /// Per replica `(1/|Q|) Σ_x u(t,x)/⟨u(t,0)⟩`.
    pub averages: Vec<f64>,
    pub mean: f64,
    pub empirical_variance: f64,
    /// `(e^{H(2t)-2H(t)} - 1)/|Q|`, exact in the i.i.d. case.
    pub exact_variance: Option<f64>,
    /// `e^{H(2t)-2H(t)}/|Q|`.
    pub bound: f64,
    pub within_band: usize,
    /// `Σ_{s ≤ t} e^{-s}` over the grid so far.
    pub sum_exp_neg_t: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SllnRecord {
    pub config_hash: String,
    pub config_echo: String,
    pub master_seed: u64,
    pub rng_derivation: String,
    pub per_t: Vec<SllnTStats>,
}

/// Normalised spatial averages along `t_grid` and their variance against the
/// analytic value.
pub fn slln_experiment(cfg: &SllnConfig) -> Result<SllnRecord> {
    validate_common(cfg.kappa, cfg.d, cfg.chi, &cfg.t_grid, cfg.replicas)?;
    cfg.budget.validate()?;
    let mut per_t = Vec::new();
    let mut partial = 0.0;
    for (ti, &t) in cfg.t_grid.iter().enumerate() {
        partial += (-t).exp();
        let h1 = cfg.spec.cumulant(t, &cfg.quad)?;
        let h2 = cfg.spec.cumulant(2.0 * t, &cfg.quad)?;
        let n_sites = match cfg.sites {
            Some(n) => n as f64,
            None => crate::scalings::slln_radius(&cfg.spec, t, cfg.d, cfg.margin, &cfg.quad)?
                .log_sites
                .exp()
                .round(),
        };
        let log_norm = if cfg.kappa == 0.0 {
            h1
        } else {
            annealed_moment(
                &cfg.spec,
                1.0,
                t,
                cfg.kappa,
                cfg.chi,
                MomentMethod::LaplaceIntegral,
                &cfg.quad,
            )?
        };
        let mut stats = SllnTStats {
            t,
            status: Status::BudgetExceeded,
            n_sites: n_sites.min(u64::MAX as f64) as u64,
            log_normaliser: log_norm,
            averages: Vec::new(),
            mean: f64::NAN,
            empirical_variance: f64::NAN,
            exact_variance: None,
            bound: (h2 - 2.0 * h1).exp() / n_sites,
            within_band: 0,
            sum_exp_neg_t: partial,
        };
        let averages: Vec<f64> = if cfg.kappa == 0.0 {
            if !(n_sites >= 1.0
                && n_sites <= cfg.budget.max_sites_per_replica as f64
                && n_sites * cfg.replicas as f64 <= cfg.budget.max_total_sites as f64)
            {
                per_t.push(stats);
                continue;
            }
            let n = n_sites as u64;
            stats.exact_variance = Some((h2 - 2.0 * h1).exp_m1() / n_sites);
            (0..cfg.replicas)
                .into_par_iter()
                .map(|r| {
                    let mut rng = RngStream::derive(cfg.master_seed, &[ti as u64, r as u64]);
                    let s: f64 = (0..n)
                        .map(|_| (t * cfg.spec.sample(&mut rng) - h1).exp())
                        .sum();
                    s / n_sites
                })
                .collect()
        } else {
            let lattice = match box_for_sites(n_sites, cfg.d) {
                Ok(b) if (b.len() as u64) <= cfg.budget.max_solver_sites => b,
                _ => {
                    per_t.push(stats);
                    continue;
                }
            };
            stats.n_sites = lattice.len() as u64;
            stats.bound = (h2 - 2.0 * h1).exp() / lattice.len() as f64;
            (0..cfg.replicas)
                .into_par_iter()
                .map(|r| {
                    let mut rng = RngStream::derive(cfg.master_seed, &[ti as u64, r as u64]);
                    let field = PotentialField::sample(lattice.clone(), &cfg.spec, &mut rng);
                    let h = HamiltonianOperator::assemble(&field, cfg.kappa)?;
                    let u = solve_ode(&h, t, &vec![1.0; h.dim()], 1e-10)?;
                    Ok(u.values
                        .iter()
                        .map(|v| (v.ln() - log_norm).exp())
                        .sum::<f64>()
                        / h.dim() as f64)
                })
                .collect::<Result<Vec<_>>>()?
        };
        let m = averages.len() as f64;
        stats.mean = averages.iter().sum::<f64>() / m;
        stats.empirical_variance = if averages.len() > 1 {
            averages
                .iter()
                .map(|a| (a - stats.mean).powi(2))
                .sum::<f64>()
                / (m - 1.0)
        } else {
            0.0
        };
        stats.within_band = averages
            .iter()
            .filter(|a| (*a - 1.0).abs() <= cfg.band)
            .count();
        stats.averages = averages;
        stats.status = Status::Done;
        per_t.push(stats);
    }
    Ok(SllnRecord {
        config_hash: sha256_hex(&cfg.echo()),
        config_echo: cfg.echo(),
        master_seed: cfg.master_seed,
        rng_derivation: DERIVATION.to_string(),
        per_t,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub t: f64,
    pub replica: usize,
    pub radius: f64,
    pub log_u_over_t: f64,
    pub xi_max: f64,
    pub lambda1: f64,
    /// `log u(t,0)/t - ξ^{(1)} + χ`.
    pub gap_u: f64,
    /// `λ₁ - ξ^{(1)} + χ`.
    pub gap_lambda: f64,
    /// `log u(t,0) / log Σ_{Q_t} u(t,x)`.
    pub remark_ratio: f64,
}

/// Quenched exponents on `Q_t` for each `t` and replica.
#[allow(clippy::too_many_arguments)]
pub fn exponent_diagnostics(
    spec: &PotentialSpec,
    kappa: f64,
    chi: f64,
    d: usize,
    t_grid: &[f64],
    replicas: usize,
    master_seed: u64,
    budget: &Budget,
) -> Result<Vec<DiagnosticRow>> {
    validate_common(kappa, d, chi, t_grid, replicas)?;
    if kappa == 0.0 && chi != 0.0 {
        return Err(Error::Config("chi must be 0 when kappa = 0".into()));
    }
    let mut rows = Vec::new();
    for (ti, &t) in t_grid.iter().enumerate() {
        let lattice = LatticeBox::centered(d, t)?;
        if lattice.len() as u64 > budget.max_solver_sites {
            return Err(Error::Budget(format!(
                "Q_{t} has {} sites, cap {}",
                lattice.len(),
                budget.max_solver_sites
            )));
        }
        let origin = lattice.index_of(&vec![0; d]).expect("origin lies in Q_t");
        let batch = (0..replicas)
            .into_par_iter()
            .map(|r| {
                let mut rng = RngStream::derive(master_seed, &[ti as u64, r as u64]);
                let field = PotentialField::sample(lattice.clone(), spec, &mut rng);
                let h = HamiltonianOperator::assemble(&field, kappa)?;
                let (log_u0, log_total) = if kappa == 0.0 {
                    let m = field.max().1;
                    let total = t * m
                        + field
                            .values
                            .iter()
                            .map(|v| (t * (v - m)).exp())
                            .sum::<f64>()
                            .ln();
                    (t * field.values[origin], total)
                } else {
                    let res = crate::krylov::expm_action(
                        &h,
                        h.norm1(),
                        t,
                        &vec![1.0; h.dim()],
                        crate::solver::KRYLOV_DIM,
                        1e-10,
                    )?;
                    (
                        res.log_scale + res.vector[origin].ln(),
                        res.log_scale + res.vector.iter().sum::<f64>().ln(),
                    )
                };
                let xi_max = field.max().1;
                let lambda1 = principal_eigenpair(&h, 1e-10)?.0;
                Ok(DiagnosticRow {
                    t,
                    replica: r,
                    radius: t,
                    log_u_over_t: log_u0 / t,
                    xi_max,
                    lambda1,
                    gap_u: log_u0 / t - xi_max + chi,
                    gap_lambda: lambda1 - xi_max + chi,
                    remark_ratio: log_u0 / log_total,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.extend(batch);
    }
    Ok(rows)
}

/// Escape contribution relative to the solution over an inner block,
/// `Σ_x escape_mass(x) / Σ_x u(t,x)` for `x` in a box of radius `⌈scale·t²⌉`
/// centred in a Dirichlet box of twice that radius. Returns
/// `(t, inner radius, ratio)` per grid point.
#[allow(clippy::too_many_arguments)]
pub fn cut_proxy(
    spec: &PotentialSpec,
    kappa: f64,
    d: usize,
    t_grid: &[f64],
    scale: f64,
    n_paths: usize,
    master_seed: u64,
    budget: &Budget,
) -> Result<Vec<(f64, f64, f64)>> {
    validate_common(kappa, d, 0.0, t_grid, 1)?;
    let mut out = Vec::new();
    for (ti, &t) in t_grid.iter().enumerate() {
        let r_in = (scale * t * t).ceil().max(1.0);
        let outer = LatticeBox::centered(d, 2.0 * r_in)?;
        let inner = LatticeBox::centered(d, r_in)?;
        if outer.len() as u64 > budget.max_solver_sites
            || (n_paths * inner.len()) as u64 > budget.max_paths
        {
            return Err(Error::Budget(format!(
                "cut proxy at t = {t} exceeds the budget"
            )));
        }
        let field = PotentialField::sample(
            outer.clone(),
            spec,
            &mut RngStream::derive(master_seed, &[ti as u64]),
        );
        let h = HamiltonianOperator::assemble(&field, kappa)?;
        let u = solve_ode(&h, t, &vec![1.0; h.dim()], 1e-10)?;
        let escaped = (0..inner.len())
            .into_par_iter()
            .map(|i| {
                let x = inner.site(i);
                let mut rng = RngStream::derive(master_seed, &[ti as u64, 1, i as u64]);
                Ok(escape_mass(&field, &inner, kappa, t, &x, n_paths, &mut rng)?.mean)
            })
            .collect::<Result<Vec<f64>>>()?
            .iter()
            .sum::<f64>();
        let mass: f64 = inner
            .sites()
            .map(|x| u.values[outer.index_of(&x).expect("inner lies in outer")])
            .sum();
        out.push((t, r_in, escaped / mass));
    }
    Ok(out)
}

/// Row of the plot table `t,ks,hill,ratio_x05,ratio_x1,ratio_x2,variance,bound`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub t: f64,
    pub ks: Option<f64>,
    pub hill: Option<f64>,
    pub ratio_x05: Option<f64>,
    pub ratio_x1: Option<f64>,
    pub ratio_x2: Option<f64>,
    pub variance: Option<f64>,
    pub bound: Option<f64>,
}

pub const PLOT_HEADER: &str = "t,ks,hill,ratio_x05,ratio_x1,ratio_x2,variance,bound";

pub fn write_plot_csv<W: Write>(rows: &[PlotRow], mut w: W) -> Result<()> {
    writeln!(w, "{PLOT_HEADER}")?;
    let cell = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:e}"));
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.t,
            cell(r.ks),
            cell(r.hill),
            cell(r.ratio_x05),
            cell(r.ratio_x1),
            cell(r.ratio_x2),
            cell(r.variance),
            cell(r.bound)
        )?;
    }
    Ok(())
}

/// Plot rows of a stable-limit record: KS and Hill from the simulation,
/// tail ratios and the truncated variance at τ = 1 from the surrogate.
pub fn limit_plot_rows(cfg: &ExperimentConfig, record: &ExperimentRecord) -> Result<Vec<PlotRow>> {
    record
        .per_t
        .iter()
        .map(|s| {
            let ratio = |x| lemma_alpha_ratio(&cfg.spec, cfg.alpha, cfg.chi, s.t, x).ok();
            let var = momente_check(
                &cfg.spec, cfg.alpha, cfg.chi, cfg.d, 2.0, 1.0, s.t, &cfg.quad,
            )
            .ok();
            Ok(PlotRow {
                t: s.t,
                ks: s.ks,
                hill: s.hill,
                ratio_x05: ratio(0.5),
                ratio_x1: ratio(1.0),
                ratio_x2: ratio(2.0),
                variance: var.map(|m| m.numeric),
                bound: var.map(|m| m.target),
            })
        })
        .collect()
}

pub fn slln_plot_rows(record: &SllnRecord) -> Vec<PlotRow> {
    record
        .per_t
        .iter()
        .map(|s| PlotRow {
            t: s.t,
            variance: (s.status == Status::Done).then_some(s.empirical_variance),
            bound: Some(s.exact_variance.unwrap_or(s.bound)),
            ..Default::default()
        })
        .collect()
}
