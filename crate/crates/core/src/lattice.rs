//! Lattice boxes, potential fields, the Dirichlet Laplacian and the
//! Anderson Hamiltonian `κΔ⁰ + ξ` with its eigenpairs.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::krylov::{self, SymmetricOperator};
use crate::potential::PotentialSpec;
use crate::rng::RngStream;

/// Default cap on the number of sites of a materialised box.
pub const DEFAULT_MAX_SITES: u128 = 1 << 26;
/// Default cap on the size of dense eigen-decompositions.
pub const DEFAULT_DENSE_LIMIT: usize = 4096;

/// `Q_r = center + ([-⌊r⌋, ⌊r⌋]^d ∩ ℤ^d)`, or more generally an inclusive
/// rectangle of lattice points. Sites are in lexicographic order with the
/// first coordinate most significant.
#[derive(Clone, Debug, PartialEq)]
pub struct LatticeBox {
    pub d: usize,
    pub r: f64,
    pub center: Vec<i64>,
    lower: Vec<i64>,
    sides: Vec<usize>,
    len: usize,
}

impl LatticeBox {
    pub fn new(d: usize, r: f64, center: &[i64]) -> Result<Self> {
        Self::with_limit(d, r, center, DEFAULT_MAX_SITES)
    }

    /// Box centered at the origin.
    pub fn centered(d: usize, r: f64) -> Result<Self> {
        Self::new(d, r, &vec![0; d])
    }

    pub fn with_limit(d: usize, r: f64, center: &[i64], max_sites: u128) -> Result<Self> {
        if d == 0 {
            return Err(Error::Config("dimension must be at least 1".into()));
        }
        if !(r >= 0.0 && r.is_finite()) {
            return Err(Error::Config(format!(
                "box radius must be finite and >= 0, got {r}"
            )));
        }
        if center.len() != d {
            return Err(Error::IndexMismatch(format!(
                "center has {} coordinates, d = {d}",
                center.len()
            )));
        }
        let radius = r.floor();
        if radius > 1e15 {
            return Err(Error::SizeLimit {
                requested: u128::MAX,
                limit: max_sites,
            });
        }
        let side = 2 * radius as u128 + 1;
        let count = checked_count(&vec![side; d], max_sites)?;
        Ok(Self {
            d,
            r,
            center: center.to_vec(),
            lower: center.iter().map(|c| c - radius as i64).collect(),
            sides: vec![side as usize; d],
            len: count,
        })
    }

    /// The rectangle `∏_k [lower_k, upper_k]`.
    pub fn from_bounds(lower: &[i64], upper: &[i64]) -> Result<Self> {
        let d = lower.len();
        if d == 0 || upper.len() != d {
            return Err(Error::Config(
                "bounds must be non-empty and of equal dimension".into(),
            ));
        }
        if lower.iter().zip(upper).any(|(a, b)| b < a) {
            return Err(Error::Config(format!(
                "empty rectangle {lower:?}..={upper:?}"
            )));
        }
        let sides: Vec<u128> = lower
            .iter()
            .zip(upper)
            .map(|(a, b)| (b - a) as u128 + 1)
            .collect();
        let len = checked_count(&sides, DEFAULT_MAX_SITES)?;
        let widest = sides.iter().copied().max().unwrap_or(1);
        Ok(Self {
            d,
            r: (widest - 1) as f64 / 2.0,
            center: lower
                .iter()
                .zip(&sides)
                .map(|(a, s)| a + (*s as i64 - 1) / 2)
                .collect(),
            lower: lower.to_vec(),
            sides: sides.iter().map(|s| *s as usize).collect(),
            len,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Lowest corner.
    pub fn lower(&self) -> &[i64] {
        &self.lower
    }

    /// Number of sites along each axis.
    pub fn sides(&self) -> &[usize] {
        &self.sides
    }

    pub fn site(&self, index: usize) -> Vec<i64> {
        let mut out = vec![0; self.d];
        let mut rem = index;
        for k in (0..self.d).rev() {
            out[k] = (rem % self.sides[k]) as i64 + self.lower[k];
            rem /= self.sides[k];
        }
        out
    }

    pub fn index_of(&self, x: &[i64]) -> Option<usize> {
        if x.len() != self.d {
            return None;
        }
        let mut idx = 0usize;
        for k in 0..self.d {
            let off = x[k] - self.lower[k];
            if off < 0 || off >= self.sides[k] as i64 {
                return None;
            }
            idx = idx * self.sides[k] + off as usize;
        }
        Some(idx)
    }

    pub fn contains(&self, x: &[i64]) -> bool {
        self.index_of(x).is_some()
    }

    /// Whether `other` lies entirely inside this box.
    pub fn encloses(&self, other: &LatticeBox) -> bool {
        self.d == other.d
            && (0..self.d).all(|k| {
                other.lower[k] >= self.lower[k]
                    && other.lower[k] + other.sides[k] as i64
                        <= self.lower[k] + self.sides[k] as i64
            })
    }

    pub fn sites(&self) -> impl Iterator<Item = Vec<i64>> + '_ {
        (0..self.len).map(|i| self.site(i))
    }

    /// Indices of the in-box nearest neighbours of site `i`, and the number
    /// of neighbours that fall outside.
    pub fn neighbors(&self, i: usize) -> (Vec<usize>, usize) {
        let mut inside = Vec::with_capacity(2 * self.d);
        let mut outside = 0;
        let mut stride = 1usize;
        for k in (0..self.d).rev() {
            let side = self.sides[k];
            let coord = (i / stride) % side;
            if coord > 0 {
                inside.push(i - stride);
            } else {
                outside += 1;
            }
            if coord + 1 < side {
                inside.push(i + stride);
            } else {
                outside += 1;
            }
            stride *= side;
        }
        inside.sort_unstable();
        (inside, outside)
    }
}

fn checked_count(sides: &[u128], max_sites: u128) -> Result<usize> {
    let count = sides.iter().fold(1u128, |c, s| c.saturating_mul(*s));
    if count > max_sites {
        return Err(Error::SizeLimit {
            requested: count,
            limit: max_sites,
        });
    }
    Ok(count as usize)
}

/// `ξ` restricted to a box.
#[derive(Clone, Debug, PartialEq)]
pub struct PotentialField {
    pub lattice: LatticeBox,
    pub values: Vec<f64>,
}

impl PotentialField {
    pub fn new(lattice: LatticeBox, values: Vec<f64>) -> Result<Self> {
        if values.len() != lattice.len() {
            return Err(Error::IndexMismatch(format!(
                "{} values for a box of {} sites",
                values.len(),
                lattice.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "potential values must be finite, got {v}"
            )));
        }
        Ok(Self { lattice, values })
    }

    /// I.i.d. draws in site order.
    pub fn sample(lattice: LatticeBox, spec: &PotentialSpec, rng: &mut RngStream) -> Self {
        let values = (0..lattice.len()).map(|_| spec.sample(rng)).collect();
        Self { lattice, values }
    }

    /// `ξ^{(1)}`, the maximum over the box, with its site index.
    pub fn max(&self) -> (usize, f64) {
        self.values
            .iter()
            .copied()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, v)| if v > acc.1 { (i, v) } else { acc },
            )
    }

    /// The field on a sub-box, which must lie inside this one.
    pub fn restrict(&self, sub: &LatticeBox) -> Result<Self> {
        let mut values = Vec::with_capacity(sub.len());
        for x in sub.sites() {
            let i = self.lattice.index_of(&x).ok_or_else(|| {
                Error::IndexMismatch(format!("site {x:?} lies outside the field's box"))
            })?;
            values.push(self.values[i]);
        }
        Ok(Self {
            lattice: sub.clone(),
            values,
        })
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write_header(&mut w, self.lattice.d, &["xi"])?;
        for (i, v) in self.values.iter().enumerate() {
            write_site(&mut w, &self.lattice.site(i))?;
            writeln!(w, "{v:e}")?;
        }
        Ok(())
    }

    /// Reads a field written by [`write_csv`](Self::write_csv) into `lattice`.
    pub fn read_csv<R: BufRead>(lattice: LatticeBox, r: R) -> Result<Self> {
        let d = lattice.d;
        let mut values = vec![f64::NAN; lattice.len()];
        let mut seen = 0usize;
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if n == 0 || line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != d + 1 {
                return Err(Error::IndexMismatch(format!(
                    "line {}: expected {} columns",
                    n + 1,
                    d + 1
                )));
            }
            let x = cols[..d]
                .iter()
                .map(|c| c.trim().parse::<i64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
            let v: f64 = cols[d]
                .trim()
                .parse()
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
            let i = lattice
                .index_of(&x)
                .ok_or_else(|| Error::IndexMismatch(format!("site {x:?} lies outside the box")))?;
            if values[i].is_nan() {
                seen += 1;
            }
            values[i] = v;
        }
        if seen != lattice.len() {
            return Err(Error::IndexMismatch(format!(
                "{seen} of {} sites present",
                lattice.len()
            )));
        }
        Self::new(lattice, values)
    }
}

pub(crate) fn write_header<W: Write>(w: &mut W, d: usize, tail: &[&str]) -> std::io::Result<()> {
    let mut cols: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
    cols.extend(tail.iter().map(|s| s.to_string()));
    writeln!(w, "{}", cols.join(","))
}

pub(crate) fn write_site<W: Write>(w: &mut W, x: &[i64]) -> std::io::Result<()> {
    for c in x {
        write!(w, "{c},")?;
    }
    Ok(())
}

/// `(Δ⁰f)(x) = Σ_{|y-x|=1} [f̃(y) - f(x)]` with `f̃ = 0` outside the box.
pub fn laplacian_apply(lattice: &LatticeBox, f: &[f64]) -> Result<Vec<f64>> {
    if f.len() != lattice.len() {
        return Err(Error::IndexMismatch(format!(
            "{} values for {} sites",
            f.len(),
            lattice.len()
        )));
    }
    let deg = 2.0 * lattice.d as f64;
    Ok((0..lattice.len())
        .map(|i| {
            let (nb, _) = lattice.neighbors(i);
            nb.iter().map(|&j| f[j]).sum::<f64>() - deg * f[i]
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Boundary {
    Dirichlet,
}

/// Sparse `κΔ⁰ + ξ` on a box, neighbours stored in compressed rows.
#[derive(Clone, Debug)]
pub struct HamiltonianOperator {
    pub kappa: f64,
    pub field: PotentialField,
    pub boundary: Boundary,
    diag: Vec<f64>,
    row_start: Vec<usize>,
    cols: Vec<usize>,
}

impl HamiltonianOperator {
    pub fn assemble(field: &PotentialField, kappa: f64) -> Result<Self> {
        if !(kappa >= 0.0 && kappa.is_finite()) {
            return Err(Error::Config(format!(
                "kappa must be finite and >= 0, got {kappa}"
            )));
        }
        let lattice = &field.lattice;
        let deg = 2.0 * lattice.d as f64;
        let diag = field.values.iter().map(|v| v - deg * kappa).collect();
        let mut row_start = Vec::with_capacity(lattice.len() + 1);
        let mut cols = Vec::new();
        row_start.push(0);
        if kappa > 0.0 {
            for i in 0..lattice.len() {
                cols.extend(lattice.neighbors(i).0);
                row_start.push(cols.len());
            }
        } else {
            row_start.resize(lattice.len() + 1, 0);
        }
        Ok(Self {
            kappa,
            field: field.clone(),
            boundary: Boundary::Dirichlet,
            diag,
            row_start,
            cols,
        })
    }

    pub fn lattice(&self) -> &LatticeBox {
        &self.field.lattice
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.diag
    }

    /// Number of stored off-diagonal entries (twice the number of bonds).
    pub fn off_diagonal_count(&self) -> usize {
        self.cols.len()
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; x.len()];
        self.apply(x, &mut y);
        y
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = self.diag[i];
            for &j in &self.cols[self.row_start[i]..self.row_start[i + 1]] {
                m[(i, j)] = self.kappa;
            }
        }
        m
    }

    /// Induced 1-norm (equal to the ∞-norm by symmetry).
    pub fn norm1(&self) -> f64 {
        (0..self.dim())
            .map(|i| {
                self.diag[i].abs() + self.kappa * (self.row_start[i + 1] - self.row_start[i]) as f64
            })
            .fold(0.0, f64::max)
    }
}

impl SymmetricOperator for HamiltonianOperator {
    fn dim(&self) -> usize {
        self.diag.len()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.diag.len() {
            let mut s = self.diag[i] * x[i];
            for &j in &self.cols[self.row_start[i]..self.row_start[i + 1]] {
                s += self.kappa * x[j];
            }
            y[i] = s;
        }
    }
}

/// Flips `v` so its first non-negligible component is positive.
pub(crate) fn fix_sign(v: &mut [f64]) {
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-10 * scale) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Largest eigenvalue of `H` with a unit eigenvector, `‖He - λe‖ ≤ tol`.
pub fn principal_eigenpair(h: &HamiltonianOperator, tol: f64) -> Result<(f64, Vec<f64>)> {
    let n = h.dim();
    let (imax, vmax) = h.field.max();
    if h.kappa == 0.0 {
        let mut e = vec![0.0; n];
        e[imax] = 1.0;
        return Ok((vmax, e));
    }
    let mut v: Vec<f64> = vec![1.0; n];
    v[imax] += (n as f64).sqrt();
    let m = n.min(40);
    let mut residual = f64::INFINITY;
    let max_restarts = 500;
    for _ in 0..max_restarts {
        let basis = krylov::lanczos(h, &v, m);
        let (_, vecs) = krylov::ritz(&basis);
        let coeffs: Vec<f64> = vecs.column(0).iter().copied().collect();
        let mut x = basis.combine(&coeffs);
        let nx = krylov::norm(&x);
        x.iter_mut().for_each(|c| *c /= nx);
        let hx = h.matvec(&x);
        let theta = krylov::dot(&x, &hx);
        residual = hx
            .iter()
            .zip(&x)
            .map(|(a, b)| (a - theta * b).powi(2))
            .sum::<f64>()
            .sqrt();
        if residual <= tol {
            fix_sign(&mut x);
            return Ok((theta, x));
        }
        v = x;
    }
    if n <= DEFAULT_DENSE_LIMIT {
        let (vals, vecs) = full_spectrum(h)?;
        let mut e = vecs.into_iter().next().expect("non-empty spectrum");
        fix_sign(&mut e);
        return Ok((vals[0], e));
    }
    Err(Error::NoConvergence {
        iterations: max_restarts,
        residual,
    })
}

/// All eigenpairs by dense decomposition, eigenvalues descending.
pub fn full_spectrum(h: &HamiltonianOperator) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    full_spectrum_with_limit(h, DEFAULT_DENSE_LIMIT)
}

pub fn full_spectrum_with_limit(
    h: &HamiltonianOperator,
    limit: usize,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = h.dim();
    if n > limit {
        return Err(Error::SizeLimit {
            requested: n as u128,
            limit: limit as u128,
        });
    }
    let eig = SymmetricEigen::new(h.to_dense());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = order
        .iter()
        .map(|&i| {
            let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            fix_sign(&mut v);
            v
        })
        .collect();
    Ok((vals, vecs))
}
