//! Lanczos process with full reorthogonalisation, shared by the principal
//! eigensolver and the matrix-exponential propagator.

use nalgebra::{DMatrix, SymmetricEigen};

/// A real symmetric linear operator.
pub trait SymmetricOperator {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], y: &mut [f64]);
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Orthonormal Krylov basis `V` and tridiagonal `T = Vᵀ A V`.
#[derive(Clone, Debug)]
pub struct LanczosBasis {
    pub vectors: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    /// Off-diagonals; `beta[j]` couples `v_j` and `v_{j+1}`. The final entry
    /// is the residual norm `β_m` of the last step.
    pub beta: Vec<f64>,
    /// The Krylov space became invariant (exact representation).
    pub invariant: bool,
}

impl LanczosBasis {
    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn tridiagonal(&self) -> DMatrix<f64> {
        let m = self.len();
        let mut t = DMatrix::zeros(m, m);
        for j in 0..m {
            t[(j, j)] = self.alpha[j];
            if j + 1 < m {
                t[(j, j + 1)] = self.beta[j];
                t[(j + 1, j)] = self.beta[j];
            }
        }
        t
    }

    /// `Σ_j c_j v_j`.
    pub fn combine(&self, coeffs: &[f64]) -> Vec<f64> {
        let n = self.vectors[0].len();
        let mut out = vec![0.0; n];
        for (c, v) in coeffs.iter().zip(&self.vectors) {
            for (o, x) in out.iter_mut().zip(v) {
                *o += c * x;
            }
        }
        out
    }
}

/// Runs at most `m` Lanczos steps from the (non-zero) start vector `v0`.
pub fn lanczos<A: SymmetricOperator + ?Sized>(op: &A, v0: &[f64], m: usize) -> LanczosBasis {
    let n = op.dim();
    let m = m.min(n).max(1);
    let beta0 = norm(v0);
    let mut vectors = vec![v0.iter().map(|x| x / beta0).collect::<Vec<_>>()];
    let mut alpha = Vec::with_capacity(m);
    let mut beta = Vec::with_capacity(m);
    let mut w = vec![0.0; n];
    let mut invariant = false;
    for j in 0..m {
        op.apply(&vectors[j], &mut w);
        let a = dot(&w, &vectors[j]);
        alpha.push(a);
        let scale = w.iter().fold(0.0f64, |s, x| s.max(x.abs())).max(a.abs());
        // two passes of classical Gram–Schmidt against the whole basis
        for _ in 0..2 {
            for v in &vectors {
                let c = dot(&w, v);
                for (wi, vi) in w.iter_mut().zip(v) {
                    *wi -= c * vi;
                }
            }
        }
        let b = norm(&w);
        beta.push(b);
        if b <= 1e-13 * scale.max(1e-300) || j + 1 == n {
            invariant = true;
            break;
        }
        if j + 1 < m {
            vectors.push(w.iter().map(|x| x / b).collect());
        }
    }
    LanczosBasis {
        vectors,
        alpha,
        beta,
        invariant,
    }
}

/// Eigen-decomposition of the tridiagonal part, eigenvalues descending.
pub fn ritz(basis: &LanczosBasis) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(basis.tridiagonal());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| {
        eig.eigenvectors[(r, order[c])]
    });
    (vals, vecs)
}

/// `exp(τT)·e₁` for the tridiagonal part, returned as `(y, log_scale)` with
/// the true vector equal to `e^{log_scale}·y`, together with the
/// a-posteriori estimate `τ β_m |e_mᵀ φ₁(τT) e₁|` relative to `‖y‖`.
fn tridiagonal_exp(basis: &LanczosBasis, tau: f64) -> (Vec<f64>, f64, f64) {
    let (vals, q) = ritz(basis);
    let k = vals.len();
    let zmax = tau * vals[0];
    let mut y = vec![0.0; k];
    let mut phi_last = 0.0;
    for i in 0..k {
        let z = tau * vals[i];
        let w = (z - zmax).exp() * q[(0, i)];
        for (r, yr) in y.iter_mut().enumerate() {
            *yr += q[(r, i)] * w;
        }
        // φ₁(z) e^{-zmax} = (e^{z-zmax} - e^{-zmax}) / z
        let phi = if z.abs() < 1e-8 {
            (-zmax).exp() * (1.0 + 0.5 * z)
        } else {
            ((z - zmax).exp() - (-zmax).exp()) / z
        };
        phi_last += q[(k - 1, i)] * phi * q[(0, i)];
    }
    let rel = if basis.invariant {
        0.0
    } else {
        tau * basis.beta[k - 1] * phi_last.abs() / norm(&y).max(f64::MIN_POSITIVE)
    };
    (y, zmax, rel)
}

/// Outcome of [`expm_action`].
#[derive(Clone, Debug)]
pub struct ExpmAction {
    /// `exp(tA)v = e^{log_scale}·vector`.
    pub vector: Vec<f64>,
    pub log_scale: f64,
    /// Accumulated relative error estimate.
    pub error: f64,
    pub substeps: usize,
}

impl ExpmAction {
    pub fn into_values(self) -> Vec<f64> {
        let s = self.log_scale.exp();
        self.vector.into_iter().map(|x| x * s).collect()
    }
}

/// `exp(tA)v` by Lanczos with substeps `τ` satisfying `‖A‖₁τ ≤ 20`, halving
/// `τ` whenever the local error estimate exceeds its share `tol·τ/t`.
pub fn expm_action<A: SymmetricOperator + ?Sized>(
    op: &A,
    norm1: f64,
    t: f64,
    v: &[f64],
    m: usize,
    tol: f64,
) -> crate::Result<ExpmAction> {
    let mut w = v.to_vec();
    let mut log_scale = 0.0;
    let mut error = 0.0;
    let mut substeps = 0;
    let nominal = if norm1 > 0.0 {
        (20.0 / norm1).min(t)
    } else {
        t
    };
    let mut elapsed = 0.0;
    while elapsed < t {
        let beta = norm(&w);
        if beta == 0.0 {
            break;
        }
        let basis = lanczos(op, &w, m);
        let mut tau = nominal.min(t - elapsed);
        loop {
            let (y, zmax, rel) = tridiagonal_exp(&basis, tau);
            if rel <= tol * tau / t || basis.invariant {
                w = basis.combine(&y);
                log_scale += zmax + beta.ln();
                let nw = norm(&w);
                w.iter_mut().for_each(|x| *x /= nw);
                log_scale += nw.ln();
                error += rel;
                break;
            }
            tau *= 0.5;
            if tau < 1e-12 * t {
                return Err(crate::Error::StiffFailure {
                    achieved_time: elapsed,
                    target_time: t,
                });
            }
        }
        elapsed += tau;
        substeps += 1;
    }
    Ok(ExpmAction {
        vector: w,
        log_scale,
        error,
        substeps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Dense(DMatrix<f64>);

    impl SymmetricOperator for Dense {
        fn dim(&self) -> usize {
            self.0.nrows()
        }
        fn apply(&self, x: &[f64], y: &mut [f64]) {
            for i in 0..self.dim() {
                y[i] = (0..self.dim()).map(|j| self.0[(i, j)] * x[j]).sum();
            }
        }
    }

    fn dense_expv(a: &DMatrix<f64>, t: f64, v: &[f64]) -> Vec<f64> {
        let eig = SymmetricEigen::new(a.clone());
        let n = v.len();
        let mut out = vec![0.0; n];
        for k in 0..n {
            let e = eig.eigenvectors.column(k);
            let c: f64 = (0..n).map(|i| e[i] * v[i]).sum::<f64>() * (t * eig.eigenvalues[k]).exp();
            for i in 0..n {
                out[i] += c * e[i];
            }
        }
        out
    }

    fn random_symmetric(n: usize, seed: u64) -> DMatrix<f64> {
        let mut s = seed;
        let mut next = || {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let x = next() * 4.0;
                m[(i, j)] = x;
                m[(j, i)] = x;
            }
        }
        m
    }

    #[test]
    fn lanczos_is_orthonormal() {
        let a = Dense(random_symmetric(50, 1));
        let b = lanczos(&a, &vec![1.0; 50], 30);
        for i in 0..b.vectors.len() {
            for j in 0..b.vectors.len() {
                let g = dot(&b.vectors[i], &b.vectors[j]);
                assert!((g - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn small_space_is_invariant() {
        let a = Dense(random_symmetric(6, 2));
        let b = lanczos(&a, &[1.0, 0.0, 2.0, 0.0, 0.0, 1.0], 30);
        assert!(b.invariant);
        assert_eq!(b.len(), 6);
    }

    #[test]
    fn expm_matches_dense() {
        for (n, seed, t) in [(5, 3, 1.0), (40, 4, 2.0), (120, 5, 3.0)] {
            let m = random_symmetric(n, seed);
            let norm1 = (0..n)
                .map(|i| (0..n).map(|j| m[(i, j)].abs()).sum::<f64>())
                .fold(0.0, f64::max);
            let v: Vec<f64> = (0..n).map(|i| 1.0 + (i % 3) as f64).collect();
            let want = dense_expv(&m, t, &v);
            let got = expm_action(&Dense(m), norm1, t, &v, 30, 1e-10)
                .unwrap()
                .into_values();
            let scale = norm(&want);
            let diff: Vec<f64> = got.iter().zip(&want).map(|(a, b)| a - b).collect();
            assert!(norm(&diff) < 1e-9 * scale, "n={n}: {}", norm(&diff) / scale);
        }
    }

    #[test]
    fn expm_of_zero_time_is_identity() {
        let m = random_symmetric(8, 7);
        let v = vec![0.5; 8];
        let got = expm_action(&Dense(m), 10.0, 0.0, &v, 30, 1e-10)
            .unwrap()
            .into_values();
        assert_eq!(got, v);
    }
}
