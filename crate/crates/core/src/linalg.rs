//! Small dense linear algebra: a 2×2 symmetric type for the random-effects
//! blocks and a row-major Cholesky for the GLS normal equations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Symmetric 2×2 matrix stored as its three distinct entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Sym2<F: Scalar> {
    pub a00: F,
    pub a01: F,
    pub a11: F,
}

impl<F: Scalar> Sym2<F> {
    pub fn new(a00: F, a01: F, a11: F) -> Self {
        Self { a00, a01, a11 }
    }

    pub fn zero() -> Self {
        Self::new(F::zero(), F::zero(), F::zero())
    }

    pub fn identity() -> Self {
        Self::new(F::one(), F::zero(), F::one())
    }

    pub fn det(&self) -> F {
        self.a00 * self.a11 - self.a01 * self.a01
    }

    pub fn trace(&self) -> F {
        self.a00 + self.a11
    }

    pub fn add(&self, other: &Self) -> Self {
        Self::new(
            self.a00 + other.a00,
            self.a01 + other.a01,
            self.a11 + other.a11,
        )
    }

    pub fn scale(&self, s: F) -> Self {
        Self::new(self.a00 * s, self.a01 * s, self.a11 * s)
    }

    /// Direct inverse; `None` when the determinant is not strictly positive
    /// relative to the diagonal (singular or indefinite).
    pub fn inverse(&self) -> Option<Self> {
        let det = self.det();
        let scale = self.a00.abs().max(self.a11.abs());
        if !(det > F::zero()) || det <= F::epsilon() * scale * scale {
            return None;
        }
        Some(Self::new(self.a11 / det, -self.a01 / det, self.a00 / det))
    }

    /// Positive semidefinite up to a small relative tolerance.
    pub fn is_psd(&self) -> bool {
        let tol = F::lit(1e-12) * (self.a00.abs() + self.a11.abs());
        self.a00 >= -tol && self.a11 >= -tol && self.det() >= -tol * tol.max(F::one())
    }

    pub fn quad(&self, x: [F; 2]) -> F {
        self.a00 * x[0] * x[0] + F::lit(2.0) * self.a01 * x[0] * x[1] + self.a11 * x[1] * x[1]
    }

    pub fn mul_vec(&self, x: [F; 2]) -> [F; 2] {
        [
            self.a00 * x[0] + self.a01 * x[1],
            self.a01 * x[0] + self.a11 * x[1],
        ]
    }

    pub fn to_array(&self) -> [[F; 2]; 2] {
        [[self.a00, self.a01], [self.a01, self.a11]]
    }
}

/// General 2×2 matrix product of two symmetric matrices (the result is not
/// symmetric in general, e.g. `T (T + V)^{-1}`).
pub fn mul_sym2<F: Scalar>(a: &Sym2<F>, b: &Sym2<F>) -> [[F; 2]; 2] {
    let a = a.to_array();
    let b = b.to_array();
    let mut out = [[F::zero(); 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

/// In-place lower Cholesky factor of a row-major `n×n` SPD matrix.
///
/// Fails with the index of the first non-positive pivot, measured relative to
/// the original diagonal so that nearly collinear columns are caught.
pub fn cholesky<F: Scalar>(a: &[F], n: usize) -> std::result::Result<Vec<F>, usize> {
    debug_assert_eq!(a.len(), n * n);
    let mut l = vec![F::zero(); n * n];
    let rel_tol = F::lit(1e-11);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                let diag = a[i * n + i].abs();
                if !(s > rel_tol * diag) || !s.is_finite() {
                    return Err(i);
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ x = b` given the factor from [`cholesky`].
pub fn cholesky_solve<F: Scalar>(l: &[F], n: usize, b: &[F]) -> Vec<F> {
    let mut y = b.to_vec();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    y
}

pub fn cholesky_logdet<F: Scalar>(l: &[F], n: usize) -> F {
    (0..n).map(|i| l[i * n + i].ln()).sum::<F>() * F::lit(2.0)
}

/// Solves the SPD system `a x = b`, reporting the offending column on failure.
pub fn solve_spd<F: Scalar>(a: &[F], n: usize, b: &[F]) -> Result<Vec<F>> {
    let l = cholesky(a, n).map_err(|col| Error::Singular { column: col })?;
    Ok(cholesky_solve(&l, n, b))
}

/// Ordinary least squares by normal equations; returns the coefficient vector.
/// `rows` is row-major `n×p`.
pub fn ols<F: Scalar>(rows: &[F], y: &[F], p: usize) -> Result<Vec<F>> {
    let n = y.len();
    debug_assert_eq!(rows.len(), n * p);
    let mut xtx = vec![F::zero(); p * p];
    let mut xty = vec![F::zero(); p];
    for (row, &yi) in rows.chunks_exact(p).zip(y) {
        for a in 0..p {
            xty[a] += row[a] * yi;
            for b in 0..=a {
                xtx[a * p + b] += row[a] * row[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            xtx[b * p + a] = xtx[a * p + b];
        }
    }
    solve_spd(&xtx, p, &xty)
}
