use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{GpssmError, Result};
use crate::scalar::Real;

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;
const SYMMETRY_TOL: f64 = 1e-12;

/// A symmetric positive (semi)definite matrix together with its Cholesky
/// factor. The factor is of `matrix + jitter * I`.
#[derive(Clone, Debug)]
pub struct PsdMatrix<T: Real> {
    matrix: DMatrix<T>,
    chol: Cholesky<T, Dyn>,
    jitter: T,
}

impl<T: Real> PsdMatrix<T> {
    pub fn matrix(&self) -> &DMatrix<T> {
        &self.matrix
    }

    /// Lower-triangular factor `F` with `F Fᵀ = matrix + jitter I`.
    pub fn factor(&self) -> DMatrix<T> {
        self.chol.l()
    }

    pub fn jitter_applied(&self) -> T {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// The matrix that was actually factorized.
    pub fn jittered(&self) -> DMatrix<T> {
        let mut m = self.matrix.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += self.jitter;
        }
        m
    }

    pub fn solve_vec(&self, b: &DVector<T>) -> DVector<T> {
        self.chol.solve(b)
    }

    pub fn solve(&self, b: &DMatrix<T>) -> DMatrix<T> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<T> {
        let mut inv = self.chol.inverse();
        symmetrize(&mut inv);
        inv
    }

    pub fn log_det(&self) -> T {
        let l = self.chol.l_dirty();
        let two = T::lit(2.0);
        (0..self.dim()).fold(T::zero(), |acc, i| acc + two * l[(i, i)].ln())
    }

    /// Solves `F x = b` for the lower factor `F`.
    pub fn solve_lower(&self, b: &DVector<T>) -> DVector<T> {
        let mut x = b.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut x);
        x
    }
}

/// Cholesky factorization with geometric jitter escalation.
///
/// The first attempt uses no jitter. Subsequent attempts add
/// `c * mean(diag) * I` with `c` running from `1e-10` to `1e-4` by factors
/// of ten.
pub fn robust_factor<T: Real>(m: &DMatrix<T>) -> Result<PsdMatrix<T>> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(GpssmError::invalid(format!(
            "matrix is {}x{}, expected square",
            n,
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite_value()) {
        return Err(GpssmError::invalid("matrix has non-finite entries"));
    }
    let scale = m.iter().fold(T::zero(), |a, v| a.max(v.abs()));
    let tol = T::lit(SYMMETRY_TOL) * scale;
    for i in 0..n {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > tol {
                return Err(GpssmError::invalid(format!(
                    "matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }

    if let Some(chol) = Cholesky::new(m.clone()) {
        return Ok(PsdMatrix {
            matrix: m.clone(),
            chol,
            jitter: T::zero(),
        });
    }

    let mean_diag = if n == 0 {
        T::one()
    } else {
        m.diagonal().sum() / T::from_usize_lossy(n)
    };
    let base = if mean_diag > T::zero() {
        mean_diag
    } else {
        T::one()
    };
    let mut c = JITTER_START;
    let mut last = T::zero();
    while c <= JITTER_MAX * (1.0 + 1e-9) {
        let jitter = base * T::lit(c);
        last = jitter;
        let mut shifted = m.clone();
        for i in 0..n {
            shifted[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(shifted) {
            return Ok(PsdMatrix {
                matrix: m.clone(),
                chol,
                jitter,
            });
        }
        c *= 10.0;
    }
    Err(GpssmError::SingularMatrix {
        jitter: last.as_f64(),
        context: None,
    })
}

pub(crate) fn symmetrize<T: Real>(m: &mut DMatrix<T>) {
    let n = m.nrows();
    let half = T::lit(0.5);
    for i in 0..n {
        for j in 0..i {
            let v = (m[(i, j)] + m[(j, i)]) * half;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}
