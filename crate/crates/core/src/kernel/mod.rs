//! Stationary ARD covariance functions and kernel-matrix assembly.
//!
//! A GP over `R^D -> R^P` is modelled as `P` independent scalar GPs that
//! share one scalar kernel `k(a, b)`. The `D x D` cross-covariance block of
//! the vector-valued process is therefore `k(a, b) * I`.

mod psd;

pub(crate) use psd::symmetrize;
pub use psd::{robust_factor, PsdMatrix};

use nalgebra::{DMatrix, DVector};

use crate::error::{GpssmError, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KernelFamily {
    Matern32,
    Matern52,
    SquaredExponential,
}

/// Prior mean of the transition GP. Only the zero mean is supported.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MeanFunction {
    #[default]
    Zero,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelSpec<T: Real> {
    family: KernelFamily,
    lengthscales: DVector<T>,
    signal_variance: T,
    mean_function: MeanFunction,
}

/// Number of log-space hyperparameters: one per lengthscale plus the signal variance.
pub fn num_hyperparameters(input_dim: usize) -> usize {
    input_dim + 1
}

impl<T: Real> KernelSpec<T> {
    pub fn new(family: KernelFamily, lengthscales: DVector<T>, signal_variance: T) -> Result<Self> {
        if lengthscales.is_empty() {
            return Err(GpssmError::invalid("kernel needs at least one lengthscale"));
        }
        if lengthscales
            .iter()
            .any(|l| !(l.is_finite_value() && *l > T::zero()))
        {
            return Err(GpssmError::invalid(
                "lengthscales must be finite and positive",
            ));
        }
        if !(signal_variance.is_finite_value() && signal_variance > T::zero()) {
            return Err(GpssmError::invalid(
                "signal variance must be finite and positive",
            ));
        }
        Ok(Self {
            family,
            lengthscales,
            signal_variance,
            mean_function: MeanFunction::Zero,
        })
    }

    /// Isotropic convenience constructor.
    pub fn isotropic(
        family: KernelFamily,
        dim: usize,
        lengthscale: T,
        signal_variance: T,
    ) -> Result<Self> {
        Self::new(
            family,
            DVector::from_element(dim, lengthscale),
            signal_variance,
        )
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn lengthscales(&self) -> &DVector<T> {
        &self.lengthscales
    }

    pub fn signal_variance(&self) -> T {
        self.signal_variance
    }

    pub fn mean_function(&self) -> MeanFunction {
        self.mean_function
    }

    pub fn input_dim(&self) -> usize {
        self.lengthscales.len()
    }

    /// Hyperparameters in log space: `[log l_1, .., log l_D, log sigma^2]`.
    pub fn log_params(&self) -> Vec<T> {
        self.lengthscales
            .iter()
            .map(|l| l.ln())
            .chain(std::iter::once(self.signal_variance.ln()))
            .collect()
    }

    pub fn with_log_params(&self, params: &[T]) -> Result<Self> {
        let d = self.input_dim();
        if params.len() != d + 1 {
            return Err(GpssmError::invalid(format!(
                "expected {} kernel parameters, got {}",
                d + 1,
                params.len()
            )));
        }
        Self::new(
            self.family,
            DVector::from_iterator(d, params[..d].iter().map(|p| p.exp())),
            params[d].exp(),
        )
    }

    /// ARD-scaled distance `sqrt(sum(((a_i - b_i) / l_i)^2))`.
    #[inline]
    fn scaled_distance(&self, a: &[T], b: &[T]) -> T {
        let mut r2 = T::zero();
        for ((ai, bi), l) in a.iter().zip(b).zip(self.lengthscales.iter()) {
            let d = (*ai - *bi) / *l;
            r2 += d * d;
        }
        r2.sqrt()
    }

    /// Correlation profile `g(r)` with `g(0) = 1`.
    #[inline]
    fn profile(&self, r: T) -> T {
        match self.family {
            KernelFamily::SquaredExponential => (-T::lit(0.5) * r * r).exp(),
            KernelFamily::Matern32 => {
                let s = T::lit(3f64.sqrt()) * r;
                (T::one() + s) * (-s).exp()
            }
            KernelFamily::Matern52 => {
                let s = T::lit(5f64.sqrt()) * r;
                (T::one() + s + s * s / T::lit(3.0)) * (-s).exp()
            }
        }
    }

    /// `g'(r) / r`, which stays finite at `r = 0` for all three families.
    #[inline]
    fn profile_slope_over_r(&self, r: T) -> T {
        match self.family {
            KernelFamily::SquaredExponential => -(-T::lit(0.5) * r * r).exp(),
            KernelFamily::Matern32 => {
                let s = T::lit(3f64.sqrt()) * r;
                -T::lit(3.0) * (-s).exp()
            }
            KernelFamily::Matern52 => {
                let s = T::lit(5f64.sqrt()) * r;
                -T::lit(5.0 / 3.0) * (T::one() + s) * (-s).exp()
            }
        }
    }

    /// Scalar kernel `k(a, b)`. Inputs are assumed finite.
    #[inline]
    pub fn k(&self, a: &[T], b: &[T]) -> T {
        self.signal_variance * self.profile(self.scaled_distance(a, b))
    }

    /// `k(a, b)` together with `h = σ² g'(r)/r`, from which both gradients
    /// follow: `∂k/∂a_i = h (a_i − b_i)/ℓ_i²` and
    /// `∂k/∂log ℓ_i = −h (a_i − b_i)²/ℓ_i²`. One exponential per call.
    #[inline]
    pub fn k_with_slope(&self, a: &[T], b: &[T]) -> (T, T) {
        let r = self.scaled_distance(a, b);
        let sf2 = self.signal_variance;
        match self.family {
            KernelFamily::SquaredExponential => {
                let e = sf2 * (-T::lit(0.5) * r * r).exp();
                (e, -e)
            }
            KernelFamily::Matern32 => {
                let s = T::lit(3f64.sqrt()) * r;
                let e = sf2 * (-s).exp();
                ((T::one() + s) * e, -T::lit(3.0) * e)
            }
            KernelFamily::Matern52 => {
                let s = T::lit(5f64.sqrt()) * r;
                let e = sf2 * (-s).exp();
                (
                    (T::one() + s + s * s / T::lit(3.0)) * e,
                    -T::lit(5.0 / 3.0) * (T::one() + s) * e,
                )
            }
        }
    }

    /// `k(x, x)`, the prior marginal variance.
    #[inline]
    pub fn diag(&self) -> T {
        self.signal_variance
    }

    /// The `D x D` cross-covariance block `k(a, b) I`.
    pub fn eval_kernel(&self, a: &[T], b: &[T]) -> Result<DMatrix<T>> {
        self.check_point(a)?;
        self.check_point(b)?;
        let d = self.input_dim();
        Ok(DMatrix::from_diagonal_element(d, d, self.k(a, b)))
    }

    /// Block matrix of size `|rows| D x |cols| D` whose `(i, j)` block is
    /// `eval_kernel(rows[i], cols[j])`.
    pub fn kernel_matrix(&self, rows: &[DVector<T>], cols: &[DVector<T>]) -> Result<DMatrix<T>> {
        for p in rows.iter().chain(cols) {
            self.check_point(p.as_slice())?;
        }
        let d = self.input_dim();
        let mut out = DMatrix::zeros(rows.len() * d, cols.len() * d);
        for (i, a) in rows.iter().enumerate() {
            for (j, b) in cols.iter().enumerate() {
                let k = self.k(a.as_slice(), b.as_slice());
                for c in 0..d {
                    out[(i * d + c, j * d + c)] = k;
                }
            }
        }
        Ok(out)
    }

    /// Scalar Gram matrix over `points`.
    pub fn gram(&self, points: &[DVector<T>]) -> DMatrix<T> {
        let n = points.len();
        let mut out = DMatrix::zeros(n, n);
        for i in 0..n {
            out[(i, i)] = self.signal_variance;
            for j in 0..i {
                let k = self.k(points[i].as_slice(), points[j].as_slice());
                out[(i, j)] = k;
                out[(j, i)] = k;
            }
        }
        out
    }

    /// Scalar cross-covariance vector `[k(x, p_1), .., k(x, p_n)]`.
    pub fn cross(&self, x: &[T], points: &[DVector<T>]) -> DVector<T> {
        DVector::from_iterator(points.len(), points.iter().map(|p| self.k(x, p.as_slice())))
    }

    /// Gradient of `k(a, b)` with respect to the log hyperparameters,
    /// written into `out` (length `D + 1`). Returns `k(a, b)`.
    pub fn k_log_param_grad(&self, a: &[T], b: &[T], out: &mut [T]) -> T {
        let r = self.scaled_distance(a, b);
        let k = self.signal_variance * self.profile(r);
        let h = self.signal_variance * self.profile_slope_over_r(r);
        let d = self.input_dim();
        for i in 0..d {
            let diff = (a[i] - b[i]) / self.lengthscales[i];
            out[i] = -h * diff * diff;
        }
        out[d] = k;
        k
    }

    /// Gradient of `k(a, b)` with respect to its first argument, written
    /// into `out` (length `D`). The gradient in `b` is the negation.
    pub fn k_input_grad(&self, a: &[T], b: &[T], out: &mut [T]) {
        let r = self.scaled_distance(a, b);
        let h = self.signal_variance * self.profile_slope_over_r(r);
        for (i, o) in out.iter_mut().enumerate() {
            let l = self.lengthscales[i];
            *o = h * (a[i] - b[i]) / (l * l);
        }
    }

    fn check_point(&self, p: &[T]) -> Result<()> {
        if p.len() != self.input_dim() {
            return Err(GpssmError::invalid(format!(
                "point has dimension {}, kernel expects {}",
                p.len(),
                self.input_dim()
            )));
        }
        if p.iter().any(|v| !v.is_finite_value()) {
            return Err(GpssmError::invalid("non-finite kernel input"));
        }
        Ok(())
    }
}
