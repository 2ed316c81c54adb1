//! The GP-SSM generative model.
//!
//! ```text
//! f   ~ GP(0, k)
//! x_0 ~ p(x_0)
//! x_t | f_t ~ N(structure(x_{t-1}, f_t), Q),   f_t = f(x_{t-1})
//! y_t | x_t ~ p(y_t | x_t, theta_y)
//! ```

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{GpssmError, Result};
use crate::kernel::{robust_factor, KernelSpec};
use crate::scalar::Real;

/// Multivariate Gaussian given by mean and covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian<T: Real> {
    pub mean: DVector<T>,
    pub cov: DMatrix<T>,
}

/// Diagonal Gaussian used for the initial-state prior.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian<T: Real> {
    mean: DVector<T>,
    variance: DVector<T>,
}

impl<T: Real> DiagGaussian<T> {
    pub fn new(mean: DVector<T>, variance: DVector<T>) -> Result<Self> {
        if mean.len() != variance.len() {
            return Err(GpssmError::invalid("mean and variance lengths differ"));
        }
        if variance
            .iter()
            .any(|v| !(v.is_finite_value() && *v > T::zero()))
        {
            return Err(GpssmError::invalid("prior variances must be positive"));
        }
        if mean.iter().any(|v| !v.is_finite_value()) {
            return Err(GpssmError::invalid("prior mean must be finite"));
        }
        Ok(Self { mean, variance })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            variance: DVector::from_element(dim, T::one()),
        }
    }

    pub fn mean(&self) -> &DVector<T> {
        &self.mean
    }

    pub fn variance(&self) -> &DVector<T> {
        &self.variance
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_density(&self, x: &[T]) -> T {
        let half = T::lit(0.5);
        let mut acc = T::zero();
        for i in 0..self.dim() {
            let v = self.variance[i];
            let r = x[i] - self.mean[i];
            acc -= half * ((T::two_pi() * v).ln() + r * r / v);
        }
        acc
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> DVector<T> {
        DVector::from_iterator(
            self.dim(),
            (0..self.dim())
                .map(|i| self.mean[i] + self.variance[i].sqrt() * T::sample_standard_normal(rng)),
        )
    }
}

/// Observation model `p(y_t | x_t)`.
#[derive(Clone, Debug, PartialEq)]
pub enum LikelihoodSpec<T: Real> {
    /// `y_e ~ N(x_e, R_e)` for `e < E`: the first `E` state components are
    /// observed in independent Gaussian noise.
    GaussianDiag { noise_variance: DVector<T> },
    /// `y_e ~ Poisson(exp(alpha_e * x[k] + beta))` with `k = observed_state_index`.
    PoissonExp {
        alpha: DVector<T>,
        beta: T,
        observed_state_index: usize,
    },
}

impl<T: Real> LikelihoodSpec<T> {
    pub fn gaussian(noise_variance: DVector<T>) -> Result<Self> {
        let s = Self::GaussianDiag { noise_variance };
        s.check()?;
        Ok(s)
    }

    pub fn poisson(alpha: DVector<T>, beta: T, observed_state_index: usize) -> Result<Self> {
        let s = Self::PoissonExp {
            alpha,
            beta,
            observed_state_index,
        };
        s.check()?;
        Ok(s)
    }

    fn check(&self) -> Result<()> {
        match self {
            Self::GaussianDiag { noise_variance } => {
                if noise_variance.is_empty() {
                    return Err(GpssmError::invalid("gaussian likelihood needs E >= 1"));
                }
                if noise_variance
                    .iter()
                    .any(|v| !(v.is_finite_value() && *v > T::zero()))
                {
                    return Err(GpssmError::invalid(
                        "observation noise variances must be positive",
                    ));
                }
            }
            Self::PoissonExp { alpha, beta, .. } => {
                if alpha.is_empty() {
                    return Err(GpssmError::invalid("poisson likelihood needs E >= 1"));
                }
                if alpha.iter().any(|a| !a.is_finite_value()) || !beta.is_finite_value() {
                    return Err(GpssmError::invalid("poisson parameters must be finite"));
                }
            }
        }
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            Self::GaussianDiag { noise_variance } => noise_variance.len(),
            Self::PoissonExp { alpha, .. } => alpha.len(),
        }
    }

    pub fn is_count(&self) -> bool {
        matches!(self, Self::PoissonExp { .. })
    }

    /// Checks an observation against the likelihood's support.
    pub fn check_observation(&self, y: &[T]) -> Result<()> {
        if y.len() != self.obs_dim() {
            return Err(GpssmError::invalid(format!(
                "observation has dimension {}, expected {}",
                y.len(),
                self.obs_dim()
            )));
        }
        if y.iter().any(|v| !v.is_finite_value()) {
            return Err(GpssmError::invalid("non-finite observation"));
        }
        if self.is_count() && y.iter().any(|v| *v < T::zero() || v.fract() != T::zero()) {
            return Err(GpssmError::invalid(
                "poisson observations must be non-negative integer counts",
            ));
        }
        Ok(())
    }

    /// Exact `log p(y | x)`, validating `y`.
    pub fn log_likelihood(&self, y: &[T], x: &[T]) -> Result<T> {
        self.check_observation(y)?;
        Ok(self.log_density(y, x))
    }

    /// `log p(y | x)` without validation. `y` must already have passed
    /// [`check_observation`](Self::check_observation).
    pub fn log_density(&self, y: &[T], x: &[T]) -> T {
        let half = T::lit(0.5);
        match self {
            Self::GaussianDiag { noise_variance } => {
                let mut acc = T::zero();
                for (e, r) in noise_variance.iter().enumerate() {
                    let d = y[e] - x[e];
                    acc -= half * ((T::two_pi() * *r).ln() + d * d / *r);
                }
                acc
            }
            Self::PoissonExp {
                alpha,
                beta,
                observed_state_index,
            } => {
                let xs = x[*observed_state_index];
                let mut acc = T::zero();
                for (e, a) in alpha.iter().enumerate() {
                    let eta = *a * xs + *beta;
                    acc += y[e] * eta - eta.exp() - ln_factorial(y[e]);
                }
                acc
            }
        }
    }

    /// Learnable parameters: `log R` (Gaussian) or `[alpha, beta]` (Poisson).
    pub fn params(&self) -> Vec<T> {
        match self {
            Self::GaussianDiag { noise_variance } => {
                noise_variance.iter().map(|r| r.ln()).collect()
            }
            Self::PoissonExp { alpha, beta, .. } => alpha
                .iter()
                .copied()
                .chain(std::iter::once(*beta))
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Self::GaussianDiag { noise_variance } => noise_variance.len(),
            Self::PoissonExp { alpha, .. } => alpha.len() + 1,
        }
    }

    pub fn with_params(&self, p: &[T]) -> Result<Self> {
        if p.len() != self.num_params() {
            return Err(GpssmError::invalid("wrong number of likelihood parameters"));
        }
        let s = match self {
            Self::GaussianDiag { .. } => Self::GaussianDiag {
                noise_variance: DVector::from_iterator(p.len(), p.iter().map(|v| v.exp())),
            },
            Self::PoissonExp {
                observed_state_index,
                ..
            } => {
                let e = p.len() - 1;
                Self::PoissonExp {
                    alpha: DVector::from_column_slice(&p[..e]),
                    beta: p[e],
                    observed_state_index: *observed_state_index,
                }
            }
        };
        s.check()?;
        Ok(s)
    }

    /// Adds `weight * d log p(y|x) / d params` into `out`.
    pub fn accumulate_param_grad(&self, y: &[T], x: &[T], weight: T, out: &mut [T]) {
        let half = T::lit(0.5);
        match self {
            Self::GaussianDiag { noise_variance } => {
                for (e, r) in noise_variance.iter().enumerate() {
                    let d = y[e] - x[e];
                    out[e] += weight * half * (d * d / *r - T::one());
                }
            }
            Self::PoissonExp {
                alpha,
                beta,
                observed_state_index,
            } => {
                let xs = x[*observed_state_index];
                let e_count = alpha.len();
                for (e, a) in alpha.iter().enumerate() {
                    let resid = y[e] - (*a * xs + *beta).exp();
                    out[e] += weight * resid * xs;
                    out[e_count] += weight * resid;
                }
            }
        }
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, x: &[T], rng: &mut R) -> DVector<T> {
        match self {
            Self::GaussianDiag { noise_variance } => DVector::from_iterator(
                noise_variance.len(),
                noise_variance
                    .iter()
                    .enumerate()
                    .map(|(e, r)| x[e] + r.sqrt() * T::sample_standard_normal(rng)),
            ),
            Self::PoissonExp {
                alpha,
                beta,
                observed_state_index,
            } => DVector::from_iterator(
                alpha.len(),
                alpha.iter().map(|a| {
                    let rate = (*a * x[*observed_state_index] + *beta).exp().as_f64();
                    T::lit(sample_poisson(rate, rng))
                }),
            ),
        }
    }
}

fn ln_factorial<T: Real>(n: T) -> T {
    if n <= T::one() {
        return T::zero();
    }
    T::lit(statrs::function::gamma::ln_gamma(n.as_f64() + 1.0))
}

fn sample_poisson<R: rand::Rng + ?Sized>(rate: f64, rng: &mut R) -> f64 {
    if !(rate > 0.0) {
        return 0.0;
    }
    // rand_distr rejects rates beyond ~1e19; such rates only arise from diverged states.
    let rate = rate.min(1e12);
    Poisson::new(rate).map(|p| p.sample(rng)).unwrap_or(rate)
}

/// How the GP output is turned into the next-state mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Structure<T: Real> {
    /// Every state component is the output of its own GP.
    Free,
    /// Two states, the first integrating the second:
    /// `x1' = x1 + dt * x2`, `x2' = f(x1, x2) + noise`.
    SecondOrder { dt: T },
}

impl<T: Real> Structure<T> {
    pub fn second_order() -> Self {
        Self::SecondOrder { dt: T::one() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GpssmModel<T: Real> {
    kernel: KernelSpec<T>,
    process_noise: DVector<T>,
    likelihood: LikelihoodSpec<T>,
    x0_prior: DiagGaussian<T>,
    inducing_inputs: Vec<DVector<T>>,
    structure: Structure<T>,
}

impl<T: Real> GpssmModel<T> {
    pub fn new(
        kernel: KernelSpec<T>,
        process_noise: DVector<T>,
        likelihood: LikelihoodSpec<T>,
        x0_prior: DiagGaussian<T>,
        inducing_inputs: Vec<DVector<T>>,
        structure: Structure<T>,
    ) -> Result<Self> {
        let m = Self {
            kernel,
            process_noise,
            likelihood,
            x0_prior,
            inducing_inputs,
            structure,
        };
        m.validate()?;
        Ok(m)
    }

    /// Free-structure model observing every state through Gaussian noise,
    /// with a standard-normal `x_0` prior.
    pub fn free_gaussian(
        kernel: KernelSpec<T>,
        process_noise: DVector<T>,
        noise_variance: DVector<T>,
        inducing_inputs: Vec<DVector<T>>,
    ) -> Result<Self> {
        let dim = process_noise.len();
        Self::new(
            kernel,
            process_noise,
            LikelihoodSpec::gaussian(noise_variance)?,
            DiagGaussian::standard(dim),
            inducing_inputs,
            Structure::Free,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.state_dim();
        if d == 0 {
            return Err(GpssmError::config("state dimension must be positive"));
        }
        if self.process_noise.len() != d {
            return Err(GpssmError::config(format!(
                "process noise has {} entries, state dimension is {d}",
                self.process_noise.len()
            )));
        }
        if self
            .process_noise
            .iter()
            .any(|q| !(q.is_finite_value() && *q > T::zero()))
        {
            return Err(GpssmError::config(
                "process noise variances must be positive",
            ));
        }
        if self.x0_prior.dim() != d {
            return Err(GpssmError::config("initial-state prior dimension mismatch"));
        }
        if self.inducing_inputs.is_empty() {
            return Err(GpssmError::config(
                "at least one inducing input is required",
            ));
        }
        if self
            .inducing_inputs
            .iter()
            .any(|z| z.len() != d || z.iter().any(|v| !v.is_finite_value()))
        {
            return Err(GpssmError::config(
                "inducing inputs must be finite points in state space",
            ));
        }
        for i in 0..self.inducing_inputs.len() {
            for j in 0..i {
                let dist = self.scaled_distance(&self.inducing_inputs[i], &self.inducing_inputs[j]);
                if dist <= T::lit(1e-8) {
                    return Err(GpssmError::config(format!(
                        "inducing inputs {j} and {i} coincide"
                    )));
                }
            }
        }
        match &self.likelihood {
            LikelihoodSpec::GaussianDiag { noise_variance } => {
                if noise_variance.len() > d {
                    return Err(GpssmError::config(
                        "gaussian likelihood observes more components than the state has",
                    ));
                }
            }
            LikelihoodSpec::PoissonExp {
                observed_state_index,
                ..
            } => {
                if *observed_state_index >= d {
                    return Err(GpssmError::config(
                        "poisson observed_state_index out of range",
                    ));
                }
            }
        }
        if let Structure::SecondOrder { dt } = self.structure {
            if d != 2 {
                return Err(GpssmError::config("second-order structure requires D = 2"));
            }
            if !dt.is_finite_value() {
                return Err(GpssmError::config("second-order dt must be finite"));
            }
        }
        Ok(())
    }

    fn scaled_distance(&self, a: &DVector<T>, b: &DVector<T>) -> T {
        let mut r2 = T::zero();
        for i in 0..a.len() {
            let d = (a[i] - b[i]) / self.kernel.lengthscales()[i];
            r2 += d * d;
        }
        r2.sqrt()
    }

    pub fn kernel(&self) -> &KernelSpec<T> {
        &self.kernel
    }

    /// Diagonal of the process-noise covariance `Q`.
    pub fn process_noise(&self) -> &DVector<T> {
        &self.process_noise
    }

    pub fn likelihood(&self) -> &LikelihoodSpec<T> {
        &self.likelihood
    }

    pub fn x0_prior(&self) -> &DiagGaussian<T> {
        &self.x0_prior
    }

    pub fn inducing_inputs(&self) -> &[DVector<T>] {
        &self.inducing_inputs
    }

    pub fn structure(&self) -> Structure<T> {
        self.structure
    }

    pub fn state_dim(&self) -> usize {
        self.kernel.input_dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.likelihood.obs_dim()
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing_inputs.len()
    }

    /// State components driven by a GP output, in GP-output order.
    pub fn gp_output_indices(&self) -> Vec<usize> {
        match self.structure {
            Structure::Free => (0..self.state_dim()).collect(),
            Structure::SecondOrder { .. } => vec![1],
        }
    }

    pub fn num_gp_outputs(&self) -> usize {
        match self.structure {
            Structure::Free => self.state_dim(),
            Structure::SecondOrder { .. } => 1,
        }
    }

    pub fn with_kernel(&self, kernel: KernelSpec<T>) -> Result<Self> {
        let mut m = self.clone();
        m.kernel = kernel;
        m.validate()?;
        Ok(m)
    }

    pub fn with_process_noise(&self, q: DVector<T>) -> Result<Self> {
        let mut m = self.clone();
        m.process_noise = q;
        m.validate()?;
        Ok(m)
    }

    pub fn with_likelihood(&self, lik: LikelihoodSpec<T>) -> Result<Self> {
        let mut m = self.clone();
        m.likelihood = lik;
        m.validate()?;
        Ok(m)
    }

    pub fn with_inducing_inputs(&self, z: Vec<DVector<T>>) -> Result<Self> {
        let mut m = self.clone();
        m.inducing_inputs = z;
        m.validate()?;
        Ok(m)
    }

    pub fn with_x0_prior(&self, prior: DiagGaussian<T>) -> Result<Self> {
        let mut m = self.clone();
        m.x0_prior = prior;
        m.validate()?;
        Ok(m)
    }

    /// Next-state mean from the previous state and the GP output(s).
    pub fn apply_structure(&self, x_prev: &[T], f: &[T]) -> Result<DVector<T>> {
        if f.len() != self.num_gp_outputs() || x_prev.len() != self.state_dim() {
            return Err(GpssmError::invalid("apply_structure: dimension mismatch"));
        }
        Ok(self.apply_structure_unchecked(x_prev, f))
    }

    pub(crate) fn apply_structure_unchecked(&self, x_prev: &[T], f: &[T]) -> DVector<T> {
        match self.structure {
            Structure::Free => DVector::from_column_slice(f),
            Structure::SecondOrder { dt } => {
                DVector::from_vec(vec![x_prev[0] + dt * x_prev[1], f[0]])
            }
        }
    }

    /// `p(f_t | f_{1:t-1}, x_{0:t-1})` for the full (non-sparse) GP.
    ///
    /// `x_history` holds `x_0..x_{t-1}` and `f_history` holds
    /// `f_1..f_{t-1}` (each of length [`num_gp_outputs`](Self::num_gp_outputs)).
    pub fn gp_predictive_conditional(
        &self,
        f_history: &[DVector<T>],
        x_history: &[DVector<T>],
    ) -> Result<Gaussian<T>> {
        let t = x_history.len();
        if t == 0 || f_history.len() + 1 != t {
            return Err(GpssmError::invalid(
                "need x_0..x_{t-1} and f_1..f_{t-1} with t >= 1",
            ));
        }
        let p = self.num_gp_outputs();
        let x_last = &x_history[t - 1];
        let kss = self.kernel.diag();
        if t == 1 {
            return Ok(Gaussian {
                mean: DVector::zeros(p),
                cov: DMatrix::from_diagonal_element(p, p, kss),
            });
        }
        let past = &x_history[..t - 1];
        let kmat = self.kernel.gram(past);
        let fac = robust_factor(&kmat)?;
        let kstar = self.kernel.cross(x_last.as_slice(), past);
        let w = fac.solve_vec(&kstar);
        let mut mean = DVector::zeros(p);
        for (i, f) in f_history.iter().enumerate() {
            mean.axpy(w[i], f, T::one());
        }
        let var = (kss - kstar.dot(&w)).max(T::zero());
        Ok(Gaussian {
            mean,
            cov: DMatrix::from_diagonal_element(p, p, var),
        })
    }

    /// Exact sequential draw from the GP-SSM prior.
    ///
    /// Each step conditions on the whole history of function values, so
    /// the cost is `O(T^3)`; meant for illustration-sized `T` (a few hundred).
    pub fn sample_prior_trajectory(&self, horizon: usize, seed: u64) -> Result<Trajectory<T>> {
        if horizon == 0 {
            return Err(GpssmError::invalid("horizon must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = self.num_gp_outputs();
        let gp_idx = self.gp_output_indices();
        let kss = self.kernel.diag();
        let floor = kss * T::lit(1e-10);

        let mut states = Vec::with_capacity(horizon + 1);
        let mut observations = Vec::with_capacity(horizon);
        states.push(self.x0_prior.sample(&mut rng));
        // Growing Cholesky factor of the Gram matrix over x_0..x_{t-2}.
        let mut chol = IncrementalCholesky::<T>::new();
        // Whitened function values L^{-1} f, one column per GP output.
        let mut white: Vec<Vec<T>> = vec![Vec::new(); p];

        for t in 1..=horizon {
            let x_prev = states[t - 1].clone();
            let kvec: Vec<T> = states[..t - 1]
                .iter()
                .map(|s| self.kernel.k(x_prev.as_slice(), s.as_slice()))
                .collect();
            let l_row = chol.forward_solve(&kvec);
            let var = (kss - l_row.iter().fold(T::zero(), |a, v| a + *v * *v)).max(T::zero());
            let sd = var.sqrt();
            let mut f = vec![T::zero(); p];
            for (d, fd) in f.iter_mut().enumerate() {
                let mean = l_row
                    .iter()
                    .zip(&white[d])
                    .fold(T::zero(), |a, (l, w)| a + *l * *w);
                let eps = T::sample_standard_normal(&mut rng);
                *fd = mean + sd * eps;
            }
            // Extend the factor with x_{t-1}; the new whitened entry of f is
            // (f - l_row . white) / diag = sd * eps / diag.
            let diag = var.max(floor).sqrt();
            for (d, fd) in f.iter().enumerate() {
                let mean = l_row
                    .iter()
                    .zip(&white[d])
                    .fold(T::zero(), |a, (l, w)| a + *l * *w);
                white[d].push((*fd - mean) / diag);
            }
            chol.push_row(l_row, diag);

            let mut x = self.apply_structure_unchecked(x_prev.as_slice(), &f);
            for &i in &gp_idx {
                x[i] += self.process_noise[i].sqrt() * T::sample_standard_normal(&mut rng);
            }
            observations.push(self.likelihood.sample(x.as_slice(), &mut rng));
            states.push(x);
        }
        Ok(Trajectory {
            states,
            observations,
        })
    }
}

/// Lower-triangular Cholesky factor grown one row at a time.
struct IncrementalCholesky<T: Real> {
    rows: Vec<Vec<T>>,
}

impl<T: Real> IncrementalCholesky<T> {
    fn new() -> Self {
        Self { rows: Vec::new() }
    }

    /// Solves `L x = b`.
    fn forward_solve(&self, b: &[T]) -> Vec<T> {
        let mut x: Vec<T> = Vec::with_capacity(b.len());
        for (i, row) in self.rows.iter().enumerate() {
            let mut s = b[i];
            for j in 0..i {
                s -= row[j] * x[j];
            }
            x.push(s / row[i]);
        }
        x
    }

    fn push_row(&mut self, mut off_diag: Vec<T>, diag: T) {
        off_diag.push(diag);
        self.rows.push(off_diag);
    }
}

/// Latent states `x_0..x_T` and observations `y_1..y_T`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T: Real> {
    pub states: Vec<DVector<T>>,
    pub observations: Vec<DVector<T>>,
}

impl<T: Real> Trajectory<T> {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn check(&self) -> Result<()> {
        if self.states.len() != self.observations.len() + 1 {
            return Err(GpssmError::invalid(
                "trajectory needs T+1 states for T observations",
            ));
        }
        if self
            .states
            .iter()
            .chain(&self.observations)
            .any(|v| v.iter().any(|x| !x.is_finite_value()))
        {
            return Err(GpssmError::invalid("trajectory contains non-finite values"));
        }
        Ok(())
    }
}
