//! Sparse variational GP over the transition function.
//!
//! Inducing variables `u_d ~ N(0, K_uu)` (one per GP output `d`) at shared
//! inputs `z_1..z_M` summarize the transition function. Given `x_{t-1}`,
//!
//! ```text
//! a(x) = k_u(x)ᵀ K_uu⁻¹              (the row A_{t-1})
//! b(x) = k(x, x) - k_u(x)ᵀ K_uu⁻¹ k_u(x)
//! f_d | u_d ~ N(a(x) u_d, b(x))
//! ```
//!
//! The optimal `q(u_d)` depends on the trajectories only through
//! `Ψ₁ = Σ_t ⟨k_u(x_{t-1}) x_t⟩` and `Ψ₂ = Σ_t ⟨k_u(x_{t-1}) k_u(x_{t-1})ᵀ⟩`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{GpssmError, Result};
use crate::kernel::{robust_factor, symmetrize, PsdMatrix};
use crate::model::{Gaussian, GpssmModel, Trajectory};
use crate::scalar::Real;
use crate::smoothing::ParticleTrajectories;

/// Factorized `K_uu` for a model's inducing inputs.
#[derive(Clone, Debug)]
pub struct InducingKernel<T: Real> {
    factor: PsdMatrix<T>,
    inverse: DMatrix<T>,
}

impl<T: Real> InducingKernel<T> {
    pub fn new(model: &GpssmModel<T>) -> Result<Self> {
        let kuu = model.kernel().gram(model.inducing_inputs());
        let factor = robust_factor(&kuu).map_err(|e| match e {
            GpssmError::SingularMatrix { jitter, .. } => {
                let (i, j) = closest_pair(model);
                GpssmError::SingularMatrix {
                    jitter,
                    context: Some(format!("K_uu; closest inducing inputs are {i} and {j}")),
                }
            }
            other => other,
        })?;
        let inverse = factor.inverse();
        Ok(Self { factor, inverse })
    }

    pub fn factor(&self) -> &PsdMatrix<T> {
        &self.factor
    }

    /// `K_uu⁻¹` (of the jittered matrix).
    pub fn inverse(&self) -> &DMatrix<T> {
        &self.inverse
    }

    pub fn dim(&self) -> usize {
        self.inverse.nrows()
    }
}

fn closest_pair<T: Real>(model: &GpssmModel<T>) -> (usize, usize) {
    let z = model.inducing_inputs();
    let mut best = (0, 0);
    let mut best_d = None;
    for i in 0..z.len() {
        for j in 0..i {
            let d = (&z[i] - &z[j]).norm();
            if best_d.is_none_or(|b| d < b) {
                best_d = Some(d);
                best = (j, i);
            }
        }
    }
    best
}

/// `A_{t-1}` and `B_{t-1}` at one previous state.
///
/// Outputs are independent and share `K_uu`, so `A = a ⊗ I_P` and
/// `B = b I_P`; only the scalar row `a` and scalar `b` are stored.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionOperators<T: Real> {
    pub a: DVector<T>,
    pub b: T,
    outputs: usize,
}

impl<T: Real> TransitionOperators<T> {
    /// The `P x MP` blocked matrix `A`, with `u` ordered output-major
    /// (`[u_1; u_2; ..]`).
    pub fn a_matrix(&self) -> DMatrix<T> {
        let m = self.a.len();
        let p = self.outputs;
        let mut out = DMatrix::zeros(p, m * p);
        for d in 0..p {
            for j in 0..m {
                out[(d, d * m + j)] = self.a[j];
            }
        }
        out
    }

    pub fn b_matrix(&self) -> DMatrix<T> {
        DMatrix::from_diagonal_element(self.outputs, self.outputs, self.b)
    }
}

pub fn transition_operators<T: Real>(
    model: &GpssmModel<T>,
    kuu: &InducingKernel<T>,
    x_prev: &[T],
) -> TransitionOperators<T> {
    let ku = model.kernel().cross(x_prev, model.inducing_inputs());
    let a = kuu.inverse() * &ku;
    let b = (model.kernel().diag() - ku.dot(&a)).max(T::zero());
    TransitionOperators {
        a,
        b,
        outputs: model.num_gp_outputs(),
    }
}

/// Variational posterior `q(u) = Π_d N(u_d | μ_d, Σ_d)` held in both
/// natural and moment parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct InducingPosterior<T: Real> {
    /// `η₁`, one column per GP output.
    eta1: DMatrix<T>,
    /// `η₂` per GP output; symmetric negative definite.
    eta2: Vec<DMatrix<T>>,
    mu: DMatrix<T>,
    sigma: Vec<DMatrix<T>>,
}

impl<T: Real> InducingPosterior<T> {
    /// `q(u) = p(u)`.
    pub fn prior(model: &GpssmModel<T>, kuu: &InducingKernel<T>) -> Self {
        let m = model.num_inducing();
        let p = model.num_gp_outputs();
        let half = T::lit(0.5);
        let eta2 = kuu.inverse() * (-half);
        let sigma = kuu.factor().jittered();
        Self {
            eta1: DMatrix::zeros(m, p),
            eta2: vec![eta2; p],
            mu: DMatrix::zeros(m, p),
            sigma: vec![sigma; p],
        }
    }

    /// Builds the posterior from natural parameters; moments are derived.
    pub fn from_natural(eta1: DMatrix<T>, eta2: Vec<DMatrix<T>>) -> Result<Self> {
        if eta2.len() != eta1.ncols() {
            return Err(GpssmError::invalid("eta1 columns and eta2 blocks disagree"));
        }
        let m = eta1.nrows();
        let mut mu = DMatrix::zeros(m, eta1.ncols());
        let mut sigma = Vec::with_capacity(eta2.len());
        for (d, e2) in eta2.iter().enumerate() {
            if e2.shape() != (m, m) {
                return Err(GpssmError::invalid("eta2 block has wrong shape"));
            }
            let prec = e2 * T::lit(-2.0);
            let fac = robust_factor(&prec).map_err(|e| match e {
                GpssmError::SingularMatrix { jitter, .. } => GpssmError::SingularMatrix {
                    jitter,
                    context: Some(format!("-2 eta2 for output {d}")),
                },
                other => other,
            })?;
            let s = fac.inverse();
            let col = &s * eta1.column(d);
            mu.set_column(d, &col);
            sigma.push(s);
        }
        Ok(Self {
            eta1,
            eta2,
            mu,
            sigma,
        })
    }

    /// Builds the posterior from moments; natural parameters are derived.
    pub fn from_moments(mu: DMatrix<T>, sigma: Vec<DMatrix<T>>) -> Result<Self> {
        if sigma.len() != mu.ncols() {
            return Err(GpssmError::invalid("mu columns and sigma blocks disagree"));
        }
        let m = mu.nrows();
        let mut eta1 = DMatrix::zeros(m, mu.ncols());
        let mut eta2 = Vec::with_capacity(sigma.len());
        for (d, s) in sigma.iter().enumerate() {
            let fac = robust_factor(s)?;
            let prec = fac.inverse();
            eta1.set_column(d, &(&prec * mu.column(d)));
            eta2.push(prec * T::lit(-0.5));
        }
        Ok(Self {
            eta1,
            eta2,
            mu,
            sigma,
        })
    }

    /// Reassembles a posterior from stored natural and moment parameters
    /// without recomputing either, so a saved posterior restores exactly.
    /// Only shapes and finiteness are checked.
    pub fn from_parts(
        eta1: DMatrix<T>,
        eta2: Vec<DMatrix<T>>,
        mu: DMatrix<T>,
        sigma: Vec<DMatrix<T>>,
    ) -> Result<Self> {
        let (m, p) = eta1.shape();
        if mu.shape() != (m, p) || eta2.len() != p || sigma.len() != p {
            return Err(GpssmError::invalid("posterior blocks disagree in shape"));
        }
        if eta2.iter().chain(&sigma).any(|b| b.shape() != (m, m)) {
            return Err(GpssmError::invalid(
                "posterior covariance block has wrong shape",
            ));
        }
        let finite = |b: &DMatrix<T>| b.iter().all(|v| v.is_finite_value());
        if !(finite(&eta1) && finite(&mu) && eta2.iter().chain(&sigma).all(finite)) {
            return Err(GpssmError::invalid("posterior parameters must be finite"));
        }
        Ok(Self {
            eta1,
            eta2,
            mu,
            sigma,
        })
    }

    pub fn eta1(&self) -> &DMatrix<T> {
        &self.eta1
    }

    pub fn eta2(&self) -> &[DMatrix<T>] {
        &self.eta2
    }

    pub fn mu(&self) -> &DMatrix<T> {
        &self.mu
    }

    pub fn sigma(&self) -> &[DMatrix<T>] {
        &self.sigma
    }

    pub fn num_inducing(&self) -> usize {
        self.eta1.nrows()
    }

    pub fn num_outputs(&self) -> usize {
        self.eta1.ncols()
    }

    /// Largest violation of `μ = Σ η₁`, relative to `1 + ‖μ‖`.
    pub fn consistency_error(&self) -> T {
        let mut worst = T::zero();
        for d in 0..self.num_outputs() {
            let mu = self.mu.column(d);
            let r = (&self.sigma[d] * self.eta1.column(d) - mu).norm() / (T::one() + mu.norm());
            worst = worst.max(r);
        }
        worst
    }

    /// `η ← η + ρ (η* − η)`, moments re-derived.
    pub fn damped_toward(&self, target: &Self, rho: T) -> Result<Self> {
        if !(rho > T::zero() && rho <= T::one()) {
            return Err(GpssmError::invalid("step size rho must lie in (0, 1]"));
        }
        self.check_same_shape(target)?;
        if rho == T::one() {
            return Ok(target.clone());
        }
        let eta1 = &self.eta1 + (&target.eta1 - &self.eta1) * rho;
        let eta2 = self
            .eta2
            .iter()
            .zip(&target.eta2)
            .map(|(a, b)| {
                let mut m = a + (b - a) * rho;
                symmetrize(&mut m);
                m
            })
            .collect();
        Self::from_natural(eta1, eta2)
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.eta1.shape() != other.eta1.shape() {
            return Err(GpssmError::invalid("posteriors have different shapes"));
        }
        Ok(())
    }

    /// Draws `u` (M x P) from `q(u)`.
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Result<DMatrix<T>> {
        let m = self.num_inducing();
        let mut out = self.mu.clone();
        for d in 0..self.num_outputs() {
            let l = robust_factor(&self.sigma[d])?.factor();
            let eps = DVector::from_iterator(m, (0..m).map(|_| T::sample_standard_normal(rng)));
            let draw = l * eps;
            for j in 0..m {
                out[(j, d)] += draw[j];
            }
        }
        Ok(out)
    }
}

/// Ψ statistics accumulated over a set of transitions.
#[derive(Clone, Debug, PartialEq)]
pub struct SufficientStats<T: Real> {
    /// `Σ_t ⟨k_u(x_{t-1}) x_t[d]⟩`, one column per GP output.
    pub psi1: DMatrix<T>,
    /// `Σ_t ⟨k_u(x_{t-1}) k_u(x_{t-1})ᵀ⟩`.
    pub psi2: DMatrix<T>,
    /// Number of (possibly rescaled) transitions accumulated.
    pub effective_count: T,
}

impl<T: Real> SufficientStats<T> {
    pub fn zeros(m: usize, p: usize) -> Self {
        Self {
            psi1: DMatrix::zeros(m, p),
            psi2: DMatrix::zeros(m, m),
            effective_count: T::zero(),
        }
    }

    pub fn scaled(&self, s: T) -> Self {
        Self {
            psi1: &self.psi1 * s,
            psi2: &self.psi2 * s,
            effective_count: self.effective_count * s,
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        Self {
            psi1: &self.psi1 + &other.psi1,
            psi2: &self.psi2 + &other.psi2,
            effective_count: self.effective_count + other.effective_count,
        }
    }
}

/// Entrywise compensated summation of matrices.
struct KahanMatrix<T: Real> {
    sum: DMatrix<T>,
    carry: DMatrix<T>,
}

impl<T: Real> KahanMatrix<T> {
    fn zeros(r: usize, c: usize) -> Self {
        Self {
            sum: DMatrix::zeros(r, c),
            carry: DMatrix::zeros(r, c),
        }
    }

    fn add(&mut self, x: &DMatrix<T>) {
        for ((s, c), v) in self.sum.iter_mut().zip(self.carry.iter_mut()).zip(x.iter()) {
            let y = *v - *c;
            let t = *s + y;
            *c = (t - *s) - y;
            *s = t;
        }
    }
}

/// Weighted Monte Carlo estimate of Ψ₁, Ψ₂ over every transition slice in
/// `trajectories`, each multiplied by its slice scale.
pub fn accumulate_stats<T: Real>(
    model: &GpssmModel<T>,
    trajectories: &ParticleTrajectories<T>,
) -> Result<SufficientStats<T>> {
    trajectories.check_normalized()?;
    let m = model.num_inducing();
    let p = model.num_gp_outputs();
    let gp_idx = model.gp_output_indices();
    let z = model.inducing_inputs();
    let kern = model.kernel();
    let mut psi1 = KahanMatrix::zeros(m, p);
    let mut psi2 = KahanMatrix::zeros(m, m);
    let mut count = T::zero();
    let mut ku = DVector::zeros(m);
    for slice in trajectories.transitions() {
        let mut s1 = DMatrix::zeros(m, p);
        let mut s2 = DMatrix::zeros(m, m);
        for (i, w) in slice.weights.iter().enumerate() {
            if *w == T::zero() {
                continue;
            }
            let prev = slice.prev(i);
            let cur = slice.curr(i);
            for (j, zj) in z.iter().enumerate() {
                ku[j] = kern.k(prev, zj.as_slice());
            }
            for (d, &idx) in gp_idx.iter().enumerate() {
                s1.column_mut(d).axpy(*w * cur[idx], &ku, T::one());
            }
            s2.ger(*w, &ku, &ku, T::one());
        }
        psi1.add(&(s1 * slice.scale));
        psi2.add(&(s2 * slice.scale));
        count += slice.scale;
    }
    let mut psi2 = psi2.sum;
    symmetrize(&mut psi2);
    Ok(SufficientStats {
        psi1: psi1.sum,
        psi2,
        effective_count: count,
    })
}

/// The A-form data terms `Σ_t ⟨A_{t-1}ᵀ x_t⟩` (M x P) and
/// `Σ_t ⟨A_{t-1}ᵀ A_{t-1}⟩` (M x M), computed per particle without going
/// through Ψ. Equal to `K⁻¹Ψ₁` and `K⁻¹Ψ₂K⁻¹`.
pub fn a_form_terms<T: Real>(
    model: &GpssmModel<T>,
    kuu: &InducingKernel<T>,
    trajectories: &ParticleTrajectories<T>,
) -> Result<(DMatrix<T>, DMatrix<T>)> {
    trajectories.check_normalized()?;
    let m = model.num_inducing();
    let p = model.num_gp_outputs();
    let gp_idx = model.gp_output_indices();
    let mut ax = DMatrix::zeros(m, p);
    let mut aa = DMatrix::zeros(m, m);
    for slice in trajectories.transitions() {
        for (i, w) in slice.weights.iter().enumerate() {
            let ops = transition_operators(model, kuu, slice.prev(i));
            let cur = slice.curr(i);
            let ws = *w * slice.scale;
            for (d, &idx) in gp_idx.iter().enumerate() {
                ax.column_mut(d).axpy(ws * cur[idx], &ops.a, T::one());
            }
            aa.ger(ws, &ops.a, &ops.a, T::one());
        }
    }
    Ok((ax, aa))
}

/// Optimal `q(u)` for the given statistics:
///
/// ```text
/// η₁_d = Q_d⁻¹ K⁻¹ Ψ₁_d
/// η₂_d = -½ (K⁻¹ + Q_d⁻¹ K⁻¹ Ψ₂ K⁻¹)
/// ```
pub fn optimal_qu<T: Real>(
    stats: &SufficientStats<T>,
    model: &GpssmModel<T>,
    kuu: &InducingKernel<T>,
) -> Result<InducingPosterior<T>> {
    let (eta1, eta2) = natural_data_terms(stats, model, kuu)?;
    let half = T::lit(0.5);
    let eta2 = eta2
        .into_iter()
        .map(|data| {
            let mut m = (kuu.inverse() + data) * (-half);
            symmetrize(&mut m);
            m
        })
        .collect();
    InducingPosterior::from_natural(eta1, eta2)
}

/// The data-dependent parts `(Q⁻¹K⁻¹Ψ₁, [Q_d⁻¹K⁻¹Ψ₂K⁻¹]_d)` of the natural parameters.
pub fn natural_data_terms<T: Real>(
    stats: &SufficientStats<T>,
    model: &GpssmModel<T>,
    kuu: &InducingKernel<T>,
) -> Result<(DMatrix<T>, Vec<DMatrix<T>>)> {
    let m = model.num_inducing();
    let p = model.num_gp_outputs();
    if stats.psi1.shape() != (m, p) || stats.psi2.shape() != (m, m) {
        return Err(GpssmError::invalid(
            "statistics do not match the model's M and outputs",
        ));
    }
    let kinv = kuu.inverse();
    let q = model.process_noise();
    let gp_idx = model.gp_output_indices();
    let mut eta1 = kinv * &stats.psi1;
    let mut quad = kinv * &stats.psi2 * kinv;
    symmetrize(&mut quad);
    let mut eta2 = Vec::with_capacity(p);
    for (d, &idx) in gp_idx.iter().enumerate() {
        let qinv = T::one() / q[idx];
        let mut col = eta1.column_mut(d);
        col *= qinv;
        eta2.push(&quad * qinv);
    }
    Ok((eta1, eta2))
}

/// Online absorption of new statistics: the current posterior plays the prior.
///
/// ```text
/// η₁' = η₁ + Q⁻¹K⁻¹Ψ₁,   η₂' = η₂ − ½ Q⁻¹K⁻¹Ψ₂K⁻¹
/// ```
pub fn absorb_stats<T: Real>(
    q: &InducingPosterior<T>,
    stats: &SufficientStats<T>,
    model: &GpssmModel<T>,
    kuu: &InducingKernel<T>,
) -> Result<InducingPosterior<T>> {
    if q.num_inducing() != model.num_inducing() || q.num_outputs() != model.num_gp_outputs() {
        return Err(GpssmError::invalid("posterior does not match the model"));
    }
    let (d1, d2) = natural_data_terms(stats, model, kuu)?;
    let half = T::lit(0.5);
    let eta1 = q.eta1() + d1;
    let eta2 = q
        .eta2()
        .iter()
        .zip(d2)
        .map(|(e, d)| {
            let mut m = e - d * half;
            symmetrize(&mut m);
            m
        })
        .collect();
    InducingPosterior::from_natural(eta1, eta2)
}

/// `KL(q(u) || p(u))` summed over outputs.
pub fn kl_qu_pu<T: Real>(q: &InducingPosterior<T>, kuu: &InducingKernel<T>) -> T {
    let half = T::lit(0.5);
    let m = T::from_usize_lossy(q.num_inducing());
    let kinv = kuu.inverse();
    let logdet_k = kuu.factor().log_det();
    let mut total = T::zero();
    for d in 0..q.num_outputs() {
        let s = &q.sigma()[d];
        let mu = q.mu().column(d);
        let tr = kinv.component_mul(s).sum();
        let maha = mu.dot(&(kinv * mu));
        let logdet_s = match robust_factor(s) {
            Ok(f) => f.log_det(),
            Err(_) => T::neg_infinity(),
        };
        total += half * (tr + maha - m + logdet_k - logdet_s);
    }
    total.max(T::zero())
}

/// Either a fixed value of `u` or the distribution `q(u)`.
#[derive(Clone, Copy, Debug)]
pub enum InducingValue<'a, T: Real> {
    Point(&'a DMatrix<T>),
    Posterior(&'a InducingPosterior<T>),
}

/// `⟨Φ(x_t, x_{t-1}, u)⟩` in closed form:
/// `Σ_d −½(b + aΣ_daᵀ)/Q_d + log N(x_t[d] | a μ_d, Q_d)`.
pub fn phi<T: Real>(
    model: &GpssmModel<T>,
    kuu: &InducingKernel<T>,
    x_t: &[T],
    x_prev: &[T],
    u: InducingValue<'_, T>,
) -> T {
    let ops = transition_operators(model, kuu, x_prev);
    let q = model.process_noise();
    let half = T::lit(0.5);
    let mut total = T::zero();
    for (d, &idx) in model.gp_output_indices().iter().enumerate() {
        let (mean, extra) = match u {
            InducingValue::Point(u) => (ops.a.dot(&u.column(d)), T::zero()),
            InducingValue::Posterior(qu) => (
                ops.a.dot(&qu.mu().column(d)),
                ops.a.dot(&(&qu.sigma()[d] * &ops.a)),
            ),
        };
        let qd = q[idx];
        let r = x_t[idx] - mean;
        total += -half * (ops.b + extra) / qd - half * ((T::two_pi() * qd).ln() + r * r / qd);
    }
    total
}

/// Precomputed `O(M^2)`-per-call evaluator of the predictive
/// `N(f_* | A_*μ, B_* + A_*ΣA_*ᵀ)`.
#[derive(Clone, Debug)]
pub struct Predictor<T: Real> {
    kernel: crate::kernel::KernelSpec<T>,
    z: Vec<T>,
    dim: usize,
    /// `K⁻¹ μ_d`, one column per output.
    alpha: DMatrix<T>,
    /// `K⁻¹ Σ_d K⁻¹ − K⁻¹` per output.
    w: Vec<DMatrix<T>>,
}

impl<T: Real> Predictor<T> {
    pub fn new(model: &GpssmModel<T>, kuu: &InducingKernel<T>, q: &InducingPosterior<T>) -> Self {
        let kinv = kuu.inverse();
        let alpha = kinv * q.mu();
        let w = q
            .sigma()
            .iter()
            .map(|s| {
                let mut m = kinv * s * kinv - kinv;
                symmetrize(&mut m);
                m
            })
            .collect();
        let dim = model.state_dim();
        let z = model
            .inducing_inputs()
            .iter()
            .flat_map(|p| p.iter().copied())
            .collect();
        Self {
            kernel: model.kernel().clone(),
            z,
            dim,
            alpha,
            w,
        }
    }

    pub fn num_outputs(&self) -> usize {
        self.alpha.ncols()
    }

    pub fn num_inducing(&self) -> usize {
        self.alpha.nrows()
    }

    /// Fills `ku` with `k_u(x)`.
    #[inline]
    pub fn cross_into(&self, x: &[T], ku: &mut [T]) {
        for (j, k) in ku.iter_mut().enumerate() {
            *k = self.kernel.k(x, &self.z[j * self.dim..(j + 1) * self.dim]);
        }
    }

    /// Predictive mean and variance per output, allocation-free given scratch `ku`.
    #[inline]
    pub fn predict_into(&self, x: &[T], ku: &mut [T], mean: &mut [T], var: &mut [T]) {
        self.cross_into(x, ku);
        let m = ku.len();
        let kss = self.kernel.diag();
        for d in 0..self.num_outputs() {
            let alpha = self.alpha.column(d);
            let mut mu = T::zero();
            for j in 0..m {
                mu += ku[j] * alpha[j];
            }
            mean[d] = mu;
            let w = &self.w[d];
            let mut quad = T::zero();
            for j in 0..m {
                let col = w.column(j);
                let mut s = T::zero();
                for i in 0..m {
                    s += col[i] * ku[i];
                }
                quad += ku[j] * s;
            }
            var[d] = (kss + quad).max(T::zero());
        }
    }

    /// Predictive means and variances for `n` inputs stored row-major in
    /// `xs`, as `n x P` matrices.
    pub fn predict_batch(&self, xs: &[T]) -> (DMatrix<T>, DMatrix<T>) {
        let n = xs.len() / self.dim;
        let m = self.num_inducing();
        let mut kx = DMatrix::zeros(n, m);
        for r in 0..n {
            let x = &xs[r * self.dim..(r + 1) * self.dim];
            for j in 0..m {
                kx[(r, j)] = self.kernel.k(x, &self.z[j * self.dim..(j + 1) * self.dim]);
            }
        }
        let mean = &kx * &self.alpha;
        let kss = self.kernel.diag();
        let mut var = DMatrix::zeros(n, self.num_outputs());
        for (d, w) in self.w.iter().enumerate() {
            let kw = &kx * w;
            for r in 0..n {
                let quad = kx.row(r).dot(&kw.row(r));
                var[(r, d)] = (kss + quad).max(T::zero());
            }
        }
        (mean, var)
    }

    pub fn predict(&self, x: &[T]) -> (DVector<T>, DVector<T>) {
        let p = self.num_outputs();
        let mut ku = vec![T::zero(); self.num_inducing()];
        let mut mean = DVector::zeros(p);
        let mut var = DVector::zeros(p);
        self.predict_into(x, &mut ku, mean.as_mut_slice(), var.as_mut_slice());
        (mean, var)
    }
}

/// `N(f_* | A_*μ, B_* + A_*ΣA_*ᵀ)` at a single test input.
pub fn predict_transition<T: Real>(
    q: &InducingPosterior<T>,
    model: &GpssmModel<T>,
    kuu: &InducingKernel<T>,
    x_star: &[T],
) -> Gaussian<T> {
    let (mean, var) = Predictor::new(model, kuu, q).predict(x_star);
    Gaussian {
        mean,
        cov: DMatrix::from_diagonal(&var),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RolloutMode {
    /// Propagate the predictive mean only.
    MeanOnly,
    /// Draw `f_*` from the full marginal predictive independently at every
    /// step (successive draws are treated as conditionally independent).
    SampleFunctionFree,
    /// Draw one `u ~ q(u)` per path, then `f_* ~ N(A_* u, B_*)` at every
    /// step. No process noise.
    NoiseFree,
}

/// Simulated paths plus per-step mean and variance across paths.
#[derive(Clone, Debug)]
pub struct Rollout<T: Real> {
    pub paths: Vec<Vec<DVector<T>>>,
    pub mean: Vec<DVector<T>>,
    pub variance: Vec<DVector<T>>,
}

/// Chains one-step predictions from `x0` for `horizon` steps. Process
/// noise is switched off in every mode.
pub fn rollout<T: Real>(
    q: &InducingPosterior<T>,
    model: &GpssmModel<T>,
    kuu: &InducingKernel<T>,
    x0: &[T],
    horizon: usize,
    n_paths: usize,
    mode: RolloutMode,
    seed: u64,
) -> Result<Rollout<T>> {
    if horizon == 0 {
        return Err(GpssmError::invalid("rollout horizon must be at least 1"));
    }
    if x0.len() != model.state_dim() {
        return Err(GpssmError::invalid("rollout start has wrong dimension"));
    }
    let n_paths = if mode == RolloutMode::MeanOnly {
        1
    } else {
        n_paths.max(1)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let predictor = Predictor::new(model, kuu, q);
    let p = model.num_gp_outputs();
    let m = model.num_inducing();
    let mut ku = vec![T::zero(); m];
    let mut mean = vec![T::zero(); p];
    let mut var = vec![T::zero(); p];
    let mut paths = Vec::with_capacity(n_paths);
    for _ in 0..n_paths {
        // Conditional predictor given a sampled u: mean K⁻¹u, variance b(x).
        let conditional = if mode == RolloutMode::NoiseFree {
            let u = q.sample(&mut rng)?;
            let fixed = InducingPosterior {
                eta1: DMatrix::zeros(m, p),
                eta2: vec![DMatrix::zeros(m, m); p],
                mu: u,
                sigma: vec![DMatrix::zeros(m, m); p],
            };
            Some(Predictor::new(model, kuu, &fixed))
        } else {
            None
        };
        let pred = conditional.as_ref().unwrap_or(&predictor);
        let mut path = Vec::with_capacity(horizon + 1);
        path.push(DVector::from_column_slice(x0));
        for t in 0..horizon {
            let x = path[t].as_slice();
            pred.predict_into(x, &mut ku, &mut mean, &mut var);
            let f: Vec<T> = match mode {
                RolloutMode::MeanOnly => mean.clone(),
                _ => (0..p)
                    .map(|d| mean[d] + var[d].sqrt() * T::sample_standard_normal(&mut rng))
                    .collect(),
            };
            let next = model.apply_structure_unchecked(x, &f);
            path.push(next);
        }
        paths.push(path);
    }
    let d = model.state_dim();
    let n = T::from_usize_lossy(paths.len());
    let mut means = Vec::with_capacity(horizon + 1);
    let mut vars = Vec::with_capacity(horizon + 1);
    for t in 0..=horizon {
        let mut mu = DVector::zeros(d);
        for path in &paths {
            mu += &path[t];
        }
        mu /= n;
        let mut v = DVector::zeros(d);
        for path in &paths {
            let r = &path[t] - &mu;
            v += r.component_mul(&r);
        }
        v /= n;
        means.push(mu);
        vars.push(v);
    }
    Ok(Rollout {
        paths,
        mean: means,
        variance: vars,
    })
}

/// Places `m` inducing inputs over a cloud of states: evenly spaced over
/// the range in one dimension, farthest-point selection otherwise.
pub fn place_inducing_inputs<T: Real>(points: &[DVector<T>], m: usize) -> Result<Vec<DVector<T>>> {
    if points.is_empty() || m == 0 {
        return Err(GpssmError::invalid(
            "need points and m >= 1 to place inducing inputs",
        ));
    }
    let d = points[0].len();
    if d == 1 {
        let (lo, hi) = points
            .iter()
            .fold((points[0][0], points[0][0]), |(lo, hi), p| {
                (lo.min(p[0]), hi.max(p[0]))
            });
        let (lo, hi) = if hi - lo < T::lit(1e-6) {
            (lo - T::one(), hi + T::one())
        } else {
            (lo, hi)
        };
        return Ok(linspace(lo, hi, m)
            .into_iter()
            .map(|v| DVector::from_element(1, v))
            .collect());
    }
    let n = T::from_usize_lossy(points.len());
    let centroid = points.iter().fold(DVector::zeros(d), |acc, p| acc + p) / n;
    let first = points
        .iter()
        .enumerate()
        .min_by(|a, b| {
            (a.1 - &centroid)
                .norm()
                .partial_cmp(&(b.1 - &centroid).norm())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
        .map(|(i, _)| i)
        .unwrap_or(0);
    let mut chosen = vec![points[first].clone()];
    let mut dist: Vec<T> = points.iter().map(|p| (p - &chosen[0]).norm()).collect();
    while chosen.len() < m {
        let (idx, best) = dist
            .iter()
            .enumerate()
            .fold((0, T::neg_infinity()), |acc, (i, v)| {
                if *v > acc.1 {
                    (i, *v)
                } else {
                    acc
                }
            });
        if best <= T::lit(1e-6) {
            break;
        }
        let p = points[idx].clone();
        for (i, q) in points.iter().enumerate() {
            dist[i] = dist[i].min((q - &p).norm());
        }
        chosen.push(p);
    }
    if chosen.len() < m {
        return Err(GpssmError::invalid(format!(
            "only {} distinct states available for {m} inducing inputs",
            chosen.len()
        )));
    }
    Ok(chosen)
}

pub(crate) fn linspace<T: Real>(lo: T, hi: T, n: usize) -> Vec<T> {
    if n == 1 {
        return vec![(lo + hi) * T::lit(0.5)];
    }
    let step = (hi - lo) / T::from_usize_lossy(n - 1);
    (0..n).map(|i| lo + step * T::from_usize_lossy(i)).collect()
}

/// Point-particle statistics of a fully observed state sequence.
pub fn stats_from_states<T: Real>(
    model: &GpssmModel<T>,
    trajectory: &Trajectory<T>,
) -> Result<SufficientStats<T>> {
    let parts = ParticleTrajectories::from_paths(vec![trajectory.states.clone()], vec![T::zero()])?;
    accumulate_stats(model, &parts)
}
