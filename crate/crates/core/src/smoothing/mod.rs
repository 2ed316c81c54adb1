//! Smoothing in the auxiliary Markovian state-space model.
//!
//! For fixed `q(u)` the optimal `q(x)` is the smoothing distribution of
//!
//! ```text
//! x_0 ~ p(x_0)
//! x_t | x_{t-1} ~ N(A_{t-1} μ, Q)
//! weight_t = p(y_t | x_t) · exp(−½ tr(Q⁻¹(B_{t-1} + A_{t-1} Σ A_{t-1}ᵀ)))
//! ```
//!
//! [`bootstrap_fixed_lag_smoother`] approximates it with weighted particles;
//! [`grid_smoother`] computes it exactly on a lattice for tiny problems.

mod bootstrap;
mod grid;

pub use bootstrap::{bootstrap_fixed_lag_smoother, FilterState, SmootherOptions, SmootherOutput};
pub use grid::{grid_smoother, GridSmoothing, GridSpec};

use nalgebra::DVector;
use rand::Rng;

use crate::error::{GpssmError, Result};
use crate::model::{DiagGaussian, GpssmModel, LikelihoodSpec, Structure};
use crate::scalar::{log_sum_exp, Real};
use crate::sparse::{InducingKernel, InducingPosterior, Predictor};

const WEIGHT_SUM_TOL: f64 = 1e-8;

/// Markovian state-space model with an extra per-step log weight that
/// depends on the previous state.
pub trait StateSpaceModel<T: Real> {
    fn state_dim(&self) -> usize;

    fn initial_log_density(&self, x: &[T]) -> T;

    fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<T>;

    /// Samples `next ~ p(· | prev)` and returns
    /// `(extra_log_weight(prev), log p(next | prev))`.
    fn propagate<R: Rng + ?Sized>(&self, prev: &[T], next: &mut [T], rng: &mut R) -> (T, T);

    /// [`propagate`](Self::propagate) applied to every particle in turn,
    /// with `prev` and `next` stored row-major.
    fn propagate_all<R: Rng + ?Sized>(
        &self,
        prev: &[T],
        next: &mut [T],
        rng: &mut R,
        extra: &mut [T],
        log_trans: &mut [T],
    ) {
        let dim = self.state_dim();
        for i in 0..extra.len() {
            let (e, l) = self.propagate(
                &prev[i * dim..(i + 1) * dim],
                &mut next[i * dim..(i + 1) * dim],
                rng,
            );
            extra[i] = e;
            log_trans[i] = l;
        }
    }

    fn transition_log_density(&self, prev: &[T], next: &[T]) -> T;

    fn extra_log_weight(&self, prev: &[T]) -> T;

    fn observation_log_density(&self, y: &[T], x: &[T]) -> T;

    /// Whether every state component has a transition density. Models with
    /// deterministic components cannot be smoothed on a grid.
    fn has_density(&self) -> bool {
        true
    }
}

/// The auxiliary model induced by a GP-SSM and a fixed `q(u)`.
#[derive(Clone, Debug)]
pub struct AuxiliaryModel<T: Real> {
    predictor: Predictor<T>,
    process_noise: DVector<T>,
    gp_idx: Vec<usize>,
    structure: Structure<T>,
    likelihood: LikelihoodSpec<T>,
    x0_prior: DiagGaussian<T>,
    dim: usize,
}

pub fn build_auxiliary<T: Real>(
    model: &GpssmModel<T>,
    kuu: &InducingKernel<T>,
    q: &InducingPosterior<T>,
) -> Result<AuxiliaryModel<T>> {
    if q.num_inducing() != model.num_inducing() || q.num_outputs() != model.num_gp_outputs() {
        return Err(GpssmError::invalid("q(u) does not match the model"));
    }
    Ok(AuxiliaryModel {
        predictor: Predictor::new(model, kuu, q),
        process_noise: model.process_noise().clone(),
        gp_idx: model.gp_output_indices(),
        structure: model.structure(),
        likelihood: model.likelihood().clone(),
        x0_prior: model.x0_prior().clone(),
        dim: model.state_dim(),
    })
}

impl<T: Real> AuxiliaryModel<T> {
    pub fn predictor(&self) -> &Predictor<T> {
        &self.predictor
    }

    /// Transition mean `structure(prev, A μ)` and the per-output
    /// `B + A Σ Aᵀ` at `prev`.
    pub fn transition_moments(&self, prev: &[T]) -> (DVector<T>, DVector<T>) {
        let (mean, var) = self.predictor.predict(prev);
        (self.structured_mean(prev, mean.as_slice()), var)
    }

    fn structured_mean(&self, prev: &[T], f: &[T]) -> DVector<T> {
        match self.structure {
            Structure::Free => DVector::from_column_slice(f),
            Structure::SecondOrder { dt } => DVector::from_vec(vec![prev[0] + dt * prev[1], f[0]]),
        }
    }

    fn gaussian_terms(&self, next: &[T], mean: &[T], var: &[T]) -> (T, T) {
        let half = T::lit(0.5);
        let mut extra = T::zero();
        let mut log_trans = T::zero();
        for (d, &idx) in self.gp_idx.iter().enumerate() {
            let q = self.process_noise[idx];
            extra -= half * var[d] / q;
            let r = next[idx] - mean[d];
            log_trans -= half * ((T::two_pi() * q).ln() + r * r / q);
        }
        (extra, log_trans)
    }
}

impl<T: Real> StateSpaceModel<T> for AuxiliaryModel<T> {
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn initial_log_density(&self, x: &[T]) -> T {
        self.x0_prior.log_density(x)
    }

    fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<T> {
        self.x0_prior.sample(rng)
    }

    fn propagate<R: Rng + ?Sized>(&self, prev: &[T], next: &mut [T], rng: &mut R) -> (T, T) {
        let (f, var) = self.predictor.predict(prev);
        let mean = self.structured_mean(prev, f.as_slice());
        next.copy_from_slice(mean.as_slice());
        for &idx in &self.gp_idx {
            next[idx] += self.process_noise[idx].sqrt() * T::sample_standard_normal(rng);
        }
        self.gaussian_terms(next, f.as_slice(), var.as_slice())
    }

    fn propagate_all<R: Rng + ?Sized>(
        &self,
        prev: &[T],
        next: &mut [T],
        rng: &mut R,
        extra: &mut [T],
        log_trans: &mut [T],
    ) {
        let dim = self.dim;
        let (f, var) = self.predictor.predict_batch(prev);
        let p = self.gp_idx.len();
        let mut fi = vec![T::zero(); p];
        let mut vi = vec![T::zero(); p];
        for i in 0..extra.len() {
            let x = &prev[i * dim..(i + 1) * dim];
            let out = &mut next[i * dim..(i + 1) * dim];
            for d in 0..p {
                fi[d] = f[(i, d)];
                vi[d] = var[(i, d)];
            }
            match self.structure {
                Structure::Free => out.copy_from_slice(&fi),
                Structure::SecondOrder { dt } => {
                    out[0] = x[0] + dt * x[1];
                    out[1] = fi[0];
                }
            }
            for &idx in &self.gp_idx {
                out[idx] += self.process_noise[idx].sqrt() * T::sample_standard_normal(rng);
            }
            let (e, l) = self.gaussian_terms(out, &fi, &vi);
            extra[i] = e;
            log_trans[i] = l;
        }
    }

    fn transition_log_density(&self, prev: &[T], next: &[T]) -> T {
        let (mean, var) = self.predictor.predict(prev);
        if let Structure::SecondOrder { dt } = self.structure {
            let det = prev[0] + dt * prev[1];
            if next[0] != det {
                return T::neg_infinity();
            }
        }
        self.gaussian_terms(next, mean.as_slice(), var.as_slice()).1
    }

    fn extra_log_weight(&self, prev: &[T]) -> T {
        let (_, var) = self.predictor.predict(prev);
        let half = T::lit(0.5);
        self.gp_idx
            .iter()
            .enumerate()
            .fold(T::zero(), |acc, (d, &idx)| {
                acc - half * var[d] / self.process_noise[idx]
            })
    }

    fn observation_log_density(&self, y: &[T], x: &[T]) -> T {
        self.likelihood.log_density(y, x)
    }

    fn has_density(&self) -> bool {
        matches!(self.structure, Structure::Free)
    }
}

/// Weighted particle pairs `(x_{t-1}, x_t)` approximating `q(x_{t-1}, x_t)`
/// at one time index (or `q(x_0)` for the initial slice).
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSlice<T: Real> {
    /// Time index of `x_t` within the smoothed window.
    pub time: usize,
    dim: usize,
    prev_states: Vec<T>,
    states: Vec<T>,
    /// Normalized weights.
    pub weights: Vec<T>,
    /// Multiplier applied to this slice's contribution (`T/S` for SVI segments).
    pub scale: T,
    /// Increment of the log normalizing constant of the auxiliary model.
    pub log_z_increment: T,
    /// `log_z_increment − ⟨log q̃_t⟩` frozen at smoothing time: this slice's
    /// share of the entropy of `q(x)`.
    pub entropy_term: T,
}

impl<T: Real> ParticleSlice<T> {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn prev(&self, i: usize) -> &[T] {
        &self.prev_states[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn curr(&self, i: usize) -> &[T] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn has_prev(&self) -> bool {
        !self.prev_states.is_empty()
    }

    pub fn ess(&self) -> T {
        let s2 = self.weights.iter().fold(T::zero(), |a, w| a + *w * *w);
        T::one() / s2
    }

    /// Weighted mean of the current states.
    pub fn mean(&self) -> DVector<T> {
        let mut m = DVector::zeros(self.dim);
        for (i, w) in self.weights.iter().enumerate() {
            for (k, v) in self.curr(i).iter().enumerate() {
                m[k] += *w * *v;
            }
        }
        m
    }

    /// Weighted variance of each current-state component.
    pub fn variance(&self) -> DVector<T> {
        let mean = self.mean();
        let mut v = DVector::zeros(self.dim);
        for (i, w) in self.weights.iter().enumerate() {
            for (k, x) in self.curr(i).iter().enumerate() {
                let r = *x - mean[k];
                v[k] += *w * r * r;
            }
        }
        v
    }

    pub(crate) fn new(
        time: usize,
        dim: usize,
        prev_states: Vec<T>,
        states: Vec<T>,
        weights: Vec<T>,
    ) -> Self {
        Self {
            time,
            dim,
            prev_states,
            states,
            weights,
            scale: T::one(),
            log_z_increment: T::zero(),
            entropy_term: T::zero(),
        }
    }
}

/// Particle approximation of `q(x)` over a window.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleTrajectories<T: Real> {
    initial: Option<ParticleSlice<T>>,
    transitions: Vec<ParticleSlice<T>>,
    lag: usize,
    seed: u64,
}

impl<T: Real> ParticleTrajectories<T> {
    pub(crate) fn from_parts(
        initial: Option<ParticleSlice<T>>,
        transitions: Vec<ParticleSlice<T>>,
        lag: usize,
        seed: u64,
    ) -> Self {
        Self {
            initial,
            transitions,
            lag,
            seed,
        }
    }

    /// `L` full trajectories `x_0..x_n` sharing one weight vector.
    pub fn from_paths(paths: Vec<Vec<DVector<T>>>, log_weights: Vec<T>) -> Result<Self> {
        if paths.is_empty() || paths.len() != log_weights.len() {
            return Err(GpssmError::invalid("need one log weight per path"));
        }
        let len = paths[0].len();
        if len == 0 || paths.iter().any(|p| p.len() != len) {
            return Err(GpssmError::invalid(
                "paths must be non-empty and of equal length",
            ));
        }
        let dim = paths[0][0].len();
        if paths
            .iter()
            .flatten()
            .any(|x| x.len() != dim || x.iter().any(|v| !v.is_finite_value()))
        {
            return Err(GpssmError::invalid(
                "path states must be finite with a common dimension",
            ));
        }
        let lse = log_sum_exp(&log_weights);
        if !lse.is_finite_value() {
            return Err(GpssmError::DegenerateWeights { time: 0 });
        }
        let weights: Vec<T> = log_weights.iter().map(|w| (*w - lse).exp()).collect();
        let flat =
            |t: usize| -> Vec<T> { paths.iter().flat_map(|p| p[t].iter().copied()).collect() };
        let initial = ParticleSlice::new(0, dim, Vec::new(), flat(0), weights.clone());
        let transitions = (1..len)
            .map(|t| ParticleSlice::new(t, dim, flat(t - 1), flat(t), weights.clone()))
            .collect();
        Ok(Self {
            initial: Some(initial),
            transitions,
            lag: len,
            seed: 0,
        })
    }

    /// Slice for `x_0`, present when the window starts at the beginning of the series.
    pub fn initial(&self) -> Option<&ParticleSlice<T>> {
        self.initial.as_ref()
    }

    pub fn transitions(&self) -> &[ParticleSlice<T>] {
        &self.transitions
    }

    /// Keeps only the transition slices with `first <= time <= last` and
    /// drops the initial slice.
    pub fn restrict(&mut self, first: usize, last: usize) {
        self.initial = None;
        self.transitions
            .retain(|s| s.time >= first && s.time <= last);
    }

    pub fn lag(&self) -> usize {
        self.lag
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_particles(&self) -> usize {
        self.transitions
            .first()
            .or(self.initial.as_ref())
            .map_or(0, |s| s.len())
    }

    /// Smallest effective sample size over all slices.
    pub fn ess_min(&self) -> T {
        self.initial
            .iter()
            .chain(&self.transitions)
            .map(|s| s.ess())
            .fold(None, |acc: Option<T>, e| Some(acc.map_or(e, |a| a.min(e))))
            .unwrap_or(T::zero())
    }

    /// Sum of log normalizer increments over the transition slices, each scaled.
    pub fn log_evidence(&self) -> T {
        self.initial
            .iter()
            .chain(&self.transitions)
            .fold(T::zero(), |a, s| a + s.scale * s.log_z_increment)
    }

    /// Estimated entropy of `q(x)` over the window (scaled per slice).
    pub fn entropy(&self) -> T {
        self.initial
            .iter()
            .chain(&self.transitions)
            .fold(T::zero(), |a, s| a + s.scale * s.entropy_term)
    }

    /// Smoothed mean of each `x_t` in the transition slices.
    pub fn smoothed_means(&self) -> Vec<DVector<T>> {
        self.transitions.iter().map(|s| s.mean()).collect()
    }

    pub fn set_scale(&mut self, scale: T) {
        for s in self.initial.iter_mut().chain(self.transitions.iter_mut()) {
            s.scale = scale;
        }
    }

    pub fn check_normalized(&self) -> Result<()> {
        for s in self.initial.iter().chain(&self.transitions) {
            let sum = s.weights.iter().fold(T::zero(), |a, w| a + *w);
            if (sum - T::one()).abs() > T::lit(WEIGHT_SUM_TOL) {
                return Err(GpssmError::invalid(format!(
                    "weights at time {} sum to {sum}",
                    s.time
                )));
            }
        }
        Ok(())
    }
}
