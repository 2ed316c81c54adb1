//! Training loop in batch, SVI and online modes.
//!
//! Every iteration smooths the auxiliary model once and reuses that single
//! particle set for the ELBO estimate, the θ-gradient and the optimal
//! `q(u)`. The ELBO and gradient are taken at the parameters the particles
//! were drawn under, before either update is applied.

mod objective;
mod svi;

use nalgebra::DVector;
use rand::SeedableRng;

use crate::error::{GpssmError, Result};
use crate::kernel::{KernelFamily, KernelSpec};
use crate::model::{DiagGaussian, GpssmModel, LikelihoodSpec, Structure, Trajectory};
use crate::scalar::Real;
use crate::smoothing::{
    bootstrap_fixed_lag_smoother, build_auxiliary, grid_smoother, AuxiliaryModel, FilterState,
    GridSpec, SmootherOptions, StateSpaceModel,
};
use crate::sparse::{
    absorb_stats, accumulate_stats, linspace, optimal_qu, place_inducing_inputs, stats_from_states,
    InducingKernel, InducingPosterior, SufficientStats,
};

pub use objective::{
    elbo_estimate, objective, objective_threaded, theta_gradient, ObjectiveValue, SmoothedSegment,
    ThetaLayout, Trainable,
};
pub use svi::{edge_effect_bound, segment_count, segment_weights, svi_scale, svi_stats};

/// `scale · (offset + i)^(−exponent)` for iteration `i = 0, 1, ...`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub scale: f64,
    pub offset: f64,
    pub exponent: f64,
}

impl Schedule {
    pub fn new(scale: f64, offset: f64, exponent: f64) -> Self {
        Self {
            scale,
            offset,
            exponent,
        }
    }

    pub fn constant(value: f64) -> Self {
        Self::new(value, 1.0, 0.0)
    }

    pub fn value(&self, i: usize) -> f64 {
        self.scale * (self.offset + i as f64).powf(-self.exponent)
    }

    fn check(&self, name: &str) -> Result<()> {
        let ok = self.scale.is_finite()
            && self.scale > 0.0
            && self.offset.is_finite()
            && self.offset > 0.0
            && self.exponent.is_finite()
            && self.exponent >= 0.0;
        if !ok {
            return Err(GpssmError::config(format!(
                "{name}: need scale > 0, offset > 0, exponent >= 0"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainingMode {
    /// The minibatch is the whole series.
    Batch,
    /// Uniformly drawn segments of `segment_length` transitions. Each is
    /// smoothed with `warmup` leading and `lag` trailing observations of
    /// context that contribute no statistics.
    Svi {
        segment_length: usize,
        segments_per_iter: usize,
        warmup: usize,
    },
    /// Sequential absorption of consecutive chunks with θ frozen.
    Online { segment_length: usize },
}

/// How `q(x)` is represented during training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SmootherChoice {
    /// Bootstrap fixed-lag particle smoother.
    Particle,
    /// Exact smoother on a uniform lattice over `[lo, hi]^D` (D ≤ 2, test oracle).
    Grid { lo: f64, hi: f64, cells: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub mode: TrainingMode,
    pub n_particles: usize,
    pub lag: usize,
    /// Damping of the natural-parameter update.
    pub rho: Schedule,
    /// Step size of the θ update.
    pub lambda: Schedule,
    pub max_iters: usize,
    /// Relative change between consecutive trailing-window ELBO means that
    /// counts as converged.
    pub elbo_tolerance: f64,
    pub elbo_window: usize,
    /// Per-coordinate bound on the normalized θ-gradient.
    pub grad_clip: f64,
    pub trainable: Trainable,
    /// Re-place the inducing inputs over the smoothed means after the first pass.
    pub relocate_inducing: bool,
    pub smoother: SmootherChoice,
    pub master_seed: u64,
    /// Worker threads for the objective. Results do not depend on it.
    pub threads: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            mode: TrainingMode::Batch,
            n_particles: 1000,
            lag: 10,
            rho: Schedule::new(1.0, 1.0, 0.7),
            lambda: Schedule::new(1.0, 1.0, 0.51),
            max_iters: 100,
            elbo_tolerance: 1e-3,
            elbo_window: 5,
            grad_clip: 1.0,
            trainable: Trainable::default(),
            relocate_inducing: true,
            smoother: SmootherChoice::Particle,
            master_seed: 0,
            threads: 1,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 {
            return Err(GpssmError::config("threads must be at least 1"));
        }
        if self.n_particles < 2 {
            return Err(GpssmError::config("n_particles must be at least 2"));
        }
        if self.lag < 1 {
            return Err(GpssmError::config("lag must be at least 1"));
        }
        self.rho.check("rho")?;
        self.lambda.check("lambda")?;
        if self.rho.value(0) > 1.0 {
            return Err(GpssmError::config("rho must stay in (0, 1]"));
        }
        if self.elbo_window < 1 {
            return Err(GpssmError::config("elbo_window must be at least 1"));
        }
        if !(self.elbo_tolerance.is_finite() && self.elbo_tolerance >= 0.0) {
            return Err(GpssmError::config(
                "elbo_tolerance must be finite and non-negative",
            ));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip > 0.0) {
            return Err(GpssmError::config("grad_clip must be positive"));
        }
        match self.mode {
            TrainingMode::Batch => {}
            TrainingMode::Svi {
                segment_length,
                segments_per_iter,
                ..
            } => {
                if segment_length < 1 || segments_per_iter < 1 {
                    return Err(GpssmError::config(
                        "svi segment_length and segments_per_iter must be at least 1",
                    ));
                }
                if !(self.rho.exponent > 0.5 && self.rho.exponent <= 1.0) {
                    return Err(GpssmError::config(
                        "svi needs a Robbins-Monro rho schedule: exponent in (0.5, 1]",
                    ));
                }
            }
            TrainingMode::Online { segment_length } => {
                if segment_length < 1 {
                    return Err(GpssmError::config(
                        "online segment_length must be at least 1",
                    ));
                }
            }
        }
        if let SmootherChoice::Grid { lo, hi, cells } = self.smoother {
            if !(lo.is_finite() && hi.is_finite() && lo < hi && cells >= 2) {
                return Err(GpssmError::config(
                    "grid smoother needs lo < hi and cells >= 2",
                ));
            }
        }
        Ok(())
    }
}

/// One line of the progress stream.
#[derive(Clone, Debug, PartialEq)]
pub struct ProgressRecord<T: Real> {
    pub iter: usize,
    pub elbo: T,
    pub ess_min: T,
    pub theta: Vec<T>,
}

/// Everything needed to continue training. Random streams are derived
/// from `master_seed` and the iteration counter, so no generator state is
/// carried.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState<T: Real> {
    pub model: GpssmModel<T>,
    pub q_u: InducingPosterior<T>,
    pub iteration: usize,
    pub elbo_trace: Vec<T>,
    /// Particle cloud at the end of the most recent pass that reached the
    /// end of its data, used to warm-start online updates.
    pub filter_state: Option<FilterState<T>>,
    pub master_seed: u64,
    pub converged: bool,
}

impl<T: Real> TrainingState<T> {
    pub fn new(model: GpssmModel<T>, q_u: InducingPosterior<T>, master_seed: u64) -> Result<Self> {
        if q_u.num_inducing() != model.num_inducing() || q_u.num_outputs() != model.num_gp_outputs()
        {
            return Err(GpssmError::invalid("q(u) does not match the model"));
        }
        Ok(Self {
            model,
            q_u,
            iteration: 0,
            elbo_trace: Vec::new(),
            filter_state: None,
            master_seed,
            converged: false,
        })
    }
}

/// Mixes a stream identifier into the master seed (SplitMix64 finalizer).
pub fn derive_seed(master: u64, stream: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    stream.iter().fold(mix(master), |h, s| mix(h ^ mix(*s)))
}

/// True when the means of the last two trailing windows of `trace` differ
/// by less than `tolerance` relative to `max(|previous mean|, 1)`.
pub fn elbo_converged<T: Real>(trace: &[T], window: usize, tolerance: f64) -> bool {
    if window == 0 || trace.len() < 2 * window {
        return false;
    }
    let n = trace.len();
    let mean = |s: &[T]| s.iter().map(|v| v.as_f64()).sum::<f64>() / s.len() as f64;
    let m1 = mean(&trace[n - window..]);
    let m0 = mean(&trace[n - 2 * window..n - window]);
    (m1 - m0).abs() / m0.abs().max(1.0) < tolerance
}

/// Observation model used by [`initial_model`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObservationKind {
    /// Identity emission on the first `E` states with Gaussian noise.
    Gaussian,
    /// Counts with log-rate linear in one state component.
    Poisson { observed_state_index: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitSpec<T: Real> {
    pub family: KernelFamily,
    pub state_dim: usize,
    pub num_inducing: usize,
    pub structure: Structure<T>,
    pub observation: ObservationKind,
}

fn check_observations<T: Real>(y: &[DVector<T>]) -> Result<usize> {
    let e = y
        .first()
        .map(|v| v.len())
        .ok_or_else(|| GpssmError::invalid("no observations"))?;
    if e == 0 {
        return Err(GpssmError::invalid(
            "observations must have at least one column",
        ));
    }
    for (t, v) in y.iter().enumerate() {
        if v.len() != e {
            return Err(GpssmError::invalid(format!(
                "observation {t} has dimension {}, expected {e}",
                v.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite_value()) {
            return Err(GpssmError::invalid(format!(
                "observation {t} is not finite"
            )));
        }
    }
    Ok(e)
}

fn column_moments<T: Real>(y: &[DVector<T>], e: usize) -> (T, T) {
    let n = T::from_usize_lossy(y.len());
    let mean = y.iter().fold(T::zero(), |a, v| a + v[e]) / n;
    let var = y
        .iter()
        .fold(T::zero(), |a, v| a + (v[e] - mean) * (v[e] - mean))
        / n;
    (mean, var)
}

/// Scale-matched starting model. For Gaussian observations: lengthscale
/// `d` = std of `y_d`, signal variance = variance of first differences,
/// `Q = 0.1 · var(y)`, `R = var(y)`, `x_0 ~ N(y_1, var(y))`, inducing
/// inputs spread over the observations. For counts: unit lengthscales and
/// signal variance, `Q = 0.1`, unit loadings, `β = log(mean count)`,
/// standard-normal `x_0`, and inducing inputs on a lattice over `[−2.5, 2.5]^D`.
/// Latent components without an observed counterpart get unit scales.
pub fn initial_model<T: Real>(y: &[DVector<T>], spec: &InitSpec<T>) -> Result<GpssmModel<T>> {
    let e = check_observations(y)?;
    if y.len() < 2 {
        return Err(GpssmError::invalid("need at least two observations"));
    }
    let d = spec.state_dim;
    if d == 0 || spec.num_inducing == 0 {
        return Err(GpssmError::config(
            "state_dim and num_inducing must be positive",
        ));
    }
    let tenth = T::lit(0.1);
    let (kernel, q, lik, x0, z) = match spec.observation {
        ObservationKind::Gaussian => {
            if e > d {
                return Err(GpssmError::config(format!(
                    "{e} observed columns but state dimension {d}"
                )));
            }
            let floor = T::lit(1e-6);
            let moments: Vec<(T, T)> = (0..e).map(|k| column_moments(y, k)).collect();
            let var = |k: usize| {
                if k < e {
                    moments[k].1.max(floor)
                } else {
                    T::one()
                }
            };
            let n_diff = T::from_usize_lossy(y.len() - 1);
            let diff_var = (0..e)
                .map(|k| {
                    let diffs: Vec<T> = y.windows(2).map(|w| w[1][k] - w[0][k]).collect();
                    let m = diffs.iter().fold(T::zero(), |a, v| a + *v) / n_diff;
                    diffs.iter().fold(T::zero(), |a, v| a + (*v - m) * (*v - m)) / n_diff
                })
                .fold(T::zero(), |a, v| a + v)
                / T::from_usize_lossy(e);
            let kernel = KernelSpec::new(
                spec.family,
                DVector::from_fn(d, |k, _| var(k).sqrt()),
                diff_var.max(floor),
            )?;
            let q = DVector::from_fn(d, |k, _| tenth * var(k));
            let lik = LikelihoodSpec::gaussian(DVector::from_fn(e, |k, _| var(k)))?;
            let x0 = DiagGaussian::new(
                DVector::from_fn(d, |k, _| if k < e { y[0][k] } else { T::zero() }),
                DVector::from_fn(d, |k, _| var(k)),
            )?;
            let points: Vec<DVector<T>> = y
                .iter()
                .map(|v| DVector::from_fn(d, |k, _| if k < e { v[k] } else { T::zero() }))
                .collect();
            let z = place_inducing_inputs(&points, spec.num_inducing)?;
            (kernel, q, lik, x0, z)
        }
        ObservationKind::Poisson {
            observed_state_index,
        } => {
            let total = y
                .iter()
                .flat_map(|v| v.iter())
                .fold(T::zero(), |a, v| a + *v);
            let mean = total / T::from_usize_lossy(y.len() * e);
            let kernel = KernelSpec::isotropic(spec.family, d, T::one(), T::one())?;
            let lik = LikelihoodSpec::poisson(
                DVector::from_element(e, T::one()),
                mean.max(T::lit(1e-3)).ln(),
                observed_state_index,
            )?;
            let z = lattice(d, spec.num_inducing, T::lit(-2.5), T::lit(2.5));
            (
                kernel,
                DVector::from_element(d, tenth),
                lik,
                DiagGaussian::standard(d),
                z,
            )
        }
    };
    GpssmModel::new(kernel, q, lik, x0, z, spec.structure)
}

/// First `m` points of the smallest near-square lattice over `[lo, hi]^d`
/// with at least `m` nodes.
fn lattice<T: Real>(d: usize, m: usize, lo: T, hi: T) -> Vec<DVector<T>> {
    let per_axis = (1..).find(|n: &usize| n.pow(d as u32) >= m).unwrap_or(1);
    let axis = linspace(lo, hi, per_axis);
    (0..m)
        .map(|mut idx| {
            DVector::from_fn(d, |_, _| {
                let v = axis[idx % per_axis];
                idx /= per_axis;
                v
            })
        })
        .collect()
}

/// Starting `q(u)`. When every state is observed through the identity
/// emission, consecutive observations stand in for state pairs and `q(u)`
/// is the optimum for those point statistics; otherwise the prior.
pub fn initial_posterior<T: Real>(
    model: &GpssmModel<T>,
    y: &[DVector<T>],
) -> Result<InducingPosterior<T>> {
    let kuu = InducingKernel::new(model)?;
    let direct = matches!(model.likelihood(), LikelihoodSpec::GaussianDiag { .. })
        && model.obs_dim() == model.state_dim()
        && model.structure() == Structure::Free
        && y.len() >= 2;
    if !direct {
        return Ok(InducingPosterior::prior(model, &kuu));
    }
    let traj = Trajectory {
        states: y.to_vec(),
        observations: Vec::new(),
    };
    let stats = stats_from_states(model, &traj)?;
    optimal_qu(&stats, model, &kuu)
}

/// Trains from `init` with `q(u)` from [`initial_posterior`] until convergence or `max_iters`.
pub fn train<T: Real>(
    y: &[DVector<T>],
    config: &TrainingConfig,
    init: GpssmModel<T>,
    progress: impl FnMut(&ProgressRecord<T>),
) -> Result<TrainingState<T>> {
    config.validate()?;
    check_data(&init, y)?;
    let q = match config.mode {
        TrainingMode::Online { .. } => {
            InducingPosterior::prior(&init, &InducingKernel::new(&init)?)
        }
        _ => initial_posterior(&init, y)?,
    };
    let state = TrainingState::new(init, q, config.master_seed)?;
    resume(state, y, config, progress)
}

/// Continues training from `state`; the iteration counter and ELBO trace
/// carry on from where they stopped. `config.max_iters` bounds the total
/// iteration count.
pub fn resume<T: Real>(
    mut state: TrainingState<T>,
    y: &[DVector<T>],
    config: &TrainingConfig,
    mut progress: impl FnMut(&ProgressRecord<T>),
) -> Result<TrainingState<T>> {
    config.validate()?;
    check_data(&state.model, y)?;
    if let TrainingMode::Online { segment_length } = config.mode {
        for chunk in y.chunks(segment_length) {
            let (next, record) = online_step(&state, chunk, config)?;
            state = next;
            progress(&record);
        }
        return Ok(state);
    }
    if y.len() < 2 {
        return Err(GpssmError::invalid("training needs T >= 2"));
    }
    state.converged = false;
    while state.iteration < config.max_iters {
        let record = iterate(&mut state, y, config)?;
        progress(&record);
        if elbo_converged(&state.elbo_trace, config.elbo_window, config.elbo_tolerance) {
            state.converged = true;
            break;
        }
    }
    Ok(state)
}

fn check_data<T: Real>(model: &GpssmModel<T>, y: &[DVector<T>]) -> Result<()> {
    for (t, v) in y.iter().enumerate() {
        model
            .likelihood()
            .check_observation(v.as_slice())
            .map_err(|e| GpssmError::invalid(format!("observation {}: {e}", t + 1)))?;
    }
    Ok(())
}

/// One training pass: smooth, estimate ELBO and θ-gradient, update
/// `q(u)` with damping, then step θ.
pub fn iterate<T: Real>(
    state: &mut TrainingState<T>,
    y: &[DVector<T>],
    config: &TrainingConfig,
) -> Result<ProgressRecord<T>> {
    let i = state.iteration;
    let kuu = InducingKernel::new(&state.model)?;
    let aux = build_auxiliary(&state.model, &kuu, &state.q_u)?;
    let pass = smooth_pass(&aux, y, config, state.master_seed, i)?;
    let value = objective_threaded(
        &state.model,
        &state.q_u,
        &pass.segments,
        true,
        config.threads,
    )?;
    let elbo = value.elbo;
    if !elbo.is_finite_value() {
        return Err(GpssmError::Numerical(format!(
            "non-finite ELBO at iteration {i}"
        )));
    }
    let mut grad = value.gradient.expect("gradient requested");
    let layout = ThetaLayout::of(&state.model);
    if let Some(k) = grad.iter().position(|g| !g.is_finite_value()) {
        return Err(GpssmError::NonFiniteGradient {
            parameter: layout.name(k),
        });
    }

    let mut model = state.model.clone();
    let mut q = state.q_u.clone();
    let mut relocated = false;
    if i == 0 && config.relocate_inducing && matches!(config.smoother, SmootherChoice::Particle) {
        let means: Vec<DVector<T>> = pass
            .segments
            .iter()
            .flat_map(|s| s.trajectories.smoothed_means())
            .collect();
        if let Ok(z) = place_inducing_inputs(&means, model.num_inducing()) {
            if let Ok(moved) = model.with_inducing_inputs(z) {
                if InducingKernel::new(&moved).is_ok() {
                    q = InducingPosterior::prior(&moved, &InducingKernel::new(&moved)?);
                    model = moved;
                    relocated = true;
                }
            }
        }
    }
    let kuu = InducingKernel::new(&model)?;
    let stats = if relocated {
        pass_stats(&model, &pass.segments)?
    } else {
        value.stats
    };
    let target = optimal_qu(&stats, &model, &kuu)?;
    let rho = T::lit(config.rho.value(i));
    state.q_u = q.damped_toward(&target, rho)?;

    let theta = layout.pack(&model);
    layout.mask(&mut grad, config.trainable);
    if relocated {
        // The z-gradient refers to the discarded inducing inputs.
        let keep = Trainable {
            inducing_inputs: false,
            ..Trainable::default()
        };
        layout.mask(&mut grad, keep);
    }
    let count = stats.effective_count.max(T::one());
    let clip = T::lit(config.grad_clip);
    for g in grad.iter_mut() {
        *g = (*g / count).max(-clip).min(clip);
    }
    let mut step = T::lit(config.lambda.value(i));
    let mut accepted = model.clone();
    for _ in 0..6 {
        let proposal: Vec<T> = theta
            .iter()
            .zip(&grad)
            .map(|(t, g)| *t + step * *g)
            .collect();
        match layout
            .unpack(&model, &proposal)
            .and_then(|m| keep_frozen(m, &model, config.trainable))
        {
            Ok(m) if InducingKernel::new(&m).is_ok() => {
                accepted = m;
                break;
            }
            _ => step *= T::lit(0.5),
        }
    }
    state.model = accepted;
    state.iteration += 1;
    state.elbo_trace.push(elbo);
    if pass.reached_end {
        state.filter_state = pass.final_state;
    }
    Ok(ProgressRecord {
        iter: i,
        elbo,
        ess_min: pass.ess_min,
        theta: ThetaLayout::of(&state.model).pack(&state.model),
    })
}

/// Copies frozen groups back from `original`, so they stay bit-identical
/// rather than passing through the log/exp round trip of the θ vector.
fn keep_frozen<T: Real>(
    mut model: GpssmModel<T>,
    original: &GpssmModel<T>,
    trainable: Trainable,
) -> Result<GpssmModel<T>> {
    if !trainable.kernel {
        model = model.with_kernel(original.kernel().clone())?;
    }
    if !trainable.process_noise {
        model = model.with_process_noise(original.process_noise().clone())?;
    }
    if !trainable.likelihood {
        model = model.with_likelihood(original.likelihood().clone())?;
    }
    if !trainable.inducing_inputs {
        model = model.with_inducing_inputs(original.inducing_inputs().to_vec())?;
    }
    Ok(model)
}

fn pass_stats<T: Real>(
    model: &GpssmModel<T>,
    segments: &[SmoothedSegment<T>],
) -> Result<SufficientStats<T>> {
    let mut total = SufficientStats::zeros(model.num_inducing(), model.num_gp_outputs());
    for s in segments {
        total = total.add(&accumulate_stats(model, &s.trajectories)?);
    }
    Ok(total)
}

struct Pass<T: Real> {
    segments: Vec<SmoothedSegment<T>>,
    ess_min: T,
    final_state: Option<FilterState<T>>,
    reached_end: bool,
}

fn smooth_pass<T: Real>(
    aux: &AuxiliaryModel<T>,
    y: &[DVector<T>],
    config: &TrainingConfig,
    master_seed: u64,
    iteration: usize,
) -> Result<Pass<T>> {
    let total = y.len();
    match config.mode {
        TrainingMode::Svi {
            segment_length,
            segments_per_iter,
            warmup,
        } if segment_length < total => {
            let scale =
                svi_scale::<T>(total, segment_length)? / T::from_usize_lossy(segments_per_iter);
            let mut picker = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(
                master_seed,
                &[iteration as u64, u64::MAX],
            ));
            let mut segments = Vec::with_capacity(segments_per_iter);
            let mut ess_min = T::from_usize_lossy(config.n_particles);
            for k in 0..segments_per_iter {
                let tau = rand::Rng::random_range(&mut picker, 0..=total - segment_length);
                let a = tau.saturating_sub(warmup);
                let b = (tau + segment_length + config.lag).min(total);
                let window = &y[a..b];
                let lead = tau - a;
                let stream = [iteration as u64, k as u64];
                let out = particle_run(aux, window, config, master_seed, &stream, lead, None)?;
                ess_min = ess_min.min(out.filter_ess_min);
                let mut trajectories = out.trajectories;
                trajectories.restrict(lead + 1, lead + segment_length);
                trajectories.set_scale(scale);
                segments.push(SmoothedSegment {
                    trajectories,
                    observations: window.to_vec(),
                });
            }
            Ok(Pass {
                segments,
                ess_min,
                final_state: None,
                reached_end: false,
            })
        }
        _ => match config.smoother {
            SmootherChoice::Particle => {
                let out =
                    particle_run(aux, y, config, master_seed, &[iteration as u64, 0], 0, None)?;
                Ok(Pass {
                    ess_min: out.filter_ess_min,
                    segments: vec![SmoothedSegment {
                        trajectories: out.trajectories,
                        observations: y.to_vec(),
                    }],
                    final_state: Some(out.final_state),
                    reached_end: true,
                })
            }
            SmootherChoice::Grid { lo, hi, cells } => {
                let spec = GridSpec::uniform(aux.state_dim(), T::lit(lo), T::lit(hi), cells);
                let trajectories = grid_smoother(aux, y, &spec)?.to_particles();
                Ok(Pass {
                    ess_min: trajectories.ess_min(),
                    segments: vec![SmoothedSegment {
                        trajectories,
                        observations: y.to_vec(),
                    }],
                    final_state: None,
                    reached_end: false,
                })
            }
        },
    }
}

/// Bootstrap smoothing with one retry at 4x particles on weight collapse.
fn particle_run<T: Real>(
    aux: &AuxiliaryModel<T>,
    y: &[DVector<T>],
    config: &TrainingConfig,
    master_seed: u64,
    stream: &[u64],
    warmup: usize,
    start: Option<&FilterState<T>>,
) -> Result<crate::smoothing::SmootherOutput<T>> {
    let mut n = start.map_or(config.n_particles, |s| s.len());
    for attempt in 0..2u64 {
        let mut key = stream.to_vec();
        key.push(attempt);
        let mut options = SmootherOptions::new(n, config.lag, derive_seed(master_seed, &key));
        options.warmup = warmup;
        match bootstrap_fixed_lag_smoother(
            aux,
            y,
            &options,
            if attempt == 0 { start } else { None },
        ) {
            Err(GpssmError::DegenerateWeights { .. }) if attempt == 0 => n *= 4,
            other => return other,
        }
    }
    unreachable!("the retry loop returns on its second attempt")
}

/// Absorbs a new chunk of observations into `q(u)` with θ frozen. The
/// chunk is smoothed warm-started from the stored filter state when one is
/// available; the resulting front replaces it.
pub fn online_update<T: Real>(
    state: &TrainingState<T>,
    y: &[DVector<T>],
    config: &TrainingConfig,
) -> Result<TrainingState<T>> {
    online_step(state, y, config).map(|(next, _)| next)
}

/// [`online_update`] plus the progress record of the absorbed segment.
/// `ess_min` is the smallest filtering ESS over the segment, or zero when
/// `y` is empty.
pub fn online_step<T: Real>(
    state: &TrainingState<T>,
    y: &[DVector<T>],
    config: &TrainingConfig,
) -> Result<(TrainingState<T>, ProgressRecord<T>)> {
    let record = |s: &TrainingState<T>, ess_min: T| ProgressRecord {
        iter: s.iteration,
        elbo: *s.elbo_trace.last().unwrap_or(&T::zero()),
        ess_min,
        theta: ThetaLayout::of(&s.model).pack(&s.model),
    };
    if y.is_empty() {
        return Ok((state.clone(), record(state, T::zero())));
    }
    check_data(&state.model, y)?;
    let model = &state.model;
    let kuu = InducingKernel::new(model)?;
    let aux = build_auxiliary(model, &kuu, &state.q_u)?;
    let stream = [state.iteration as u64, u64::MAX - 1];
    let out = particle_run(
        &aux,
        y,
        config,
        state.master_seed,
        &stream,
        0,
        state.filter_state.as_ref(),
    )?;
    let ess_min = out.filter_ess_min;
    let segment = SmoothedSegment {
        trajectories: out.trajectories,
        observations: y.to_vec(),
    };
    let elbo = elbo_estimate(model, &state.q_u, std::slice::from_ref(&segment))?;
    let stats = accumulate_stats(model, &segment.trajectories)?;
    let mut next = state.clone();
    next.q_u = absorb_stats(&state.q_u, &stats, model, &kuu)?;
    next.filter_state = Some(out.final_state);
    next.iteration += 1;
    if elbo.is_finite_value() {
        next.elbo_trace.push(elbo);
    }
    let rec = record(&next, ess_min);
    Ok((next, rec))
}
