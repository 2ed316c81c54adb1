use std::collections::VecDeque;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParticleSlice, ParticleTrajectories, StateSpaceModel};
use crate::error::{GpssmError, Result};
use crate::scalar::{log_sum_exp, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SmootherOptions {
    pub n_particles: usize,
    pub lag: usize,
    pub seed: u64,
    /// Leading observations used only to settle the filter: no slices and
    /// no evidence increments are emitted for them.
    pub warmup: usize,
}

impl SmootherOptions {
    pub fn new(n_particles: usize, lag: usize, seed: u64) -> Self {
        Self {
            n_particles,
            lag,
            seed,
            warmup: 0,
        }
    }
}

/// Weighted particle cloud at the filtering front, used to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterState<T: Real> {
    pub dim: usize,
    /// Flat `L x D` states.
    pub particles: Vec<T>,
    /// Normalized log weights.
    pub log_weights: Vec<T>,
}

impl<T: Real> FilterState<T> {
    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn particle(&self, i: usize) -> &[T] {
        &self.particles[i * self.dim..(i + 1) * self.dim]
    }

    pub fn mean(&self) -> DVector<T> {
        let mut m = DVector::zeros(self.dim);
        for i in 0..self.len() {
            let w = self.log_weights[i].exp();
            for (k, v) in self.particle(i).iter().enumerate() {
                m[k] += w * *v;
            }
        }
        m
    }
}

#[derive(Clone, Debug)]
pub struct SmootherOutput<T: Real> {
    pub trajectories: ParticleTrajectories<T>,
    pub final_state: FilterState<T>,
    /// Smallest filter ESS observed before any resampling step.
    pub filter_ess_min: T,
}

struct Step<T> {
    states: Vec<T>,
    /// Index into the previous step's states, per particle.
    ancestors: Vec<usize>,
    /// `log q̃` factor of each particle at this step.
    log_factor: Vec<T>,
    log_z_increment: T,
}

/// Bootstrap particle filter with fixed-lag smoothing over `y` (observations
/// for `x_1..x_n`). A slice for time `s` is frozen once the filter reaches
/// `s + lag`, using the ancestry and weights at that front.
///
/// Systematic resampling happens whenever the ESS falls below `L/2`.
/// When `start` is given the run continues from that particle cloud and no
/// initial slice is produced.
pub fn bootstrap_fixed_lag_smoother<T: Real, M: StateSpaceModel<T>>(
    model: &M,
    y: &[DVector<T>],
    options: &SmootherOptions,
    start: Option<&FilterState<T>>,
) -> Result<SmootherOutput<T>> {
    let l = options.n_particles;
    if l < 2 {
        return Err(GpssmError::invalid(
            "the smoother needs at least 2 particles",
        ));
    }
    if options.lag < 1 {
        return Err(GpssmError::invalid("smoother lag must be at least 1"));
    }
    let dim = model.state_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);

    let (states0, mut log_w, factor0) = match start {
        Some(state) => {
            if state.dim != dim || state.len() != l {
                return Err(GpssmError::invalid(
                    "warm-start state does not match the model dimension or particle count",
                ));
            }
            (
                state.particles.clone(),
                state.log_weights.clone(),
                vec![T::zero(); l],
            )
        }
        None => {
            let mut states = Vec::with_capacity(l * dim);
            let mut factor = Vec::with_capacity(l);
            for _ in 0..l {
                let x = model.sample_initial(&mut rng);
                factor.push(model.initial_log_density(x.as_slice()));
                states.extend(x.iter().copied());
            }
            (states, vec![-T::from_usize_lossy(l).ln(); l], factor)
        }
    };
    normalize(&mut log_w);

    let emit_initial = start.is_none() && options.warmup == 0;
    let mut window: VecDeque<Step<T>> = VecDeque::with_capacity(options.lag + 2);
    window.push_back(Step {
        states: states0,
        ancestors: Vec::new(),
        log_factor: factor0,
        log_z_increment: T::zero(),
    });
    // Absolute time of window[0].
    let mut window_start = 0usize;
    let mut initial = None;
    let mut slices = Vec::with_capacity(y.len().saturating_sub(options.warmup));
    let mut ess_min = T::from_usize_lossy(l);
    let inv_l = -T::from_usize_lossy(l).ln();
    let mut weights = vec![T::zero(); l];

    for (k, obs) in y.iter().enumerate() {
        let t = k + 1;
        for (w, lw) in weights.iter_mut().zip(&log_w) {
            *w = lw.exp();
        }
        let ess = T::one() / weights.iter().fold(T::zero(), |a, w| a + *w * *w);
        ess_min = ess_min.min(ess);
        let ancestors = if ess < T::from_usize_lossy(l) * T::lit(0.5) {
            let a = systematic_resample(&weights, &mut rng);
            log_w.iter_mut().for_each(|w| *w = inv_l);
            a
        } else {
            (0..l).collect()
        };

        let prev = &window.back().expect("window holds the front").states;
        let mut parents = Vec::with_capacity(l * dim);
        for &a in &ancestors {
            parents.extend_from_slice(&prev[a * dim..(a + 1) * dim]);
        }
        let mut states = vec![T::zero(); l * dim];
        let mut extra = vec![T::zero(); l];
        let mut log_trans = vec![T::zero(); l];
        model.propagate_all(&parents, &mut states, &mut rng, &mut extra, &mut log_trans);
        let mut log_factor = Vec::with_capacity(l);
        let mut new_log_w = Vec::with_capacity(l);
        for i in 0..l {
            let log_obs =
                model.observation_log_density(obs.as_slice(), &states[i * dim..(i + 1) * dim]);
            let incr = extra[i] + log_obs;
            new_log_w.push(log_w[ancestors[i]] + incr);
            log_factor.push(incr + log_trans[i]);
        }
        let log_z = log_sum_exp(&new_log_w);
        if !log_z.is_finite_value() {
            return Err(GpssmError::DegenerateWeights { time: t });
        }
        new_log_w.iter_mut().for_each(|w| *w -= log_z);
        log_w = new_log_w;
        window.push_back(Step {
            states,
            ancestors,
            log_factor,
            log_z_increment: log_z,
        });

        if t >= options.lag {
            let s = t - options.lag;
            if s == 0 && emit_initial {
                initial = Some(freeze(&window, window_start, 0, &log_w, dim));
            } else if s > options.warmup {
                slices.push(freeze(&window, window_start, s, &log_w, dim));
            }
            // Keep x_{s} so the pair for s + 1 still has its predecessor.
            while window_start < s {
                window.pop_front();
                window_start += 1;
            }
        }
    }

    let n = y.len();
    let first_pending = if n >= options.lag {
        n - options.lag + 1
    } else {
        0
    };
    for s in first_pending..=n {
        if s == 0 {
            if emit_initial {
                initial = Some(freeze(&window, window_start, 0, &log_w, dim));
            }
        } else if s > options.warmup {
            slices.push(freeze(&window, window_start, s, &log_w, dim));
        }
    }

    let front = window.back().expect("window holds the front");
    let final_state = FilterState {
        dim,
        particles: front.states.clone(),
        log_weights: log_w,
    };
    Ok(SmootherOutput {
        trajectories: ParticleTrajectories::from_parts(initial, slices, options.lag, options.seed),
        final_state,
        filter_ess_min: ess_min,
    })
}

/// Builds the slice for absolute time `s` from the current front's ancestry.
fn freeze<T: Real>(
    window: &VecDeque<Step<T>>,
    window_start: usize,
    s: usize,
    front_log_w: &[T],
    dim: usize,
) -> ParticleSlice<T> {
    let l = front_log_w.len();
    let front = window.len() - 1;
    let pos = s - window_start;
    // Trace each front particle back to its ancestor at `pos`.
    let mut idx: Vec<usize> = (0..l).collect();
    for k in (pos + 1..=front).rev() {
        let anc = &window[k].ancestors;
        idx.iter_mut().for_each(|i| *i = anc[*i]);
    }
    let step = &window[pos];
    let weights: Vec<T> = front_log_w.iter().map(|w| w.exp()).collect();
    let total = weights.iter().fold(T::zero(), |a, w| a + *w);
    let weights: Vec<T> = weights.into_iter().map(|w| w / total).collect();
    let mut states = Vec::with_capacity(l * dim);
    let mut prev_states = Vec::new();
    let mut mean_factor = T::zero();
    for (i, &j) in idx.iter().enumerate() {
        states.extend_from_slice(&step.states[j * dim..(j + 1) * dim]);
        mean_factor += weights[i] * step.log_factor[j];
    }
    if pos > 0 {
        let before = &window[pos - 1].states;
        prev_states.reserve(l * dim);
        for &j in &idx {
            let a = step.ancestors[j];
            prev_states.extend_from_slice(&before[a * dim..(a + 1) * dim]);
        }
    }
    let mut slice = ParticleSlice::new(s, dim, prev_states, states, weights);
    slice.log_z_increment = step.log_z_increment;
    slice.entropy_term = step.log_z_increment - mean_factor;
    slice
}

fn normalize<T: Real>(log_w: &mut [T]) {
    let z = log_sum_exp(log_w);
    log_w.iter_mut().for_each(|w| *w -= z);
}

/// Systematic resampling: one uniform offset, `L` evenly spaced pointers.
pub(crate) fn systematic_resample<T: Real, R: rand::Rng + ?Sized>(
    weights: &[T],
    rng: &mut R,
) -> Vec<usize> {
    let l = weights.len();
    let step = T::one() / T::from_usize_lossy(l);
    let mut u = T::sample_unit(rng) * step;
    let mut out = Vec::with_capacity(l);
    let mut cum = weights[0];
    let mut j = 0;
    for _ in 0..l {
        while u > cum && j + 1 < l {
            j += 1;
            cum += weights[j];
        }
        out.push(j);
        u += step;
    }
    out
}
