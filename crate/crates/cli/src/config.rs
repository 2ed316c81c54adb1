//! TOML run configuration. Every field has a default; `dump-defaults`
//! prints the full schema with those defaults filled in.

use serde::{Deserialize, Serialize};

use gpssm::model::Structure;
use gpssm::training::{
    InitSpec, ObservationKind, Schedule, SmootherChoice, Trainable, TrainingConfig, TrainingMode,
};
use gpssm::KernelFamily;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub threads: usize,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub simulate: SimulateSection,
    pub predict: PredictSection,
    pub eval: EvalSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Matern32,
    Matern52,
    SquaredExponential,
}

impl From<Family> for KernelFamily {
    fn from(f: Family) -> Self {
        match f {
            Family::Matern32 => KernelFamily::Matern32,
            Family::Matern52 => KernelFamily::Matern52,
            Family::SquaredExponential => KernelFamily::SquaredExponential,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureKind {
    Free,
    SecondOrder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodKind {
    Gaussian,
    Poisson,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kernel: Family,
    pub state_dim: usize,
    pub num_inducing: usize,
    pub structure: StructureKind,
    /// Integration step of the second-order structure.
    pub dt: f64,
    pub likelihood: LikelihoodKind,
    /// State component driving the Poisson rate.
    pub observed_state: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kernel: Family::Matern32,
            state_dim: 1,
            num_inducing: 15,
            structure: StructureKind::Free,
            dt: 1.0,
            likelihood: LikelihoodKind::Gaussian,
            observed_state: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeKind {
    Batch,
    Svi,
    Online,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub scale: f64,
    pub offset: f64,
    pub exponent: f64,
}

impl From<Schedule> for ScheduleSection {
    fn from(s: Schedule) -> Self {
        Self {
            scale: s.scale,
            offset: s.offset,
            exponent: s.exponent,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainableSection {
    pub kernel: bool,
    pub process_noise: bool,
    pub likelihood: bool,
    pub inducing_inputs: bool,
}

impl Default for TrainableSection {
    fn default() -> Self {
        let t = Trainable::default();
        Self {
            kernel: t.kernel,
            process_noise: t.process_noise,
            likelihood: t.likelihood,
            inducing_inputs: t.inducing_inputs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub mode: ModeKind,
    pub particles: usize,
    pub lag: usize,
    pub max_iters: usize,
    pub elbo_tolerance: f64,
    pub elbo_window: usize,
    pub grad_clip: f64,
    pub relocate_inducing: bool,
    /// SVI and online segment length in time steps.
    pub segment_length: usize,
    pub segments_per_iter: usize,
    /// Leading observations smoothed before each SVI segment.
    pub warmup: usize,
    pub rho: ScheduleSection,
    pub lambda: ScheduleSection,
    pub trainable: TrainableSection,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let d = TrainingConfig::default();
        Self {
            mode: ModeKind::Batch,
            particles: d.n_particles,
            lag: d.lag,
            max_iters: d.max_iters,
            elbo_tolerance: d.elbo_tolerance,
            elbo_window: d.elbo_window,
            grad_clip: d.grad_clip,
            relocate_inducing: d.relocate_inducing,
            segment_length: 100,
            segments_per_iter: 1,
            warmup: 20,
            rho: d.rho.into(),
            lambda: d.lambda.into(),
            trainable: TrainableSection::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    /// Exact draws from a GP-SSM prior built from `[model]` and the
    /// hyperparameters below.
    Prior,
    /// The piecewise-linear kink benchmark.
    Kink,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub system: SystemKind,
    pub horizon: usize,
    /// Number of trajectories; trajectory `k` uses seed `seed + k`.
    pub count: usize,
    pub lengthscale: f64,
    pub signal_variance: f64,
    pub process_noise: f64,
    pub noise_variance: f64,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            system: SystemKind::Prior,
            horizon: 200,
            count: 1,
            lengthscale: 1.0,
            signal_variance: 1.0,
            process_noise: 0.01,
            noise_variance: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutKind {
    Mean,
    Sample,
    NoiseFree,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictSection {
    /// Uniform grid for one-dimensional states, used when no point file is given.
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub grid_points: usize,
    /// Roll the learned dynamics forward instead when positive.
    pub rollout_steps: usize,
    pub rollout_paths: usize,
    pub rollout_mode: RolloutKind,
    /// Start state of the rollout; zero when empty.
    pub rollout_start: Vec<f64>,
}

impl Default for PredictSection {
    fn default() -> Self {
        Self {
            grid_lo: -5.0,
            grid_hi: 8.0,
            grid_points: 200,
            rollout_steps: 0,
            rollout_paths: 20,
            rollout_mode: RolloutKind::NoiseFree,
            rollout_start: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Exit with the threshold code when the test RMSE exceeds this.
    pub max_rmse: Option<f64>,
    /// Exit with the threshold code when the mean log-likelihood is below this.
    pub min_loglik: Option<f64>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::parse(text).map_err(|e| CliError::usage(format!("config: {e}")))?;
        let config: Config = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::usage(format!("config field `{path}`: {}", e.inner().message()))
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: Option<&std::path::Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text)
            }
        }
    }

    pub fn dump(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization. The thread count is left
    /// out since results do not depend on it.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.threads = 1;
        crate::sha256_hex(c.dump().as_bytes())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |path: &str, why: &str| Err(CliError::usage(format!("config field `{path}`: {why}")));
        if self.threads == 0 {
            return bad("threads", "must be at least 1");
        }
        let m = &self.model;
        if m.state_dim == 0 {
            return bad("model.state_dim", "must be at least 1");
        }
        if m.num_inducing == 0 {
            return bad("model.num_inducing", "must be at least 1");
        }
        if m.structure == StructureKind::SecondOrder {
            if m.state_dim != 2 {
                return bad("model.state_dim", "second_order structure needs exactly 2 states");
            }
            if !(m.dt.is_finite() && m.dt > 0.0) {
                return bad("model.dt", "must be positive");
            }
        }
        if m.likelihood == LikelihoodKind::Poisson && m.observed_state >= m.state_dim {
            return bad("model.observed_state", "must index a state component");
        }
        let t = &self.training;
        if t.segment_length == 0 {
            return bad("training.segment_length", "must be at least 1");
        }
        if t.segments_per_iter == 0 {
            return bad("training.segments_per_iter", "must be at least 1");
        }
        let s = &self.simulate;
        if s.horizon == 0 {
            return bad("simulate.horizon", "must be at least 1");
        }
        if s.count == 0 {
            return bad("simulate.count", "must be at least 1");
        }
        for (name, v) in [
            ("simulate.lengthscale", s.lengthscale),
            ("simulate.signal_variance", s.signal_variance),
            ("simulate.process_noise", s.process_noise),
            ("simulate.noise_variance", s.noise_variance),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(name, "must be positive");
            }
        }
        let p = &self.predict;
        if !(p.grid_lo.is_finite() && p.grid_hi.is_finite() && p.grid_lo < p.grid_hi) {
            return bad("predict.grid_lo", "grid bounds must be finite with grid_lo < grid_hi");
        }
        if !p.rollout_start.is_empty() && p.rollout_start.len() != m.state_dim {
            return bad("predict.rollout_start", "length must equal model.state_dim");
        }
        self.training_config()
            .validate()
            .map_err(|e| CliError::usage(format!("config section `training`: {e}")))?;
        Ok(())
    }

    pub fn training_config(&self) -> TrainingConfig {
        let t = &self.training;
        let mode = match t.mode {
            ModeKind::Batch => TrainingMode::Batch,
            ModeKind::Svi => TrainingMode::Svi {
                segment_length: t.segment_length,
                segments_per_iter: t.segments_per_iter,
                warmup: t.warmup,
            },
            ModeKind::Online => TrainingMode::Online {
                segment_length: t.segment_length,
            },
        };
        let sched = |s: ScheduleSection| Schedule::new(s.scale, s.offset, s.exponent);
        TrainingConfig {
            mode,
            n_particles: t.particles,
            lag: t.lag,
            rho: sched(t.rho),
            lambda: sched(t.lambda),
            max_iters: t.max_iters,
            elbo_tolerance: t.elbo_tolerance,
            elbo_window: t.elbo_window,
            grad_clip: t.grad_clip,
            trainable: Trainable {
                kernel: t.trainable.kernel,
                process_noise: t.trainable.process_noise,
                likelihood: t.trainable.likelihood,
                inducing_inputs: t.trainable.inducing_inputs,
            },
            relocate_inducing: t.relocate_inducing,
            smoother: SmootherChoice::Particle,
            master_seed: self.seed,
            threads: self.threads,
        }
    }

    pub fn structure(&self) -> Structure<f64> {
        match self.model.structure {
            StructureKind::Free => Structure::Free,
            StructureKind::SecondOrder => Structure::SecondOrder { dt: self.model.dt },
        }
    }

    pub fn init_spec(&self) -> InitSpec<f64> {
        InitSpec {
            family: self.model.kernel.into(),
            state_dim: self.model.state_dim,
            num_inducing: self.model.num_inducing,
            structure: self.structure(),
            observation: match self.model.likelihood {
                LikelihoodKind::Gaussian => ObservationKind::Gaussian,
                LikelihoodKind::Poisson => ObservationKind::Poisson {
                    observed_state_index: self.model.observed_state,
                },
            },
        }
    }
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            model: ModelSection::default(),
            training: TrainingSection::default(),
            simulate: SimulateSection::default(),
            predict: PredictSection::default(),
            eval: EvalSection::default(),
        }
    }
}
