//! The five subcommands. Each takes fully resolved options and returns
//! a [`CliError`] whose kind selects the exit code.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use serde::Serialize;

use gpssm::eval::{kink_system_generate, transition_metrics, BenchmarkReport};
use gpssm::model::{DiagGaussian, GpssmModel, LikelihoodSpec};
use gpssm::sparse::{rollout, InducingKernel, Predictor, RolloutMode};
use gpssm::training::{self, ProgressRecord, TrainingMode, TrainingState};
use gpssm::KernelSpec;

use crate::archive::{ModelArchive, Provenance};
use crate::config::{Config, LikelihoodKind, RolloutKind, SystemKind};
use crate::data::{self, columns, write_table};
use crate::{sha256_hex, theta_digest, CliError};

/// Paths and overrides shared by every subcommand.
#[derive(Clone, Debug, Default)]
pub struct Options {
    pub config: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub archive: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

impl Options {
    /// Loads the config and applies `--seed` and `--threads`.
    pub fn resolve_config(&self) -> Result<Config, CliError> {
        let mut config = Config::load(self.config.as_deref())?;
        if let Some(s) = self.seed {
            config.seed = s;
        }
        if let Some(t) = self.threads {
            config.threads = t;
        }
        config.validate()?;
        Ok(config)
    }

    fn require<'a>(&self, path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
        path.as_deref()
            .ok_or_else(|| CliError::usage(format!("this command needs --{flag}")))
    }

    fn data_path(&self) -> Result<&Path, CliError> {
        self.require(&self.data, "data")
    }

    fn archive_path(&self) -> Result<&Path, CliError> {
        self.require(&self.archive, "archive")
    }

    fn out_path(&self) -> Result<&Path, CliError> {
        self.require(&self.out, "out")
    }
}

/// One line of the progress stream.
#[derive(Serialize)]
pub struct ProgressLine {
    pub iter: usize,
    pub elbo: f64,
    pub ess_min: f64,
    pub theta_digest: String,
}

fn progress_line(r: &ProgressRecord<f64>) -> String {
    serde_json::to_string(&ProgressLine {
        iter: r.iter,
        elbo: r.elbo,
        ess_min: r.ess_min,
        theta_digest: theta_digest(&r.theta),
    })
    .expect("progress serializes")
}

fn file_hash(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Writes sampled trajectories: `states_<k>.csv` (x_0..x_T) and
/// `observations_<k>.csv` (y_1..y_T) per trajectory in the `--out` directory.
pub fn simulate(opts: &Options) -> Result<Vec<PathBuf>, CliError> {
    let config = opts.resolve_config()?;
    let out = opts.out_path()?;
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let sim = &config.simulate;
    let mut written = Vec::new();
    for k in 0..sim.count {
        let seed = config.seed.wrapping_add(k as u64);
        let traj = match sim.system {
            SystemKind::Kink => kink_system_generate::<f64>(sim.horizon, seed)?,
            SystemKind::Prior => prior_model(&config)?.sample_prior_trajectory(sim.horizon, seed)?,
        };
        let d = traj.states[0].len();
        let e = traj.observations[0].len();
        let states = out.join(format!("states_{k}.csv"));
        let rows: Vec<Vec<f64>> = traj.states.iter().map(|x| x.iter().copied().collect()).collect();
        write_table(&states, &columns("x", d), &rows)?;
        let obs = out.join(format!("observations_{k}.csv"));
        let rows: Vec<Vec<f64>> = traj.observations.iter().map(|y| y.iter().copied().collect()).collect();
        write_table(&obs, &columns("y", e), &rows)?;
        written.push(states);
        written.push(obs);
    }
    Ok(written)
}

fn prior_model(config: &Config) -> Result<GpssmModel<f64>, CliError> {
    let sim = &config.simulate;
    let d = config.model.state_dim;
    let kernel = KernelSpec::isotropic(config.model.kernel.into(), d, sim.lengthscale, sim.signal_variance)?;
    let likelihood = match config.model.likelihood {
        LikelihoodKind::Gaussian => LikelihoodSpec::gaussian(DVector::from_element(d, sim.noise_variance))?,
        LikelihoodKind::Poisson => {
            LikelihoodSpec::poisson(DVector::from_element(1, 1.0), 0.0, config.model.observed_state)?
        }
    };
    Ok(GpssmModel::new(
        kernel,
        DVector::from_element(d, sim.process_noise),
        likelihood,
        DiagGaussian::standard(d),
        vec![DVector::zeros(d)],
        config.structure(),
    )?)
}

/// Trains on `--data`, or resumes the model in `--archive`, and writes the
/// result to `--out`. Progress records go to `progress` as JSON lines.
pub fn train(opts: &Options, progress: &mut dyn Write) -> Result<ModelArchive, CliError> {
    let config = opts.resolve_config()?;
    let data_path = opts.data_path()?;
    let out = opts.out_path()?;
    let y = data::read_series_file(data_path, "y")?;
    if y.is_empty() {
        return Err(CliError::data(format!("{}: no observations", data_path.display())));
    }
    let tc = config.training_config();
    let mut io_err = None;
    let mut emit = |r: &ProgressRecord<f64>| {
        if io_err.is_none() {
            if let Err(e) = writeln!(progress, "{}", progress_line(r)) {
                io_err = Some(e);
            }
        }
    };
    let start = Instant::now();
    let (state, prior_time) = match &opts.archive {
        Some(path) => {
            let archive = ModelArchive::load(path)?;
            let mut state = archive.state;
            state.master_seed = config.seed;
            if state.model.obs_dim() != y[0].len() {
                return Err(CliError::data("data columns do not match the archived model"));
            }
            (training::resume(state, &y, &tc, &mut emit)?, archive.provenance.train_time_s)
        }
        None => {
            let init = training::initial_model(&y, &config.init_spec())?;
            (training::train(&y, &tc, init, &mut emit)?, 0.0)
        }
    };
    if let Some(e) = io_err {
        return Err(CliError::data(format!("writing progress: {e}")));
    }
    let archive = ModelArchive {
        state,
        provenance: Provenance {
            config_fingerprint: config.fingerprint(),
            data_hash: file_hash(data_path)?,
            seeds: vec![config.seed],
            train_time_s: prior_time + start.elapsed().as_secs_f64(),
        },
    };
    archive.save(out)?;
    Ok(archive)
}

/// Predictive transition at points (`--data`, columns x_1..x_D) or on the
/// configured 1-D grid, or a rollout summary when `predict.rollout_steps > 0`.
pub fn predict(opts: &Options) -> Result<PathBuf, CliError> {
    let config = opts.resolve_config()?;
    let archive = ModelArchive::load(opts.archive_path()?)?;
    let out = opts.out_path()?.to_path_buf();
    let model = &archive.state.model;
    let q = &archive.state.q_u;
    let kuu = InducingKernel::new(model)?;
    let d = model.state_dim();
    let pc = &config.predict;

    if pc.rollout_steps > 0 {
        let x0 = if pc.rollout_start.is_empty() {
            vec![0.0; d]
        } else if pc.rollout_start.len() == d {
            pc.rollout_start.clone()
        } else {
            return Err(CliError::usage("predict.rollout_start does not match the model dimension"));
        };
        let mode = match pc.rollout_mode {
            RolloutKind::Mean => RolloutMode::MeanOnly,
            RolloutKind::Sample => RolloutMode::SampleFunctionFree,
            RolloutKind::NoiseFree => RolloutMode::NoiseFree,
        };
        let r = rollout(q, model, &kuu, &x0, pc.rollout_steps, pc.rollout_paths, mode, config.seed)?;
        let mut header = vec!["t".to_string()];
        header.extend(columns("mean", d));
        header.extend(columns("std", d));
        for k in 0..r.paths.len() {
            header.extend(columns(&format!("path{k}"), d));
        }
        let rows: Vec<Vec<f64>> = (0..=pc.rollout_steps)
            .map(|t| {
                let mut row = vec![t as f64];
                row.extend(r.mean[t].iter());
                row.extend(r.variance[t].iter().map(|v| v.sqrt()));
                for path in &r.paths {
                    row.extend(path[t].iter());
                }
                row
            })
            .collect();
        write_table(&out, &header, &rows)?;
        return Ok(out);
    }

    let points: Vec<DVector<f64>> = match &opts.data {
        Some(path) => {
            let pts = data::read_series_file(path, "x").map_err(|e| {
                if e.message.contains("header") {
                    CliError::usage(format!("{}: {}", path.display(), e.message))
                } else {
                    e
                }
            })?;
            if let Some(p) = pts.iter().find(|p| p.len() != d) {
                return Err(CliError::usage(format!(
                    "points have {} columns but the model state has {d}",
                    p.len()
                )));
            }
            pts
        }
        None => {
            if d != 1 {
                return Err(CliError::usage("grid prediction needs a 1-D state; pass points with --data"));
            }
            let n = pc.grid_points;
            match n {
                0 => return Err(CliError::usage("predict.grid_points is 0: empty grid")),
                1 => vec![DVector::from_element(1, pc.grid_lo)],
                _ => (0..n)
                    .map(|i| {
                        let x = pc.grid_lo + (pc.grid_hi - pc.grid_lo) * i as f64 / (n - 1) as f64;
                        DVector::from_element(1, x)
                    })
                    .collect(),
            }
        }
    };
    if points.is_empty() {
        return Err(CliError::usage("no prediction points"));
    }
    let predictor = Predictor::new(model, &kuu, q);
    let p = model.num_gp_outputs();
    let mut header = columns("x", d);
    for name in ["mean", "std", "lower", "upper"] {
        header.extend(columns(name, p));
    }
    let mut ku = vec![0.0; model.num_inducing()];
    let mut mean = vec![0.0; p];
    let mut var = vec![0.0; p];
    let rows: Vec<Vec<f64>> = points
        .iter()
        .map(|x| {
            predictor.predict_into(x.as_slice(), &mut ku, &mut mean, &mut var);
            let std: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
            let mut row: Vec<f64> = x.iter().copied().collect();
            row.extend(&mean);
            row.extend(&std);
            row.extend(mean.iter().zip(&std).map(|(m, s)| m - s));
            row.extend(mean.iter().zip(&std).map(|(m, s)| m + s));
            row
        })
        .collect();
    write_table(&out, &header, &rows)?;
    Ok(out)
}

/// Scores the archived transition on consecutive state pairs from
/// `--data` (columns x_1..x_D). The report goes to `--out` as JSON, or
/// to `report` when no path is given.
pub fn eval(opts: &Options, report: &mut dyn Write) -> Result<BenchmarkReport, CliError> {
    let config = opts.resolve_config()?;
    let archive = ModelArchive::load(opts.archive_path()?)?;
    let states = data::read_series_file(opts.data_path()?, "x")?;
    if states.len() < 2 {
        return Err(CliError::data("test data needs at least two states"));
    }
    let pairs: Vec<(DVector<f64>, DVector<f64>)> =
        states.windows(2).map(|w| (w[0].clone(), w[1].clone())).collect();
    let start = Instant::now();
    let m = transition_metrics(&archive.state.q_u, &archive.state.model, &pairs)?;
    let test_time_s = start.elapsed().as_secs_f64();
    let result = BenchmarkReport {
        test_rmse: m.rmse,
        mean_pred_loglik: m.mean_loglik,
        train_time_s: archive.provenance.train_time_s,
        test_time_s,
        config_fingerprint: archive.provenance.config_fingerprint.clone(),
        seeds: archive.provenance.seeds.clone(),
    };
    result.validate()?;
    let json = serde_json::json!({
        "test_rmse": result.test_rmse,
        "mean_pred_loglik": result.mean_pred_loglik,
        "train_time_s": result.train_time_s,
        "test_time_s": result.test_time_s,
        "config_fingerprint": result.config_fingerprint,
        "seeds": result.seeds,
        "n_pairs": pairs.len(),
    });
    let text = serde_json::to_string_pretty(&json).expect("report serializes");
    match &opts.out {
        Some(path) => crate::archive::write_atomic(path, format!("{text}\n").as_bytes())?,
        None => writeln!(report, "{text}").map_err(|e| CliError::data(format!("writing report: {e}")))?,
    }
    let mut failures = Vec::new();
    if let Some(max) = config.eval.max_rmse {
        if !(result.test_rmse <= max) {
            failures.push(format!("test RMSE {} exceeds {max}", result.test_rmse));
        }
    }
    if let Some(min) = config.eval.min_loglik {
        if !(result.mean_pred_loglik >= min) {
            failures.push(format!("mean log-likelihood {} is below {min}", result.mean_pred_loglik));
        }
    }
    if !failures.is_empty() {
        return Err(CliError::threshold(failures.join("; ")));
    }
    Ok(result)
}

/// Absorbs the observation stream in `--data` into the archived `q(u)`
/// one segment at a time, rewriting the archive (at `--out`, default
/// `--archive`) after every segment.
pub fn online(opts: &Options, progress: &mut dyn Write) -> Result<ModelArchive, CliError> {
    let config = opts.resolve_config()?;
    let archive_path = opts.archive_path()?;
    let out = opts.out.as_deref().unwrap_or(archive_path);
    let stream_path = opts.data_path()?;
    let mut archive = ModelArchive::load(archive_path)?;
    let rows = data::read_rows(data::open(stream_path)?, "y")?;
    let seg_len = config.training.segment_length;
    let mut tc = config.training_config();
    tc.mode = TrainingMode::Online { segment_length: seg_len };
    let state: &mut TrainingState<f64> = &mut archive.state;
    if state
        .filter_state
        .as_ref()
        .is_some_and(|f| f.len() != tc.n_particles)
    {
        state.filter_state = None;
    }
    archive.provenance.data_hash = sha256_hex(
        format!("{}:{}", archive.provenance.data_hash, file_hash(stream_path)?).as_bytes(),
    );
    if !archive.provenance.seeds.contains(&config.seed) {
        archive.provenance.seeds.push(config.seed);
    }
    let e = archive.state.model.obs_dim();
    for (k, chunk) in rows.chunks(seg_len).enumerate() {
        let seg: Vec<DVector<f64>> = chunk
            .iter()
            .cloned()
            .collect::<Result<_, _>>()
            .map_err(|err| err.context(format!("segment {k}")))?;
        if let Some(bad) = seg.iter().find(|v| v.len() != e) {
            return Err(CliError::data(format!(
                "segment {k}: rows have {} columns but the model observes {e}",
                bad.len()
            )));
        }
        let (next, record) = training::online_step(&archive.state, &seg, &tc)
            .map_err(|err| CliError::from(err).context(format!("segment {k}")))?;
        archive.state = next;
        writeln!(progress, "{}", progress_line(&record)).map_err(|e| CliError::data(format!("writing progress: {e}")))?;
        archive.save(out)?;
    }
    archive.save(out)?;
    Ok(archive)
}
