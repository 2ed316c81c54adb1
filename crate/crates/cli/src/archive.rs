//! Versioned model archive: TOML with every float written as an exact hex
//! float string, so a load reproduces the saved numbers bit for bit.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use gpssm::model::{DiagGaussian, GpssmModel, LikelihoodSpec, Structure};
use gpssm::smoothing::FilterState;
use gpssm::sparse::InducingPosterior;
use gpssm::training::TrainingState;
use gpssm::{KernelFamily, KernelSpec};

use crate::{hexfloat, CliError};

pub const FORMAT_VERSION: u32 = 1;

/// Number of trailing ELBO values kept in the archive.
pub const TRACE_TAIL: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub config_fingerprint: String,
    pub data_hash: String,
    pub seeds: Vec<u64>,
    pub train_time_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelArchive {
    pub state: TrainingState<f64>,
    pub provenance: Provenance,
}

type Hex = String;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Doc {
    format_version: u32,
    model: ModelDoc,
    posterior: PosteriorDoc,
    training: TrainingDoc,
    provenance: ProvenanceDoc,
    #[serde(skip_serializing_if = "Option::is_none")]
    filter: Option<FilterDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    kernel: String,
    lengthscales: Vec<Hex>,
    signal_variance: Hex,
    process_noise: Vec<Hex>,
    structure: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    dt: Option<Hex>,
    likelihood: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    noise_variance: Option<Vec<Hex>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<Vec<Hex>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<Hex>,
    #[serde(skip_serializing_if = "Option::is_none")]
    observed_state: Option<usize>,
    x0_mean: Vec<Hex>,
    x0_variance: Vec<Hex>,
    inducing_inputs: Vec<Vec<Hex>>,
}

/// Matrices are stored as lists of rows; per-output blocks as lists of matrices.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PosteriorDoc {
    eta1: Vec<Vec<Hex>>,
    eta2: Vec<Vec<Vec<Hex>>>,
    mu: Vec<Vec<Hex>>,
    sigma: Vec<Vec<Vec<Hex>>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainingDoc {
    iteration: usize,
    converged: bool,
    master_seed: Hex,
    elbo_trace_tail: Vec<Hex>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProvenanceDoc {
    config_fingerprint: String,
    data_hash: String,
    seeds: Vec<Hex>,
    train_time_s: Hex,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FilterDoc {
    dim: usize,
    particles: Vec<Hex>,
    log_weights: Vec<Hex>,
}

fn enc(x: f64) -> Hex {
    hexfloat::format(x)
}

fn enc_vec<'a>(v: impl IntoIterator<Item = &'a f64>) -> Vec<Hex> {
    v.into_iter().map(|x| enc(*x)).collect()
}

fn enc_mat(m: &DMatrix<f64>) -> Vec<Vec<Hex>> {
    m.row_iter().map(|r| enc_vec(r.iter())).collect()
}

fn enc_u64(x: u64) -> Hex {
    format!("{x:#x}")
}

fn dec(s: &str, field: &str) -> Result<f64, CliError> {
    hexfloat::parse(s).map_err(|e| CliError::data(format!("archive field `{field}`: {e}")))
}

fn dec_vec(v: &[Hex], field: &str) -> Result<Vec<f64>, CliError> {
    v.iter().map(|s| dec(s, field)).collect()
}

fn dec_dvec(v: &[Hex], field: &str) -> Result<DVector<f64>, CliError> {
    Ok(DVector::from_vec(dec_vec(v, field)?))
}

fn dec_mat(rows: &[Vec<Hex>], cols: usize, field: &str) -> Result<DMatrix<f64>, CliError> {
    let mut m = DMatrix::zeros(rows.len(), cols);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != cols {
            return Err(CliError::data(format!("archive field `{field}`: ragged matrix row {i}")));
        }
        for (j, s) in r.iter().enumerate() {
            m[(i, j)] = dec(s, field)?;
        }
    }
    Ok(m)
}

fn dec_u64(s: &str, field: &str) -> Result<u64, CliError> {
    s.strip_prefix("0x")
        .and_then(|h| u64::from_str_radix(h, 16).ok())
        .ok_or_else(|| CliError::data(format!("archive field `{field}`: bad integer `{s}`")))
}

fn family_name(f: KernelFamily) -> &'static str {
    match f {
        KernelFamily::Matern32 => "matern32",
        KernelFamily::Matern52 => "matern52",
        KernelFamily::SquaredExponential => "squared_exponential",
    }
}

fn family_from(s: &str) -> Result<KernelFamily, CliError> {
    Ok(match s {
        "matern32" => KernelFamily::Matern32,
        "matern52" => KernelFamily::Matern52,
        "squared_exponential" => KernelFamily::SquaredExponential,
        _ => return Err(CliError::data(format!("archive: unknown kernel `{s}`"))),
    })
}

fn model_doc(m: &GpssmModel<f64>) -> ModelDoc {
    let k = m.kernel();
    let (structure, dt) = match m.structure() {
        Structure::Free => ("free", None),
        Structure::SecondOrder { dt } => ("second_order", Some(enc(dt))),
    };
    let mut doc = ModelDoc {
        kernel: family_name(k.family()).into(),
        lengthscales: enc_vec(k.lengthscales().iter()),
        signal_variance: enc(k.signal_variance()),
        process_noise: enc_vec(m.process_noise().iter()),
        structure: structure.into(),
        dt,
        likelihood: String::new(),
        noise_variance: None,
        alpha: None,
        beta: None,
        observed_state: None,
        x0_mean: enc_vec(m.x0_prior().mean().iter()),
        x0_variance: enc_vec(m.x0_prior().variance().iter()),
        inducing_inputs: m.inducing_inputs().iter().map(|z| enc_vec(z.iter())).collect(),
    };
    match m.likelihood() {
        LikelihoodSpec::GaussianDiag { noise_variance } => {
            doc.likelihood = "gaussian".into();
            doc.noise_variance = Some(enc_vec(noise_variance.iter()));
        }
        LikelihoodSpec::PoissonExp {
            alpha,
            beta,
            observed_state_index,
        } => {
            doc.likelihood = "poisson".into();
            doc.alpha = Some(enc_vec(alpha.iter()));
            doc.beta = Some(enc(*beta));
            doc.observed_state = Some(*observed_state_index);
        }
    }
    doc
}

fn model_from(doc: &ModelDoc) -> Result<GpssmModel<f64>, CliError> {
    let missing = |f: &str| CliError::data(format!("archive: model.{f} is required for this likelihood"));
    let kernel = KernelSpec::new(
        family_from(&doc.kernel)?,
        dec_dvec(&doc.lengthscales, "model.lengthscales")?,
        dec(&doc.signal_variance, "model.signal_variance")?,
    )
    .map_err(CliError::from_archive)?;
    let structure = match (doc.structure.as_str(), &doc.dt) {
        ("free", None) => Structure::Free,
        ("second_order", Some(dt)) => Structure::SecondOrder {
            dt: dec(dt, "model.dt")?,
        },
        (s, _) => return Err(CliError::data(format!("archive: bad structure `{s}` or dt"))),
    };
    let likelihood = match doc.likelihood.as_str() {
        "gaussian" => LikelihoodSpec::gaussian(dec_dvec(
            doc.noise_variance.as_ref().ok_or_else(|| missing("noise_variance"))?,
            "model.noise_variance",
        )?),
        "poisson" => LikelihoodSpec::poisson(
            dec_dvec(doc.alpha.as_ref().ok_or_else(|| missing("alpha"))?, "model.alpha")?,
            dec(doc.beta.as_ref().ok_or_else(|| missing("beta"))?, "model.beta")?,
            doc.observed_state.ok_or_else(|| missing("observed_state"))?,
        ),
        s => return Err(CliError::data(format!("archive: unknown likelihood `{s}`"))),
    }
    .map_err(CliError::from_archive)?;
    let x0 = DiagGaussian::new(
        dec_dvec(&doc.x0_mean, "model.x0_mean")?,
        dec_dvec(&doc.x0_variance, "model.x0_variance")?,
    )
    .map_err(CliError::from_archive)?;
    let z = doc
        .inducing_inputs
        .iter()
        .map(|r| dec_dvec(r, "model.inducing_inputs"))
        .collect::<Result<Vec<_>, _>>()?;
    GpssmModel::new(
        kernel,
        dec_dvec(&doc.process_noise, "model.process_noise")?,
        likelihood,
        x0,
        z,
        structure,
    )
    .map_err(CliError::from_archive)
}

impl ModelArchive {
    pub fn to_toml(&self) -> String {
        let s = &self.state;
        let q = &s.q_u;
        let tail_start = s.elbo_trace.len().saturating_sub(TRACE_TAIL);
        let doc = Doc {
            format_version: FORMAT_VERSION,
            model: model_doc(&s.model),
            posterior: PosteriorDoc {
                eta1: enc_mat(q.eta1()),
                eta2: q.eta2().iter().map(enc_mat).collect(),
                mu: enc_mat(q.mu()),
                sigma: q.sigma().iter().map(enc_mat).collect(),
            },
            training: TrainingDoc {
                iteration: s.iteration,
                converged: s.converged,
                master_seed: enc_u64(s.master_seed),
                elbo_trace_tail: enc_vec(&s.elbo_trace[tail_start..]),
            },
            provenance: ProvenanceDoc {
                config_fingerprint: self.provenance.config_fingerprint.clone(),
                data_hash: self.provenance.data_hash.clone(),
                seeds: self.provenance.seeds.iter().map(|s| enc_u64(*s)).collect(),
                train_time_s: enc(self.provenance.train_time_s),
            },
            filter: s.filter_state.as_ref().map(|f| FilterDoc {
                dim: f.dim,
                particles: enc_vec(&f.particles),
                log_weights: enc_vec(&f.log_weights),
            }),
        };
        toml::to_string(&doc).expect("archive serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| CliError::data(format!("archive is not valid TOML: {e}")))?;
        match table.get("format_version").and_then(|v| v.as_integer()) {
            Some(v) if v == FORMAT_VERSION as i64 => {}
            Some(v) => {
                return Err(CliError::data(format!(
                    "archive format version {v} is not supported (expected {FORMAT_VERSION})"
                )))
            }
            None => return Err(CliError::data("archive has no format_version")),
        }
        let doc: Doc = toml::from_str(text).map_err(|e| CliError::data(format!("archive: {e}")))?;
        let model = model_from(&doc.model)?;
        let m = model.num_inducing();
        let p = model.num_gp_outputs();
        let blocks = |v: &[Vec<Vec<Hex>>], field: &str| -> Result<Vec<DMatrix<f64>>, CliError> {
            v.iter().map(|b| dec_mat(b, m, field)).collect()
        };
        let q = InducingPosterior::from_parts(
            dec_mat(&doc.posterior.eta1, p, "posterior.eta1")?,
            blocks(&doc.posterior.eta2, "posterior.eta2")?,
            dec_mat(&doc.posterior.mu, p, "posterior.mu")?,
            blocks(&doc.posterior.sigma, "posterior.sigma")?,
        )
        .map_err(CliError::from_archive)?;
        if q.num_inducing() != m || q.num_outputs() != p {
            return Err(CliError::data("archive: posterior does not match the model"));
        }
        let filter_state = match &doc.filter {
            None => None,
            Some(f) => {
                let particles = dec_vec(&f.particles, "filter.particles")?;
                let log_weights = dec_vec(&f.log_weights, "filter.log_weights")?;
                if f.dim != model.state_dim() || particles.len() != f.dim * log_weights.len() {
                    return Err(CliError::data("archive: filter state has inconsistent shape"));
                }
                Some(FilterState {
                    dim: f.dim,
                    particles,
                    log_weights,
                })
            }
        };
        let mut state = TrainingState::new(
            model,
            q,
            dec_u64(&doc.training.master_seed, "training.master_seed")?,
        )
        .map_err(CliError::from_archive)?;
        state.iteration = doc.training.iteration;
        state.converged = doc.training.converged;
        state.elbo_trace = dec_vec(&doc.training.elbo_trace_tail, "training.elbo_trace_tail")?;
        state.filter_state = filter_state;
        let provenance = Provenance {
            config_fingerprint: doc.provenance.config_fingerprint,
            data_hash: doc.provenance.data_hash,
            seeds: doc
                .provenance
                .seeds
                .iter()
                .map(|s| dec_u64(s, "provenance.seeds"))
                .collect::<Result<_, _>>()?,
            train_time_s: dec(&doc.provenance.train_time_s, "provenance.train_time_s")?,
        };
        Ok(Self { state, provenance })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::data(format!("cannot read archive {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Writes to a temporary file in the target directory and renames it
    /// over `path`, so readers only ever see a complete archive.
    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        write_atomic(path, self.to_toml().as_bytes())
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    use std::io::Write;
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}
