//! Shared fixtures for unit tests.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

use crate::kernel::{KernelFamily, KernelSpec};
use crate::model::GpssmModel;
use crate::sparse::{InducingKernel, InducingPosterior};

pub fn points(xs: &[f64]) -> Vec<DVector<f64>> {
    xs.iter().map(|x| DVector::from_element(1, *x)).collect()
}

pub fn model_1d(
    family: KernelFamily,
    lengthscale: f64,
    sf2: f64,
    q: f64,
    r: f64,
    z: &[f64],
) -> GpssmModel<f64> {
    GpssmModel::free_gaussian(
        KernelSpec::isotropic(family, 1, lengthscale, sf2).unwrap(),
        DVector::from_element(1, q),
        DVector::from_element(1, r),
        points(z),
    )
    .unwrap()
}

/// Random SPD matrix `L Lᵀ + 0.1 I`.
pub fn random_spd<R: Rng>(m: usize, scale: f64, rng: &mut R) -> DMatrix<f64> {
    let l = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0) * scale);
    &l * l.transpose() + DMatrix::identity(m, m) * (0.1 * scale * scale)
}

pub fn random_posterior<R: Rng>(model: &GpssmModel<f64>, rng: &mut R) -> InducingPosterior<f64> {
    let m = model.num_inducing();
    let p = model.num_gp_outputs();
    let mu = DMatrix::from_fn(m, p, |_, _| rng.random_range(-1.5..1.5));
    let sigma = (0..p).map(|_| random_spd(m, 0.4, rng)).collect();
    InducingPosterior::from_moments(mu, sigma).unwrap()
}

pub fn kuu(model: &GpssmModel<f64>) -> InducingKernel<f64> {
    InducingKernel::new(model).unwrap()
}

/// Gauss–Hermite nodes and weights for `∫ f(x) N(x | 0, 1) dx`
/// (Golub–Welsch on the probabilists' Hermite recurrence).
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let j = DMatrix::from_fn(n, n, |i, k| {
        if i + 1 == k || k + 1 == i {
            (i.max(k) as f64).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    pairs.into_iter().unzip()
}

/// Scalar linear-Gaussian model `x_t = a x_{t-1} + c + N(0, q)`,
/// `y_t = x_t + N(0, r)`, `x_0 ~ N(m0, p0)`, with no extra weight.
#[derive(Clone, Copy, Debug)]
pub struct LinearGaussian {
    pub a: f64,
    pub c: f64,
    pub q: f64,
    pub r: f64,
    pub m0: f64,
    pub p0: f64,
}

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mean).powi(2) / var)
}

impl crate::smoothing::StateSpaceModel<f64> for LinearGaussian {
    fn state_dim(&self) -> usize {
        1
    }

    fn initial_log_density(&self, x: &[f64]) -> f64 {
        log_normal(x[0], self.m0, self.p0)
    }

    fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        use crate::scalar::Real;
        DVector::from_element(
            1,
            self.m0 + self.p0.sqrt() * f64::sample_standard_normal(rng),
        )
    }

    fn propagate<R: Rng + ?Sized>(
        &self,
        prev: &[f64],
        next: &mut [f64],
        rng: &mut R,
    ) -> (f64, f64) {
        use crate::scalar::Real;
        let mean = self.a * prev[0] + self.c;
        next[0] = mean + self.q.sqrt() * f64::sample_standard_normal(rng);
        (0.0, log_normal(next[0], mean, self.q))
    }

    fn transition_log_density(&self, prev: &[f64], next: &[f64]) -> f64 {
        log_normal(next[0], self.a * prev[0] + self.c, self.q)
    }

    fn extra_log_weight(&self, _prev: &[f64]) -> f64 {
        0.0
    }

    fn observation_log_density(&self, y: &[f64], x: &[f64]) -> f64 {
        log_normal(y[0], x[0], self.r)
    }
}

/// Kalman filter + RTS smoother output for [`LinearGaussian`], indexed `0..=T`.
pub struct Rts {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// `Cov(x_t, x_{t-1} | y)` for `t = 1..=T` (index 0 unused).
    pub cross: Vec<f64>,
    pub log_evidence: f64,
}

impl LinearGaussian {
    pub fn simulate<R: Rng>(&self, n: usize, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        use crate::scalar::Real;
        let mut x = vec![self.m0 + self.p0.sqrt() * f64::sample_standard_normal(rng)];
        let mut y = Vec::with_capacity(n);
        for t in 1..=n {
            let next =
                self.a * x[t - 1] + self.c + self.q.sqrt() * f64::sample_standard_normal(rng);
            x.push(next);
            y.push(next + self.r.sqrt() * f64::sample_standard_normal(rng));
        }
        (x, y)
    }

    pub fn rts(&self, y: &[f64]) -> Rts {
        let n = y.len();
        let (mut mf, mut pf) = (vec![self.m0], vec![self.p0]);
        let (mut mp, mut pp) = (vec![0.0], vec![0.0]);
        let mut log_ev = 0.0;
        for t in 1..=n {
            let m_pred = self.a * mf[t - 1] + self.c;
            let p_pred = self.a * self.a * pf[t - 1] + self.q;
            let s = p_pred + self.r;
            log_ev += log_normal(y[t - 1], m_pred, s);
            let k = p_pred / s;
            mf.push(m_pred + k * (y[t - 1] - m_pred));
            pf.push((1.0 - k) * p_pred);
            mp.push(m_pred);
            pp.push(p_pred);
        }
        let (mut ms, mut ps) = (mf.clone(), pf.clone());
        let mut cross = vec![0.0; n + 1];
        for t in (0..n).rev() {
            let j = pf[t] * self.a / pp[t + 1];
            ms[t] = mf[t] + j * (ms[t + 1] - mp[t + 1]);
            ps[t] = pf[t] + j * j * (ps[t + 1] - pp[t + 1]);
            cross[t + 1] = j * ps[t + 1];
        }
        Rts {
            mean: ms,
            var: ps,
            cross,
            log_evidence: log_ev,
        }
    }
}
