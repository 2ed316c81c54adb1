//! Benchmark harness: the kink system, transition metrics and a linear
//! autoregressive baseline.
//!
//! Test pairs `(x_t, x_{t+1})` come from the latent states of a held-out
//! simulation, so metrics measure the learned transition rather than the
//! observation noise.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{GpssmError, Result};
use crate::model::{GpssmModel, Trajectory};
use crate::scalar::{KahanSum, Real};
use crate::sparse::{InducingKernel, InducingPosterior, Predictor};

/// The kink transition: `x + 1` below 4, `−4x + 21` from 4 on.
pub fn kink_f<T: Real>(x: T) -> T {
    if x < T::lit(4.0) {
        x + T::one()
    } else {
        T::lit(21.0) - T::lit(4.0) * x
    }
}

/// Simulates `x_{t+1} ~ N(f(x_t), 1)`, `y_t ~ N(x_t, 1)` for `t = 1..=T`
/// with `x_0 ~ N(0, 1)`.
pub fn kink_system_generate<T: Real>(horizon: usize, seed: u64) -> Result<Trajectory<T>> {
    if horizon == 0 {
        return Err(GpssmError::invalid("kink simulation needs T >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = T::sample_standard_normal(&mut rng);
    let mut states = Vec::with_capacity(horizon + 1);
    let mut observations = Vec::with_capacity(horizon);
    states.push(DVector::from_element(1, x));
    for _ in 0..horizon {
        x = kink_f(x) + T::sample_standard_normal(&mut rng);
        let y = x + T::sample_standard_normal(&mut rng);
        states.push(DVector::from_element(1, x));
        observations.push(DVector::from_element(1, y));
    }
    Ok(Trajectory {
        states,
        observations,
    })
}

/// Consecutive latent-state pairs of a trajectory.
pub fn transition_pairs<T: Real>(traj: &Trajectory<T>) -> Vec<(DVector<T>, DVector<T>)> {
    traj.states
        .windows(2)
        .map(|w| (w[0].clone(), w[1].clone()))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransitionMetrics<T: Real> {
    pub rmse: T,
    pub mean_loglik: T,
}

/// RMSE and mean Gaussian log density of `targets` under per-point
/// predictive means and variances. Contributions are sorted before
/// compensated summation, so the result does not depend on point order.
pub fn gaussian_metrics<T: Real>(
    means: &[T],
    variances: &[T],
    targets: &[T],
) -> Result<TransitionMetrics<T>> {
    let n = targets.len();
    if n == 0 {
        return Err(GpssmError::invalid("empty test set"));
    }
    if means.len() != n || variances.len() != n {
        return Err(GpssmError::invalid(
            "predictions and targets differ in length",
        ));
    }
    let half = T::lit(0.5);
    let mut sq = Vec::with_capacity(n);
    let mut ll = Vec::with_capacity(n);
    for i in 0..n {
        let r = targets[i] - means[i];
        let v = variances[i];
        if !(v > T::zero()) {
            return Err(GpssmError::invalid("predictive variance must be positive"));
        }
        sq.push(r * r);
        ll.push(-half * ((T::two_pi() * v).ln() + r * r / v));
    }
    let total = |mut v: Vec<T>| {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        let mut k = KahanSum::new();
        v.into_iter().for_each(|x| k.add(x));
        k.value()
    };
    let count = T::from_usize_lossy(n);
    Ok(TransitionMetrics {
        rmse: (total(sq) / count).sqrt(),
        mean_loglik: total(ll) / count,
    })
}

/// Metrics of the learned transition on `(x_t, x_{t+1})` pairs: the
/// prediction for each GP-driven component is `N(A_*μ, B_* + A_*ΣA_*ᵀ + Q)`.
/// Components fixed by the structure are not scored.
pub fn transition_metrics<T: Real>(
    q: &InducingPosterior<T>,
    model: &GpssmModel<T>,
    test_pairs: &[(DVector<T>, DVector<T>)],
) -> Result<TransitionMetrics<T>> {
    if test_pairs.is_empty() {
        return Err(GpssmError::invalid("empty test set"));
    }
    let d = model.state_dim();
    if test_pairs.iter().any(|(a, b)| a.len() != d || b.len() != d) {
        return Err(GpssmError::invalid(
            "test pair dimension does not match the model",
        ));
    }
    let kuu = InducingKernel::new(model)?;
    let predictor = Predictor::new(model, &kuu, q);
    let gp_idx = model.gp_output_indices();
    let p = gp_idx.len();
    let mut ku = vec![T::zero(); model.num_inducing()];
    let mut mean = vec![T::zero(); p];
    let mut var = vec![T::zero(); p];
    let mut means = Vec::with_capacity(test_pairs.len() * p);
    let mut vars = Vec::with_capacity(test_pairs.len() * p);
    let mut targets = Vec::with_capacity(test_pairs.len() * p);
    for (x, next) in test_pairs {
        predictor.predict_into(x.as_slice(), &mut ku, &mut mean, &mut var);
        let full = model.apply_structure_unchecked(x.as_slice(), &mean);
        for (k, &i) in gp_idx.iter().enumerate() {
            means.push(full[i]);
            vars.push(var[k] + model.process_noise()[i]);
            targets.push(next[i]);
        }
    }
    gaussian_metrics(&means, &vars, &targets)
}

/// Benchmark summary for one trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkReport {
    pub test_rmse: f64,
    pub mean_pred_loglik: f64,
    pub train_time_s: f64,
    pub test_time_s: f64,
    pub config_fingerprint: String,
    pub seeds: Vec<u64>,
}

impl BenchmarkReport {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.test_rmse,
            self.mean_pred_loglik,
            self.train_time_s,
            self.test_time_s,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite || self.train_time_s < 0.0 || self.test_time_s < 0.0 {
            return Err(GpssmError::invalid(
                "report fields must be finite with non-negative times",
            ));
        }
        Ok(())
    }
}

/// Least-squares linear autoregression `y_t = Σ_k W_k y_{t−k} + c + e`,
/// `e ~ N(0, diag(s²))`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearBaseline<T: Real> {
    pub order: usize,
    /// `E x (order·E + 1)`: lag blocks, then the intercept column.
    pub coefficients: DMatrix<T>,
    pub residual_variance: DVector<T>,
    /// Set when the normal equations were singular and a ridge penalty was added.
    pub ridge_regularized: bool,
}

impl<T: Real> LinearBaseline<T> {
    fn regressors(&self, history: &[DVector<T>]) -> DVector<T> {
        let e = self.coefficients.nrows();
        let mut r = DVector::zeros(self.order * e + 1);
        for k in 0..self.order {
            let past = &history[history.len() - 1 - k];
            r.rows_mut(k * e, e).copy_from(past);
        }
        r[self.order * e] = T::one();
        r
    }

    /// One-step prediction from the most recent `order` values of
    /// `history` (last element most recent).
    pub fn predict(&self, history: &[DVector<T>]) -> Result<(DVector<T>, DVector<T>)> {
        let e = self.coefficients.nrows();
        if history.len() < self.order || history.iter().any(|h| h.len() != e) {
            return Err(GpssmError::invalid(
                "history too short or of the wrong dimension",
            ));
        }
        Ok((
            &self.coefficients * self.regressors(history),
            self.residual_variance.clone(),
        ))
    }

    /// Metrics on `(x_t, x_{t+1})` pairs (order 1 only).
    pub fn pair_metrics(&self, pairs: &[(DVector<T>, DVector<T>)]) -> Result<TransitionMetrics<T>> {
        if self.order != 1 {
            return Err(GpssmError::invalid("pair metrics need an order-1 baseline"));
        }
        let mut means = Vec::new();
        let mut vars = Vec::new();
        let mut targets = Vec::new();
        for (x, next) in pairs {
            let (m, v) = self.predict(std::slice::from_ref(x))?;
            means.extend(m.iter().copied());
            vars.extend(v.iter().copied());
            targets.extend(next.iter().copied());
        }
        gaussian_metrics(&means, &vars, &targets)
    }

    /// Metrics of one-step predictions along an observation sequence.
    pub fn sequence_metrics(&self, y: &[DVector<T>]) -> Result<TransitionMetrics<T>> {
        let mut means = Vec::new();
        let mut vars = Vec::new();
        let mut targets = Vec::new();
        for t in self.order..y.len() {
            let (m, v) = self.predict(&y[t - self.order..t])?;
            means.extend(m.iter().copied());
            vars.extend(v.iter().copied());
            targets.extend(y[t].iter().copied());
        }
        gaussian_metrics(&means, &vars, &targets)
    }
}

/// Fits an order-`order` linear AR model to `y` by least squares. Requires
/// `T > 10 · order`.
pub fn linear_baseline<T: Real>(y: &[DVector<T>], order: usize) -> Result<LinearBaseline<T>> {
    if order == 0 {
        return Err(GpssmError::invalid("baseline order must be at least 1"));
    }
    if y.len() <= 10 * order {
        return Err(GpssmError::invalid(format!(
            "baseline of order {order} needs more than {} observations",
            10 * order
        )));
    }
    let e = y[0].len();
    if e == 0
        || y.iter()
            .any(|v| v.len() != e || v.iter().any(|x| !x.is_finite_value()))
    {
        return Err(GpssmError::invalid(
            "observations must be finite with a common dimension",
        ));
    }
    let cols = order * e + 1;
    let rows = y.len() - order;
    let mut x = DMatrix::zeros(rows, cols);
    let mut target = DMatrix::zeros(rows, e);
    for (r, t) in (order..y.len()).enumerate() {
        for k in 0..order {
            for j in 0..e {
                x[(r, k * e + j)] = y[t - 1 - k][j];
            }
        }
        x[(r, cols - 1)] = T::one();
        target.set_row(r, &y[t].transpose());
    }
    let gram = x.transpose() * &x;
    let rhs = x.transpose() * &target;
    let scale = (0..cols).fold(T::zero(), |a, i| a.max(gram[(i, i)]));
    let (solution, ridge) = match solve_spd(&gram, &rhs, scale) {
        Some(s) => (s, false),
        None => {
            let mut reg = gram.clone();
            for i in 0..cols {
                reg[(i, i)] += T::lit(1e-6) * scale.max(T::one());
            }
            let s = reg.cholesky().map(|c| c.solve(&rhs)).ok_or_else(|| {
                GpssmError::SingularMatrix {
                    jitter: 1e-6,
                    context: Some("linear baseline normal equations".into()),
                }
            })?;
            (s, true)
        }
    };
    let coefficients = solution.transpose();
    let resid = &target - &x * &solution;
    let n = T::from_usize_lossy(rows);
    let floor = T::lit(1e-12);
    let residual_variance = DVector::from_fn(e, |j, _| {
        (resid.column(j).iter().fold(T::zero(), |a, v| a + *v * *v) / n).max(floor)
    });
    Ok(LinearBaseline {
        order,
        coefficients,
        residual_variance,
        ridge_regularized: ridge,
    })
}

/// Cholesky solve that refuses numerically rank-deficient systems.
fn solve_spd<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>, scale: T) -> Option<DMatrix<T>> {
    let chol = a.clone().cholesky()?;
    let l = chol.l();
    let min_pivot = (0..a.nrows()).fold(T::lit(f64::INFINITY), |m, i| m.min(l[(i, i)] * l[(i, i)]));
    if min_pivot <= T::lit(1e-10) * scale.max(T::lit(f64::MIN_POSITIVE)) {
        return None;
    }
    Some(chol.solve(b))
}
