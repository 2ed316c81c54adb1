use nalgebra::{DMatrix, DVector};

use super::{ParticleSlice, ParticleTrajectories, StateSpaceModel};
use crate::error::{GpssmError, Result};
use crate::scalar::{log_sum_exp, Real};

const MAX_CELLS: usize = 10_000_000;
const MAX_TRANSITION_ENTRIES: usize = 25_000_000;
/// Pair weights below this fraction of the largest are dropped when
/// converting to particles.
const PAIR_WEIGHT_FLOOR: f64 = 1e-16;

/// Regular lattice over the state space, one `(lo, hi, n)` per dimension.
/// Cells are represented by their centres.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec<T: Real> {
    pub axes: Vec<(T, T, usize)>,
}

impl<T: Real> GridSpec<T> {
    pub fn uniform(dim: usize, lo: T, hi: T, n: usize) -> Self {
        Self {
            axes: vec![(lo, hi, n); dim],
        }
    }

    pub fn num_cells(&self) -> usize {
        self.axes.iter().map(|a| a.2).product()
    }

    pub fn cell_volume(&self) -> T {
        self.axes.iter().fold(T::one(), |v, &(lo, hi, n)| {
            v * (hi - lo) / T::from_usize_lossy(n)
        })
    }

    /// Cell centres, first axis varying fastest.
    pub fn centers(&self) -> Vec<DVector<T>> {
        let steps: Vec<T> = self
            .axes
            .iter()
            .map(|&(lo, hi, n)| (hi - lo) / T::from_usize_lossy(n))
            .collect();
        (0..self.num_cells())
            .map(|mut idx| {
                DVector::from_iterator(
                    self.axes.len(),
                    self.axes.iter().zip(&steps).map(|(&(lo, _, n), &h)| {
                        let i = idx % n;
                        idx /= n;
                        lo + h * (T::from_usize_lossy(i) + T::lit(0.5))
                    }),
                )
            })
            .collect()
    }
}

/// Exact forward-backward smoothing of the discretized model.
#[derive(Clone, Debug)]
pub struct GridSmoothing<T: Real> {
    pub centers: Vec<DVector<T>>,
    pub cell_volume: T,
    /// Log normalizing constant of the discretized model (a Riemann sum of
    /// the continuous one).
    pub log_z: T,
    pub log_z_increments: Vec<T>,
    /// `marginals[t][i] = q(x_t = c_i)`, `t = 0..=n`.
    pub marginals: Vec<Vec<T>>,
    /// `pairs[t-1][(i, j)] = q(x_{t-1} = c_i, x_t = c_j)`.
    pub pairs: Vec<DMatrix<T>>,
    /// Per time, the expected continuous `log q̃` factor.
    pub expected_log_factor: Vec<T>,
}

/// Forward-backward on a lattice. Only usable for models whose every state
/// component has a transition density, and for `D <= 2`.
pub fn grid_smoother<T: Real, M: StateSpaceModel<T>>(
    model: &M,
    y: &[DVector<T>],
    grid: &GridSpec<T>,
) -> Result<GridSmoothing<T>> {
    let dim = model.state_dim();
    if dim > 2 || grid.axes.len() != dim {
        return Err(GpssmError::invalid(
            "grid smoothing needs D <= 2 and one axis per dimension",
        ));
    }
    if !model.has_density() {
        return Err(GpssmError::invalid(
            "grid smoothing needs a transition density on every state component",
        ));
    }
    if grid.axes.iter().any(|&(lo, hi, n)| n == 0 || !(hi > lo)) {
        return Err(GpssmError::invalid("grid axes need hi > lo and n >= 1"));
    }
    let g = grid.num_cells();
    let n = y.len();
    if g.saturating_mul(n + 1) > MAX_CELLS || g.saturating_mul(g) > MAX_TRANSITION_ENTRIES {
        return Err(GpssmError::Resource(format!(
            "grid of {g} cells over {} steps exceeds the smoother's budget",
            n + 1
        )));
    }
    let centers = grid.centers();
    let log_vol = grid.cell_volume().ln();

    let log_p0: Vec<T> = centers
        .iter()
        .map(|c| model.initial_log_density(c.as_slice()))
        .collect();
    // Continuous log factor of each transition (extra + log density).
    let mut log_trans = DMatrix::from_element(g, g, T::zero());
    for (i, ci) in centers.iter().enumerate() {
        let extra = model.extra_log_weight(ci.as_slice());
        for (j, cj) in centers.iter().enumerate() {
            log_trans[(i, j)] = extra + model.transition_log_density(ci.as_slice(), cj.as_slice());
        }
    }
    let log_obs: Vec<Vec<T>> = y
        .iter()
        .map(|yt| {
            centers
                .iter()
                .map(|c| model.observation_log_density(yt.as_slice(), c.as_slice()))
                .collect()
        })
        .collect();

    // Forward pass with per-step normalization, in log space.
    let mut alpha: Vec<Vec<T>> = Vec::with_capacity(n + 1);
    let mut incs = Vec::with_capacity(n + 1);
    let a0: Vec<T> = log_p0.iter().map(|v| *v + log_vol).collect();
    let c0 = log_sum_exp(&a0);
    if !c0.is_finite_value() {
        return Err(GpssmError::DegenerateWeights { time: 0 });
    }
    incs.push(c0);
    alpha.push(a0.iter().map(|v| *v - c0).collect());
    let mut buf = vec![T::zero(); g];
    for t in 1..=n {
        let prev = &alpha[t - 1];
        let mut a = vec![T::zero(); g];
        for j in 0..g {
            for i in 0..g {
                buf[i] = prev[i] + log_trans[(i, j)];
            }
            a[j] = log_sum_exp(&buf) + log_vol + log_obs[t - 1][j];
        }
        let c = log_sum_exp(&a);
        if !c.is_finite_value() {
            return Err(GpssmError::DegenerateWeights { time: t });
        }
        a.iter_mut().for_each(|v| *v -= c);
        incs.push(c);
        alpha.push(a);
    }

    // Backward pass.
    let mut beta = vec![vec![T::zero(); g]; n + 1];
    for t in (1..=n).rev() {
        let mut b = vec![T::zero(); g];
        for i in 0..g {
            for j in 0..g {
                buf[j] = log_trans[(i, j)] + log_vol + log_obs[t - 1][j] + beta[t][j];
            }
            b[i] = log_sum_exp(&buf) - incs[t];
        }
        beta[t - 1] = b;
    }

    let marginals: Vec<Vec<T>> = (0..=n)
        .map(|t| {
            let v: Vec<T> = (0..g).map(|i| alpha[t][i] + beta[t][i]).collect();
            let z = log_sum_exp(&v);
            v.into_iter().map(|x| (x - z).exp()).collect()
        })
        .collect();
    let mut pairs = Vec::with_capacity(n);
    let mut expected = Vec::with_capacity(n + 1);
    expected.push(
        marginals[0]
            .iter()
            .zip(&log_p0)
            .fold(T::zero(), |acc, (w, lp)| acc + *w * *lp),
    );
    for t in 1..=n {
        let mut xi = DMatrix::from_element(g, g, T::zero());
        let mut total = T::zero();
        for j in 0..g {
            let right = log_vol + log_obs[t - 1][j] + beta[t][j] - incs[t];
            for i in 0..g {
                let v = (alpha[t - 1][i] + log_trans[(i, j)] + right).exp();
                xi[(i, j)] = v;
                total += v;
            }
        }
        xi /= total;
        let mut e = T::zero();
        for j in 0..g {
            for i in 0..g {
                let w = xi[(i, j)];
                if w > T::zero() {
                    e += w * (log_trans[(i, j)] + log_obs[t - 1][j]);
                }
            }
        }
        expected.push(e);
        pairs.push(xi);
    }

    Ok(GridSmoothing {
        centers,
        cell_volume: grid.cell_volume(),
        log_z: incs.iter().fold(T::zero(), |a, v| a + *v),
        log_z_increments: incs,
        marginals,
        pairs,
        expected_log_factor: expected,
    })
}

impl<T: Real> GridSmoothing<T> {
    pub fn mean(&self, t: usize) -> DVector<T> {
        let dim = self.centers[0].len();
        self.marginals[t]
            .iter()
            .zip(&self.centers)
            .fold(DVector::zeros(dim), |acc, (w, c)| acc + c * *w)
    }

    /// Entropy of the continuous smoothing density implied by the grid:
    /// `log Z − ⟨log q̃⟩`.
    pub fn entropy(&self) -> T {
        let e = self
            .expected_log_factor
            .iter()
            .fold(T::zero(), |a, v| a + *v);
        self.log_z - e
    }

    /// Weighted cell pairs as a particle approximation. Cell pairs with
    /// negligible mass are dropped and the rest renormalized.
    pub fn to_particles(&self) -> ParticleTrajectories<T> {
        let dim = self.centers[0].len();
        let floor = T::lit(PAIR_WEIGHT_FLOOR);
        let cell = |i: usize| self.centers[i].iter().copied();

        let w0 = &self.marginals[0];
        let max0 = w0.iter().fold(T::zero(), |a, w| a.max(*w));
        let keep0: Vec<usize> = (0..w0.len()).filter(|&i| w0[i] > max0 * floor).collect();
        let total0 = keep0.iter().fold(T::zero(), |a, &i| a + w0[i]);
        let mut initial = ParticleSlice::new(
            0,
            dim,
            Vec::new(),
            keep0.iter().flat_map(|&i| cell(i)).collect(),
            keep0.iter().map(|&i| w0[i] / total0).collect(),
        );
        initial.log_z_increment = self.log_z_increments[0];
        initial.entropy_term = self.log_z_increments[0] - self.expected_log_factor[0];

        let transitions = self
            .pairs
            .iter()
            .enumerate()
            .map(|(k, xi)| {
                let max = xi.iter().fold(T::zero(), |a, w| a.max(*w));
                let g = xi.nrows();
                let mut prev = Vec::new();
                let mut curr = Vec::new();
                let mut weights = Vec::new();
                for j in 0..g {
                    for i in 0..g {
                        let w = xi[(i, j)];
                        if w > max * floor {
                            prev.extend(cell(i));
                            curr.extend(cell(j));
                            weights.push(w);
                        }
                    }
                }
                let total = weights.iter().fold(T::zero(), |a, w| a + *w);
                weights.iter_mut().for_each(|w| *w /= total);
                let mut slice = ParticleSlice::new(k + 1, dim, prev, curr, weights);
                slice.log_z_increment = self.log_z_increments[k + 1];
                slice.entropy_term = self.log_z_increments[k + 1] - self.expected_log_factor[k + 1];
                slice
            })
            .collect();
        ParticleTrajectories::from_parts(Some(initial), transitions, self.pairs.len() + 1, 0)
    }
}
