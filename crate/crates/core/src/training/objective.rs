//! The ELBO estimate and its gradient in the hyperparameters with the
//! particle set and `q(u)` held fixed.

use nalgebra::{DMatrix, DVector};

use crate::error::{GpssmError, Result};
use crate::kernel::symmetrize;
use crate::model::GpssmModel;
use crate::scalar::Real;
use crate::smoothing::{ParticleSlice, ParticleTrajectories};
use crate::sparse::{kl_qu_pu, InducingKernel, InducingPosterior, SufficientStats};

/// Particles for one smoothed window with the observations they were
/// smoothed against. Slice time `t` pairs with `observations[t - 1]`.
#[derive(Clone, Debug)]
pub struct SmoothedSegment<T: Real> {
    pub trajectories: ParticleTrajectories<T>,
    pub observations: Vec<DVector<T>>,
}

/// Which hyperparameter groups receive gradient steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub kernel: bool,
    pub process_noise: bool,
    pub likelihood: bool,
    pub inducing_inputs: bool,
}

impl Default for Trainable {
    fn default() -> Self {
        Self {
            kernel: true,
            process_noise: true,
            likelihood: true,
            inducing_inputs: true,
        }
    }
}

/// Flat layout of θ:
/// `[kernel log params | log Q (GP-driven dims) | likelihood params | z]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ThetaLayout {
    dim: usize,
    n_kernel: usize,
    gp_idx: Vec<usize>,
    n_lik: usize,
    m: usize,
}

impl ThetaLayout {
    pub fn of<T: Real>(model: &GpssmModel<T>) -> Self {
        let dim = model.state_dim();
        Self {
            dim,
            n_kernel: dim + 1,
            gp_idx: model.gp_output_indices(),
            n_lik: model.likelihood().num_params(),
            m: model.num_inducing(),
        }
    }

    pub fn len(&self) -> usize {
        self.n_kernel + self.gp_idx.len() + self.n_lik + self.m * self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn q_start(&self) -> usize {
        self.n_kernel
    }

    fn lik_start(&self) -> usize {
        self.q_start() + self.gp_idx.len()
    }

    fn z_start(&self) -> usize {
        self.lik_start() + self.n_lik
    }

    pub fn pack<T: Real>(&self, model: &GpssmModel<T>) -> Vec<T> {
        let mut out = model.kernel().log_params();
        out.extend(self.gp_idx.iter().map(|&i| model.process_noise()[i].ln()));
        out.extend(model.likelihood().params());
        for z in model.inducing_inputs() {
            out.extend(z.iter().copied());
        }
        out
    }

    pub fn unpack<T: Real>(&self, model: &GpssmModel<T>, theta: &[T]) -> Result<GpssmModel<T>> {
        if theta.len() != self.len() {
            return Err(GpssmError::invalid("parameter vector has the wrong length"));
        }
        let kernel = model.kernel().with_log_params(&theta[..self.n_kernel])?;
        let mut q = model.process_noise().clone();
        for (k, &i) in self.gp_idx.iter().enumerate() {
            q[i] = theta[self.q_start() + k].exp();
        }
        let lik = model
            .likelihood()
            .with_params(&theta[self.lik_start()..self.z_start()])?;
        let z = theta[self.z_start()..]
            .chunks(self.dim)
            .map(DVector::from_column_slice)
            .collect();
        GpssmModel::new(
            kernel,
            q,
            lik,
            model.x0_prior().clone(),
            z,
            model.structure(),
        )
    }

    /// Human-readable name of entry `i`, used in error messages.
    pub fn name(&self, i: usize) -> String {
        if i < self.dim {
            format!("log_lengthscale[{i}]")
        } else if i == self.dim {
            "log_signal_variance".to_string()
        } else if i < self.lik_start() {
            format!("log_process_noise[{}]", self.gp_idx[i - self.q_start()])
        } else if i < self.z_start() {
            format!("likelihood[{}]", i - self.lik_start())
        } else {
            let k = i - self.z_start();
            format!("inducing_input[{}][{}]", k / self.dim, k % self.dim)
        }
    }

    /// Zeroes the entries of groups that are not trainable.
    pub fn mask<T: Real>(&self, grad: &mut [T], trainable: Trainable) {
        let mut clear =
            |range: std::ops::Range<usize>| grad[range].iter_mut().for_each(|g| *g = T::zero());
        if !trainable.kernel {
            clear(0..self.n_kernel);
        }
        if !trainable.process_noise {
            clear(self.q_start()..self.lik_start());
        }
        if !trainable.likelihood {
            clear(self.lik_start()..self.z_start());
        }
        if !trainable.inducing_inputs {
            clear(self.z_start()..self.len());
        }
    }
}

/// ELBO value, optional θ-gradient and the Ψ statistics of the particle
/// set, all from one pass.
#[derive(Clone, Debug)]
pub struct ObjectiveValue<T: Real> {
    pub elbo: T,
    pub gradient: Option<Vec<T>>,
    pub stats: SufficientStats<T>,
}

/// Monte Carlo ELBO:
///
/// ```text
/// −KL(q(u) || p(u)) + Σ_slices scale · (⟨log q̃_t⟩ + entropy_t)
/// ```
///
/// where `log q̃_t = log p(x_0)` for the initial slice and
/// `Φ(x_t, x_{t-1}) + log p(y_t | x_t)` otherwise. At the parameters the
/// particles were drawn under this equals `−KL + log Ẑ`.
pub fn elbo_estimate<T: Real>(
    model: &GpssmModel<T>,
    q: &InducingPosterior<T>,
    segments: &[SmoothedSegment<T>],
) -> Result<T> {
    Ok(objective(model, q, segments, false)?.elbo)
}

/// Gradient of [`elbo_estimate`] in the flat θ of [`ThetaLayout`], with the
/// particles and the moments of `q(u)` frozen.
pub fn theta_gradient<T: Real>(
    model: &GpssmModel<T>,
    q: &InducingPosterior<T>,
    segments: &[SmoothedSegment<T>],
) -> Result<Vec<T>> {
    let grad = objective(model, q, segments, true)?
        .gradient
        .expect("gradient requested");
    let layout = ThetaLayout::of(model);
    if let Some(i) = grad.iter().position(|g| !g.is_finite_value()) {
        return Err(GpssmError::NonFiniteGradient {
            parameter: layout.name(i),
        });
    }
    Ok(grad)
}

/// ELBO, Ψ statistics and (optionally) the θ-gradient in one pass over the
/// particles. Each slice is processed as an `L x M` block so the `K⁻¹`,
/// `C_d` and Ψ products are matrix multiplications.
pub fn objective<T: Real>(
    model: &GpssmModel<T>,
    q: &InducingPosterior<T>,
    segments: &[SmoothedSegment<T>],
    want_grad: bool,
) -> Result<ObjectiveValue<T>> {
    objective_threaded(model, q, segments, want_grad, 1)
}

/// Slices per unit of work. Partial sums are formed per block and reduced
/// in block order, so the result does not depend on the thread count.
const BLOCK: usize = 16;

/// [`objective`] with the slices spread over `threads` worker threads.
pub fn objective_threaded<T: Real>(
    model: &GpssmModel<T>,
    q: &InducingPosterior<T>,
    segments: &[SmoothedSegment<T>],
    want_grad: bool,
    threads: usize,
) -> Result<ObjectiveValue<T>> {
    let ctx = Context::new(model, q, want_grad)?;
    let mut elbo = -kl_qu_pu(q, &ctx.kuu);
    let mut work = Vec::new();
    for (k, seg) in segments.iter().enumerate() {
        let tr = &seg.trajectories;
        tr.check_normalized()?;
        if let Some(init) = tr.initial() {
            let mean_lp = init
                .weights
                .iter()
                .enumerate()
                .fold(T::zero(), |a, (i, w)| {
                    a + *w * model.x0_prior().log_density(init.curr(i))
                });
            elbo += init.scale * (mean_lp + init.entropy_term);
        }
        for j in 0..tr.transitions().len() {
            work.push((k, j));
        }
    }
    let blocks: Vec<&[(usize, usize)]> = work.chunks(BLOCK).collect();
    let run = |block: &[(usize, usize)]| -> Result<Partial<T>> {
        let mut part = Partial::new(&ctx);
        for &(k, j) in block {
            let seg = &segments[k];
            ctx.add_slice(
                &seg.trajectories.transitions()[j],
                &seg.observations,
                &mut part,
            )?;
        }
        Ok(part)
    };
    let threads = threads.clamp(1, blocks.len().max(1));
    let partials: Vec<Partial<T>> = if threads == 1 {
        blocks.iter().map(|b| run(b)).collect::<Result<_>>()?
    } else {
        let mut slots: Vec<Option<Result<Partial<T>>>> = (0..blocks.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|w| {
                    let blocks = &blocks;
                    let run = &run;
                    scope.spawn(move || {
                        (w..blocks.len())
                            .step_by(threads)
                            .map(|i| (i, run(blocks[i])))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("objective worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots
            .into_iter()
            .map(|s| s.expect("every block is processed"))
            .collect::<Result<_>>()?
    };

    let mut total = Partial::new(&ctx);
    for part in partials {
        total.elbo += part.elbo;
        total.count += part.count;
        total.psi1 += part.psi1;
        total.psi2 += part.psi2;
        for (g, v) in total.grad.iter_mut().zip(part.grad) {
            *g += v;
        }
    }
    elbo += total.elbo;
    let mut psi2 = total.psi2;
    symmetrize(&mut psi2);
    let gradient = if want_grad {
        let mut grad = total.grad;
        k_adjoint_into(
            model,
            ctx.kinv(),
            &ctx.c,
            &ctx.alpha,
            &ctx.qn,
            &total.psi1,
            &psi2,
            &mut grad,
        );
        Some(grad)
    } else {
        None
    };
    Ok(ObjectiveValue {
        elbo,
        gradient,
        stats: SufficientStats {
            psi1: total.psi1,
            psi2,
            effective_count: total.count,
        },
    })
}

/// Quantities shared by every slice.
struct Context<'a, T: Real> {
    model: &'a GpssmModel<T>,
    kuu: InducingKernel<T>,
    want_grad: bool,
    gp_idx: Vec<usize>,
    qn: Vec<T>,
    alpha: DMatrix<T>,
    c: Vec<DMatrix<T>>,
    /// `K⁻¹ − C_d`, since `b_* − a_*ᵀΣa_* = k** − k_uᵀ(K⁻¹ − C_d)k_u`.
    reduce: Vec<DMatrix<T>>,
    log_norm: Vec<T>,
    g_kss: T,
    inv_l2: Vec<T>,
    grad_len: usize,
}

/// Per-block sums.
struct Partial<T: Real> {
    elbo: T,
    count: T,
    grad: Vec<T>,
    psi1: DMatrix<T>,
    psi2: DMatrix<T>,
}

impl<T: Real> Partial<T> {
    fn new(ctx: &Context<'_, T>) -> Self {
        let m = ctx.alpha.nrows();
        Self {
            elbo: T::zero(),
            count: T::zero(),
            grad: vec![T::zero(); ctx.grad_len],
            psi1: DMatrix::zeros(m, ctx.qn.len()),
            psi2: DMatrix::zeros(m, m),
        }
    }
}

impl<'a, T: Real> Context<'a, T> {
    fn new(model: &'a GpssmModel<T>, q: &InducingPosterior<T>, want_grad: bool) -> Result<Self> {
        let m = model.num_inducing();
        let p = model.num_gp_outputs();
        if q.num_inducing() != m || q.num_outputs() != p {
            return Err(GpssmError::invalid("q(u) does not match the model"));
        }
        let kuu = InducingKernel::new(model)?;
        let kinv = kuu.inverse();
        let gp_idx = model.gp_output_indices();
        let qn: Vec<T> = gp_idx.iter().map(|&i| model.process_noise()[i]).collect();
        let half = T::lit(0.5);
        let alpha = kinv * q.mu();
        let c: Vec<DMatrix<T>> = q
            .sigma()
            .iter()
            .map(|s| {
                let mut c = kinv * s * kinv;
                symmetrize(&mut c);
                c
            })
            .collect();
        let reduce = c.iter().map(|c| kinv - c).collect();
        let log_norm = qn.iter().map(|q| (T::two_pi() * *q).ln()).collect();
        let g_kss = qn.iter().fold(T::zero(), |a, q| a - half / *q);
        let inv_l2 = model
            .kernel()
            .lengthscales()
            .iter()
            .map(|l| T::one() / (*l * *l))
            .collect();
        let grad_len = if want_grad {
            ThetaLayout::of(model).len()
        } else {
            0
        };
        Ok(Self {
            model,
            kuu,
            want_grad,
            gp_idx,
            qn,
            alpha,
            c,
            reduce,
            log_norm,
            g_kss,
            inv_l2,
            grad_len,
        })
    }

    fn kinv(&self) -> &DMatrix<T> {
        self.kuu.inverse()
    }

    fn add_slice(
        &self,
        slice: &ParticleSlice<T>,
        observations: &[DVector<T>],
        out: &mut Partial<T>,
    ) -> Result<()> {
        let model = self.model;
        let y = observations
            .get(slice.time - 1)
            .ok_or_else(|| GpssmError::invalid("slice time beyond the segment's observations"))?;
        let kern = model.kernel();
        let lik = model.likelihood();
        let z = model.inducing_inputs();
        let dim = model.state_dim();
        let m = z.len();
        let half = T::lit(0.5);
        let kss = kern.diag();
        let want_grad = self.want_grad;
        let q_start = dim + 1;
        let lik_start = q_start + self.qn.len();
        let z_start = lik_start + lik.num_params();

        let active: Vec<usize> = (0..slice.len())
            .filter(|&i| slice.weights[i] != T::zero())
            .collect();
        let n = active.len();
        let mut kx = DMatrix::zeros(n, m);
        let mut hx = DMatrix::zeros(if want_grad { n } else { 0 }, m);
        for (r, &i) in active.iter().enumerate() {
            let prev = slice.prev(i);
            for (j, zj) in z.iter().enumerate() {
                let (k, h) = kern.k_with_slope(prev, zj.as_slice());
                kx[(r, j)] = k;
                if want_grad {
                    hx[(r, j)] = h;
                }
            }
        }
        let w = DVector::from_iterator(n, active.iter().map(|&i| slice.weights[i]));
        let ws = &w * slice.scale;
        let mut g_ku = DMatrix::zeros(if want_grad { n } else { 0 }, m);
        let mut lq = DVector::from_iterator(
            n,
            active
                .iter()
                .map(|&i| lik.log_density(y.as_slice(), slice.curr(i))),
        );
        let grad = &mut out.grad;
        for d in 0..self.qn.len() {
            let s = &kx * &self.reduce[d];
            let quad = row_dots(&kx, &s);
            let mean = &kx * self.alpha.column(d);
            let qd = self.qn[d];
            let x =
                DVector::from_iterator(n, active.iter().map(|&i| slice.curr(i)[self.gp_idx[d]]));
            let resid = &x - &mean;
            for r in 0..n {
                let var = (kss - quad[r]).max(T::zero());
                let e = resid[r];
                lq[r] -= half * (var / qd + self.log_norm[d] + e * e / qd);
                if want_grad {
                    grad[q_start + d] += ws[r] * (half * (var + e * e) / qd - half);
                }
            }
            if want_grad {
                let inv_q = T::one() / qd;
                g_ku += &s * inv_q;
                g_ku.ger(inv_q, &resid, &self.alpha.column(d), T::one());
            }
            let wx = x.component_mul(&ws);
            out.psi1.column_mut(d).gemv_tr(T::one(), &kx, &wx, T::one());
        }
        out.elbo += slice.scale * (w.dot(&lq) + slice.entropy_term);
        let mut wk = kx.clone();
        for (r, mut row) in wk.row_iter_mut().enumerate() {
            row *= ws[r];
        }
        out.psi2.gemm_tr(T::one(), &kx, &wk, T::one());
        out.count += slice.scale;

        if want_grad {
            let mut sum_ws = T::zero();
            for (r, &i) in active.iter().enumerate() {
                let cur = slice.curr(i);
                let prev = slice.prev(i);
                lik.accumulate_param_grad(y.as_slice(), cur, ws[r], &mut grad[lik_start..z_start]);
                sum_ws += ws[r];
                for (j, zj) in z.iter().enumerate() {
                    let gj = ws[r] * g_ku[(r, j)];
                    let h = hx[(r, j)];
                    grad[dim] += gj * kx[(r, j)];
                    for a in 0..dim {
                        let diff = prev[a] - zj[a];
                        let t = gj * h * diff * self.inv_l2[a];
                        grad[a] -= t * diff;
                        grad[z_start + j * dim + a] -= t;
                    }
                }
            }
            // k(x, x) = σ² contributes through b only.
            grad[dim] += sum_ws * self.g_kss * kss;
        }
        Ok(())
    }
}

/// Row-wise dot products of two equally shaped matrices.
fn row_dots<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> DVector<T> {
    let mut out = DVector::zeros(a.nrows());
    for j in 0..a.ncols() {
        for (o, (x, y)) in out
            .iter_mut()
            .zip(a.column(j).iter().zip(b.column(j).iter()))
        {
            *o += *x * *y;
        }
    }
    out
}

/// Adds the `K_uu` adjoint from the data terms (via Ψ) and from the KL,
/// chained to the kernel parameters and the inducing inputs.
#[allow(clippy::too_many_arguments)]
fn k_adjoint_into<T: Real>(
    model: &GpssmModel<T>,
    kinv: &DMatrix<T>,
    c: &[DMatrix<T>],
    alpha: &DMatrix<T>,
    qn: &[T],
    psi1: &DMatrix<T>,
    psi2: &DMatrix<T>,
    grad: &mut [T],
) {
    let half = T::lit(0.5);
    let m = model.num_inducing();
    let dim = model.state_dim();
    let n_kernel = dim + 1;
    let z_start = n_kernel + qn.len() + model.likelihood().num_params();
    let kern = model.kernel();
    let z = model.inducing_inputs();
    let kpk = kinv * psi2 * kinv;
    let mut g = DMatrix::zeros(m, m);
    for (d, &qd) in qn.iter().enumerate() {
        let kpc = kinv * psi2 * &c[d];
        g -= (&kpk - &kpc - kpc.transpose()) * (half / qd);
        let resid = kinv * (psi1.column(d) - psi2 * alpha.column(d));
        let outer = &resid * alpha.column(d).transpose();
        g -= (&outer + outer.transpose()) * (half / qd);
        g -= (kinv - &c[d] - alpha.column(d) * alpha.column(d).transpose()) * half;
    }
    symmetrize(&mut g);
    let mut kp = vec![T::zero(); n_kernel];
    let mut ki = vec![T::zero(); dim];
    for i in 0..m {
        for j in 0..m {
            let gij = g[(i, j)];
            kern.k_log_param_grad(z[i].as_slice(), z[j].as_slice(), &mut kp);
            for k in 0..n_kernel {
                grad[k] += gij * kp[k];
            }
            if i != j {
                kern.k_input_grad(z[i].as_slice(), z[j].as_slice(), &mut ki);
                for k in 0..dim {
                    grad[z_start + i * dim + k] += T::lit(2.0) * gij * ki[k];
                }
            }
        }
    }
}
