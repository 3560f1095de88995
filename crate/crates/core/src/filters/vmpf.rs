//! Variational mapping particle filter.
//!
//! Forecast particles are transported toward the posterior by repeated maps
//! `x ← x − ε ∇D_KL(x)`, where the gradient of the Kullback–Leibler
//! divergence is projected on a Gaussian reproducing kernel Hilbert space:
//!
//! `∇D_KL(x_i) = −(1/N) Σ_j [k(x_j, x_i) ∇log p(x_j | y) + ∇_{x_j} k(x_j, x_i)]`.
//!
//! The prior is the Gaussian mixture `(1/N) Σ_m N(M(xᵃ_m), Q)` and the kernel
//! is `k(x, x') = exp(−½ (x − x')ᵀ (sQ)⁻¹ (x − x'))`. Both are evaluated in
//! coordinates whitened by the Cholesky factor of `Q`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::FilterError;
use crate::statespace::{Ensemble, ObservationOperator, SpdMatrix};
use crate::Scalar;

/// Tuning of the mapping iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VmpfSpec {
    /// Initial step size ε, halved whenever the divergence estimate rises.
    pub step_size: f64,
    pub max_iterations: usize,
    /// Stop once the RMS of the gradient entries drops below this value.
    pub gradient_tolerance: f64,
    /// Kernel covariance is `kernel_scale · Q`.
    pub kernel_scale: f64,
}

impl Default for VmpfSpec {
    fn default() -> Self {
        Self {
            step_size: 0.05,
            max_iterations: 200,
            gradient_tolerance: 1e-3,
            kernel_scale: 1.0,
        }
    }
}

impl VmpfSpec {
    pub fn validate(&self) -> Result<(), FilterError> {
        if !(self.step_size > 0.0) || !(self.gradient_tolerance > 0.0) || !(self.kernel_scale > 0.0) {
            return Err(FilterError::InvalidConfig(format!(
                "VMPF step size, tolerance and kernel scale must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Per-iteration record of the mapping.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VmpfTrace {
    /// Divergence estimate, starting with the forecast.
    pub kl: Vec<f64>,
    /// RMS gradient entry at each evaluated configuration.
    pub gradient_rms: Vec<f64>,
    /// Step size used for each accepted move.
    pub step_sizes: Vec<f64>,
    /// Trial moves rejected because they raised the divergence estimate.
    pub rejected: usize,
}

impl VmpfTrace {
    /// Gradient evaluations after the starting one.
    pub fn iterations(&self) -> usize {
        self.step_sizes.len() + self.rejected
    }
}

/// Halvings of ε after which the mapping gives up on further descent.
pub const MAX_HALVINGS: i32 = 20;

/// Posterior target of one mapping: the mixture prior and the Gaussian
/// likelihood of `y`.
pub struct VmpfTarget<'a, T: Scalar, H: ?Sized> {
    y: &'a DVector<T>,
    h_op: &'a H,
    r: &'a SpdMatrix<T>,
    chol_q: DMatrix<T>,
    whitened_means: DMatrix<T>,
    kernel_scale: T,
    log_norm_prior: T,
    log_norm_kernel: T,
}

fn whiten<T: Scalar>(l: &DMatrix<T>, xs: &DMatrix<T>) -> Result<DMatrix<T>, FilterError> {
    l.solve_lower_triangular(xs)
        .ok_or_else(|| FilterError::Numerical("singular model error factor".into()))
}

impl<'a, T: Scalar, H: ObservationOperator<T> + ?Sized> VmpfTarget<'a, T, H> {
    pub fn new(
        prior_means: &'a DMatrix<T>,
        y: &'a DVector<T>,
        h_op: &'a H,
        r: &'a SpdMatrix<T>,
        q: &SpdMatrix<T>,
        kernel_scale: T,
    ) -> Result<Self, FilterError> {
        let n_x = prior_means.nrows();
        if q.dim() != n_x || h_op.state_dim() != n_x || r.dim() != h_op.obs_dim() || y.len() != h_op.obs_dim() {
            return Err(FilterError::DimensionMismatch("VMPF target dimensions disagree".into()));
        }
        let chol_q = q.cholesky()?.clone();
        r.cholesky()?;
        let whitened_means = whiten(&chol_q, prior_means)?;
        let log_det_q = chol_q.diagonal().iter().fold(T::zero(), |acc, &d| acc + d.ln()) * T::lit(2.0);
        let nx = T::from_count(n_x);
        let log_2pi = T::two_pi().ln();
        let half = T::lit(0.5);
        let n_mix = T::from_count(prior_means.ncols());
        Ok(Self {
            y,
            h_op,
            r,
            whitened_means,
            kernel_scale,
            log_norm_prior: -n_mix.ln() - half * (log_det_q + nx * log_2pi),
            log_norm_kernel: -half * (log_det_q + nx * kernel_scale.ln() + nx * log_2pi),
            chol_q,
        })
    }

    /// Log posterior density (up to the evidence) and its gradient at each
    /// particle, given the particles and their whitened coordinates.
    fn log_posterior(&self, xs: &DMatrix<T>, zs: &DMatrix<T>) -> Result<(Vec<T>, DMatrix<T>), FilterError> {
        let n_p = xs.ncols();
        let half = T::lit(0.5);
        let mu = &self.whitened_means;
        // logits[(i, m)] = −½|z_i − μ_m|²
        let z2: Vec<T> = zs.column_iter().map(|c| c.norm_squared()).collect();
        let mu2: Vec<T> = mu.column_iter().map(|c| c.norm_squared()).collect();
        let mut logits = zs.transpose() * mu;
        for ((i, m), v) in logits.iter_mut().enumerate().map(|(idx, v)| ((idx % n_p, idx / n_p), v)) {
            *v = -half * (z2[i] + mu2[m]) + *v;
        }
        let mut lse = Vec::with_capacity(n_p);
        for i in 0..n_p {
            let mut row = logits.row_mut(i);
            let max = row.iter().fold(T::min_value().unwrap(), |a, &b| a.max(b));
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row /= sum;
            lse.push(max + sum.ln());
        }
        // prior gradient −Q⁻¹(x − Σ w_m μ_m) = L⁻ᵀ(Σ w_m z_m − z)
        let zbar = mu * logits.transpose() - zs;
        let prior_grad = self
            .chol_q
            .tr_solve_lower_triangular(&zbar)
            .ok_or_else(|| FilterError::Numerical("singular model error factor".into()))?;

        let mut resid = -self.h_op.apply_columns(xs);
        for mut col in resid.column_iter_mut() {
            col += self.y;
        }
        let r_inv_resid = self.r.solve(&resid)?;
        let mut values = Vec::with_capacity(n_p);
        let mut grads = prior_grad;
        for i in 0..n_p {
            let x = xs.column(i).into_owned();
            let v = r_inv_resid.column(i).into_owned();
            let loglik = -half * resid.column(i).dot(&v);
            values.push(lse[i] + self.log_norm_prior + loglik);
            let mut g = grads.column_mut(i);
            g += self.h_op.jacobian_transpose_mul(&x, &v);
        }
        Ok((values, grads))
    }

    /// Unnormalized log posterior density at each column of `xs`.
    pub fn log_density(&self, xs: &DMatrix<T>) -> Result<Vec<T>, FilterError> {
        let zs = whiten(&self.chol_q, xs)?;
        Ok(self.log_posterior(xs, &zs)?.0)
    }

    /// Divergence gradient at every particle together with the divergence
    /// estimate `(1/N) Σ_i [log q̂(x_i) − log p(x_i | y)]`, where `q̂` is the
    /// kernel density estimate of the particles.
    pub fn evaluate(&self, xs: &DMatrix<T>) -> Result<(T, DMatrix<T>), FilterError> {
        let n_p = xs.ncols();
        let zs = whiten(&self.chol_q, xs)?;
        let (logp, gradp) = self.log_posterior(xs, &zs)?;
        let inv_s = T::one() / self.kernel_scale;
        let half = T::lit(0.5);
        let np = T::from_count(n_p);

        let z2: Vec<T> = zs.column_iter().map(|c| c.norm_squared()).collect();
        let mut kernel = zs.transpose() * &zs;
        for j in 0..n_p {
            kernel[(j, j)] = T::one();
            for i in (j + 1)..n_p {
                let d2 = (z2[i] + z2[j] - T::lit(2.0) * kernel[(i, j)]).max(T::zero());
                let kij = (-half * d2 * inv_s).exp();
                kernel[(i, j)] = kij;
                kernel[(j, i)] = kij;
            }
        }

        // attraction term Σ_j k_ij ∇log p(x_j)
        let mut phi = &gradp * &kernel;
        // repulsion term Σ_j ∇_{x_j} k(x_j, x_i) = (1/s) L⁻ᵀ Σ_j k_ij (z_i − z_j)
        let ksum: Vec<T> = kernel.column_iter().map(|c| c.sum()).collect();
        let mut rep = -(&zs * &kernel);
        for (i, mut col) in rep.column_iter_mut().enumerate() {
            col.axpy(ksum[i], &zs.column(i), T::one());
            col *= inv_s;
        }
        let rep = self
            .chol_q
            .tr_solve_lower_triangular(&rep)
            .ok_or_else(|| FilterError::Numerical("singular model error factor".into()))?;
        phi += rep;
        let grad = phi / (-np);

        let mut kl = T::zero();
        for i in 0..n_p {
            let log_q = ksum[i].ln() - np.ln() + self.log_norm_kernel;
            kl += log_q - logp[i];
        }
        Ok((kl / np, grad))
    }
}

fn rms<T: Scalar>(m: &DMatrix<T>) -> f64 {
    (m.norm_squared().as_f64() / (m.len().max(1) as f64)).sqrt()
}

/// Maps the forecast particles toward the filtering posterior.
///
/// `prior_means` are the deterministic forecasts `M(xᵃ_{k−1})` that centre the
/// mixture prior; `forecast` are the stochastic forecasts the mapping starts
/// from. A trial move that raises the divergence estimate is rejected and ε
/// halved, so the estimate never increases. Iteration stops when the RMS
/// gradient entry falls below the tolerance, the evaluation budget is spent,
/// or ε has been halved [`MAX_HALVINGS`] times. A non-finite divergence at the
/// forecast is reported as [`FilterError::VmpfDiverged`].
pub fn vmpf_step<T: Scalar, H: ObservationOperator<T> + ?Sized>(
    forecast: &Ensemble<T>,
    prior_means: &DMatrix<T>,
    y: &DVector<T>,
    h_op: &H,
    r: &SpdMatrix<T>,
    q: &SpdMatrix<T>,
    spec: &VmpfSpec,
) -> Result<(Ensemble<T>, VmpfTrace), FilterError> {
    spec.validate()?;
    if prior_means.nrows() != forecast.n_x() || prior_means.ncols() == 0 {
        return Err(FilterError::DimensionMismatch("prior means must match the forecast state".into()));
    }
    let mut trace = VmpfTrace::default();
    if spec.max_iterations == 0 {
        return Ok((forecast.clone(), trace));
    }
    let target = VmpfTarget::new(prior_means, y, h_op, r, q, T::lit(spec.kernel_scale))?;
    let mut xs = forecast.members().clone();
    let (mut kl, mut grad) = target.evaluate(&xs)?;
    trace.kl.push(kl.as_f64());
    trace.gradient_rms.push(rms(&grad));
    if !kl.is_finite() || grad.iter().any(|v| !v.is_finite()) {
        return Err(FilterError::VmpfDiverged { trace });
    }
    let eps_min = spec.step_size * 0.5f64.powi(MAX_HALVINGS);
    let mut eps = spec.step_size;

    for _ in 0..spec.max_iterations {
        if rms(&grad) < spec.gradient_tolerance || eps < eps_min {
            break;
        }
        let candidate = &xs - &grad * T::lit(eps);
        let (kl_new, grad_new) = target.evaluate(&candidate)?;
        let finite = kl_new.is_finite() && grad_new.iter().all(|v| v.is_finite());
        if !finite || kl_new > kl {
            trace.rejected += 1;
            eps *= 0.5;
            continue;
        }
        trace.step_sizes.push(eps);
        xs = candidate;
        kl = kl_new;
        grad = grad_new;
        trace.kl.push(kl.as_f64());
        trace.gradient_rms.push(rms(&grad));
    }
    Ok((Ensemble::new(xs)?, trace))
}
