//! Exact linear-Gaussian computations: Kalman filter, Rauch–Tung–Striebel
//! smoother with lag-one cross-covariances, and batch EM for `Q` and `R`.
//!
//! Time runs `x_0, x_1, …, x_K` with observations `y_1, …, y_K`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::statespace::{gaussian_loglik, gaussian_noise, symmetrize, SpdMatrix, StateSpaceError};
use crate::Scalar;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ReferenceError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("innovation covariance is singular at step {0}")]
    SingularInnovation(usize),
    #[error("predicted covariance is singular at step {0}")]
    SingularPredicted(usize),
    #[error("batch EM needs at least one iteration and one observation")]
    EmptyRun,
    #[error(transparent)]
    StateSpace(#[from] StateSpaceError),
}

/// `x_k = A x_{k−1} + η_k`, `y_k = H x_k + ν_k`, `x_0 ~ N(m0, P0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianModel<T: Scalar> {
    pub a: DMatrix<T>,
    pub h: DMatrix<T>,
    pub q: SpdMatrix<T>,
    pub r: SpdMatrix<T>,
    pub m0: DVector<T>,
    pub p0: SpdMatrix<T>,
}

impl<T: Scalar> LinearGaussianModel<T> {
    pub fn new(
        a: DMatrix<T>,
        h: DMatrix<T>,
        q: SpdMatrix<T>,
        r: SpdMatrix<T>,
        m0: DVector<T>,
        p0: SpdMatrix<T>,
    ) -> Result<Self, ReferenceError> {
        let n = a.nrows();
        if a.ncols() != n || h.ncols() != n || q.dim() != n || m0.len() != n || p0.dim() != n || r.dim() != h.nrows() {
            return Err(ReferenceError::DimensionMismatch(format!(
                "A {}x{}, H {}x{}, Q {}, R {}, m0 {}, P0 {}",
                a.nrows(),
                a.ncols(),
                h.nrows(),
                h.ncols(),
                q.dim(),
                r.dim(),
                m0.len(),
                p0.dim()
            )));
        }
        Ok(Self { a, h, q, r, m0, p0 })
    }

    /// Scalar model.
    pub fn scalar(a: T, h: T, q: T, r: T, m0: T, p0: T) -> Self {
        let s = |v: T| DMatrix::from_element(1, 1, v);
        Self {
            a: s(a),
            h: s(h),
            q: SpdMatrix::scaled_identity(1, q),
            r: SpdMatrix::scaled_identity(1, r),
            m0: DVector::from_element(1, m0),
            p0: SpdMatrix::scaled_identity(1, p0),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    /// Same model with other noise covariances.
    pub fn with_noise(&self, q: SpdMatrix<T>, r: SpdMatrix<T>) -> Result<Self, ReferenceError> {
        Self::new(self.a.clone(), self.h.clone(), q, r, self.m0.clone(), self.p0.clone())
    }

    /// Draws `x_0..x_K` and `y_1..y_K`.
    #[allow(clippy::type_complexity)]
    pub fn simulate<R: Rng + ?Sized>(
        &self,
        steps: usize,
        rng: &mut R,
    ) -> Result<(Vec<DVector<T>>, Vec<DVector<T>>), ReferenceError> {
        let mut x = &self.m0 + gaussian_noise(&self.p0, 1, rng)?.column(0);
        let mut states = vec![x.clone()];
        let mut obs = Vec::with_capacity(steps);
        for _ in 0..steps {
            x = &self.a * &x + gaussian_noise(&self.q, 1, rng)?.column(0);
            obs.push(&self.h * &x + gaussian_noise(&self.r, 1, rng)?.column(0));
            states.push(x.clone());
        }
        Ok((states, obs))
    }
}

/// Moments at one observation time.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanStep<T: Scalar> {
    pub predicted_mean: DVector<T>,
    pub predicted_cov: DMatrix<T>,
    pub filtered_mean: DVector<T>,
    pub filtered_cov: DMatrix<T>,
    /// `log N(y_k; H m^f_k, H P^f_k Hᵀ + R)`.
    pub loglik: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanOutput<T: Scalar> {
    pub steps: Vec<KalmanStep<T>>,
}

impl<T: Scalar> KalmanOutput<T> {
    pub fn total_loglik(&self) -> T {
        self.steps.iter().fold(T::zero(), |acc, s| acc + s.loglik)
    }
}

/// Kalman filter with the Joseph-form covariance update.
pub fn kalman_filter<T: Scalar>(model: &LinearGaussianModel<T>, obs: &[DVector<T>]) -> Result<KalmanOutput<T>, ReferenceError> {
    let n = model.state_dim();
    let eye = DMatrix::<T>::identity(n, n);
    let mut m = model.m0.clone();
    let mut p = model.p0.matrix().clone();
    let mut steps = Vec::with_capacity(obs.len());
    for (i, y) in obs.iter().enumerate() {
        if y.len() != model.obs_dim() {
            return Err(ReferenceError::DimensionMismatch(format!(
                "observation {} has length {}, expected {}",
                i + 1,
                y.len(),
                model.obs_dim()
            )));
        }
        let mf = &model.a * &m;
        let pf = symmetrize(&(&model.a * &p * model.a.transpose() + model.q.matrix()));
        let hpf = &model.h * &pf;
        let s = SpdMatrix::from_symmetrized(&hpf * model.h.transpose() + model.r.matrix())?;
        s.cholesky().map_err(|_| ReferenceError::SingularInnovation(i + 1))?;
        let hm = &model.h * &mf;
        let loglik = gaussian_loglik(y, &hm, &s)?;
        let gain = s.solve(&hpf)?.transpose();
        m = &mf + &gain * (y - hm);
        let ikh = &eye - &gain * &model.h;
        p = symmetrize(&(&ikh * &pf * ikh.transpose() + &gain * model.r.matrix() * gain.transpose()));
        steps.push(KalmanStep {
            predicted_mean: mf,
            predicted_cov: pf,
            filtered_mean: m.clone(),
            filtered_cov: p.clone(),
            loglik,
        });
    }
    Ok(KalmanOutput { steps })
}

/// Smoothed moments of `x_0..x_K` given `y_1..y_K`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmootherOutput<T: Scalar> {
    /// Index `k` holds `E[x_k | y_{1:K}]`, for `k = 0..=K`.
    pub means: Vec<DVector<T>>,
    pub covs: Vec<DMatrix<T>>,
    /// Index `k − 1` holds `Cov(x_{k−1}, x_k | y_{1:K})`, for `k = 1..=K`.
    pub lag_one: Vec<DMatrix<T>>,
}

/// Backward Rauch–Tung–Striebel pass. The lag-one cross-covariance is
/// `G_{k−1} Pˢ_k` with `G_{k−1} = P_{k−1} Aᵀ (P^f_k)⁻¹`.
pub fn rts_smoother<T: Scalar>(
    model: &LinearGaussianModel<T>,
    filtered: &KalmanOutput<T>,
) -> Result<SmootherOutput<T>, ReferenceError> {
    let k_len = filtered.steps.len();
    let mut means = vec![DVector::zeros(0); k_len + 1];
    let mut covs = vec![DMatrix::zeros(0, 0); k_len + 1];
    let mut lag_one = vec![DMatrix::zeros(0, 0); k_len];
    if k_len == 0 {
        means[0] = model.m0.clone();
        covs[0] = model.p0.matrix().clone();
        return Ok(SmootherOutput { means, covs, lag_one });
    }
    let last = &filtered.steps[k_len - 1];
    means[k_len] = last.filtered_mean.clone();
    covs[k_len] = last.filtered_cov.clone();
    for k in (1..=k_len).rev() {
        let (m_prev, p_prev) = if k == 1 {
            (model.m0.clone(), model.p0.matrix().clone())
        } else {
            let s = &filtered.steps[k - 2];
            (s.filtered_mean.clone(), s.filtered_cov.clone())
        };
        let step = &filtered.steps[k - 1];
        let pf = SpdMatrix::from_symmetrized(step.predicted_cov.clone())?;
        pf.cholesky().map_err(|_| ReferenceError::SingularPredicted(k))?;
        // G = P Aᵀ (P^f)⁻¹ = ((P^f)⁻¹ A P)ᵀ
        let g = pf.solve(&(&model.a * &p_prev))?.transpose();
        means[k - 1] = &m_prev + &g * (&means[k] - &step.predicted_mean);
        covs[k - 1] = symmetrize(&(&p_prev + &g * (&covs[k] - &step.predicted_cov) * g.transpose()));
        lag_one[k - 1] = &g * &covs[k];
    }
    Ok(SmootherOutput { means, covs, lag_one })
}

/// Exact `E[(x_k − A x_{k−1})(…)ᵀ | y_{1:K}]` and `E[(y_k − H x_k)(…)ᵀ | y_{1:K}]`
/// for one `k ∈ 1..=K`.
pub fn pair_statistic<T: Scalar>(
    model: &LinearGaussianModel<T>,
    smoothed: &SmootherOutput<T>,
    obs: &[DVector<T>],
    k: usize,
) -> (DMatrix<T>, DMatrix<T>) {
    let a = &model.a;
    let c = &smoothed.lag_one[k - 1];
    let d = &smoothed.means[k] - a * &smoothed.means[k - 1];
    let cov = &smoothed.covs[k] - c.transpose() * a.transpose() - a * c + a * &smoothed.covs[k - 1] * a.transpose();
    let s_q = symmetrize(&(&d * d.transpose() + cov));
    let e = &obs[k - 1] - &model.h * &smoothed.means[k];
    let s_r = symmetrize(&(&e * e.transpose() + &model.h * &smoothed.covs[k] * model.h.transpose()));
    (s_q, s_r)
}

/// Time-averaged `(S^Q, S^R)` over `k = 1..=K`.
pub fn expected_statistics<T: Scalar>(
    model: &LinearGaussianModel<T>,
    smoothed: &SmootherOutput<T>,
    obs: &[DVector<T>],
) -> (DMatrix<T>, DMatrix<T>) {
    let n = model.state_dim();
    let mut s_q = DMatrix::zeros(n, n);
    let mut s_r = DMatrix::zeros(model.obs_dim(), model.obs_dim());
    for k in 1..=obs.len() {
        let (q, r) = pair_statistic(model, smoothed, obs, k);
        s_q += q;
        s_r += r;
    }
    let inv = T::one() / T::from_count(obs.len());
    (s_q * inv, s_r * inv)
}

/// Parameter sequence of batch EM. Index `i` holds `θ_i`, with `θ_0` the
/// starting point, and the total log-likelihood under it.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEmTrace<T: Scalar> {
    pub q: Vec<SpdMatrix<T>>,
    pub r: Vec<SpdMatrix<T>>,
    pub loglik: Vec<T>,
}

/// Classical batch EM with the identity M-step `θ_i = S(θ_{i−1})`. When
/// `estimate_r` is false `R` stays at `r0`.
pub fn batch_em<T: Scalar>(
    model: &LinearGaussianModel<T>,
    obs: &[DVector<T>],
    q0: SpdMatrix<T>,
    r0: SpdMatrix<T>,
    n_iters: usize,
    estimate_r: bool,
) -> Result<BatchEmTrace<T>, ReferenceError> {
    if n_iters == 0 || obs.is_empty() {
        return Err(ReferenceError::EmptyRun);
    }
    let mut current = model.with_noise(q0, r0)?;
    let mut trace = BatchEmTrace {
        q: Vec::with_capacity(n_iters + 1),
        r: Vec::with_capacity(n_iters + 1),
        loglik: Vec::with_capacity(n_iters + 1),
    };
    for i in 0..=n_iters {
        let filt = kalman_filter(&current, obs)?;
        trace.q.push(current.q.clone());
        trace.r.push(current.r.clone());
        trace.loglik.push(filt.total_loglik());
        if i == n_iters {
            break;
        }
        let smooth = rts_smoother(&current, &filt)?;
        let (s_q, s_r) = expected_statistics(&current, &smooth, obs);
        let q = SpdMatrix::from_symmetrized(s_q)?.with_jitter_policy()?;
        let r = if estimate_r {
            SpdMatrix::from_symmetrized(s_r)?.with_jitter_policy()?
        } else {
            current.r.clone()
        };
        current = current.with_noise(q, r)?;
    }
    Ok(trace)
}
