use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::OnlineEmError;
use crate::models::Dynamics;
use crate::statespace::{gaussian_noise, symmetrize, Ensemble, ObservationOperator, SpdMatrix};
use crate::Scalar;

/// Running sufficient statistic `(S^Q, S^R)`. `s_r` is absent when `R` is
/// known and not estimated.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats<T: Scalar> {
    pub s_q: DMatrix<T>,
    pub s_r: Option<DMatrix<T>>,
}

impl<T: Scalar> SufficientStats<T> {
    pub fn new(s_q: DMatrix<T>, s_r: Option<DMatrix<T>>) -> Result<Self, OnlineEmError> {
        let square = |m: &DMatrix<T>| m.nrows() == m.ncols() && m.nrows() > 0;
        if !square(&s_q) || s_r.as_ref().is_some_and(|r| !square(r)) {
            return Err(OnlineEmError::DimensionMismatch("statistics must be square and non-empty".into()));
        }
        Ok(Self { s_q, s_r })
    }

    /// Initial statistic equal to the first-guess parameters.
    pub fn from_parameters(q: &SpdMatrix<T>, r: Option<&SpdMatrix<T>>) -> Self {
        Self {
            s_q: q.matrix().clone(),
            s_r: r.map(|r| r.matrix().clone()),
        }
    }

    pub fn includes_r(&self) -> bool {
        self.s_r.is_some()
    }
}

/// Summary of one set of normalized importance weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImportanceDiagnostics {
    /// Effective sample size `1 / Σ w²`.
    pub ess: f64,
    pub max_log_weight: f64,
}

/// Normalizes log-weights with log-sum-exp. Fails when no weight is finite.
pub fn normalize_log_weights<T: Scalar>(log_w: &[T]) -> Result<(Vec<T>, ImportanceDiagnostics), OnlineEmError> {
    let max = log_w
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |a| a.max(v))));
    let Some(max) = max else {
        let max_log_weight = log_w
            .iter()
            .map(|v| v.as_f64())
            .filter(|v| !v.is_nan())
            .fold(f64::NEG_INFINITY, f64::max);
        return Err(OnlineEmError::DegenerateWeights { max_log_weight });
    };
    let mut w: Vec<T> = log_w
        .iter()
        .map(|&v| if v.is_finite() { (v - max).exp() } else { T::zero() })
        .collect();
    let total = w.iter().fold(T::zero(), |a, &b| a + b);
    for v in w.iter_mut() {
        *v /= total;
    }
    let sum_sq = w.iter().fold(T::zero(), |a, &b| a + b * b);
    Ok((
        w,
        ImportanceDiagnostics {
            ess: (T::one() / sum_sq).as_f64(),
            max_log_weight: max.as_f64(),
        },
    ))
}

/// `Σ_j w_j v_j v_jᵀ` over the columns of `v`.
fn weighted_outer<T: Scalar>(v: &DMatrix<T>, w: &[T]) -> DMatrix<T> {
    let mut scaled = v.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= w[j];
    }
    symmetrize(&(scaled * v.transpose()))
}

fn check_obs<T: Scalar, H: ObservationOperator<T> + ?Sized>(
    n_x: usize,
    y: &DVector<T>,
    h_op: &H,
    r: Option<&SpdMatrix<T>>,
) -> Result<(), OnlineEmError> {
    if h_op.state_dim() != n_x || y.len() != h_op.obs_dim() || r.is_some_and(|r| r.dim() != h_op.obs_dim()) {
        return Err(OnlineEmError::DimensionMismatch(format!(
            "state {n_x}, observation {}, operator {}x{}",
            y.len(),
            h_op.obs_dim(),
            h_op.state_dim()
        )));
    }
    Ok(())
}

/// Importance-sampling statistic starting from analysis particles at `K−1`.
///
/// Each particle is propagated once, then `m_p` transition draws are taken
/// around it and weighted by `p(y_K | x^f)`.
#[allow(clippy::too_many_arguments)]
pub fn is_stats<T, D, H, R>(
    analysis_prev: &Ensemble<T>,
    model: &D,
    q: &SpdMatrix<T>,
    y: &DVector<T>,
    h_op: &H,
    r: &SpdMatrix<T>,
    m_p: usize,
    include_r: bool,
    rng: &mut R,
) -> Result<(SufficientStats<T>, ImportanceDiagnostics), OnlineEmError>
where
    T: Scalar,
    D: Dynamics<T> + ?Sized,
    H: ObservationOperator<T> + ?Sized,
    R: Rng + ?Sized,
{
    if model.state_dim() != analysis_prev.n_x() {
        return Err(OnlineEmError::DimensionMismatch("model and ensemble dimensions differ".into()));
    }
    let propagated = model.propagate_columns(analysis_prev.members())?;
    is_stats_from_propagated(&propagated, q, y, h_op, r, m_p, include_r, rng)
}

/// [`is_stats`] with the deterministic forecasts `M(x^{a(j)}_{K−1})` supplied
/// as the columns of `propagated`.
#[allow(clippy::too_many_arguments)]
pub fn is_stats_from_propagated<T, H, R>(
    propagated: &DMatrix<T>,
    q: &SpdMatrix<T>,
    y: &DVector<T>,
    h_op: &H,
    r: &SpdMatrix<T>,
    m_p: usize,
    include_r: bool,
    rng: &mut R,
) -> Result<(SufficientStats<T>, ImportanceDiagnostics), OnlineEmError>
where
    T: Scalar,
    H: ObservationOperator<T> + ?Sized,
    R: Rng + ?Sized,
{
    let (n_x, n_p) = propagated.shape();
    if m_p == 0 || n_p == 0 {
        return Err(OnlineEmError::InvalidConfig("need at least one particle and one draw".into()));
    }
    if q.dim() != n_x {
        return Err(OnlineEmError::DimensionMismatch("model error covariance does not match state".into()));
    }
    check_obs(n_x, y, h_op, Some(r))?;

    let total = n_p * m_p;
    // draw (j, l) sits in column j·m_p + l
    let eta = gaussian_noise(q, total, rng)?;
    let mut forecasts = eta.clone();
    for j in 0..n_p {
        let base = propagated.column(j);
        for l in 0..m_p {
            let mut col = forecasts.column_mut(j * m_p + l);
            col += base;
        }
    }

    let mut innov = -h_op.apply_columns(&forecasts);
    for mut col in innov.column_iter_mut() {
        col += y;
    }
    let l_r = r.cholesky()?;
    let z = l_r
        .solve_lower_triangular(&innov)
        .ok_or_else(|| OnlineEmError::DimensionMismatch("observation error factor is singular".into()))?;
    let half = T::lit(0.5);
    let log_norm = -half * (r.log_det()? + T::from_count(y.len()) * T::two_pi().ln());
    let log_w: Vec<T> = z
        .column_iter()
        .map(|c| log_norm - half * c.norm_squared())
        .collect();
    let (w, diag) = normalize_log_weights(&log_w)?;

    let s_q = weighted_outer(&eta, &w);
    let s_r = include_r.then(|| weighted_outer(&innov, &w));
    Ok((SufficientStats { s_q, s_r }, diag))
}

/// One-step-smoother statistic: member `j` of `smoothed_prev` pairs with
/// member `j` of `analysis`, each pair weighted `1/N_p`.
pub fn oss_stats<T, D, H>(
    smoothed_prev: &Ensemble<T>,
    analysis: &Ensemble<T>,
    y: &DVector<T>,
    model: &D,
    h_op: &H,
    include_r: bool,
) -> Result<SufficientStats<T>, OnlineEmError>
where
    T: Scalar,
    D: Dynamics<T> + ?Sized,
    H: ObservationOperator<T> + ?Sized,
{
    if smoothed_prev.n_p() != analysis.n_p() || smoothed_prev.n_x() != analysis.n_x() {
        return Err(OnlineEmError::DimensionMismatch(format!(
            "smoothed ensemble is {}x{}, analysis is {}x{}",
            smoothed_prev.n_x(),
            smoothed_prev.n_p(),
            analysis.n_x(),
            analysis.n_p()
        )));
    }
    if model.state_dim() != analysis.n_x() {
        return Err(OnlineEmError::DimensionMismatch("model and ensemble dimensions differ".into()));
    }
    check_obs(analysis.n_x(), y, h_op, None)?;
    let n_p = analysis.n_p();
    let w = vec![T::one() / T::from_count(n_p); n_p];

    let residual_q = analysis.members() - model.propagate_columns(smoothed_prev.members())?;
    let s_q = weighted_outer(&residual_q, &w);
    let s_r = if include_r {
        let mut innov = -h_op.apply_columns(analysis.members());
        for mut col in innov.column_iter_mut() {
            col += y;
        }
        Some(weighted_outer(&innov, &w))
    } else {
        None
    };
    Ok(SufficientStats { s_q, s_r })
}

/// `(1 − γ) prev + γ new`, symmetrized.
pub fn update_stats<T: Scalar>(
    prev: &SufficientStats<T>,
    new: &SufficientStats<T>,
    gamma: f64,
) -> Result<SufficientStats<T>, OnlineEmError> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(OnlineEmError::InvalidConfig(format!("step size {gamma} outside [0, 1]")));
    }
    if prev.s_q.shape() != new.s_q.shape() {
        return Err(OnlineEmError::DimensionMismatch("S^Q shapes differ".into()));
    }
    let g = T::lit(gamma);
    let keep = T::one() - g;
    let blend = |a: &DMatrix<T>, b: &DMatrix<T>| symmetrize(&(a * keep + b * g));
    let s_r = match (&prev.s_r, &new.s_r) {
        (None, None) => None,
        (Some(a), Some(b)) if a.shape() == b.shape() => Some(blend(a, b)),
        (Some(_), Some(_)) => return Err(OnlineEmError::DimensionMismatch("S^R shapes differ".into())),
        _ => {
            return Err(OnlineEmError::DimensionMismatch(
                "one statistic carries S^R and the other does not".into(),
            ))
        }
    };
    Ok(SufficientStats {
        s_q: blend(&prev.s_q, &new.s_q),
        s_r,
    })
}

/// Maps the statistic to parameters: `Q̂ = S^Q`, `R̂ = S^R`, each passed
/// through the jitter policy.
#[allow(clippy::type_complexity)]
pub fn m_step<T: Scalar>(s: &SufficientStats<T>) -> Result<(SpdMatrix<T>, Option<SpdMatrix<T>>), OnlineEmError> {
    let q = SpdMatrix::from_symmetrized(s.s_q.clone())?.with_jitter_policy()?;
    let r = match &s.s_r {
        Some(m) => Some(SpdMatrix::from_symmetrized(m.clone())?.with_jitter_policy()?),
        None => None,
    };
    Ok((q, r))
}
