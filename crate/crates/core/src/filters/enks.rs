use nalgebra::{DMatrix, DVector, SVD};

use super::FilterError;
use crate::statespace::Ensemble;
use crate::Scalar;

/// Ensembles of one assimilation cycle, paired member by member: forecast
/// member `j` was propagated from `analysis_prev` member `j` and updated into
/// `analysis` member `j`.
#[derive(Debug, Clone)]
pub struct FilterCycleState<T: Scalar> {
    pub analysis_prev: Ensemble<T>,
    pub forecast: Ensemble<T>,
    pub analysis: Ensemble<T>,
    pub obs: DVector<T>,
}

impl<T: Scalar> FilterCycleState<T> {
    pub fn new(
        analysis_prev: Ensemble<T>,
        forecast: Ensemble<T>,
        analysis: Ensemble<T>,
        obs: DVector<T>,
    ) -> Result<Self, FilterError> {
        let shape = (analysis_prev.n_x(), analysis_prev.n_p());
        if (forecast.n_x(), forecast.n_p()) != shape || (analysis.n_x(), analysis.n_p()) != shape {
            return Err(FilterError::DimensionMismatch(
                "cycle ensembles must share state dimension and member count".into(),
            ));
        }
        Ok(Self {
            analysis_prev,
            forecast,
            analysis,
            obs,
        })
    }
}

/// Moore–Penrose pseudo-inverse through the SVD, dropping singular values
/// below `max(rows, cols) · ε · σ_max`.
pub fn pseudo_inverse<T: Scalar>(m: &DMatrix<T>) -> Result<DMatrix<T>, FilterError> {
    let svd = SVD::new(m.clone(), true, true);
    let smax = svd.singular_values.iter().fold(T::zero(), |acc, &s| acc.max(s));
    let tol = T::from_count(m.nrows().max(m.ncols())) * T::machine_epsilon() * smax;
    svd.pseudo_inverse(tol)
        .map_err(|e| FilterError::Numerical(format!("pseudo-inverse failed: {e}")))
}

/// Smoother gain `Kˢ = Sᵃ_{K−1} [(Sᶠ_K)ᵀ Sᶠ_K]⁺ (Sᶠ_K)ᵀ` from mean-centred
/// member columns. Evaluated as `Sᵃ (Sᶠ)⁺`, the same matrix: centred columns
/// sum to zero so `(Sᶠ)ᵀSᶠ` is never invertible and the pseudo-inverse is
/// always the one in use.
pub fn smoother_gain<T: Scalar>(analysis_prev: &Ensemble<T>, forecast: &Ensemble<T>) -> Result<DMatrix<T>, FilterError> {
    let sa = analysis_prev.anomalies();
    let sf = forecast.anomalies();
    Ok(sa * pseudo_inverse(&sf)?)
}

/// One backward step of the ensemble Kalman smoother, returning the smoothed
/// members at the previous time:
/// `xˢ_{K−1}(j) = xᵃ_{K−1}(j) + Kˢ (xᵃ_K(j) − xᶠ_K(j))`.
pub fn enks_one_step<T: Scalar>(cycle: &FilterCycleState<T>) -> Result<Ensemble<T>, FilterError> {
    let increments = cycle.analysis.members() - cycle.forecast.members();
    if increments.iter().all(|v| *v == T::zero()) {
        return Ok(cycle.analysis_prev.clone());
    }
    let gain = smoother_gain(&cycle.analysis_prev, &cycle.forecast)?;
    let smoothed = cycle.analysis_prev.members() + gain * increments;
    Ok(Ensemble::new(smoothed)?)
}
