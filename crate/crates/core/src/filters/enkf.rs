use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::FilterError;
use crate::statespace::{gaussian_noise, Ensemble, ObservationOperator, SpdMatrix, StateSpaceError};
use crate::Scalar;

/// Ensemble moments needed by the Kalman update.
pub(crate) struct ObservedMoments<T: Scalar> {
    /// `H(x_j)` per member.
    pub hx: DMatrix<T>,
    /// Sample cross covariance between state and predicted observation.
    pub cross: DMatrix<T>,
    /// Predicted-observation sample covariance plus `R`.
    pub innovation: SpdMatrix<T>,
}

fn check_shapes<T: Scalar, H: ObservationOperator<T> + ?Sized>(
    forecast: &Ensemble<T>,
    h_op: &H,
    r: &SpdMatrix<T>,
) -> Result<(), FilterError> {
    if forecast.n_p() < 2 {
        return Err(FilterError::TooFewMembers(forecast.n_p()));
    }
    if forecast.n_x() != h_op.state_dim() || r.dim() != h_op.obs_dim() {
        return Err(FilterError::DimensionMismatch(format!(
            "ensemble state {} / R {} vs operator {} -> {}",
            forecast.n_x(),
            r.dim(),
            h_op.state_dim(),
            h_op.obs_dim()
        )));
    }
    Ok(())
}

pub(crate) fn observed_moments<T: Scalar, H: ObservationOperator<T> + ?Sized>(
    forecast: &Ensemble<T>,
    h_op: &H,
    r: &SpdMatrix<T>,
) -> Result<ObservedMoments<T>, FilterError> {
    check_shapes(forecast, h_op, r)?;
    let hx = h_op.apply_columns(forecast.members());
    let xa = forecast.anomalies();
    let hmean = hx.column_mean();
    let mut ha = hx.clone();
    for mut col in ha.column_iter_mut() {
        col -= &hmean;
    }
    let denom = T::from_count(forecast.n_p() - 1);
    let cross = &xa * ha.transpose() / denom;
    let innovation = SpdMatrix::from_symmetrized(&ha * ha.transpose() / denom + r.matrix())?;
    innovation.cholesky().map_err(|_| FilterError::SingularInnovation)?;
    Ok(ObservedMoments { hx, cross, innovation })
}

/// Kalman gain `P̂ᶠHᵀ(HP̂ᶠHᵀ + R)⁻¹` from the forecast sample statistics.
pub fn enkf_gain<T: Scalar, H: ObservationOperator<T> + ?Sized>(
    forecast: &Ensemble<T>,
    h_op: &H,
    r: &SpdMatrix<T>,
) -> Result<DMatrix<T>, FilterError> {
    let m = observed_moments(forecast, h_op, r)?;
    // K = C S⁻¹ = (S⁻¹ Cᵀ)ᵀ since S is symmetric
    Ok(m.innovation.solve(&m.cross.transpose())?.transpose())
}

/// Stochastic (perturbed-observation) EnKF analysis.
///
/// Each member is updated with its own perturbed predicted observation
/// `y_j = H(x_j) + ν_j`, `ν_j ~ N(0, R)`:
/// `x_j ← x_j + K (y − y_j)`. No inflation is applied.
pub fn enkf_analysis<T: Scalar, H: ObservationOperator<T> + ?Sized, R: Rng + ?Sized>(
    forecast: &Ensemble<T>,
    y: &DVector<T>,
    h_op: &H,
    r: &SpdMatrix<T>,
    rng: &mut R,
) -> Result<Ensemble<T>, FilterError> {
    let m = observed_moments(forecast, h_op, r)?;
    if y.len() != h_op.obs_dim() {
        return Err(FilterError::DimensionMismatch(format!(
            "observation has length {}, operator yields {}",
            y.len(),
            h_op.obs_dim()
        )));
    }
    let noise = gaussian_noise(r, forecast.n_p(), rng)?;
    let mut innov = -(m.hx + noise);
    for mut col in innov.column_iter_mut() {
        col += y;
    }
    let weights = m.innovation.solve(&innov)?;
    let analysis = forecast.members() + &m.cross * weights;
    Ensemble::new(analysis).map_err(|e| match e {
        StateSpaceError::NonFinite(_) => FilterError::Diverged("EnKF analysis produced non-finite members".into()),
        other => other.into(),
    })
}

/// Forecast innovation moments: mean of `H(x_j)` and `HP̂ᶠHᵀ + R`.
pub fn innovation_moments<T: Scalar, H: ObservationOperator<T> + ?Sized>(
    forecast: &Ensemble<T>,
    h_op: &H,
    r: &SpdMatrix<T>,
) -> Result<(DVector<T>, SpdMatrix<T>), FilterError> {
    let m = observed_moments(forecast, h_op, r)?;
    Ok((m.hx.column_mean(), m.innovation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::statespace::{sample_mvn, IdentityObservation, SeededRng};

    fn spread_ensemble(n_x: usize, n_p: usize, seed: u64) -> Ensemble<f64> {
        let mut rng = SeededRng::new(seed, 0);
        sample_mvn(&DVector::from_element(n_x, 1.0), &SpdMatrix::scaled_identity(n_x, 2.0), &mut rng, n_p).unwrap()
    }

    #[test]
    fn scalar_gain_is_one_half() {
        // sample variance of {0, 1, 2} is exactly 1
        let f = Ensemble::new(DMatrix::<f64>::from_row_slice(1, 3, &[0.0, 1.0, 2.0])).unwrap();
        let k = enkf_gain(&f, &IdentityObservation::new(1), &SpdMatrix::scaled_identity(1, 1.0)).unwrap();
        // the solve goes through a Cholesky factor of 2, so allow one rounding step
        assert!((k[(0, 0)] - 0.5).abs() <= f64::EPSILON, "gain {}", k[(0, 0)]);
    }

    #[test]
    fn huge_observation_error_leaves_forecast() {
        let f = spread_ensemble(3, 20, 1);
        let y = DVector::from_element(3, 5.0);
        let a = enkf_analysis(&f, &y, &IdentityObservation::new(3), &SpdMatrix::scaled_identity(3, 1e12), &mut SeededRng::new(2, 0)).unwrap();
        let rel = (a.members() - f.members()).norm() / f.members().norm();
        assert!(rel < 1e-4, "rel {rel}");
    }

    #[test]
    fn tiny_observation_error_pulls_to_observation() {
        let f = spread_ensemble(3, 20, 3);
        let y = DVector::from_vec(vec![0.3, -0.7, 2.0]);
        let a = enkf_analysis(&f, &y, &IdentityObservation::new(3), &SpdMatrix::scaled_identity(3, 1e-12), &mut SeededRng::new(4, 0)).unwrap();
        for j in 0..a.n_p() {
            assert!((a.member(j) - &y).norm() < 1e-4);
        }
    }

    #[test]
    fn shape_preserved_and_errors() {
        let f = spread_ensemble(4, 10, 5);
        let a = enkf_analysis(&f, &DVector::zeros(4), &IdentityObservation::new(4), &SpdMatrix::scaled_identity(4, 0.5), &mut SeededRng::new(6, 0)).unwrap();
        assert_eq!((a.n_x(), a.n_p()), (4, 10));
        let one = Ensemble::new(DMatrix::from_element(4, 1, 1.0)).unwrap();
        assert!(matches!(
            enkf_analysis(&one, &DVector::zeros(4), &IdentityObservation::new(4), &SpdMatrix::scaled_identity(4, 0.5), &mut SeededRng::new(6, 0)),
            Err(FilterError::TooFewMembers(1))
        ));
        // collapsed ensemble with R = 0 has a singular innovation covariance
        let flat = Ensemble::replicate(&DVector::<f64>::zeros(4), 5).unwrap();
        assert!(matches!(
            enkf_analysis(&flat, &DVector::zeros(4), &IdentityObservation::new(4), &SpdMatrix::zeros(4), &mut SeededRng::new(6, 0)),
            Err(FilterError::SingularInnovation)
        ));
    }

    #[test]
    fn analysis_spread_shrinks_on_average() {
        let h = IdentityObservation::new(3);
        let r = SpdMatrix::scaled_identity(3, 0.5);
        let mut shrink = 0;
        let (mut tf, mut ta) = (0.0, 0.0);
        for seed in 0..100 {
            let f = spread_ensemble(3, 30, 100 + seed);
            let a = enkf_analysis(&f, &DVector::from_element(3, 0.5), &h, &r, &mut SeededRng::new(seed, 9)).unwrap();
            let (cf, ca) = (f.covariance().unwrap().trace(), a.covariance().unwrap().trace());
            tf += cf;
            ta += ca;
            if ca < cf {
                shrink += 1;
            }
        }
        assert!(ta < tf);
        assert!(shrink > 90);
    }
}
