//! Gaussian state-space primitives: covariance matrices, ensembles, seeded
//! random streams, the stochastic transition and observation operators and
//! the Gaussian log-density.

mod ensemble;
mod observation;
mod rng;
mod spd;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::models::{Dynamics, ModelError};
use crate::Scalar;

pub use ensemble::Ensemble;
pub use observation::{IdentityObservation, LinearObservation, ObservationOperator, SelectionObservation};
pub use rng::SeededRng;
pub use spd::{cholesky, symmetrize, SpdMatrix, JITTER_FRACTION, SYMMETRY_TOLERANCE};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum StateSpaceError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is not symmetric at ({row}, {col})")]
    NotSymmetric { row: usize, col: usize },
    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("need at least 2 ensemble members, got {0}")]
    TooFewMembers(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Standard normal matrix of the given shape, filled column by column.
pub fn standard_normal_matrix<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<T> {
    let mut z = DMatrix::zeros(rows, cols);
    for v in z.iter_mut() {
        *v = T::standard_normal(rng);
    }
    z
}

/// `n` columns of `N(0, cov)` noise.
pub fn gaussian_noise<T: Scalar, R: Rng + ?Sized>(
    cov: &SpdMatrix<T>,
    n: usize,
    rng: &mut R,
) -> Result<DMatrix<T>, StateSpaceError> {
    let l = cov.sampling_factor()?;
    let z = standard_normal_matrix(cov.dim(), n, rng);
    Ok(l * z)
}

/// Draws `n` samples `mean + L z` from `N(mean, cov)`.
pub fn sample_mvn<T: Scalar, R: Rng + ?Sized>(
    mean: &DVector<T>,
    cov: &SpdMatrix<T>,
    rng: &mut R,
    n: usize,
) -> Result<Ensemble<T>, StateSpaceError> {
    if mean.len() != cov.dim() {
        return Err(StateSpaceError::DimensionMismatch(format!(
            "mean has length {} but covariance is {}x{}",
            mean.len(),
            cov.dim(),
            cov.dim()
        )));
    }
    let mut draws = gaussian_noise(cov, n, rng)?;
    for mut col in draws.column_iter_mut() {
        col += mean;
    }
    Ensemble::new(draws)
}

/// One stochastic transition `M(x) + η`, `η ~ N(0, Q)`.
pub fn forecast_transition<T: Scalar, D: Dynamics<T> + ?Sized, R: Rng + ?Sized>(
    model: &D,
    x: &DVector<T>,
    q: &SpdMatrix<T>,
    rng: &mut R,
) -> Result<DVector<T>, StateSpaceError> {
    if q.dim() != model.state_dim() || x.len() != model.state_dim() {
        return Err(StateSpaceError::DimensionMismatch(format!(
            "state length {} / model error {} vs model dimension {}",
            x.len(),
            q.dim(),
            model.state_dim()
        )));
    }
    let mx = model.propagate(x)?;
    let eta = gaussian_noise(q, 1, rng)?;
    Ok(mx + eta.column(0))
}

/// One noisy observation `H(x) + ν`, `ν ~ N(0, R)`.
pub fn observe<T: Scalar, H: ObservationOperator<T> + ?Sized, R: Rng + ?Sized>(
    h_op: &H,
    x: &DVector<T>,
    r: &SpdMatrix<T>,
    rng: &mut R,
) -> Result<DVector<T>, StateSpaceError> {
    h_op.check_state(x)?;
    if r.dim() != h_op.obs_dim() {
        return Err(StateSpaceError::DimensionMismatch(format!(
            "observation error is {}x{} but operator yields {} values",
            r.dim(),
            r.dim(),
            h_op.obs_dim()
        )));
    }
    let nu = gaussian_noise(r, 1, rng)?;
    Ok(h_op.apply(x) + nu.column(0))
}

/// `log N(y; mean, cov)`.
pub fn gaussian_loglik<T: Scalar>(y: &DVector<T>, mean: &DVector<T>, cov: &SpdMatrix<T>) -> Result<T, StateSpaceError> {
    if y.len() != mean.len() || y.len() != cov.dim() {
        return Err(StateSpaceError::DimensionMismatch(format!(
            "y {}, mean {}, covariance {}",
            y.len(),
            mean.len(),
            cov.dim()
        )));
    }
    let l = cov.cholesky()?;
    let z = l
        .solve_lower_triangular(&(y - mean))
        .ok_or(StateSpaceError::NotPositiveDefinite { pivot: 0 })?;
    let log_det = l.diagonal().iter().fold(T::zero(), |acc, &d| acc + d.ln()) * T::lit(2.0);
    let n = T::from_count(y.len());
    Ok(-T::lit(0.5) * (z.norm_squared() + log_det + n * T::two_pi().ln()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{CycleMap, IntegratorSpec, Lorenz96};
    use statrs::distribution::{ContinuousCDF, Normal};

    fn ks_statistic(mut xs: Vec<f64>, sd: f64) -> f64 {
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = xs.len() as f64;
        let norm = Normal::new(0.0, sd).unwrap();
        xs.iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = norm.cdf(x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn zero_covariance_samples_equal_mean() {
        let mut rng = SeededRng::new(1, 0);
        let mean = DVector::from_vec(vec![1.0, -2.0]);
        let e = sample_mvn(&mean, &SpdMatrix::zeros(2), &mut rng, 20).unwrap();
        for j in 0..20 {
            assert_eq!(e.member(j), mean);
        }
    }

    #[test]
    fn one_dimensional_variance_and_ks() {
        let mut rng = SeededRng::new(2, 0);
        let n = 100_000;
        let e = sample_mvn(&DVector::zeros(1), &SpdMatrix::scaled_identity(1, 0.3), &mut rng, n).unwrap();
        let var: f64 = e.covariance().unwrap()[(0, 0)];
        let se = 0.3 * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((var - 0.3).abs() < 3.0 * se, "var {var} se {se}");
        let d = ks_statistic(e.members().iter().copied().collect(), 0.3f64.sqrt());
        assert!(d < 1.628 / (n as f64).sqrt(), "KS D = {d}");
    }

    #[test]
    fn correlated_samples() {
        let mut rng = SeededRng::new(3, 0);
        let n = 100_000;
        let cov = SpdMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0])).unwrap();
        let e = sample_mvn(&DVector::zeros(2), &cov, &mut rng, n).unwrap();
        let c: DMatrix<f64> = e.covariance().unwrap();
        let rho: f64 = c[(0, 1)] / (c[(0, 0)] * c[(1, 1)]).sqrt();
        let se = (1.0 - 0.25) / (n as f64).sqrt();
        assert!((rho - 0.5).abs() < 3.0 * se, "rho {rho}");
        for k in 0..2 {
            let d = ks_statistic(e.members().row(k).iter().copied().collect(), 1.0);
            assert!(d < 1.628 / (n as f64).sqrt());
        }
    }

    fn l96_map() -> CycleMap<Lorenz96<f64>, f64> {
        CycleMap::new(Lorenz96::new(8, 8.0).unwrap(), IntegratorSpec::new(0.001, 50).unwrap())
    }

    #[test]
    fn noiseless_transition_is_deterministic_integration() {
        let map = l96_map();
        let x = DVector::from_fn(8, |i, _| 8.0 + 0.1 * i as f64);
        let mut rng = SeededRng::new(4, 0);
        let f = forecast_transition(&map, &x, &SpdMatrix::zeros(8), &mut rng).unwrap();
        assert_eq!(f, map.propagate(&x).unwrap());
    }

    #[test]
    fn transition_noise_at_equilibrium() {
        let map = l96_map();
        let x = DVector::from_element(8, 8.0);
        let q = SpdMatrix::scaled_identity(8, 0.2);
        let mut rng = SeededRng::new(5, 0);
        let n = 4000;
        let draws: Vec<DVector<f64>> = (0..n)
            .map(|_| forecast_transition(&map, &x, &q, &mut rng).unwrap() - &x)
            .collect();
        let cov = Ensemble::from_members(&draws).unwrap().covariance().unwrap();
        let se = 0.2 * (2.0 / n as f64).sqrt();
        for i in 0..8 {
            assert!((cov[(i, i)] - 0.2).abs() < 4.0 * se);
            for j in 0..i {
                assert!(cov[(i, j)].abs() < 4.0 * 0.2 / (n as f64).sqrt());
            }
        }
    }

    #[test]
    fn transition_reproducible() {
        let map = l96_map();
        let x = DVector::from_fn(8, |i, _| 8.0 + 0.1 * i as f64);
        let q = SpdMatrix::scaled_identity(8, 0.3);
        let a = forecast_transition(&map, &x, &q, &mut SeededRng::new(9, 1)).unwrap();
        let b = forecast_transition(&map, &x, &q, &mut SeededRng::new(9, 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn transition_dimension_mismatch() {
        let map = l96_map();
        let x = DVector::from_element(8, 8.0);
        let r = forecast_transition(&map, &x, &SpdMatrix::scaled_identity(3, 1.0), &mut SeededRng::new(0, 0));
        assert!(matches!(r, Err(StateSpaceError::DimensionMismatch(_))));
    }

    #[test]
    fn noiseless_observation() {
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let y = observe(&IdentityObservation::new(3), &x, &SpdMatrix::zeros(3), &mut SeededRng::new(0, 0)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn observation_residual_covariance() {
        let x = DVector::from_vec(vec![1.0, 2.0]);
        let r = SpdMatrix::new(DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.4])).unwrap();
        let h = IdentityObservation::new(2);
        let mut rng = SeededRng::new(6, 0);
        let n = 20_000;
        let res: Vec<DVector<f64>> = (0..n).map(|_| observe(&h, &x, &r, &mut rng).unwrap() - &x).collect();
        let c = Ensemble::from_members(&res).unwrap().covariance().unwrap();
        assert!((c - r.matrix()).abs().max() < 4.0 * 0.5 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn partial_observation_shape() {
        let h = SelectionObservation::new(5, vec![0, 2, 4]).unwrap();
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let y = observe(&h, &x, &SpdMatrix::zeros(3), &mut SeededRng::new(0, 0)).unwrap();
        assert_eq!(y, DVector::from_vec(vec![1.0, 3.0, 5.0]));
        assert!(observe(&h, &x, &SpdMatrix::zeros(5), &mut SeededRng::new(0, 0)).is_err());
    }

    #[test]
    fn loglik_standard_values() {
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let one = SpdMatrix::scaled_identity(1, 1.0);
        let v = |x: f64| DVector::from_element(1, x);
        assert!((gaussian_loglik(&v(0.0), &v(0.0), &one).unwrap() + half_log_2pi).abs() < 1e-15);
        assert!((gaussian_loglik(&v(0.0), &v(0.0), &one).unwrap() + 0.918_938_533_204_672_7).abs() < 1e-12);
        assert!((gaussian_loglik(&v(1.0), &v(0.0), &one).unwrap() + 0.5 + half_log_2pi).abs() < 1e-15);
    }

    #[test]
    fn loglik_two_by_two_closed_form() {
        let (a, b, c): (f64, f64, f64) = (2.0, 0.6, 1.5);
        let cov = SpdMatrix::new(DMatrix::from_row_slice(2, 2, &[a, b, b, c])).unwrap();
        let y = DVector::from_vec(vec![1.0, -0.5]);
        let mu = DVector::from_vec(vec![0.2, 0.3]);
        let det = a * c - b * b;
        let (d0, d1) = (y[0] - mu[0], y[1] - mu[1]);
        let quad = (c * d0 * d0 - 2.0 * b * d0 * d1 + a * d1 * d1) / det;
        let expected = -0.5 * (quad + det.ln() + 2.0 * (2.0 * std::f64::consts::PI).ln());
        assert!((gaussian_loglik(&y, &mu, &cov).unwrap() - expected).abs() < 1e-13);
    }

    #[test]
    fn loglik_stationary_at_mean_equal_y() {
        let cov = SpdMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.7])).unwrap();
        let y = DVector::from_vec(vec![0.4, -1.1]);
        let h = 1e-5;
        for k in 0..2 {
            let mut up = y.clone();
            up[k] += h;
            let mut dn = y.clone();
            dn[k] -= h;
            let g: f64 = (gaussian_loglik(&y, &up, &cov).unwrap() - gaussian_loglik(&y, &dn, &cov).unwrap()) / (2.0 * h);
            assert!(g.abs() < 1e-8);
        }
    }

    #[test]
    fn loglik_singular_covariance_errors() {
        let y = DVector::zeros(2);
        assert!(gaussian_loglik(&y, &y, &SpdMatrix::<f64>::zeros(2)).is_err());
    }
}
