use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use super::StateSpaceError;
use crate::Scalar;

/// Relative tolerance for the symmetry check on externally supplied matrices.
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;
/// Diagonal jitter, as a fraction of the mean diagonal entry, tried once before
/// a matrix is declared not positive definite.
pub const JITTER_FRACTION: f64 = 1e-10;

/// Symmetric positive (semi)definite covariance matrix with a lazily computed
/// Cholesky factor.
#[derive(Debug, Clone)]
pub struct SpdMatrix<T: Scalar> {
    m: DMatrix<T>,
    chol: OnceLock<Result<DMatrix<T>, StateSpaceError>>,
    psd: OnceLock<Result<DMatrix<T>, StateSpaceError>>,
}

impl<T: Scalar> PartialEq for SpdMatrix<T> {
    fn eq(&self, other: &Self) -> bool {
        self.m == other.m
    }
}

fn check_square_finite<T: Scalar>(m: &DMatrix<T>) -> Result<(), StateSpaceError> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(StateSpaceError::DimensionMismatch(format!(
            "covariance must be square and non-empty, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(StateSpaceError::NonFinite("covariance entries".into()));
    }
    Ok(())
}

/// `(A + Aᵀ) / 2`.
pub fn symmetrize<T: Scalar>(m: &DMatrix<T>) -> DMatrix<T> {
    let half = T::lit(0.5);
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
        if i == j {
            m[(i, i)]
        } else {
            (m[(i, j)] + m[(j, i)]) * half
        }
    })
}

impl<T: Scalar> SpdMatrix<T> {
    fn wrap(m: DMatrix<T>) -> Self {
        Self {
            m,
            chol: OnceLock::new(),
            psd: OnceLock::new(),
        }
    }

    /// Validates symmetry (relative tolerance `1e-12`) and stores the
    /// symmetrized matrix.
    pub fn new(m: DMatrix<T>) -> Result<Self, StateSpaceError> {
        check_square_finite(&m)?;
        let scale = m.iter().fold(T::zero(), |acc, x| acc.max(x.abs()));
        let tol = T::lit(SYMMETRY_TOLERANCE) * scale;
        let n = m.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                if (m[(i, j)] - m[(j, i)]).abs() > tol {
                    return Err(StateSpaceError::NotSymmetric { row: i, col: j });
                }
            }
        }
        Ok(Self::wrap(symmetrize(&m)))
    }

    /// Accepts any square finite matrix and stores `(A + Aᵀ)/2`.
    pub fn from_symmetrized(m: DMatrix<T>) -> Result<Self, StateSpaceError> {
        check_square_finite(&m)?;
        Ok(Self::wrap(symmetrize(&m)))
    }

    pub fn scaled_identity(dim: usize, scale: T) -> Self {
        Self::wrap(DMatrix::identity(dim, dim) * scale)
    }

    pub fn zeros(dim: usize) -> Self {
        Self::wrap(DMatrix::zeros(dim, dim))
    }

    pub fn from_diagonal(diag: &[T]) -> Self {
        Self::wrap(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.m
    }

    pub fn into_matrix(self) -> DMatrix<T> {
        self.m
    }

    pub fn trace(&self) -> T {
        self.m.trace()
    }

    pub fn scaled(&self, s: T) -> Self {
        Self::wrap(&self.m * s)
    }

    /// Lower Cholesky factor under the jitter policy: a plain factorization
    /// first, then one retry with `1e-10 · trace/dim` added to the diagonal.
    pub fn cholesky(&self) -> Result<&DMatrix<T>, StateSpaceError> {
        self.chol
            .get_or_init(|| {
                cholesky_lower(&self.m).or_else(|_| {
                    let jittered = add_jitter(&self.m);
                    cholesky_lower(&jittered)
                })
            })
            .as_ref()
            .map_err(Clone::clone)
    }

    /// Factor `L` with `L Lᵀ = self` that tolerates zero pivots, used for
    /// sampling from degenerate (for example all-zero) covariances.
    pub fn sampling_factor(&self) -> Result<&DMatrix<T>, StateSpaceError> {
        self.psd
            .get_or_init(|| match self.cholesky() {
                Ok(l) => Ok(l.clone()),
                Err(_) => semidefinite_factor(&self.m),
            })
            .as_ref()
            .map_err(Clone::clone)
    }

    /// Returns `self` when it factorizes as-is, otherwise the copy with the
    /// jitter added to its diagonal, or an error if neither factorizes.
    pub fn with_jitter_policy(self) -> Result<Self, StateSpaceError> {
        if cholesky_lower(&self.m).is_ok() {
            return Ok(self);
        }
        let jittered = Self::wrap(add_jitter(&self.m));
        match cholesky_lower(&jittered.m) {
            Ok(l) => {
                let _ = jittered.chol.set(Ok(l));
                Ok(jittered)
            }
            Err(e) => Err(e),
        }
    }

    /// `self⁻¹ b` for a matrix right-hand side.
    pub fn solve(&self, b: &DMatrix<T>) -> Result<DMatrix<T>, StateSpaceError> {
        let l = self.cholesky()?;
        let z = l
            .solve_lower_triangular(b)
            .ok_or(StateSpaceError::NotPositiveDefinite { pivot: 0 })?;
        l.transpose()
            .solve_upper_triangular(&z)
            .ok_or(StateSpaceError::NotPositiveDefinite { pivot: 0 })
    }

    pub fn solve_vector(&self, b: &DVector<T>) -> Result<DVector<T>, StateSpaceError> {
        let l = self.cholesky()?;
        let z = l
            .solve_lower_triangular(b)
            .ok_or(StateSpaceError::NotPositiveDefinite { pivot: 0 })?;
        l.transpose()
            .solve_upper_triangular(&z)
            .ok_or(StateSpaceError::NotPositiveDefinite { pivot: 0 })
    }

    pub fn inverse(&self) -> Result<DMatrix<T>, StateSpaceError> {
        self.solve(&DMatrix::identity(self.dim(), self.dim()))
    }

    pub fn log_det(&self) -> Result<T, StateSpaceError> {
        let l = self.cholesky()?;
        Ok(l.diagonal().iter().fold(T::zero(), |acc, &d| acc + d.ln()) * T::lit(2.0))
    }
}

fn add_jitter<T: Scalar>(m: &DMatrix<T>) -> DMatrix<T> {
    let n = m.nrows();
    let jitter = T::lit(JITTER_FRACTION) * m.trace() / T::from_count(n);
    let mut out = m.clone();
    if jitter > T::zero() {
        for i in 0..n {
            out[(i, i)] += jitter;
        }
    }
    out
}

/// Plain lower Cholesky factorization; fails on the first non-positive pivot.
pub(crate) fn cholesky_lower<T: Scalar>(m: &DMatrix<T>) -> Result<DMatrix<T>, StateSpaceError> {
    let n = m.nrows();
    let mut l = DMatrix::<T>::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > T::zero()) || !d.is_finite() {
            return Err(StateSpaceError::NotPositiveDefinite { pivot: j });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Cholesky variant for positive semidefinite input: pivots below a small
/// relative threshold zero their column.
fn semidefinite_factor<T: Scalar>(m: &DMatrix<T>) -> Result<DMatrix<T>, StateSpaceError> {
    let n = m.nrows();
    let scale = (0..n).fold(T::zero(), |acc, i| acc.max(m[(i, i)].abs()));
    let tol = T::lit(1e-12) * scale;
    let mut l = DMatrix::<T>::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d < -tol * T::lit(1e3) {
            return Err(StateSpaceError::NotPositiveDefinite { pivot: j });
        }
        if d <= tol {
            continue;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Lower Cholesky factor of `m` under the jitter policy.
pub fn cholesky<T: Scalar>(m: &SpdMatrix<T>) -> Result<DMatrix<T>, StateSpaceError> {
    m.cholesky().cloned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm()
    }

    #[test]
    fn identity_factor() {
        let m = SpdMatrix::<f64>::scaled_identity(4, 1.0);
        assert_eq!(cholesky(&m).unwrap(), DMatrix::identity(4, 4));
    }

    #[test]
    fn diagonal_factor() {
        let m = SpdMatrix::new(DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 9.0])).unwrap();
        assert_eq!(cholesky(&m).unwrap(), DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]));
    }

    #[test]
    fn random_spd_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = DMatrix::<f64>::from_fn(8, 8, |_, _| rng.random_range(-1.0..1.0));
        let a = &b * b.transpose() + DMatrix::identity(8, 8) * 1e-3;
        let m = SpdMatrix::new(a.clone()).unwrap();
        let l = cholesky(&m).unwrap();
        assert!(rel_frobenius(&(&l * l.transpose()), &a) < 1e-10);
        for i in 0..8 {
            for j in (i + 1)..8 {
                assert_eq!(l[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn asymmetric_input_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(matches!(SpdMatrix::new(m.clone()), Err(StateSpaceError::NotSymmetric { .. })));
        let s = SpdMatrix::from_symmetrized(m).unwrap();
        assert_eq!(s.matrix()[(0, 1)], 0.45);
        assert_eq!(s.matrix()[(1, 0)], 0.45);
    }

    #[test]
    fn indefinite_matrix_fails_after_jitter() {
        let m = SpdMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).unwrap();
        assert!(matches!(m.cholesky(), Err(StateSpaceError::NotPositiveDefinite { .. })));
    }

    #[test]
    fn rank_deficient_matrix_factorizes_with_jitter() {
        // rank one: v vᵀ with v = (1, 1)
        let m = SpdMatrix::new(DMatrix::from_element(2, 2, 1.0)).unwrap();
        assert!(m.cholesky().is_ok());
        let j = m.clone().with_jitter_policy().unwrap();
        assert!(j.matrix()[(0, 0)] > 1.0);
        assert!(j.matrix()[(0, 0)] - 1.0 <= 1e-10 + 1e-16);
    }

    #[test]
    fn zero_matrix_has_zero_sampling_factor() {
        let m = SpdMatrix::<f64>::zeros(3);
        assert!(m.cholesky().is_err());
        assert_eq!(m.sampling_factor().unwrap(), &DMatrix::zeros(3, 3));
    }

    #[test]
    fn solve_and_logdet() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let m = SpdMatrix::new(a.clone()).unwrap();
        let inv = m.inverse().unwrap();
        assert!((&a * &inv - DMatrix::identity(2, 2)).norm() < 1e-14);
        assert!((m.log_det().unwrap() - 1.75f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn works_in_single_precision() {
        let m = SpdMatrix::<f32>::new(DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0])).unwrap();
        let l = cholesky(&m).unwrap();
        assert!((&l * l.transpose() - m.matrix()).norm() < 1e-5);
    }
}
