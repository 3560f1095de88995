use nalgebra::{DMatrix, DVector};

use super::StateSpaceError;
use crate::Scalar;

/// Observation map `H` from state space to observation space.
///
/// Ensemble filters only need [`apply`](Self::apply); the particle-flow filter
/// also needs the transposed Jacobian action.
pub trait ObservationOperator<T: Scalar>: Send + Sync {
    fn state_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;

    fn apply(&self, x: &DVector<T>) -> DVector<T>;

    /// `H(x_j)` for every column.
    fn apply_columns(&self, xs: &DMatrix<T>) -> DMatrix<T> {
        let mut out = DMatrix::zeros(self.obs_dim(), xs.ncols());
        for (j, col) in xs.column_iter().enumerate() {
            out.set_column(j, &self.apply(&col.into_owned()));
        }
        out
    }

    /// `J_H(x)ᵀ v`.
    fn jacobian_transpose_mul(&self, x: &DVector<T>, v: &DVector<T>) -> DVector<T>;

    /// Matrix form when the operator is linear.
    fn as_matrix(&self) -> Option<DMatrix<T>> {
        None
    }

    fn check_state(&self, x: &DVector<T>) -> Result<(), StateSpaceError> {
        if x.len() != self.state_dim() {
            return Err(StateSpaceError::DimensionMismatch(format!(
                "observation operator expects state of length {}, got {}",
                self.state_dim(),
                x.len()
            )));
        }
        Ok(())
    }
}

/// Full state observed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdentityObservation {
    pub dim: usize,
}

impl IdentityObservation {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl<T: Scalar> ObservationOperator<T> for IdentityObservation {
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn obs_dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, x: &DVector<T>) -> DVector<T> {
        x.clone()
    }

    fn apply_columns(&self, xs: &DMatrix<T>) -> DMatrix<T> {
        xs.clone()
    }

    fn jacobian_transpose_mul(&self, _x: &DVector<T>, v: &DVector<T>) -> DVector<T> {
        v.clone()
    }

    fn as_matrix(&self) -> Option<DMatrix<T>> {
        Some(DMatrix::identity(self.dim, self.dim))
    }
}

/// Observes a subset of state components.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionObservation {
    state_dim: usize,
    indices: Vec<usize>,
}

impl SelectionObservation {
    pub fn new(state_dim: usize, indices: Vec<usize>) -> Result<Self, StateSpaceError> {
        if indices.is_empty() || indices.iter().any(|&i| i >= state_dim) {
            return Err(StateSpaceError::DimensionMismatch(format!(
                "selection indices must be non-empty and below {state_dim}"
            )));
        }
        Ok(Self { state_dim, indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

impl<T: Scalar> ObservationOperator<T> for SelectionObservation {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn obs_dim(&self) -> usize {
        self.indices.len()
    }

    fn apply(&self, x: &DVector<T>) -> DVector<T> {
        DVector::from_iterator(self.indices.len(), self.indices.iter().map(|&i| x[i]))
    }

    fn apply_columns(&self, xs: &DMatrix<T>) -> DMatrix<T> {
        xs.select_rows(self.indices.iter())
    }

    fn jacobian_transpose_mul(&self, _x: &DVector<T>, v: &DVector<T>) -> DVector<T> {
        let mut out = DVector::zeros(self.state_dim);
        for (k, &i) in self.indices.iter().enumerate() {
            out[i] += v[k];
        }
        out
    }

    fn as_matrix(&self) -> Option<DMatrix<T>> {
        let mut h = DMatrix::zeros(self.indices.len(), self.state_dim);
        for (k, &i) in self.indices.iter().enumerate() {
            h[(k, i)] = T::one();
        }
        Some(h)
    }
}

/// General linear observation `y = H x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearObservation<T: Scalar> {
    pub h: DMatrix<T>,
}

impl<T: Scalar> ObservationOperator<T> for LinearObservation<T> {
    fn state_dim(&self) -> usize {
        self.h.ncols()
    }

    fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    fn apply(&self, x: &DVector<T>) -> DVector<T> {
        &self.h * x
    }

    fn apply_columns(&self, xs: &DMatrix<T>) -> DMatrix<T> {
        &self.h * xs
    }

    fn jacobian_transpose_mul(&self, _x: &DVector<T>, v: &DVector<T>) -> DVector<T> {
        self.h.tr_mul(v)
    }

    fn as_matrix(&self) -> Option<DMatrix<T>> {
        Some(self.h.clone())
    }
}

impl<T: Scalar, H: ObservationOperator<T> + ?Sized> ObservationOperator<T> for Box<H> {
    fn state_dim(&self) -> usize {
        (**self).state_dim()
    }

    fn obs_dim(&self) -> usize {
        (**self).obs_dim()
    }

    fn apply(&self, x: &DVector<T>) -> DVector<T> {
        (**self).apply(x)
    }

    fn apply_columns(&self, xs: &DMatrix<T>) -> DMatrix<T> {
        (**self).apply_columns(xs)
    }

    fn jacobian_transpose_mul(&self, x: &DVector<T>, v: &DVector<T>) -> DVector<T> {
        (**self).jacobian_transpose_mul(x, v)
    }

    fn as_matrix(&self) -> Option<DMatrix<T>> {
        (**self).as_matrix()
    }
}
