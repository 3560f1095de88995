use nalgebra::{DMatrix, DVector};

use super::StateSpaceError;
use crate::Scalar;

/// Particle representation of a state distribution: one member per column.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble<T: Scalar> {
    members: DMatrix<T>,
}

impl<T: Scalar> Ensemble<T> {
    /// Builds an ensemble from an `n_x × n_p` matrix of finite values.
    pub fn new(members: DMatrix<T>) -> Result<Self, StateSpaceError> {
        if members.ncols() == 0 || members.nrows() == 0 {
            return Err(StateSpaceError::DimensionMismatch("empty ensemble".into()));
        }
        if members.iter().any(|x| !x.is_finite()) {
            return Err(StateSpaceError::NonFinite("ensemble member".into()));
        }
        Ok(Self { members })
    }

    pub fn from_members(members: &[DVector<T>]) -> Result<Self, StateSpaceError> {
        let n_x = members.first().map(|m| m.len()).unwrap_or(0);
        if members.iter().any(|m| m.len() != n_x) {
            return Err(StateSpaceError::DimensionMismatch(
                "ensemble members differ in length".into(),
            ));
        }
        Self::new(DMatrix::from_columns(members))
    }

    /// Every member equal to `x`.
    pub fn replicate(x: &DVector<T>, n_p: usize) -> Result<Self, StateSpaceError> {
        Self::new(DMatrix::from_fn(x.len(), n_p, |i, _| x[i]))
    }

    pub fn n_x(&self) -> usize {
        self.members.nrows()
    }

    pub fn n_p(&self) -> usize {
        self.members.ncols()
    }

    pub fn members(&self) -> &DMatrix<T> {
        &self.members
    }

    pub fn into_members(self) -> DMatrix<T> {
        self.members
    }

    pub fn member(&self, j: usize) -> DVector<T> {
        self.members.column(j).into_owned()
    }

    pub fn mean(&self) -> DVector<T> {
        self.members.column_mean()
    }

    /// Members minus the ensemble mean, as columns.
    pub fn anomalies(&self) -> DMatrix<T> {
        let mean = self.mean();
        let mut a = self.members.clone();
        for mut col in a.column_iter_mut() {
            col -= &mean;
        }
        a
    }

    /// Unbiased sample covariance (divides by `n_p − 1`).
    pub fn covariance(&self) -> Result<DMatrix<T>, StateSpaceError> {
        if self.n_p() < 2 {
            return Err(StateSpaceError::TooFewMembers(self.n_p()));
        }
        let a = self.anomalies();
        Ok(super::symmetrize(&(&a * a.transpose())) / T::from_count(self.n_p() - 1))
    }
}
