//! Deterministic dynamical systems and the fixed-step RK4 integrator that
//! turns them into per-cycle forecast maps.

mod lorenz;
mod rk4;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::Scalar;

pub use lorenz::{
    lorenz63_deriv, lorenz96_deriv, two_scale_lorenz96_deriv, Lorenz63, Lorenz96, TwoScaleLorenz96,
};
pub use rk4::{integrate, rk4_step, rk4_step_in_place, Rk4Workspace};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid dimension: expected {expected}, got {got}")]
    InvalidDimension { expected: String, got: usize },
    #[error("model configuration error: {0}")]
    Configuration(String),
    #[error("non-finite value produced during integration")]
    NumericalOverflow,
}

/// An autonomous ODE `dx/dt = f(x)`.
pub trait OdeSystem<T: Scalar>: Send + Sync {
    fn dimension(&self) -> usize;

    /// Writes `f(state)` into `out`; both have length `dimension()`.
    fn deriv_into(&self, state: &DVector<T>, out: &mut DVector<T>);
}

impl<T: Scalar, S: OdeSystem<T> + ?Sized> OdeSystem<T> for &S {
    fn dimension(&self) -> usize {
        (**self).dimension()
    }

    fn deriv_into(&self, state: &DVector<T>, out: &mut DVector<T>) {
        (**self).deriv_into(state, out)
    }
}

/// Wraps a closure as an [`OdeSystem`].
pub struct FnSystem<F> {
    dim: usize,
    f: F,
}

impl<F> FnSystem<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<T, F> OdeSystem<T> for FnSystem<F>
where
    T: Scalar,
    F: Fn(&DVector<T>, &mut DVector<T>) + Send + Sync,
{
    fn dimension(&self) -> usize {
        self.dim
    }

    fn deriv_into(&self, state: &DVector<T>, out: &mut DVector<T>) {
        (self.f)(state, out)
    }
}

/// Fixed integration step and the number of steps making up one
/// assimilation cycle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorSpec<T> {
    pub dt: T,
    pub steps_per_cycle: usize,
}

impl<T: Scalar> IntegratorSpec<T> {
    pub fn new(dt: T, steps_per_cycle: usize) -> Result<Self, ModelError> {
        if !(dt > T::zero()) || steps_per_cycle == 0 {
            return Err(ModelError::Configuration(format!(
                "need dt > 0 and at least one step per cycle (dt = {}, steps = {steps_per_cycle})",
                dt.as_f64()
            )));
        }
        Ok(Self { dt, steps_per_cycle })
    }

    /// Derives the step count from cycle length `Δt` and step `δt`, requiring
    /// `Δt` to be an integer multiple of `δt`.
    pub fn from_cycle(cycle_length: f64, dt: f64) -> Result<Self, ModelError> {
        if !(cycle_length > 0.0) || !(dt > 0.0) {
            return Err(ModelError::Configuration(
                "cycle length and integration step must be positive".into(),
            ));
        }
        let steps = (cycle_length / dt).round();
        if steps < 1.0 || ((steps * dt) - cycle_length).abs() > 1e-9 * cycle_length {
            return Err(ModelError::Configuration(format!(
                "cycle length {cycle_length} is not a multiple of step {dt}"
            )));
        }
        Self::new(T::lit(dt), steps as usize)
    }

    pub fn cycle_length(&self) -> T {
        self.dt * T::from_count(self.steps_per_cycle)
    }
}

/// Deterministic map `M` advancing a state by one assimilation cycle.
pub trait Dynamics<T: Scalar>: Send + Sync {
    fn state_dim(&self) -> usize;

    fn propagate(&self, x: &DVector<T>) -> Result<DVector<T>, ModelError>;

    /// Propagates every column of `members`.
    fn propagate_columns(&self, members: &DMatrix<T>) -> Result<DMatrix<T>, ModelError> {
        let mut out = DMatrix::zeros(members.nrows(), members.ncols());
        for (j, col) in members.column_iter().enumerate() {
            out.set_column(j, &self.propagate(&col.into_owned())?);
        }
        Ok(out)
    }
}

/// An ODE integrated over one cycle with RK4.
#[derive(Debug, Clone)]
pub struct CycleMap<S, T> {
    pub system: S,
    pub integrator: IntegratorSpec<T>,
}

impl<S, T> CycleMap<S, T> {
    pub fn new(system: S, integrator: IntegratorSpec<T>) -> Self {
        Self { system, integrator }
    }
}

impl<T: Scalar, S: OdeSystem<T>> Dynamics<T> for CycleMap<S, T> {
    fn state_dim(&self) -> usize {
        self.system.dimension()
    }

    fn propagate(&self, x: &DVector<T>) -> Result<DVector<T>, ModelError> {
        integrate(&self.system, x, self.integrator.dt, self.integrator.steps_per_cycle)
    }

    fn propagate_columns(&self, members: &DMatrix<T>) -> Result<DMatrix<T>, ModelError> {
        let n = members.nrows();
        let mut ws = Rk4Workspace::new(n);
        let mut out = members.clone();
        let mut x = DVector::zeros(n);
        for j in 0..members.ncols() {
            x.copy_from(&members.column(j));
            for _ in 0..self.integrator.steps_per_cycle {
                rk4_step_in_place(&self.system, &mut x, self.integrator.dt, &mut ws)?;
            }
            out.set_column(j, &x);
        }
        Ok(out)
    }
}

/// Linear dynamics `x ↦ A x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap<T: Scalar> {
    pub a: DMatrix<T>,
}

impl<T: Scalar> Dynamics<T> for LinearMap<T> {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn propagate(&self, x: &DVector<T>) -> Result<DVector<T>, ModelError> {
        if x.len() != self.a.ncols() {
            return Err(ModelError::InvalidDimension {
                expected: format!("{}", self.a.ncols()),
                got: x.len(),
            });
        }
        Ok(&self.a * x)
    }

    fn propagate_columns(&self, members: &DMatrix<T>) -> Result<DMatrix<T>, ModelError> {
        if members.nrows() != self.a.ncols() {
            return Err(ModelError::InvalidDimension {
                expected: format!("{}", self.a.ncols()),
                got: members.nrows(),
            });
        }
        Ok(&self.a * members)
    }
}

impl<T: Scalar, D: Dynamics<T> + ?Sized> Dynamics<T> for Box<D> {
    fn state_dim(&self) -> usize {
        (**self).state_dim()
    }

    fn propagate(&self, x: &DVector<T>) -> Result<DVector<T>, ModelError> {
        (**self).propagate(x)
    }

    fn propagate_columns(&self, members: &DMatrix<T>) -> Result<DMatrix<T>, ModelError> {
        (**self).propagate_columns(members)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integrator_from_cycle() {
        let s = IntegratorSpec::<f64>::from_cycle(0.05, 0.01).unwrap();
        assert_eq!(s.steps_per_cycle, 5);
        let s = IntegratorSpec::<f64>::from_cycle(0.05, 0.001).unwrap();
        assert_eq!(s.steps_per_cycle, 50);
        assert!(IntegratorSpec::<f64>::from_cycle(0.05, 0.03).is_err());
        assert!(IntegratorSpec::<f64>::from_cycle(0.05, 0.0).is_err());
    }

    #[test]
    fn cycle_map_batch_matches_single() {
        let map = CycleMap::new(Lorenz63::<f64>::standard(), IntegratorSpec::new(0.01, 5).unwrap());
        let m = DMatrix::from_fn(3, 4, |i, j| 1.0 + i as f64 - 0.5 * j as f64);
        let batch = map.propagate_columns(&m).unwrap();
        for j in 0..4 {
            let single = map.propagate(&m.column(j).into_owned()).unwrap();
            assert_eq!(batch.column(j), single.column(0));
        }
    }
}
