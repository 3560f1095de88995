use nalgebra::DVector;

use super::{ModelError, OdeSystem};
use crate::Scalar;

/// Stage buffers reused across consecutive RK4 steps.
#[derive(Debug, Clone)]
pub struct Rk4Workspace<T: Scalar> {
    k1: DVector<T>,
    k2: DVector<T>,
    k3: DVector<T>,
    k4: DVector<T>,
    stage: DVector<T>,
}

impl<T: Scalar> Rk4Workspace<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            k1: DVector::zeros(dim),
            k2: DVector::zeros(dim),
            k3: DVector::zeros(dim),
            k4: DVector::zeros(dim),
            stage: DVector::zeros(dim),
        }
    }

    fn ensure_dim(&mut self, dim: usize) {
        if self.k1.len() != dim {
            *self = Self::new(dim);
        }
    }
}

/// Advances `state` by one classical fourth-order Runge-Kutta step of size `dt`.
pub fn rk4_step_in_place<T: Scalar, S: OdeSystem<T> + ?Sized>(
    system: &S,
    state: &mut DVector<T>,
    dt: T,
    ws: &mut Rk4Workspace<T>,
) -> Result<(), ModelError> {
    let n = state.len();
    ws.ensure_dim(n);
    let half = dt * T::lit(0.5);

    system.deriv_into(state, &mut ws.k1);
    for i in 0..n {
        ws.stage[i] = state[i] + half * ws.k1[i];
    }
    system.deriv_into(&ws.stage, &mut ws.k2);
    for i in 0..n {
        ws.stage[i] = state[i] + half * ws.k2[i];
    }
    system.deriv_into(&ws.stage, &mut ws.k3);
    for i in 0..n {
        ws.stage[i] = state[i] + dt * ws.k3[i];
    }
    system.deriv_into(&ws.stage, &mut ws.k4);

    let sixth = dt / T::lit(6.0);
    let two = T::lit(2.0);
    let mut finite = true;
    for i in 0..n {
        let incr = ws.k1[i] + two * ws.k2[i] + two * ws.k3[i] + ws.k4[i];
        state[i] += sixth * incr;
        finite &= state[i].is_finite();
    }
    if finite {
        Ok(())
    } else {
        Err(ModelError::NumericalOverflow)
    }
}

/// One RK4 step returning the new state.
pub fn rk4_step<T: Scalar, S: OdeSystem<T> + ?Sized>(
    system: &S,
    state: &DVector<T>,
    dt: T,
) -> Result<DVector<T>, ModelError> {
    if !(dt > T::zero()) {
        return Err(ModelError::Configuration(format!(
            "integration step must be positive, got {}",
            dt.as_f64()
        )));
    }
    let mut out = state.clone();
    let mut ws = Rk4Workspace::new(state.len());
    rk4_step_in_place(system, &mut out, dt, &mut ws)?;
    Ok(out)
}

/// Applies `n_steps` RK4 steps; `n_steps == 0` returns the input.
pub fn integrate<T: Scalar, S: OdeSystem<T> + ?Sized>(
    system: &S,
    state: &DVector<T>,
    dt: T,
    n_steps: usize,
) -> Result<DVector<T>, ModelError> {
    let mut out = state.clone();
    if n_steps == 0 {
        return Ok(out);
    }
    if !(dt > T::zero()) {
        return Err(ModelError::Configuration(format!(
            "integration step must be positive, got {}",
            dt.as_f64()
        )));
    }
    let mut ws = Rk4Workspace::new(state.len());
    for _ in 0..n_steps {
        rk4_step_in_place(system, &mut out, dt, &mut ws)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{FnSystem, Lorenz63};

    #[test]
    fn zero_field_leaves_state_unchanged() {
        let sys = FnSystem::new(3, |_x: &DVector<f64>, out: &mut DVector<f64>| out.fill(0.0));
        let x = DVector::from_vec(vec![1.5, -2.0, 0.25]);
        assert_eq!(rk4_step(&sys, &x, 0.1).unwrap(), x);
    }

    #[test]
    fn exponential_growth_matches_closed_form() {
        let sys = FnSystem::new(1, |x: &DVector<f64>, out: &mut DVector<f64>| out.copy_from(x));
        let x = rk4_step(&sys, &DVector::from_element(1, 1.0), 0.1).unwrap();
        assert!((x[0] - 0.1f64.exp()).abs() < 1e-7);
        // Taylor series truncated after the fourth order term.
        assert!((x[0] - 1.105_170_833_333_333_3).abs() < 1e-15);
    }

    #[test]
    fn zero_steps_is_identity() {
        let sys = Lorenz63::<f64>::standard();
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(integrate(&sys, &x, 0.01, 0).unwrap(), x);
    }

    #[test]
    fn overflow_is_reported() {
        let sys = FnSystem::new(1, |x: &DVector<f64>, out: &mut DVector<f64>| {
            out[0] = x[0] * x[0] * x[0]
        });
        let err = integrate(&sys, &DVector::from_element(1, 1e30), 1.0, 10).unwrap_err();
        assert!(matches!(err, ModelError::NumericalOverflow));
    }

    #[test]
    fn non_positive_step_rejected() {
        let sys = Lorenz63::<f64>::standard();
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(rk4_step(&sys, &x, 0.0).is_err());
    }
}
