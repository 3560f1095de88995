use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{ModelError, OdeSystem};
use crate::Scalar;

/// Three-variable Lorenz-63 system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lorenz63<T> {
    pub sigma: T,
    pub rho: T,
    pub beta: T,
}

impl<T: Scalar> Lorenz63<T> {
    /// σ = 10, ρ = 28, β = 8/3.
    pub fn standard() -> Self {
        Self {
            sigma: T::lit(10.0),
            rho: T::lit(28.0),
            beta: T::lit(8.0 / 3.0),
        }
    }
}

/// Right-hand side of Lorenz-63: (σ(y−x), x(ρ−z)−y, xy−βz).
pub fn lorenz63_deriv<T: Scalar>(state: &DVector<T>, params: &Lorenz63<T>) -> Result<DVector<T>, ModelError> {
    if state.len() != 3 {
        return Err(ModelError::InvalidDimension {
            expected: "exactly 3".into(),
            got: state.len(),
        });
    }
    let mut out = DVector::zeros(3);
    params.deriv_into(state, &mut out);
    Ok(out)
}

impl<T: Scalar> OdeSystem<T> for Lorenz63<T> {
    fn dimension(&self) -> usize {
        3
    }

    fn deriv_into(&self, s: &DVector<T>, out: &mut DVector<T>) {
        let (x, y, z) = (s[0], s[1], s[2]);
        out[0] = self.sigma * (y - x);
        out[1] = x * (self.rho - z) - y;
        out[2] = x * y - self.beta * z;
    }
}

/// One-scale Lorenz-96 with periodic boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lorenz96<T> {
    n: usize,
    pub forcing: T,
}

impl<T: Scalar> Lorenz96<T> {
    pub fn new(n: usize, forcing: T) -> Result<Self, ModelError> {
        if n < 4 {
            return Err(ModelError::InvalidDimension {
                expected: "at least 4".into(),
                got: n,
            });
        }
        Ok(Self { n, forcing })
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

#[inline]
fn l96_tendency<T: Scalar>(x: &[T], forcing: T, out: &mut [T]) {
    let n = x.len();
    for i in 0..n {
        let xm1 = x[(i + n - 1) % n];
        let xm2 = x[(i + n - 2) % n];
        let xp1 = x[(i + 1) % n];
        out[i] = xm1 * (xp1 - xm2) - x[i] + forcing;
    }
}

/// Lorenz-96 tendency X_{n−1}(X_{n+1} − X_{n−2}) − X_n + F.
pub fn lorenz96_deriv<T: Scalar>(state: &DVector<T>, forcing: T) -> Result<DVector<T>, ModelError> {
    let sys = Lorenz96::new(state.len(), forcing)?;
    let mut out = DVector::zeros(state.len());
    sys.deriv_into(state, &mut out);
    Ok(out)
}

impl<T: Scalar> OdeSystem<T> for Lorenz96<T> {
    fn dimension(&self) -> usize {
        self.n
    }

    fn deriv_into(&self, state: &DVector<T>, out: &mut DVector<T>) {
        l96_tendency(state.as_slice(), self.forcing, out.as_mut_slice());
    }
}

/// Two-scale Lorenz-96. The packed state is `[X_1..X_N, Y_1..Y_{N_S}]`, and
/// each large-scale variable owns a contiguous block of `N_S / N` small-scale
/// variables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoScaleLorenz96<T> {
    n: usize,
    n_small: usize,
    pub forcing: T,
    pub h: T,
    pub b: T,
    pub c: T,
}

impl<T: Scalar> TwoScaleLorenz96<T> {
    pub fn new(n: usize, n_small: usize, forcing: T, h: T, b: T, c: T) -> Result<Self, ModelError> {
        if n == 0 || n_small == 0 || n_small % n != 0 {
            return Err(ModelError::Configuration(format!(
                "small-scale count {n_small} must be a positive multiple of large-scale count {n}"
            )));
        }
        Ok(Self {
            n,
            n_small,
            forcing,
            h,
            b,
            c,
        })
    }

    /// F = 20, h = 1, b = 10, c = 10.
    pub fn standard(n: usize, n_small: usize) -> Result<Self, ModelError> {
        Self::new(n, n_small, T::lit(20.0), T::one(), T::lit(10.0), T::lit(10.0))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_small(&self) -> usize {
        self.n_small
    }

    pub fn block_size(&self) -> usize {
        self.n_small / self.n
    }

    /// Coupling term −(hc/b)·ΣY over each large-scale block: the forcing the
    /// truncated one-scale model omits.
    pub fn coupling_forcing(&self, y: &[T]) -> DVector<T> {
        let coef = self.h * self.c / self.b;
        let block = self.block_size();
        DVector::from_fn(self.n, |i, _| {
            let s = y[i * block..(i + 1) * block]
                .iter()
                .fold(T::zero(), |acc, &v| acc + v);
            -coef * s
        })
    }

    fn split_into(&self, x: &[T], y: &[T], dx: &mut [T], dy: &mut [T]) {
        let coef = self.h * self.c / self.b;
        let block = self.block_size();
        l96_tendency(x, self.forcing, dx);
        for (i, d) in dx.iter_mut().enumerate() {
            let s = y[i * block..(i + 1) * block]
                .iter()
                .fold(T::zero(), |acc, &v| acc + v);
            *d -= coef * s;
        }
        let m = self.n_small;
        let cb = self.c * self.b;
        for j in 0..m {
            let yp1 = y[(j + 1) % m];
            let yp2 = y[(j + 2) % m];
            let ym1 = y[(j + m - 1) % m];
            dy[j] = cb * yp1 * (ym1 - yp2) - self.c * y[j] + coef * x[j / block];
        }
    }
}

/// Tendencies of the large- and small-scale variables of two-scale Lorenz-96.
pub fn two_scale_lorenz96_deriv<T: Scalar>(
    x: &DVector<T>,
    y: &DVector<T>,
    params: &TwoScaleLorenz96<T>,
) -> Result<(DVector<T>, DVector<T>), ModelError> {
    if x.len() != params.n || y.len() != params.n_small {
        return Err(ModelError::Configuration(format!(
            "state sizes ({}, {}) do not match configured ({}, {})",
            x.len(),
            y.len(),
            params.n,
            params.n_small
        )));
    }
    let mut dx = DVector::zeros(params.n);
    let mut dy = DVector::zeros(params.n_small);
    params.split_into(x.as_slice(), y.as_slice(), dx.as_mut_slice(), dy.as_mut_slice());
    Ok((dx, dy))
}

impl<T: Scalar> OdeSystem<T> for TwoScaleLorenz96<T> {
    fn dimension(&self) -> usize {
        self.n + self.n_small
    }

    fn deriv_into(&self, state: &DVector<T>, out: &mut DVector<T>) {
        let (x, y) = state.as_slice().split_at(self.n);
        let (dx, dy) = out.as_mut_slice().split_at_mut(self.n);
        self.split_into(x, y, dx, dy);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn l63_hand_values() {
        let p = Lorenz63::<f64>::standard();
        assert_eq!(lorenz63_deriv(&v(&[0.0, 0.0, 0.0]), &p).unwrap(), v(&[0.0, 0.0, 0.0]));
        let d = lorenz63_deriv(&v(&[1.0, 1.0, 1.0]), &p).unwrap();
        assert_relative_eq!(d[0], 0.0);
        assert_relative_eq!(d[1], 26.0);
        assert_relative_eq!(d[2], -5.0 / 3.0, epsilon = 1e-14);
        let d = lorenz63_deriv(&v(&[1.0, 2.0, 3.0]), &p).unwrap();
        assert_relative_eq!(d[0], 10.0);
        assert_relative_eq!(d[1], 23.0);
        assert_relative_eq!(d[2], -6.0, epsilon = 1e-14);
    }

    #[test]
    fn l63_rejects_wrong_dimension() {
        assert!(lorenz63_deriv(&v(&[1.0, 2.0]), &Lorenz63::standard()).is_err());
    }

    #[test]
    fn l96_uniform_state_is_equilibrium() {
        for n in [4, 5, 8, 40] {
            let d = lorenz96_deriv(&DVector::from_element(n, 8.0), 8.0).unwrap();
            assert!(d.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn l96_periodic_hand_values() {
        // every advection product has a zero factor, only the damping survives
        let d = lorenz96_deriv(&v(&[1.0, 0.0, 0.0, 0.0]), 0.0).unwrap();
        assert_eq!(d, v(&[-1.0, 0.0, 0.0, 0.0]));
        let d = lorenz96_deriv(&v(&[1.0, 2.0, 3.0, 4.0]), 0.0).unwrap();
        assert_eq!(d, v(&[-5.0, -3.0, 3.0, -7.0]));
    }

    #[test]
    fn l96_rejects_small_dimension() {
        assert!(matches!(
            lorenz96_deriv(&v(&[1.0, 2.0, 3.0]), 8.0),
            Err(ModelError::InvalidDimension { got: 3, .. })
        ));
    }

    #[test]
    fn two_scale_requires_divisible_blocks() {
        assert!(TwoScaleLorenz96::<f64>::standard(8, 250).is_err());
        assert!(TwoScaleLorenz96::<f64>::standard(8, 256).is_ok());
    }

    #[test]
    fn two_scale_zero_coupling_matches_one_scale() {
        let p = TwoScaleLorenz96::new(5, 10, 20.0, 0.0, 10.0, 10.0).unwrap();
        let x = v(&[1.0, -2.0, 3.5, 0.5, 7.0]);
        let y = DVector::from_fn(10, |i, _| (i as f64 * 0.37).sin());
        let (dx, dy) = two_scale_lorenz96_deriv(&x, &y, &p).unwrap();
        assert_eq!(dx, lorenz96_deriv(&x, 20.0).unwrap());
        // decoupled small scale does not see X
        let (_, dy2) = two_scale_lorenz96_deriv(&(x * 3.0), &y, &p).unwrap();
        assert_eq!(dy, dy2);
    }

    #[test]
    fn two_scale_zero_small_scale_matches_one_scale() {
        let p = TwoScaleLorenz96::<f64>::standard(4, 8).unwrap();
        let x = v(&[1.0, 2.0, -3.0, 4.0]);
        let (dx, _) = two_scale_lorenz96_deriv(&x, &DVector::zeros(8), &p).unwrap();
        assert_eq!(dx, lorenz96_deriv(&x, 20.0).unwrap());
    }

    #[test]
    fn coupling_forcing_is_block_sum() {
        let p = TwoScaleLorenz96::<f64>::standard(2, 4).unwrap();
        let f = p.coupling_forcing(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(f, v(&[-3.0, -7.0]));
    }
}
