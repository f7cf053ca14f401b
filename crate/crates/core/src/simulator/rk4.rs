use nalgebra::DVector;

use crate::error::{Error, Result};

/// One classical Runge–Kutta step of size `h` with the input held constant.
pub fn rk4_step<F>(field: F, x: &DVector<f64>, u: &[f64], h: f64) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>, &[f64]) -> DVector<f64>,
{
    debug_assert!(h > 0.0);
    let k1 = field(x, u);
    let k2 = field(&(x + &k1 * (0.5 * h)), u);
    let k3 = field(&(x + &k2 * (0.5 * h)), u);
    let k4 = field(&(x + &k3 * h), u);
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rk4 step produced a non-finite state".into()));
    }
    Ok(next)
}

/// Integrates `steps` RK4 steps of size `h`.
pub fn rk4_integrate<F>(field: F, x: &DVector<f64>, u: &[f64], h: f64, steps: usize) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>, &[f64]) -> DVector<f64>,
{
    let mut state = x.clone();
    for _ in 0..steps {
        state = rk4_step(&field, &state, u, h)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn decay(x: &DVector<f64>, _: &[f64]) -> DVector<f64> {
        -x
    }

    fn oscillator(x: &DVector<f64>, _: &[f64]) -> DVector<f64> {
        DVector::from_vec(vec![x[1], -x[0]])
    }

    #[test]
    fn zero_field_is_stationary() {
        let x = DVector::from_vec(vec![1.5, -2.0]);
        let next = rk4_step(|x: &DVector<f64>, _: &[f64]| DVector::zeros(x.len()), &x, &[], 0.1).unwrap();
        assert_eq!(next, x);
    }

    #[test]
    fn exponential_decay_step() {
        let next = rk4_step(decay, &DVector::from_vec(vec![1.0]), &[], 0.01).unwrap();
        assert!((next[0] - (-0.01f64).exp()).abs() < 1e-10);
    }

    #[test]
    fn oscillator_period() {
        let h = 0.001;
        let steps = (2.0 * PI / h).round() as usize;
        let h = 2.0 * PI / steps as f64;
        let x0 = DVector::from_vec(vec![1.0, 0.0]);
        let x = rk4_integrate(oscillator, &x0, &[], h, steps).unwrap();
        assert_relative_eq!(x, x0, epsilon = 1e-6);
    }

    #[test]
    fn fourth_order_convergence() {
        let x0 = DVector::from_vec(vec![1.0, 0.0]);
        for h in [0.2, 0.1] {
            let err = |h: f64| {
                let x = rk4_step(oscillator, &x0, &[], h).unwrap();
                (x - DVector::from_vec(vec![h.cos(), -h.sin()])).norm()
            };
            assert!(err(h) / err(h / 2.0) >= 16.0 / 1.5);
            let dec = |h: f64| (rk4_step(decay, &DVector::from_vec(vec![1.0]), &[], h).unwrap()[0] - (-h).exp()).abs();
            assert!(dec(h) / dec(h / 2.0) >= 16.0 / 1.5);
        }
    }

    #[test]
    fn non_finite_is_reported() {
        let blow = |x: &DVector<f64>, _: &[f64]| x.map(|v| v * f64::MAX);
        assert!(rk4_step(blow, &DVector::from_vec(vec![1e10]), &[], 1.0).is_err());
    }
}
