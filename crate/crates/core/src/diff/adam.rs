use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    /// Zeroed moments with `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step<T: Real>(
    name: &str,
    param: &mut [T],
    grad: &[T],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if param.len() != grad.len() || state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(Error::shape("adam_step", &[param.len()], &[grad.len()]));
    }
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(name.to_string()));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::lit(state.beta1), T::lit(state.beta2));
    let (one, eps) = (T::one(), T::lit(state.eps));
    let bc1 = T::lit(1.0 - state.beta1.powi(t));
    let bc2 = T::lit(1.0 - state.beta2.powi(t));
    let lr = T::lit(lr);
    for (((p, &g), m), v) in param
        .iter_mut()
        .zip(grad)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![1.0f64, -2.0, 0.5];
        let g = vec![3.0, -0.2, 10.0];
        let mut s = AdamState::new(3);
        adam_step("p", &mut p, &g, &mut s, 1e-3).unwrap();
        let moved = [1.0 - p[0], -2.0 - p[1], 0.5 - p[2]];
        for (d, g) in moved.iter().zip(&g) {
            assert!((d.abs() - 1e-3).abs() < 1e-9);
            assert_eq!(d.signum(), g.signum());
        }
        assert_eq!(s.t, 1);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = vec![0.25f64; 4];
        let mut s = AdamState::new(4);
        for _ in 0..5 {
            adam_step("p", &mut p, &[0.0; 4], &mut s, 0.1).unwrap();
        }
        assert_eq!(p, vec![0.25; 4]);
        assert_eq!(s.t, 5);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = vec![0.0f64];
        let mut s = AdamState::new(1);
        let err = adam_step("ccm.layer3.weight", &mut p, &[f64::NAN], &mut s, 0.1).unwrap_err();
        assert!(err.to_string().contains("ccm.layer3.weight"));
        assert_eq!(s.t, 0);
    }
}
