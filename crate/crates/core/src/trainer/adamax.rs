//! AdaMax: Adam with the second moment replaced by an exponentially weighted
//! infinity norm.

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
/// Floor on the infinity norm in the update denominator.
pub const U_FLOOR: f64 = 1e-12;

/// Optimizer state for one parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaMaxState {
    pub m: Vec<f64>,
    pub u: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
}

impl AdaMaxState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            u: vec![0.0; len],
            t: 0,
            beta1: BETA1,
            beta2: BETA2,
        }
    }
}

/// One AdaMax update:
/// `m ← β1·m + (1−β1)·g`, `u ← max(β2·u, |g|)`, `θ ← θ − (lr/(1−β1^t))·m/u`.
/// A non-finite gradient leaves state and parameters untouched.
pub fn adamax_step(state: &mut AdaMaxState, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::shape(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i} is {}", grads[i])));
    }
    state.t += 1;
    let step = lr / (1.0 - state.beta1.powf(state.t as f64));
    for (((p, &g), m), u) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.u.iter_mut())
    {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *u = (state.beta2 * *u).max(g.abs());
        *p -= step * *m / u.max(U_FLOOR);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_minus_lr() {
        let mut s = AdaMaxState::new(1);
        let mut p = [0.5];
        adamax_step(&mut s, &mut p, &[1.0], 0.002).unwrap();
        assert!((s.m[0] - 0.1).abs() < 1e-15);
        assert_eq!(s.u[0], 1.0);
        assert!((p[0] - (0.5 - 0.002)).abs() < 1e-15);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut s = AdaMaxState::new(3);
        let mut p = [0.1, -0.2, 0.3];
        for _ in 0..50 {
            adamax_step(&mut s, &mut p, &[0.0; 3], 0.01).unwrap();
        }
        assert_eq!(p, [0.1, -0.2, 0.3]);
    }

    #[test]
    fn u_non_decreasing_under_constant_magnitude() {
        let mut s = AdaMaxState::new(1);
        let mut p = [0.0];
        let mut last = 0.0;
        for i in 0..20 {
            let g = if i % 2 == 0 { 0.7 } else { -0.7 };
            adamax_step(&mut s, &mut p, &[g], 0.01).unwrap();
            assert!(s.u[0] >= last);
            last = s.u[0];
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut s = AdaMaxState::new(2);
        let mut p = [1.0, 2.0];
        assert!(adamax_step(&mut s, &mut p, &[0.1, f64::NAN], 0.01).is_err());
        assert_eq!(p, [1.0, 2.0]);
        assert_eq!(s.t, 0);
    }
}
