//! Plain SGD and bias-corrected Adam over flat parameter buffers.

use crate::error::{Error, Result};

/// In-place SGD: p <- p - lr * g.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::validation(
            "sgd_step",
            format!("{} parameters but {} gradients", params.len(), grads.len()),
        ));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    Ok(())
}

/// First/second moment state for [`adam_step`].
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

/// In-place bias-corrected Adam update.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::validation(
            "adam_step",
            format!(
                "{} parameters, {} gradients, {} state entries",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grads[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grads[i] * grads[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_textbook_step() {
        let mut p = vec![1.0];
        sgd_step(&mut p, &[2.0], 0.01).unwrap();
        assert!((p[0] - 0.98).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_about_lr() {
        let mut p = vec![5.0];
        let mut st = AdamState::new(1);
        adam_step(&mut st, &mut p, &[1.0], 0.001).unwrap();
        // bias correction makes the very first step ~ lr regardless of gradient scale
        assert!((5.0 - p[0] - 0.001).abs() < 1e-6, "step was {}", 5.0 - p[0]);
    }

    #[test]
    fn adam_drives_quadratic_to_zero() {
        let mut p = vec![3.0];
        let mut st = AdamState::new(1);
        for _ in 0..500 {
            let g = [2.0 * p[0]];
            adam_step(&mut st, &mut p, &g, 0.05).unwrap();
        }
        assert!(p[0].abs() < 1e-3, "p = {}", p[0]);
    }

    #[test]
    fn zero_gradient_means_zero_update() {
        let mut p = vec![1.5, -2.5];
        let mut st = AdamState::new(2);
        adam_step(&mut st, &mut p, &[0.0, 0.0], 0.1).unwrap();
        assert_eq!(p, vec![1.5, -2.5]);
    }

    #[test]
    fn mismatched_lengths_error() {
        let mut p = vec![0.0; 3];
        assert!(sgd_step(&mut p, &[0.0; 2], 0.1).is_err());
        let mut st = AdamState::new(3);
        assert!(adam_step(&mut st, &mut p, &[0.0; 2], 0.1).is_err());
    }
}
