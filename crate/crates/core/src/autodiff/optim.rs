//! Harness optimizers: plain SGD and Adam.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Momentum-free stochastic gradient descent.
#[derive(Debug, Clone, Copy)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Self { lr }
    }

    pub fn step(&self, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        check_shapes(param, grad)?;
        for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
            *p -= self.lr * g;
        }
        Ok(())
    }
}

/// Adam with bias correction; one state slot per parameter index.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: Vec<AdamState>,
}

#[derive(Debug, Clone, Default)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: Vec::new(),
        }
    }

    /// Update parameter `index` in place. State is keyed by index, so call
    /// with a stable parameter ordering.
    pub fn step(&mut self, index: usize, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        check_shapes(param, grad)?;
        if self.state.len() <= index {
            self.state.resize_with(index + 1, AdamState::default);
        }
        let state = &mut self.state[index];
        if state.m.is_empty() {
            state.m = vec![0.0; param.numel()];
            state.v = vec![0.0; param.numel()];
        }
        state.t += 1;
        let bc1 = 1.0 - self.beta1.powi(state.t as i32);
        let bc2 = 1.0 - self.beta2.powi(state.t as i32);
        for ((p, &g), (m, v)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(state.m.iter_mut().zip(state.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

fn check_shapes(param: &Tensor, grad: &Tensor) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::ShapeMismatch(format!(
            "optimizer step: param {:?} vs grad {:?}",
            param.shape(),
            grad.shape()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_example_step() {
        let mut w = Tensor::scalar(1.0);
        let g = Tensor::scalar(1.0);
        Sgd::new(0.1).step(&mut w, &g).unwrap();
        assert_eq!(w.data(), &[0.9]);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut w = Tensor::new(vec![0.5, -0.5], (1, 2)).unwrap();
        let g = Tensor::zeros((1, 2));
        Sgd::new(0.1).step(&mut w, &g).unwrap();
        assert_eq!(w.data(), &[0.5, -0.5]);

        let mut adam = Adam::new(0.1);
        adam.step(0, &mut w, &g).unwrap();
        assert_eq!(w.data(), &[0.5, -0.5]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // With g = 1 the bias-corrected first step is lr / (1 + eps).
        let lr = 0.001;
        let mut adam = Adam::new(lr);
        let mut w = Tensor::scalar(1.0);
        let g = Tensor::scalar(1.0);
        adam.step(0, &mut w, &g).unwrap();
        let moved = 1.0 - w.data()[0];
        assert!((moved - lr).abs() < 1e-6, "moved {moved}");
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let mut w = Tensor::zeros((1, 2));
        let g = Tensor::zeros((2, 1));
        assert!(Sgd::new(0.1).step(&mut w, &g).is_err());
        assert!(Adam::new(0.1).step(0, &mut w, &g).is_err());
    }
}
