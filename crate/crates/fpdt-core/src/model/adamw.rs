//! Adaptive-moment optimizer with decoupled weight decay, operating on the
//! flat parameter view.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AdamW {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(n: usize, weight_decay: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn restore(
        m: Vec<f64>,
        v: Vec<f64>,
        step: u64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    ) -> Result<Self> {
        if m.len() != v.len() {
            return Err(Error::ShapeMismatch("optimizer moment lengths differ".into()));
        }
        Ok(Self { m, v, step, beta1, beta2, eps, weight_decay })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update: `w -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * w)`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grads.len(), self.m.len(), "gradient count changed");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descends_a_quadratic() {
        // f(w) = (w - 3)^2; gradient 2(w - 3).
        let mut w = vec![0.0];
        let mut opt = AdamW::new(1, 0.0);
        for _ in 0..3000 {
            let g = vec![2.0 * (w[0] - 3.0)];
            opt.step(&mut w, &g, 0.01);
        }
        assert!((w[0] - 3.0).abs() < 1e-3, "w = {}", w[0]);
    }

    #[test]
    fn weight_decay_shrinks_params_at_zero_gradient() {
        let mut w = vec![1.0];
        let mut opt = AdamW::new(1, 0.1);
        opt.step(&mut w, &[0.0], 0.01);
        assert!(w[0] < 1.0);
        assert!((w[0] - (1.0 - 0.01 * 0.1)).abs() < 1e-12);
    }
}
