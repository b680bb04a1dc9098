use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments over a flat parameter vector, and the step count `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One bias-corrected update. `lr_of(i)` gives the learning rate of flat index `i`.
    pub fn update(
        &mut self,
        theta: &mut [f64],
        grad: &[f64],
        lr_of: impl Fn(usize) -> f64,
        cfg: &AdamConfig,
    ) -> Result<()> {
        if theta.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Shape {
                op: "adam",
                left: (1, theta.len()),
                right: (1, grad.len()),
            });
        }
        self.t += 1;
        let t = self.t as f64;
        let c1 = 1.0 - cfg.beta1.powf(t);
        let c2 = 1.0 - cfg.beta2.powf(t);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            theta[i] -= lr_of(i) * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig::default();
        let mut s = AdamState::new(1);
        let mut theta = [2.0];
        s.update(&mut theta, &[1.0], |_| 3e-5, &cfg).unwrap();
        assert!((theta[0] - (2.0 - 3e-5)).abs() < 1e-12);
        assert_eq!(theta[0], 2.0 - 3e-5 * 1.0 / (1.0 + 1e-8));
    }

    #[test]
    fn zero_gradient_and_zero_lr() {
        let cfg = AdamConfig::default();
        let mut s = AdamState::new(2);
        let mut theta = [1.0, -1.0];
        s.update(&mut theta, &[0.0, 0.0], |_| 0.1, &cfg).unwrap();
        assert_eq!(theta, [1.0, -1.0]);

        s.m = vec![0.5, 0.5];
        s.v = vec![0.25, 0.25];
        let mut frozen = [1.0, -1.0];
        s.update(&mut frozen, &[0.0, 0.0], |_| 0.0, &cfg).unwrap();
        assert_eq!(frozen, [1.0, -1.0]);
        assert_eq!(s.m, vec![0.45, 0.45]);
        assert_eq!(s.v, vec![0.25 * 0.999, 0.25 * 0.999]);
    }

    #[test]
    fn per_index_rates() {
        let cfg = AdamConfig::default();
        let mut s = AdamState::new(2);
        let mut theta = [0.0, 0.0];
        s.update(&mut theta, &[1.0, 1.0], |i| if i == 0 { 1e-5 } else { 1e-3 }, &cfg)
            .unwrap();
        assert!((theta[0] + 1e-5).abs() < 1e-12);
        assert!((theta[1] + 1e-3).abs() < 1e-10);
        assert!(s.update(&mut theta, &[1.0], |_| 1.0, &cfg).is_err());
    }
}
