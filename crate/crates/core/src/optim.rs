use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates, one moment pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `params[i]` and `grads[i]` must keep the same shapes
    /// across calls.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) {
        assert_eq!(params.len(), grads.len());
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for (((w, &gv), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gv;
                *vi = beta2 * *vi + (1.0 - beta2) * gv * gv;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_each_weight_by_learning_rate() {
        // With bias correction the first update is lr · g / (|g| + eps).
        let mut p = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = Tensor::new(&[3], vec![0.3, -4.0, 1e-3]).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut [&mut p], &[&g]);
        let expect = [1.0 - 1e-3, -2.0 + 1e-3, 0.5 - 1e-3];
        for (a, b) in p.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        let target = [3.0, -1.0];
        let mut p = Tensor::zeros(&[2]);
        let mut adam = Adam::new(AdamConfig {
            learning_rate: 0.05,
            ..AdamConfig::default()
        });
        for _ in 0..2000 {
            let g = Tensor::from_fn(&[2], |i| 2.0 * (p.data()[i] - target[i]));
            adam.step(&mut [&mut p], &[&g]);
        }
        assert!((p.data()[0] - 3.0).abs() < 1e-3);
        assert!((p.data()[1] + 1.0).abs() < 1e-3);
        assert_eq!(adam.steps_taken(), 2000);
    }
}
