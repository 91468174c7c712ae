use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self { learning_rate, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 2e-4, beta1: 0.9, beta2: 0.999, eps: 0.0 }
    }
}

/// Adam with bias-corrected moment estimates. With `eps = 0` (the default)
/// the update is invariant to a positive rescaling of the loss.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, num_params: usize) -> Self {
        Self { cfg, m: vec![0.0; num_params], v: vec![0.0; num_params], steps: 0 }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.steps += 1;
        let AdamConfig { learning_rate, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.steps);
        let bc2 = 1.0 - beta2.powi(self.steps);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            let denom = v_hat.sqrt() + eps;
            // A coordinate that has only seen zero gradients stays put.
            if denom > 0.0 {
                *p -= learning_rate * m_hat / denom;
            }
        }
    }
}
