//! First-order adaptive-moment optimizer with decoupled weight decay and
//! global gradient-norm clipping.

use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 clip applied to the whole gradient vector; 0 disables.
    pub max_grad_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            max_grad_norm: 1.0,
        }
    }
}

pub struct AdamW {
    cfg: AdamWConfig,
    params: Vec<(String, Tensor)>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step_count: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: Vec<(String, Tensor)>) -> Self {
        let m = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        let v = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        AdamW {
            cfg,
            params,
            m,
            v,
            step_count: 0,
        }
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    /// Global gradient norm across all managed parameters (missing grads
    /// count as zero).
    pub fn grad_norm(&self) -> f64 {
        let mut sq = 0.0;
        for (_, p) in &self.params {
            if let Some(g) = p.grad() {
                sq += g.iter().map(|x| x * x).sum::<f64>();
            }
        }
        sq.sqrt()
    }

    /// One update from the accumulated gradients, then clears them.
    pub fn step(&mut self) {
        self.step_count += 1;
        let clip = if self.cfg.max_grad_norm > 0.0 {
            let norm = self.grad_norm();
            if norm > self.cfg.max_grad_norm {
                self.cfg.max_grad_norm / norm
            } else {
                1.0
            }
        } else {
            1.0
        };
        let bc1 = 1.0 - self.cfg.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.step_count as i32);
        for (i, (_, p)) in self.params.iter().enumerate() {
            let Some(grad) = p.grad() else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            p.apply_to_data(|data| {
                for j in 0..data.len() {
                    let g = grad[j] * clip;
                    m[j] = self.cfg.beta1 * m[j] + (1.0 - self.cfg.beta1) * g;
                    v[j] = self.cfg.beta2 * v[j] + (1.0 - self.cfg.beta2) * g * g;
                    let m_hat = m[j] / bc1;
                    let v_hat = v[j] / bc2;
                    data[j] -= self.cfg.lr * (m_hat / (v_hat.sqrt() + self.cfg.eps)
                        + self.cfg.weight_decay * data[j]);
                }
            });
            p.zero_grad();
        }
    }

    pub fn zero_grads(&self) {
        for (_, p) in &self.params {
            p.zero_grad();
        }
    }
}
