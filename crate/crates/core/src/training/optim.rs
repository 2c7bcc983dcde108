use serde::{Deserialize, Serialize};

/// Adam with global gradient-norm clipping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Gradients with a larger global L2 norm are rescaled to this norm.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// Applies one update in place; returns the pre-clipping gradient norm.
    pub fn step(&mut self, params: &mut [f32], grad: &[f32]) -> f64 {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.m.len());
        let norm = grad.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
        let scale = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let step = (c.lr * bc2.sqrt() / bc1) as f32;
        let (b1, b2, eps) = (c.beta1 as f32, c.beta2 as f32, (c.eps * bc2.sqrt()) as f32);
        let scale = scale as f32;
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            let g = g * scale;
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= step * *m / (v.sqrt() + eps);
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut adam = Adam::new(AdamConfig { clip_norm: None, ..Default::default() }, 2);
        let mut p = [1.0f32, -1.0];
        adam.step(&mut p, &[0.5, -3.0]);
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-6);
        assert!((p[1] - (-1.0 + 1e-3)).abs() < 1e-6);
    }

    #[test]
    fn clipping_reports_raw_norm() {
        let mut adam = Adam::new(AdamConfig::default(), 2);
        let mut p = [0.0f32; 2];
        let n = adam.step(&mut p, &[3.0, 4.0]);
        assert!((n - 5.0).abs() < 1e-9);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut adam = Adam::new(AdamConfig { lr: 0.05, ..Default::default() }, 1);
        let mut p = [3.0f32];
        for _ in 0..500 {
            let g = [2.0 * (p[0] - 1.0)];
            adam.step(&mut p, &g);
        }
        assert!((p[0] - 1.0).abs() < 1e-2);
    }
}
