use serde::{Deserialize, Serialize};

use crate::autodiff::{Grads, ParamStore, Tensor};

/// Cosine decay from `lr_start` at step 0 to zero at `max_steps`.
pub fn cosine_lr(lr_start: f64, step: usize, max_steps: usize) -> f64 {
    if max_steps == 0 {
        return 0.0;
    }
    let frac = (step.min(max_steps) as f64) / max_steps as f64;
    lr_start * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Adaptive moment estimation with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore<f32>) -> Self {
        let zeros = || params.iter().map(|(_, p)| Tensor::zeros(p.rows, p.cols)).collect();
        AdamW { config, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update: every parameter first shrinks by `1 − lr·weight_decay`,
    /// then moves by the bias-corrected moment ratio scaled by `lr`.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &Grads<f32>, lr: f64) {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let decay = (1.0 - lr * c.weight_decay) as f32;
        let step = (lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let eps = c.eps as f32;
        for (i, p) in params.values_mut().enumerate() {
            let g = &grads.tensors[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m.data[j] = b1 * m.data[j] + (1.0 - b1) * gj;
                v.data[j] = b2 * v.data[j] + (1.0 - b2) * gj * gj;
                let denom = (v.data[j] * inv_bc2).sqrt() + eps;
                p.data[j] = p.data[j] * decay - step * m.data[j] / denom;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(2e-4, 0, 1000), 2e-4);
        assert!(cosine_lr(2e-4, 1000, 1000).abs() < 1e-12);
        assert!((cosine_lr(2e-4, 500, 1000) - 1e-4).abs() < 1e-12);
        assert!(cosine_lr(2e-4, 400, 1000) > cosine_lr(2e-4, 401, 1000));
    }

    fn store(vals: &[f32]) -> ParamStore<f32> {
        let mut p = ParamStore::new();
        p.add("w", Tensor::from_vec(1, vals.len(), vals.to_vec())).unwrap();
        p
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut p = store(&[1.0, -2.5, 0.125, 3.0]);
        let before = p.clone();
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        let g = Grads::zeros_like(&p);
        let lr = 0.01;
        opt.step(&mut p, &g, lr);
        let factor = (1.0 - lr * 0.1) as f32;
        for (a, b) in p.iter().next().unwrap().1.data.iter().zip(&before.iter().next().unwrap().1.data) {
            assert_eq!(*a, b * factor);
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient_sign() {
        let mut p = store(&[0.0, 0.0]);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, &p);
        let mut g = Grads::zeros_like(&p);
        g.tensors[0].data = vec![3.0, -0.5];
        opt.step(&mut p, &g, 1e-3);
        let w = &p.iter().next().unwrap().1.data;
        assert!((w[0] + 1e-3).abs() < 1e-8);
        assert!((w[1] - 1e-3).abs() < 1e-8);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = store(&[5.0, -3.0]);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &p);
        for s in 0..2000 {
            let mut g = Grads::zeros_like(&p);
            g.tensors[0].data = p.iter().next().unwrap().1.data.iter().map(|x| 2.0 * x).collect();
            opt.step(&mut p, &g, cosine_lr(0.1, s, 2000));
        }
        assert!(p.iter().next().unwrap().1.data.iter().all(|x| x.abs() < 1e-2));
    }
}
