use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient added to the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        AdamState {
            config,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::ShapeMismatch {
                op: "adam",
                detail: format!("{} params, {} grads, {} moments", params.len(), grads.len(), self.m.len()),
            });
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape != g.shape || p.numel() != self.m[k].len() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    detail: format!("param {k}: {:?} vs grad {:?}", p.shape, g.shape),
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.data.len() {
                let gi = g.data[i] + c.weight_decay * p.data[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p.data[i] -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = vec![Tensor::vector(vec![0.3, -1.2])];
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut s = AdamState::new(cfg, &p);
        for _ in 0..5 {
            s.update(&mut p, &[Tensor::vector(vec![0.0, 0.0])]).unwrap();
        }
        assert_eq!(p[0].data, vec![0.3, -1.2]);
    }

    #[test]
    fn first_step_moves_by_the_learning_rate() {
        let mut p = vec![Tensor::scalar(2.0)];
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut s = AdamState::new(cfg, &p);
        s.update(&mut p, &[Tensor::scalar(1.0)]).unwrap();
        assert!((p[0].data[0] - (2.0 - 1e-4)).abs() < 1e-11);
    }

    #[test]
    fn matches_scalar_reference_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let init: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grads: Vec<Vec<f64>> = (0..10).map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let mut p = vec![Tensor::vector(init.clone())];
        let mut s = AdamState::new(cfg, &p);
        for g in &grads {
            s.update(&mut p, &[Tensor::vector(g.clone())]).unwrap();
        }
        for i in 0..4 {
            let (mut x, mut m, mut v) = (init[i], 0.0f64, 0.0f64);
            for (t, g) in grads.iter().enumerate() {
                let g = g[i] + 5e-4 * x;
                m = 0.9 * m + 0.1 * g;
                v = 0.999 * v + 0.001 * g * g;
                let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
                let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
                x -= 0.01 * mh / (vh.sqrt() + 1e-8);
            }
            assert!((p[0].data[i] - x).abs() < 1e-14);
        }
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut p = vec![Tensor::vector(vec![1.0, 2.0])];
        let mut s = AdamState::new(AdamConfig::default(), &p);
        assert!(s.update(&mut p, &[Tensor::vector(vec![1.0])]).is_err());
        assert!(s.update(&mut p, &[]).is_err());
    }
}
