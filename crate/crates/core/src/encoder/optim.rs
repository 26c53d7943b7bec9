use super::config::OptimizerConfig;
use super::params::{Grads, ParamStore};

/// Linear warmup to the base rate followed by linear decay towards zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LinearSchedule {
    pub fn new(cfg: &OptimizerConfig, total_steps: usize) -> Self {
        LinearSchedule {
            base_lr: cfg.lr,
            warmup_steps: (cfg.warmup_fraction * total_steps as f64).ceil() as usize,
            total_steps,
        }
    }

    /// Rate for the zero-based optimizer step.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let left = self.total_steps.saturating_sub(step);
        self.base_lr * left as f64 / span as f64
    }
}

/// Adam with bias correction and decoupled weight decay. Decay applies to
/// matrices only, never to biases or normalization gains.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    decay: Vec<bool>,
    frozen: Vec<bool>,
    t: i32,
}

impl Adam {
    pub fn new(params: &ParamStore, cfg: &OptimizerConfig) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();
        Adam {
            cfg: cfg.clone(),
            m: zeros(),
            v: zeros(),
            decay: params.tensors().iter().map(|t| t.shape.len() >= 2).collect(),
            frozen: vec![false; params.len()],
            t: 0,
        }
    }

    /// Excludes a tensor from all updates.
    pub fn freeze(&mut self, id: usize) {
        self.frozen[id] = true;
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64) {
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (i, tensor) in params.tensors_mut().iter_mut().enumerate() {
            if self.frozen[i] {
                continue;
            }
            let wd = if self.decay[i] { c.weight_decay } else { 0.0 };
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads.0[i]);
            for j in 0..tensor.data.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps) + wd * tensor.data[j];
                tensor.data[j] -= lr * update;
            }
        }
    }
}

/// Rescales `grads` so their global norm is at most `max_norm` (0 = off).
pub fn clip_grad_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}
