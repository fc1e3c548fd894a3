use crate::error::{Error, Result};
use crate::numerics::{Parameter, Tensor};

/// Adam with either coupled (classic L2-in-gradient) or decoupled (AdamW)
/// weight decay. β₁=0.9, β₂=0.999, ε=1e-8 unless overridden.
#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decoupled: bool,
}

impl AdamConfig {
    pub fn adam(weight_decay: f64) -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            decoupled: false,
        }
    }

    pub fn adamw(weight_decay: f64) -> Self {
        AdamConfig {
            decoupled: true,
            ..AdamConfig::adam(weight_decay)
        }
    }
}

#[derive(Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &[(String, &mut Parameter)]) -> Self {
        let m = params
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape().to_vec()))
            .collect();
        let v = params
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape().to_vec()))
            .collect();
        Adam { cfg, m, v, t: 0 }
    }

    /// One update over the same parameter list (same order) the optimizer was
    /// built with. Gradients are consumed as-is; call after accumulation and
    /// clipping.
    pub fn step(&mut self, params: &mut [(String, &mut Parameter)], lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "optimizer built for {} tensors, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - libm::pow(b1, self.t as f64);
        let bc2 = 1.0 - libm::pow(b2, self.t as f64);
        for (i, (_, p)) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let wd = self.cfg.weight_decay;
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let values = p.value.data_mut();
            let grads = p.grad.data();
            for j in 0..values.len() {
                let mut g = grads[j];
                if !self.cfg.decoupled && wd != 0.0 {
                    g += wd * values[j];
                }
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                let mut delta = lr * m_hat / (libm::sqrt(v_hat) + self.cfg.eps);
                if self.cfg.decoupled && wd != 0.0 {
                    delta += lr * wd * values[j];
                }
                values[j] -= delta;
            }
        }
        for (_, p) in params.iter() {
            p.value.check_finite("optimizer step")?;
        }
        Ok(())
    }
}

/// Linear warmup into cosine annealing.
#[derive(Debug, Clone)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_init: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, min_lr: f64, total_steps: usize) -> Self {
        CosineSchedule {
            base_lr,
            min_lr,
            warmup_init: base_lr,
            warmup_steps: 0,
            total_steps,
        }
    }

    pub fn with_warmup(mut self, warmup_steps: usize, warmup_init: f64) -> Self {
        self.warmup_steps = warmup_steps;
        self.warmup_init = warmup_init;
        self
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            let frac = step as f64 / self.warmup_steps as f64;
            return self.warmup_init + (self.base_lr - self.warmup_init) * frac;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min_lr
            + 0.5 * (self.base_lr - self.min_lr) * (1.0 + libm::cos(std::f64::consts::PI * progress))
    }
}

/// Scales all gradients so the global L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm(params: &mut [(String, &mut Parameter)], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for (_, p) in params.iter() {
        for g in p.grad.data() {
            sq += g * g;
        }
    }
    let norm = libm::sqrt(sq);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for (_, p) in params.iter_mut() {
            for g in p.grad.data_mut() {
                *g *= scale;
            }
        }
    }
    norm
}
