use crate::error::{Error, Result};
use crate::model::layers::{dropout_mask, LinearLayer};
use crate::numerics::{ops_internal, Parameter, Precision, SeededRng, Tensor};

/// Scoring network architecture. Mirrors the ABMIL attention tail it is
/// trained to imitate: a hidden projection followed by a tanh attention pair
/// ending in one raw score per patch.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoringConfig {
    pub in_dim: usize,
    pub hidden: usize,
    pub attn_dim: usize,
    pub dropout: f64,
}

impl ScoringConfig {
    /// Full-scale defaults: 768 → 512 → 128 → 1 (0.46M parameters for the
    /// default encoder's 2×384 concat input).
    pub fn new(in_dim: usize) -> Self {
        ScoringConfig {
            in_dim,
            hidden: 512,
            attn_dim: 128,
            dropout: 0.25,
        }
    }

    pub fn desk(in_dim: usize) -> Self {
        ScoringConfig {
            in_dim,
            hidden: 128,
            attn_dim: 32,
            dropout: 0.25,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScoringNet {
    pub cfg: ScoringConfig,
    pub fc1: LinearLayer,
    pub attn_v: LinearLayer,
    pub attn_w: LinearLayer,
}

#[derive(Debug)]
pub struct ScoringCache {
    input: Tensor,
    h_pre: Tensor,
    mask: Option<Vec<f64>>,
    h_act: Tensor,
    tanh_h: Tensor,
}

impl ScoringNet {
    pub fn init(cfg: ScoringConfig, rng: &mut SeededRng) -> Result<Self> {
        if cfg.in_dim == 0 || cfg.hidden == 0 || cfg.attn_dim == 0 {
            return Err(Error::Config(format!("bad scoring config {cfg:?}")));
        }
        Ok(ScoringNet {
            fc1: LinearLayer::init(cfg.in_dim, cfg.hidden, rng),
            attn_v: LinearLayer::init(cfg.hidden, cfg.attn_dim, rng),
            attn_w: LinearLayer::init(cfg.attn_dim, 1, rng),
            cfg,
        })
    }

    /// One raw score for a single concat-shallow vector.
    pub fn forward(&self, h: &Tensor) -> Result<f64> {
        if h.len() != self.cfg.in_dim {
            return Err(Error::shape(format!(
                "scoring input dim {} vs config {}",
                h.len(),
                self.cfg.in_dim
            )));
        }
        let batch = Tensor::new(vec![1, self.cfg.in_dim], h.data().to_vec())?;
        Ok(self.forward_batch(&batch)?.data()[0])
    }

    /// Raw scores for a `[n × in_dim]` batch of concat-shallow vectors.
    pub fn forward_batch(&self, h: &Tensor) -> Result<Tensor> {
        let (scores, _) = self.forward_inner(h, None)?;
        Ok(scores)
    }

    pub fn forward_train(&self, h: &Tensor, rng: &mut SeededRng) -> Result<(Tensor, ScoringCache)> {
        let mask = dropout_mask(h.rows() * self.cfg.hidden, self.cfg.dropout, rng);
        self.forward_inner(h, Some(mask))
    }

    pub fn forward_cached(&self, h: &Tensor) -> Result<(Tensor, ScoringCache)> {
        self.forward_inner(h, None)
    }

    fn forward_inner(&self, h: &Tensor, mask: Option<Vec<f64>>) -> Result<(Tensor, ScoringCache)> {
        if h.cols() != self.cfg.in_dim {
            return Err(Error::shape(format!(
                "scoring batch dim {} vs config {}",
                h.cols(),
                self.cfg.in_dim
            )));
        }
        let h_pre = self.fc1.forward(h, Precision::F64)?;
        let mut h_act = h_pre.clone();
        for v in h_act.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        if let Some(m) = &mask {
            for (v, k) in h_act.data_mut().iter_mut().zip(m) {
                *v *= k;
            }
        }
        let attn_hidden = self.attn_v.forward(&h_act, Precision::F64)?;
        let mut tanh_h = attn_hidden.clone();
        for v in tanh_h.data_mut() {
            *v = libm::tanh(*v);
        }
        let scores = self.attn_w.forward(&tanh_h, Precision::F64)?;
        let n = h.rows();
        let flat: Vec<f64> = (0..n).map(|i| scores.get2(i, 0)).collect();
        Ok((
            Tensor::new(vec![n], flat)?,
            ScoringCache {
                input: h.clone(),
                h_pre,
                mask,
                h_act,
                tanh_h,
            },
        ))
    }

    /// Accumulates parameter gradients given dL/dscores for the batch.
    pub fn backward(&mut self, d_scores: &Tensor, cache: &ScoringCache) -> Result<()> {
        let n = cache.input.rows();
        let d_col = Tensor::new(vec![n, 1], d_scores.data().to_vec())?;
        let d_tanh = self.attn_w.backward(&d_col, &cache.tanh_h)?;
        let mut d_attn_hidden = d_tanh;
        for (v, t) in d_attn_hidden.data_mut().iter_mut().zip(cache.tanh_h.data()) {
            *v *= 1.0 - t * t;
        }
        let d_h_act = self.attn_v.backward(&d_attn_hidden, &cache.h_act)?;
        let mut d_h_pre = d_h_act;
        if let Some(mask) = &cache.mask {
            for (v, k) in d_h_pre.data_mut().iter_mut().zip(mask) {
                *v *= k;
            }
        }
        for (v, &pre) in d_h_pre.data_mut().iter_mut().zip(cache.h_pre.data()) {
            if pre <= 0.0 {
                *v = 0.0;
            }
        }
        self.fc1.backward(&d_h_pre, &cache.input)?;
        Ok(())
    }

    pub fn named_params(&self) -> Vec<(String, &Parameter)> {
        vec![
            ("fc1.w".to_string(), &self.fc1.w),
            ("fc1.b".to_string(), &self.fc1.b),
            ("attn_v.w".to_string(), &self.attn_v.w),
            ("attn_v.b".to_string(), &self.attn_v.b),
            ("attn_w.w".to_string(), &self.attn_w.w),
            ("attn_w.b".to_string(), &self.attn_w.b),
        ]
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Parameter)> {
        vec![
            ("fc1.w".to_string(), &mut self.fc1.w),
            ("fc1.b".to_string(), &mut self.fc1.b),
            ("attn_v.w".to_string(), &mut self.attn_v.w),
            ("attn_v.b".to_string(), &mut self.attn_v.b),
            ("attn_w.w".to_string(), &mut self.attn_w.w),
            ("attn_w.b".to_string(), &mut self.attn_w.b),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.n_elements()).sum()
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }

    /// Per-patch cost of one scoring forward in MACs-plus-bias-adds, mirrored
    /// by the flops module.
    pub fn flops_per_patch(cfg: &ScoringConfig) -> u64 {
        let l1 = (cfg.in_dim * cfg.hidden + cfg.hidden) as u64;
        let l2 = (cfg.hidden * cfg.attn_dim + cfg.attn_dim) as u64;
        let l3 = (cfg.attn_dim + 1) as u64;
        l1 + l2 + l3
    }
}

/// Single linear map from the student output dimension to one teacher's
/// embedding dimension.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub linear: LinearLayer,
}

impl ProjectionHead {
    pub fn init(student_dim: usize, teacher_dim: usize, rng: &mut SeededRng) -> Self {
        ProjectionHead {
            linear: LinearLayer::init(student_dim, teacher_dim, rng),
        }
    }

    pub fn forward(&self, emb: &Tensor) -> Result<Tensor> {
        let row = Tensor::new(vec![1, emb.len()], emb.data().to_vec())?;
        let out = self.linear.forward(&row, Precision::F64)?;
        let dim = out.cols();
        out.reshape(vec![dim])
    }

    pub fn teacher_dim(&self) -> usize {
        self.linear.out_dim()
    }
}

/// Soft cross-entropy between two raw score vectors after temperature
/// softmax. Minimum value is the entropy of `softmax(target/τ)`, attained
/// exactly when the softened distributions coincide.
pub fn soft_cross_entropy(target_raw: &[f64], predicted_raw: &[f64], temperature: f64) -> Result<f64> {
    if target_raw.len() != predicted_raw.len() || target_raw.is_empty() {
        return Err(Error::shape("soft_cross_entropy length mismatch".to_string()));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature must be positive".to_string()));
    }
    if !target_raw.iter().chain(predicted_raw).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("soft_cross_entropy input".to_string()));
    }
    let n = target_raw.len();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    ops_internal::softmax_slice(target_raw, temperature, &mut p);
    ops_internal::softmax_slice(predicted_raw, temperature, &mut q);
    // -Σ p_i log q_i, computed via log-sum-exp for stability
    let t = temperature;
    let max_q = predicted_raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = libm::log(
        predicted_raw
            .iter()
            .map(|&v| libm::exp((v - max_q) / t))
            .sum::<f64>(),
    );
    let _ = q;
    let mut loss = 0.0;
    for i in 0..n {
        let log_qi = (predicted_raw[i] - max_q) / t - lse;
        loss -= p[i] * log_qi;
    }
    Ok(loss)
}
