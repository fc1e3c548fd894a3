use crate::error::{Error, Result};
use crate::model::encoder::Embedding;
use crate::model::layers::{dropout_mask, LinearLayer};
use crate::numerics::{ops_internal, Parameter, Precision, SeededRng, Tensor};

/// Attention-based MIL head configuration. The attention net is the plain
/// tanh variant `a_i = w·tanh(V f'_i)`; the gated variant multiplies in a
/// sigmoid branch and is off by default.
#[derive(Debug, Clone, PartialEq)]
pub struct AbmilConfig {
    pub in_dim: usize,
    pub hidden: usize,
    pub attn_dim: usize,
    pub n_classes: usize,
    pub dropout: f64,
    pub gated: bool,
}

impl AbmilConfig {
    pub fn new(in_dim: usize, n_classes: usize) -> Self {
        AbmilConfig {
            in_dim,
            hidden: 512,
            attn_dim: 128,
            n_classes,
            dropout: 0.25,
            gated: false,
        }
    }

    /// Smaller head for scaled-down encoders.
    pub fn desk(in_dim: usize, n_classes: usize) -> Self {
        AbmilConfig {
            in_dim,
            hidden: 128,
            attn_dim: 32,
            n_classes,
            dropout: 0.25,
            gated: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AbmilHead {
    pub cfg: AbmilConfig,
    pub input_proj: LinearLayer,
    pub attn_v: LinearLayer,
    pub attn_gate: Option<LinearLayer>,
    pub attn_w: LinearLayer,
    pub classifier: LinearLayer,
}

/// Activations for one bag forward, retained for backward.
#[derive(Debug)]
pub struct AbmilCache {
    bag: Tensor,
    proj_pre: Tensor,
    mask: Option<Vec<f64>>,
    fprime: Tensor,
    tanh_h: Tensor,
    gate_sig: Option<Tensor>,
    attn_in: Tensor,
    probs: Vec<f64>,
    z: Tensor,
}

pub struct AbmilOutput {
    pub logits: Tensor,
    /// Raw (pre-softmax) per-patch attention scores; these are what the
    /// scoring network is trained to reproduce.
    pub attention: Tensor,
}

impl AbmilHead {
    pub fn init(cfg: AbmilConfig, rng: &mut SeededRng) -> Result<Self> {
        if cfg.in_dim == 0 || cfg.hidden == 0 || cfg.attn_dim == 0 || cfg.n_classes < 2 {
            return Err(Error::Config(format!("bad ABMIL config {cfg:?}")));
        }
        Ok(AbmilHead {
            input_proj: LinearLayer::init(cfg.in_dim, cfg.hidden, rng),
            attn_v: LinearLayer::init(cfg.hidden, cfg.attn_dim, rng),
            attn_gate: if cfg.gated {
                Some(LinearLayer::init(cfg.hidden, cfg.attn_dim, rng))
            } else {
                None
            },
            attn_w: LinearLayer::init(cfg.attn_dim, 1, rng),
            classifier: LinearLayer::init(cfg.hidden, cfg.n_classes, rng),
            cfg,
        })
    }

    /// Stacks a bag of embeddings into the `[n × in_dim]` matrix the head
    /// consumes.
    pub fn stack_bag(&self, bag: &[Embedding]) -> Result<Tensor> {
        if bag.is_empty() {
            return Err(Error::invalid("ABMIL bag must not be empty".to_string()));
        }
        let d = self.cfg.in_dim;
        let mut out = Tensor::zeros(vec![bag.len(), d]);
        for (i, e) in bag.iter().enumerate() {
            if e.dim() != d {
                return Err(Error::shape(format!(
                    "bag embedding {i} has dim {}, head wants {d}",
                    e.dim()
                )));
            }
            out.row_mut(i).copy_from_slice(e.vector.data());
        }
        Ok(out)
    }

    /// Inference forward: no dropout, raw attention returned alongside logits.
    pub fn forward(&self, bag: &Tensor) -> Result<AbmilOutput> {
        let (out, _) = self.forward_inner(bag, None)?;
        Ok(out)
    }

    /// Training forward: dropout after the hidden projection, mask drawn from
    /// the caller's rng so runs are reproducible.
    pub fn forward_train(&self, bag: &Tensor, rng: &mut SeededRng) -> Result<(AbmilOutput, AbmilCache)> {
        let mask = dropout_mask(bag.rows() * self.cfg.hidden, self.cfg.dropout, rng);
        let (out, cache) = self.forward_inner(bag, Some(mask))?;
        Ok((out, cache))
    }

    /// Forward with cache but without dropout; used for gradient checks.
    pub fn forward_cached(&self, bag: &Tensor) -> Result<(AbmilOutput, AbmilCache)> {
        self.forward_inner(bag, None)
    }

    fn forward_inner(&self, bag: &Tensor, mask: Option<Vec<f64>>) -> Result<(AbmilOutput, AbmilCache)> {
        if bag.rows() == 0 {
            return Err(Error::invalid("ABMIL bag must not be empty".to_string()));
        }
        if bag.cols() != self.cfg.in_dim {
            return Err(Error::shape(format!(
                "bag dim {} vs head in_dim {}",
                bag.cols(),
                self.cfg.in_dim
            )));
        }
        let n = bag.rows();
        let proj_pre = self.input_proj.forward(bag, Precision::F64)?;
        // ReLU, then optional dropout
        let mut fprime = proj_pre.clone();
        for v in fprime.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        if let Some(m) = &mask {
            for (v, k) in fprime.data_mut().iter_mut().zip(m) {
                *v *= k;
            }
        }
        let attn_hidden = self.attn_v.forward(&fprime, Precision::F64)?;
        let mut tanh_h = attn_hidden.clone();
        for v in tanh_h.data_mut() {
            *v = libm::tanh(*v);
        }
        let (gate_sig, attn_in) = if let Some(gate) = &self.attn_gate {
            let g_pre = gate.forward(&fprime, Precision::F64)?;
            let mut g_sig = g_pre;
            for v in g_sig.data_mut() {
                *v = 1.0 / (1.0 + libm::exp(-*v));
            }
            let mut gated = tanh_h.clone();
            for (v, g) in gated.data_mut().iter_mut().zip(g_sig.data()) {
                *v *= g;
            }
            (Some(g_sig), gated)
        } else {
            (None, tanh_h.clone())
        };
        let scores = self.attn_w.forward(&attn_in, Precision::F64)?;
        let attention: Vec<f64> = (0..n).map(|i| scores.get2(i, 0)).collect();
        let mut probs = vec![0.0; n];
        ops_internal::softmax_slice(&attention, 1.0, &mut probs);
        // z = Σ p_i f'_i
        let mut z = vec![0.0; self.cfg.hidden];
        for i in 0..n {
            let row = fprime.row(i);
            let p = probs[i];
            for (acc, v) in z.iter_mut().zip(row) {
                *acc += p * v;
            }
        }
        let z = Tensor::new(vec![1, self.cfg.hidden], z)?;
        let logits = self.classifier.forward(&z, Precision::F64)?;
        let out = AbmilOutput {
            logits: logits.clone().reshape(vec![self.cfg.n_classes])?,
            attention: Tensor::new(vec![n], attention)?,
        };
        Ok((
            out,
            AbmilCache {
                bag: bag.clone(),
                proj_pre,
                mask,
                fprime,
                tanh_h,
                gate_sig,
                attn_in,
                probs,
                z,
            },
        ))
    }

    /// Accumulates parameter gradients given the gradient of a scalar loss
    /// w.r.t. the logits. The bag itself is a frozen input in every training
    /// stage, so no input gradient is produced.
    pub fn backward(&mut self, d_logits: &Tensor, cache: &AbmilCache) -> Result<()> {
        let n = cache.bag.rows();
        let hidden = self.cfg.hidden;
        let d_logits_m = Tensor::new(vec![1, self.cfg.n_classes], d_logits.data().to_vec())?;
        let d_z = self.classifier.backward(&d_logits_m, &cache.z)?;
        let d_z = d_z.data();

        // z = Σ p_i f'_i ⇒ dp_i = dz·f'_i and dF'_i += p_i dz
        let mut d_fprime = Tensor::zeros(vec![n, hidden]);
        let mut d_p = vec![0.0; n];
        for i in 0..n {
            let f = cache.fprime.row(i);
            d_p[i] = d_z.iter().zip(f).map(|(a, b)| a * b).sum();
            let dst = d_fprime.row_mut(i);
            for (acc, v) in dst.iter_mut().zip(d_z) {
                *acc += cache.probs[i] * v;
            }
        }
        // softmax backward to raw attention scores
        let inner: f64 = cache.probs.iter().zip(&d_p).map(|(p, d)| p * d).sum();
        let d_att: Vec<f64> = cache
            .probs
            .iter()
            .zip(&d_p)
            .map(|(p, d)| p * (d - inner))
            .collect();
        let d_scores = Tensor::new(vec![n, 1], d_att)?;
        let d_attn_in = self.attn_w.backward(&d_scores, &cache.attn_in)?;

        let d_tanh = if let (Some(gate), Some(g_sig)) =
            (self.attn_gate.as_mut(), cache.gate_sig.as_ref())
        {
            // attn_in = tanh_h ⊙ sigmoid(gate_pre)
            let mut d_gate_sig = d_attn_in.clone();
            for (v, t) in d_gate_sig.data_mut().iter_mut().zip(cache.tanh_h.data()) {
                *v *= t;
            }
            let mut d_gate_pre = d_gate_sig;
            for (v, s) in d_gate_pre.data_mut().iter_mut().zip(g_sig.data()) {
                *v *= s * (1.0 - s);
            }
            let d_f_gate = gate.backward(&d_gate_pre, &cache.fprime)?;
            for (acc, v) in d_fprime.data_mut().iter_mut().zip(d_f_gate.data()) {
                *acc += v;
            }
            let mut d_tanh = d_attn_in;
            for (v, s) in d_tanh.data_mut().iter_mut().zip(g_sig.data()) {
                *v *= s;
            }
            d_tanh
        } else {
            d_attn_in
        };

        let mut d_attn_hidden = d_tanh;
        for (v, t) in d_attn_hidden.data_mut().iter_mut().zip(cache.tanh_h.data()) {
            *v *= 1.0 - t * t;
        }
        let d_f_attn = self.attn_v.backward(&d_attn_hidden, &cache.fprime)?;
        for (acc, v) in d_fprime.data_mut().iter_mut().zip(d_f_attn.data()) {
            *acc += v;
        }

        // dropout then ReLU backward
        let mut d_proj = d_fprime;
        if let Some(mask) = &cache.mask {
            for (v, k) in d_proj.data_mut().iter_mut().zip(mask) {
                *v *= k;
            }
        }
        for (v, &pre) in d_proj.data_mut().iter_mut().zip(cache.proj_pre.data()) {
            if pre <= 0.0 {
                *v = 0.0;
            }
        }
        self.input_proj.backward(&d_proj, &cache.bag)?;
        Ok(())
    }

    pub fn named_params(&self) -> Vec<(String, &Parameter)> {
        let mut out = vec![
            ("input_proj.w".to_string(), &self.input_proj.w),
            ("input_proj.b".to_string(), &self.input_proj.b),
            ("attn_v.w".to_string(), &self.attn_v.w),
            ("attn_v.b".to_string(), &self.attn_v.b),
        ];
        if let Some(g) = &self.attn_gate {
            out.push(("attn_gate.w".to_string(), &g.w));
            out.push(("attn_gate.b".to_string(), &g.b));
        }
        out.push(("attn_w.w".to_string(), &self.attn_w.w));
        out.push(("attn_w.b".to_string(), &self.attn_w.b));
        out.push(("classifier.w".to_string(), &self.classifier.w));
        out.push(("classifier.b".to_string(), &self.classifier.b));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Parameter)> {
        let mut out: Vec<(String, &mut Parameter)> = vec![
            ("input_proj.w".to_string(), &mut self.input_proj.w),
            ("input_proj.b".to_string(), &mut self.input_proj.b),
            ("attn_v.w".to_string(), &mut self.attn_v.w),
            ("attn_v.b".to_string(), &mut self.attn_v.b),
        ];
        if let Some(g) = &mut self.attn_gate {
            out.push(("attn_gate.w".to_string(), &mut g.w));
            out.push(("attn_gate.b".to_string(), &mut g.b));
        }
        out.push(("attn_w.w".to_string(), &mut self.attn_w.w));
        out.push(("attn_w.b".to_string(), &mut self.attn_w.b));
        out.push(("classifier.w".to_string(), &mut self.classifier.w));
        out.push(("classifier.b".to_string(), &mut self.classifier.b));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.n_elements()).sum()
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }
}

/// Softmax of raw attention scores; exposed because aggregation weights and
/// selection probabilities are reported in several places.
pub fn attention_weights(raw: &Tensor) -> Tensor {
    let mut out = vec![0.0; raw.len()];
    ops_internal::softmax_slice(raw.data(), 1.0, &mut out);
    Tensor::new(vec![raw.len()], out).expect("finite softmax")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head(in_dim: usize, classes: usize, seed: u64) -> AbmilHead {
        let mut rng = SeededRng::new(seed);
        AbmilHead::init(
            AbmilConfig {
                in_dim,
                hidden: 16,
                attn_dim: 8,
                n_classes: classes,
                dropout: 0.25,
                gated: false,
            },
            &mut rng,
        )
        .unwrap()
    }

    fn random_bag(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = SeededRng::new(seed);
        Tensor::new(vec![n, d], (0..n * d).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn single_instance_attention_is_one() {
        let h = head(6, 2, 1);
        let bag = random_bag(1, 6, 2);
        let out = h.forward(&bag).unwrap();
        let w = attention_weights(&out.attention);
        assert_eq!(w.data(), &[1.0]);
    }

    #[test]
    fn duplicated_patch_gets_equal_weight() {
        let h = head(6, 2, 3);
        let mut bag = random_bag(3, 6, 4);
        let first = bag.row(0).to_vec();
        bag.row_mut(2).copy_from_slice(&first);
        let out = h.forward(&bag).unwrap();
        let w = attention_weights(&out.attention);
        assert!((w.data()[0] - w.data()[2]).abs() < 1e-15);
    }

    #[test]
    fn permutation_invariance_of_logits() {
        let h = head(6, 3, 5);
        let bag = random_bag(7, 6, 6);
        let out = h.forward(&bag).unwrap();
        // reverse the bag
        let mut rev = Tensor::zeros(vec![7, 6]);
        for i in 0..7 {
            rev.row_mut(i).copy_from_slice(bag.row(6 - i));
        }
        let out_rev = h.forward(&rev).unwrap();
        for (a, b) in out.logits.data().iter().zip(out_rev.logits.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
        for i in 0..7 {
            assert_eq!(out.attention.data()[i], out_rev.attention.data()[6 - i]);
        }
    }

    #[test]
    fn empty_bag_rejected() {
        let h = head(6, 2, 7);
        assert!(h.stack_bag(&[]).is_err());
    }

    #[test]
    fn attention_weights_sum_to_one() {
        let h = head(6, 2, 8);
        let bag = random_bag(9, 6, 9);
        let out = h.forward(&bag).unwrap();
        let s: f64 = attention_weights(&out.attention).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn backward_matches_finite_difference() {
        use crate::numerics::directional_grad_check;
        let h = head(5, 3, 10);
        let bag = random_bag(6, 5, 11);
        let target = 1usize;
        let loss = |head: &AbmilHead| -> crate::error::Result<f64> {
            let out = head.forward(&bag)?;
            let p = crate::numerics::softmax(&out.logits, 1.0)?;
            Ok(-libm::log(p.data()[target]))
        };
        for name in ["input_proj.w", "attn_v.w", "attn_w.w", "classifier.w", "attn_w.b"] {
            let point = h
                .named_params()
                .iter()
                .find(|(n, _)| n == name)
                .unwrap()
                .1
                .value
                .clone();
            let value = |w: &Tensor| {
                let mut hh = h.clone();
                for (n, p) in hh.named_params_mut() {
                    if n == name {
                        p.value = w.clone();
                    }
                }
                loss(&hh)
            };
            let grad = {
                let mut hh = h.clone();
                let (out, cache) = hh.forward_cached(&bag).unwrap();
                let p = crate::numerics::softmax(&out.logits, 1.0).unwrap();
                let mut d = p.data().to_vec();
                d[target] -= 1.0;
                hh.backward(&Tensor::new(vec![3], d).unwrap(), &cache).unwrap();
                hh.named_params()
                    .iter()
                    .find(|(n, _)| n == name)
                    .unwrap()
                    .1
                    .grad
                    .clone()
            };
            let mut rng = SeededRng::new(99);
            let dir = Tensor::new(
                point.shape().to_vec(),
                (0..point.len()).map(|_| rng.normal()).collect(),
            )
            .unwrap();
            let err = directional_grad_check(value, &grad, &point, &dir, 1e-5).unwrap();
            assert!(err < 1e-6, "{name}: {err}");
        }
    }
}
