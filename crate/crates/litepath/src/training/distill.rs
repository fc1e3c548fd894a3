//! Stage 1: multi-teacher ℓ1 feature distillation. The student embedding is
//! projected into each teacher's space and trained to match all three
//! teacher embeddings under a weighted mean-absolute-error objective.

use crate::error::{Error, Result};
use crate::model::{Encoder, EncoderConfig, ProjectionHead};
use crate::numerics::{Precision, SeededRng, Tensor};
use crate::training::optim::{clip_grad_norm, Adam, AdamConfig, CosineSchedule};
use crate::training::{TrainRecord, TrainSplit};

/// Stage-1 configuration. Optimization values follow the published recipe
/// (AdamW, weight decay 0.05, gradient clip 1.0, cosine schedule with linear
/// warmup, teacher weights 0.4/0.3/0.3); step and batch counts default to
/// desk scale.
#[derive(Debug, Clone)]
pub struct DistillConfig {
    pub teacher_weights: Vec<f64>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub warmup_init: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            teacher_weights: vec![0.4, 0.3, 0.3],
            steps: 400,
            batch_size: 8,
            lr: 3e-3,
            min_lr: 1e-5,
            warmup_steps: 20,
            warmup_init: 1e-6,
            weight_decay: 0.05,
            grad_clip: 1.0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.teacher_weights.is_empty() {
            return Err(Error::Config("no teacher weights".to_string()));
        }
        if self.teacher_weights.iter().any(|&w| w < 0.0) {
            return Err(Error::Config("teacher weights must be non-negative".to_string()));
        }
        let sum: f64 = self.teacher_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("teacher weights sum to {sum}, not 1")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".to_string()));
        }
        Ok(())
    }
}

/// Anything that can embed a patch; real runs use frozen random encoders,
/// tests also use exact linear maps.
pub trait Teacher {
    fn output_dim(&self) -> usize;
    fn embed(&self, image: &Tensor) -> Result<Tensor>;
}

/// A frozen randomly initialized encoder standing in for a large pretrained
/// teacher. Deterministic from its seed; weights never change.
#[derive(Debug, Clone)]
pub struct SyntheticTeacher {
    encoder: Encoder,
}

impl SyntheticTeacher {
    pub fn init(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        let mut rng = SeededRng::new(seed);
        let mut encoder = Encoder::init(cfg, &mut rng)?;
        for (_, p) in encoder.named_params_mut() {
            p.trainable = false;
        }
        Ok(SyntheticTeacher { encoder })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.encoder.cfg
    }
}

impl Teacher for SyntheticTeacher {
    fn output_dim(&self) -> usize {
        self.encoder.cfg.output_dim
    }

    fn embed(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.encoder.full_encode(image)?.vector)
    }
}

/// Teacher that is an exact linear function of the flattened input pixels;
/// used as a learnability oracle.
#[derive(Debug, Clone)]
pub struct LinearTeacher {
    pub weights: Tensor,
}

impl LinearTeacher {
    pub fn init(input_len: usize, output_dim: usize, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed);
        let scale = 1.0 / libm::sqrt(input_len as f64);
        let data = (0..input_len * output_dim)
            .map(|_| rng.normal() * scale)
            .collect();
        LinearTeacher {
            weights: Tensor::new(vec![input_len, output_dim], data).expect("finite init"),
        }
    }
}

impl Teacher for LinearTeacher {
    fn output_dim(&self) -> usize {
        self.weights.cols()
    }

    fn embed(&self, image: &Tensor) -> Result<Tensor> {
        let row = Tensor::new(vec![1, image.len()], image.data().to_vec())?;
        let out = crate::numerics::matmul_prec(&row, &self.weights, Precision::F64)?;
        let dim = out.cols();
        out.reshape(vec![dim])
    }
}

/// Weighted multi-teacher ℓ1 loss: each teacher's term is the mean absolute
/// error over that teacher's embedding coordinates (mean, not sum, so the
/// weights stay comparable across different teacher dimensions).
pub fn distill_loss(
    student_emb: &Tensor,
    teacher_embs: &[Tensor],
    heads: &[ProjectionHead],
    weights: &[f64],
) -> Result<f64> {
    if teacher_embs.len() != heads.len() || weights.len() != heads.len() {
        return Err(Error::shape(format!(
            "distill_loss: {} teachers, {} heads, {} weights",
            teacher_embs.len(),
            heads.len(),
            weights.len()
        )));
    }
    let mut loss = 0.0;
    for ((teacher, head), &w) in teacher_embs.iter().zip(heads).zip(weights) {
        if teacher.len() != head.teacher_dim() {
            return Err(Error::shape(format!(
                "teacher dim {} vs head dim {}",
                teacher.len(),
                head.teacher_dim()
            )));
        }
        let projected = head.forward(student_emb)?;
        let mae: f64 = projected
            .data()
            .iter()
            .zip(teacher.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / teacher.len() as f64;
        loss += w * mae;
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("distill_loss".to_string()));
    }
    Ok(loss)
}

/// Output of stage 1: the trained student and its projection heads, plus the
/// loss curve.
pub struct DistillOutput {
    pub student: Encoder,
    pub heads: Vec<ProjectionHead>,
    pub records: Vec<TrainRecord>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Runs stage-1 distillation over a dataset of patch images. Deterministic
/// given `seed`: batch sampling, initialization of the heads, and every
/// update replay identically.
pub fn run_distillation(
    dataset: &[Tensor],
    mut student: Encoder,
    teachers: &[&dyn Teacher],
    cfg: &DistillConfig,
    seed: u64,
) -> Result<DistillOutput> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("empty distillation dataset".to_string()));
    }
    if teachers.len() != cfg.teacher_weights.len() {
        return Err(Error::Config(format!(
            "{} teachers but {} weights",
            teachers.len(),
            cfg.teacher_weights.len()
        )));
    }
    let mut rng = SeededRng::new(seed);
    let mut heads: Vec<ProjectionHead> = teachers
        .iter()
        .map(|t| ProjectionHead::init(student.cfg.output_dim, t.output_dim(), &mut rng))
        .collect();

    // teacher targets never change; precompute per dataset item
    let mut targets: Vec<Vec<Tensor>> = Vec::with_capacity(dataset.len());
    for img in dataset {
        let embs = teachers
            .iter()
            .map(|t| t.embed(img))
            .collect::<Result<Vec<Tensor>>>()?;
        targets.push(embs);
    }

    let schedule = CosineSchedule::new(cfg.lr, cfg.min_lr, cfg.steps)
        .with_warmup(cfg.warmup_steps, cfg.warmup_init);
    let mut opt = {
        let mut params = student.named_params_mut();
        for (hi, h) in heads.iter_mut().enumerate() {
            params.push((format!("proj{hi}.w"), &mut h.linear.w));
            params.push((format!("proj{hi}.b"), &mut h.linear.b));
        }
        Adam::new(AdamConfig::adamw(cfg.weight_decay), &params)
    };

    let mut records = Vec::with_capacity(cfg.steps);
    let mut initial_loss = f64::NAN;
    let mut final_loss = f64::NAN;
    for step in 0..cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.next_below(dataset.len()))
            .collect();
        student.zero_grad();
        for h in heads.iter_mut() {
            h.linear.w.zero_grad();
            h.linear.b.zero_grad();
        }
        let mut batch_loss = 0.0;
        let inv_b = 1.0 / cfg.batch_size as f64;
        for &idx in &batch {
            let img = &dataset[idx];
            let (emb, cache) = student.full_encode_with_cache(img)?;
            let mut d_emb = Tensor::zeros(vec![student.cfg.output_dim]);
            for ((teacher_emb, head), &w) in
                targets[idx].iter().zip(heads.iter_mut()).zip(&cfg.teacher_weights)
            {
                let projected = head.forward(&emb.vector)?;
                let dim = teacher_emb.len() as f64;
                let mut mae = 0.0;
                let d_proj: Vec<f64> = projected
                    .data()
                    .iter()
                    .zip(teacher_emb.data())
                    .map(|(a, b)| {
                        let r = a - b;
                        mae += r.abs();
                        // subgradient of |r|, zero at the kink
                        w * inv_b * if r > 0.0 {
                            1.0
                        } else if r < 0.0 {
                            -1.0
                        } else {
                            0.0
                        } / dim
                    })
                    .collect();
                batch_loss += w * inv_b * mae / dim;
                let d_proj_m = Tensor::new(vec![1, teacher_emb.len()], d_proj)?;
                let emb_row = Tensor::new(vec![1, emb.vector.len()], emb.vector.data().to_vec())?;
                let d_emb_row = head.linear.backward(&d_proj_m, &emb_row)?;
                for (acc, v) in d_emb.data_mut().iter_mut().zip(d_emb_row.data()) {
                    *acc += v;
                }
            }
            student.backward(&d_emb, &cache)?;
        }
        if !batch_loss.is_finite() {
            return Err(Error::Diverged(format!(
                "distillation loss became non-finite at step {step}"
            )));
        }
        if step == 0 {
            initial_loss = batch_loss;
        }
        final_loss = batch_loss;
        records.push(TrainRecord {
            step: step as u64,
            split: TrainSplit::Train,
            loss: batch_loss,
        });
        let lr = schedule.lr_at(step);
        let mut params = student.named_params_mut();
        for (hi, h) in heads.iter_mut().enumerate() {
            params.push((format!("proj{hi}.w"), &mut h.linear.w));
            params.push((format!("proj{hi}.b"), &mut h.linear.b));
        }
        clip_grad_norm(&mut params, cfg.grad_clip);
        opt.step(&mut params, lr)?;
    }
    Ok(DistillOutput {
        student,
        heads,
        records,
        initial_loss,
        final_loss,
    })
}
