//! Stage 3: attention score matching. With the encoder and ABMIL frozen, a
//! scoring network learns to predict the MIL head's raw attention scores
//! from shallow features, matched through a temperature-softened soft
//! cross-entropy, one slide per step.

use crate::error::{Error, Result};
use crate::model::{soft_cross_entropy, ScoringConfig, ScoringNet};
use crate::numerics::{ops_internal, SeededRng, Tensor};
use crate::training::optim::{Adam, AdamConfig, CosineSchedule};
use crate::training::{SupervisedConfig, TrainRecord, TrainSplit};

/// One scorer-training slide: per-patch concat-shallow features and the
/// frozen ABMIL raw attention scores they should reproduce.
#[derive(Debug, Clone)]
pub struct ScoredSlide {
    pub slide_id: String,
    pub features: Tensor,
    pub targets: Vec<f64>,
}

/// `L = −Σ p log p̂` with `p = softmax(A/τ)` and `p̂ = softmax(Â/τ)`.
/// Bounded below by the entropy of `p`, attained iff the softened
/// distributions coincide.
pub fn score_matching_loss(true_scores: &[f64], predicted: &[f64], temperature: f64) -> Result<f64> {
    soft_cross_entropy(true_scores, predicted, temperature)
}

/// Gradient of the loss w.r.t. the predicted raw scores: `(p̂ − p)/τ`.
pub fn score_matching_grad(true_scores: &[f64], predicted: &[f64], temperature: f64) -> Result<Tensor> {
    let n = true_scores.len();
    if predicted.len() != n || n == 0 {
        return Err(Error::shape("score_matching_grad length mismatch".to_string()));
    }
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    ops_internal::softmax_slice(true_scores, temperature, &mut p);
    ops_internal::softmax_slice(predicted, temperature, &mut q);
    let d: Vec<f64> = q
        .iter()
        .zip(&p)
        .map(|(qi, pi)| (qi - pi) / temperature)
        .collect();
    Tensor::new(vec![n], d)
}

pub struct ScorerTrainOutput {
    pub scorer: ScoringNet,
    pub records: Vec<TrainRecord>,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    /// Slides with a single patch: their softened target distribution is
    /// degenerate, the loss is exactly zero, and they contribute no gradient.
    pub degenerate_slides: Vec<String>,
}

fn validation_loss(scorer: &ScoringNet, val: &[ScoredSlide], temperature: f64) -> Result<f64> {
    let mut total = 0.0;
    for s in val {
        let predicted = scorer.forward_batch(&s.features)?;
        total += score_matching_loss(&s.targets, predicted.data(), temperature)?;
    }
    Ok(total / val.len() as f64)
}

/// Trains the scoring network against frozen attention targets; returns the
/// best-validation checkpoint.
pub fn train_scorer(
    train: &[ScoredSlide],
    val: &[ScoredSlide],
    scoring_cfg: ScoringConfig,
    cfg: &SupervisedConfig,
) -> Result<ScorerTrainOutput> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("stage 3 needs non-empty train and val sets".to_string()));
    }
    for s in train.iter().chain(val) {
        if s.features.rows() != s.targets.len() {
            return Err(Error::shape(format!(
                "slide {}: {} feature rows vs {} targets",
                s.slide_id,
                s.features.rows(),
                s.targets.len()
            )));
        }
    }
    let mut degenerate: Vec<String> = train
        .iter()
        .filter(|s| s.targets.len() == 1)
        .map(|s| s.slide_id.clone())
        .collect();
    degenerate.sort();

    let mut rng = SeededRng::new(cfg.seed);
    let mut scorer = ScoringNet::init(scoring_cfg, &mut rng)?;
    let schedule = CosineSchedule::new(cfg.lr, 0.0, cfg.epochs);
    let mut opt = Adam::new(AdamConfig::adam(cfg.weight_decay), &scorer.named_params_mut());

    let mut records = Vec::new();
    let mut best: Option<(f64, usize, ScoringNet)> = None;
    let mut since_best = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let lr = schedule.lr_at(epoch);
        let mut train_loss = 0.0;
        for &i in &order {
            let slide = &train[i];
            scorer.zero_grad();
            let (predicted, cache) = scorer.forward_train(&slide.features, &mut rng)?;
            let loss = score_matching_loss(&slide.targets, predicted.data(), cfg.temperature)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("stage 3 loss non-finite at epoch {epoch}")));
            }
            train_loss += loss;
            let d = score_matching_grad(&slide.targets, predicted.data(), cfg.temperature)?;
            scorer.backward(&d, &cache)?;
            opt.step(&mut scorer.named_params_mut(), lr)?;
        }
        train_loss /= train.len() as f64;
        let val_loss = validation_loss(&scorer, val, cfg.temperature)?;
        records.push(TrainRecord {
            step: epoch as u64,
            split: TrainSplit::Train,
            loss: train_loss,
        });
        records.push(TrainRecord {
            step: epoch as u64,
            split: TrainSplit::Val,
            loss: val_loss,
        });
        let improved = best.as_ref().map(|(b, _, _)| val_loss < *b).unwrap_or(true);
        if improved {
            best = Some((val_loss, epoch, scorer.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (best_val_loss, best_epoch, scorer) = best.expect("at least one epoch ran");
    Ok(ScorerTrainOutput {
        scorer,
        records,
        best_val_loss,
        best_epoch,
        degenerate_slides: degenerate,
    })
}
