//! Stage 2: supervised ABMIL training on cached full-path embeddings, one
//! slide per optimization step, cross-entropy objective, early stopping on
//! validation loss.

use crate::error::{Error, Result};
use crate::model::{AbmilConfig, AbmilHead};
use crate::numerics::{ops_internal, SeededRng, Tensor};
use crate::training::optim::{Adam, AdamConfig, CosineSchedule};
use crate::training::{SupervisedConfig, TrainRecord, TrainSplit};

/// One training slide: the bag of patch embeddings and its class label.
#[derive(Debug, Clone)]
pub struct LabeledBag {
    pub slide_id: String,
    pub embeddings: Tensor,
    pub label: usize,
}

/// Cross-entropy of softmax(logits) against an index label, with gradient.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    let n = logits.len();
    if label >= n {
        return Err(Error::invalid(format!("label {label} for {n} logits")));
    }
    let mut probs = vec![0.0; n];
    ops_internal::softmax_slice(logits.data(), 1.0, &mut probs);
    let loss = -libm::log(probs[label].max(1e-300));
    let mut grad = probs;
    grad[label] -= 1.0;
    Ok((loss, Tensor::new(vec![n], grad)?))
}

pub struct AbmilTrainOutput {
    pub head: AbmilHead,
    pub records: Vec<TrainRecord>,
    pub best_val_loss: f64,
    pub best_epoch: usize,
}

fn validation_loss(head: &AbmilHead, val: &[LabeledBag]) -> Result<f64> {
    let mut total = 0.0;
    for bag in val {
        let out = head.forward(&bag.embeddings)?;
        total += cross_entropy(&out.logits, bag.label)?.0;
    }
    Ok(total / val.len() as f64)
}

/// Trains an ABMIL head and returns the best-validation checkpoint. Requires
/// at least two classes in the training cohort; stops after
/// `cfg.patience` epochs without validation improvement.
pub fn train_abmil(
    train: &[LabeledBag],
    val: &[LabeledBag],
    abmil_cfg: AbmilConfig,
    cfg: &SupervisedConfig,
) -> Result<AbmilTrainOutput> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("stage 2 needs non-empty train and val sets".to_string()));
    }
    let mut classes: Vec<usize> = train.iter().map(|b| b.label).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Cohort(format!(
            "stage 2 needs >= 2 classes in train, found {classes:?}"
        )));
    }
    if classes.iter().any(|&c| c >= abmil_cfg.n_classes) {
        return Err(Error::Cohort("label outside configured class count".to_string()));
    }

    let mut rng = SeededRng::new(cfg.seed);
    let mut head = AbmilHead::init(abmil_cfg, &mut rng)?;
    let schedule = CosineSchedule::new(cfg.lr, 0.0, cfg.epochs);
    let mut opt = Adam::new(AdamConfig::adam(cfg.weight_decay), &head.named_params_mut());

    let mut records = Vec::new();
    let mut best: Option<(f64, usize, AbmilHead)> = None;
    let mut since_best = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let lr = schedule.lr_at(epoch);
        let mut train_loss = 0.0;
        for &i in &order {
            let bag = &train[i];
            head.zero_grad();
            let (out, cache) = head.forward_train(&bag.embeddings, &mut rng)?;
            let (loss, d_logits) = cross_entropy(&out.logits, bag.label)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("stage 2 loss non-finite at epoch {epoch}")));
            }
            train_loss += loss;
            head.backward(&d_logits, &cache)?;
            opt.step(&mut head.named_params_mut(), lr)?;
        }
        train_loss /= train.len() as f64;
        let val_loss = validation_loss(&head, val)?;
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
            best = Some((val_loss, epoch, head.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (best_val_loss, best_epoch, head) = best.expect("at least one epoch ran");
    Ok(AbmilTrainOutput {
        head,
        records,
        best_val_loss,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics;

    /// Bags whose mean carries the label signal.
    fn synthetic_bags(n: usize, dim: usize, signal: f64, seed: u64) -> Vec<LabeledBag> {
        let mut rng = SeededRng::new(seed);
        (0..n)
            .map(|i| {
                let label = rng.next_below(2);
                let n_patches = 4 + rng.next_below(12);
                let mut data = Vec::with_capacity(n_patches * dim);
                for _ in 0..n_patches {
                    for d in 0..dim {
                        let shift = if d < 3 { signal * label as f64 } else { 0.0 };
                        data.push(rng.normal() + shift);
                    }
                }
                LabeledBag {
                    slide_id: format!("s{i}"),
                    embeddings: Tensor::new(vec![n_patches, dim], data).unwrap(),
                    label,
                }
            })
            .collect()
    }

    fn auc_of(head: &AbmilHead, bags: &[LabeledBag]) -> f64 {
        let labels: Vec<usize> = bags.iter().map(|b| b.label).collect();
        let mut flat = Vec::new();
        for b in bags {
            let out = head.forward(&b.embeddings).unwrap();
            let p = crate::model::attention_weights(&out.logits);
            flat.extend_from_slice(p.data());
        }
        let scores = Tensor::new(vec![bags.len(), 2], flat).unwrap();
        metrics::macro_auc(&labels, &scores).unwrap()
    }

    fn quick_cfg(seed: u64) -> SupervisedConfig {
        SupervisedConfig {
            epochs: 30,
            seed,
            ..SupervisedConfig::stage2_default()
        }
    }

    #[test]
    fn separable_bags_reach_high_auc() {
        let bags = synthetic_bags(60, 8, 2.0, 1);
        let (train, rest) = bags.split_at(40);
        let (val, test) = rest.split_at(10);
        let out = train_abmil(train, val, AbmilConfig::desk(8, 2), &quick_cfg(3)).unwrap();
        let auc = auc_of(&out.head, test);
        assert!(auc > 0.95, "auc {auc}");
    }

    #[test]
    fn shuffled_labels_stay_near_chance() {
        let mut bags = synthetic_bags(60, 8, 2.0, 2);
        // derangement of labels kills the signal
        let labels: Vec<usize> = bags.iter().map(|b| b.label).collect();
        let mut rng = SeededRng::new(77);
        let mut shuffled = labels.clone();
        rng.shuffle(&mut shuffled);
        for (b, l) in bags.iter_mut().zip(shuffled) {
            b.label = l;
        }
        let (train, rest) = bags.split_at(40);
        let (val, test) = rest.split_at(10);
        let out = train_abmil(train, val, AbmilConfig::desk(8, 2), &quick_cfg(5)).unwrap();
        let auc = auc_of(&out.head, test);
        assert!((auc - 0.5).abs() <= 0.25, "auc {auc}");
    }

    #[test]
    fn single_class_train_rejected() {
        let mut bags = synthetic_bags(20, 4, 1.0, 3);
        for b in bags.iter_mut() {
            b.label = 0;
        }
        let (train, val) = bags.split_at(15);
        let r = train_abmil(train, val, AbmilConfig::desk(4, 2), &quick_cfg(1));
        assert!(r.is_err());
    }

    #[test]
    fn best_checkpoint_has_min_val_loss() {
        let bags = synthetic_bags(40, 6, 1.0, 4);
        let (train, val) = bags.split_at(30);
        let out = train_abmil(train, val, AbmilConfig::desk(6, 2), &quick_cfg(9)).unwrap();
        let observed_min = out
            .records
            .iter()
            .filter(|r| r.split == TrainSplit::Val)
            .map(|r| r.loss)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_val_loss, observed_min);
        let recomputed = validation_loss(&out.head, val).unwrap();
        assert!((recomputed - out.best_val_loss).abs() < 1e-12);
    }

    #[test]
    fn training_is_deterministic() {
        let bags = synthetic_bags(30, 6, 1.5, 5);
        let (train, val) = bags.split_at(22);
        let a = train_abmil(train, val, AbmilConfig::desk(6, 2), &quick_cfg(11)).unwrap();
        let b = train_abmil(train, val, AbmilConfig::desk(6, 2), &quick_cfg(11)).unwrap();
        for ((_, pa), (_, pb)) in a
            .head
            .named_params()
            .iter()
            .zip(b.head.named_params().iter())
        {
            assert_eq!(pa.value.data(), pb.value.data());
        }
    }

    #[test]
    fn full_step_gradient_checks_at_init() {
        use crate::numerics::directional_grad_check;
        let bags = synthetic_bags(4, 5, 1.0, 6);
        let mut rng = SeededRng::new(13);
        let head = AbmilHead::init(AbmilConfig::desk(5, 2), &mut rng).unwrap();
        let bag = &bags[0];
        // loss over one bag as a function of each parameter tensor
        for name in ["input_proj.w", "attn_v.w", "attn_w.w", "classifier.w"] {
            let point = head
                .named_params()
                .iter()
                .find(|(n, _)| n == name)
                .unwrap()
                .1
                .value
                .clone();
            let value = |w: &Tensor| {
                let mut h = head.clone();
                for (n, p) in h.named_params_mut() {
                    if n == name {
                        p.value = w.clone();
                    }
                }
                let out = h.forward(&bag.embeddings)?;
                Ok(cross_entropy(&out.logits, bag.label)?.0)
            };
            let grad = {
                let mut h = head.clone();
                let (out, cache) = h.forward_cached(&bag.embeddings).unwrap();
                let (_, d) = cross_entropy(&out.logits, bag.label).unwrap();
                h.backward(&d, &cache).unwrap();
                h.named_params()
                    .iter()
                    .find(|(n, _)| n == name)
                    .unwrap()
                    .1
                    .grad
                    .clone()
            };
            let mut dr = SeededRng::new(21);
            let dir = Tensor::new(
                point.shape().to_vec(),
                (0..point.len()).map(|_| dr.normal()).collect(),
            )
            .unwrap();
            let err = directional_grad_check(value, &grad, &point, &dir, 1e-5).unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}
