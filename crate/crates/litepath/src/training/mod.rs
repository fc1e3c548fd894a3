//! The three training stages: multi-teacher ℓ1 distillation (stage 1),
//! supervised ABMIL training (stage 2), and attention score matching
//! (stage 3). All loops are single-threaded and bit-reproducible from their
//! seeds.

mod abmil_train;
mod distill;
pub mod optim;
mod scorer_train;

pub use abmil_train::{cross_entropy, train_abmil, AbmilTrainOutput, LabeledBag};
pub use distill::{
    distill_loss, run_distillation, DistillConfig, DistillOutput, LinearTeacher, SyntheticTeacher,
    Teacher,
};
pub use scorer_train::{
    score_matching_grad, score_matching_loss, train_scorer, ScoredSlide, ScorerTrainOutput,
};

use crate::error::{Error, Result};

/// Shared stage-2/3 optimization settings: Adam at 2e-4 with 1e-5 weight
/// decay, one slide per step, cosine annealing, early stopping.
#[derive(Debug, Clone)]
pub struct SupervisedConfig {
    pub lr: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub patience: usize,
    /// Softmax temperature for score matching (stage 3 only).
    pub temperature: f64,
    pub seed: u64,
}

impl SupervisedConfig {
    pub fn stage2_default() -> Self {
        SupervisedConfig {
            lr: 2e-4,
            epochs: 50,
            weight_decay: 1e-5,
            patience: 10,
            temperature: 0.7,
            seed: 0,
        }
    }

    pub fn stage3_default() -> Self {
        SupervisedConfig {
            epochs: 100,
            ..SupervisedConfig::stage2_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".to_string()));
        }
        Ok(())
    }
}

/// One line of a training curve: (step, split, loss).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub step: u64,
    pub split: TrainSplit,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainSplit {
    Train,
    Val,
}

impl TrainSplit {
    pub fn label(self) -> &'static str {
        match self {
            TrainSplit::Train => "train",
            TrainSplit::Val => "val",
        }
    }
}

/// Serializes a training curve as line-delimited `step\tsplit\tloss` records.
pub fn write_train_log(
    path: &std::path::Path,
    records: &[TrainRecord],
    stamps: &[(String, String)],
) -> Result<()> {
    use std::io::Write;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = String::new();
    for (k, v) in stamps {
        out.push_str(&format!("# {k}={v}\n"));
    }
    out.push_str("step\tsplit\tloss\n");
    for r in records {
        out.push_str(&format!("{}\t{}\t{:.17e}\n", r.step, r.split.label(), r.loss));
    }
    std::fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn supervised_config_validation() {
        let mut cfg = SupervisedConfig::stage3_default();
        assert!(cfg.validate().is_ok());
        cfg.temperature = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn stage_defaults_match_recipe() {
        let s2 = SupervisedConfig::stage2_default();
        assert_eq!(s2.lr, 2e-4);
        assert_eq!(s2.epochs, 50);
        assert_eq!(s2.weight_decay, 1e-5);
        let s3 = SupervisedConfig::stage3_default();
        assert_eq!(s3.epochs, 100);
        assert_eq!(s3.temperature, 0.7);
    }
}
