//! The splittable encoder, the ABMIL aggregator, the scoring network, and
//! the distillation projection heads, together with the shared `LPW1`
//! weights container.

mod abmil;
mod encoder;
pub(crate) mod layers;
mod scorer;
mod weights;

pub use abmil::{attention_weights, AbmilCache, AbmilConfig, AbmilHead, AbmilOutput};
pub use encoder::{
    concat_shallow, Block, Embedding, Encoder, EncoderCache, EncoderConfig, ShallowFeatures,
    IN_CHANNELS,
};
pub use layers::{dropout_mask, LayerNormLayer, LinearLayer, INIT_STD};
pub use scorer::{soft_cross_entropy, ProjectionHead, ScoringCache, ScoringConfig, ScoringNet};
pub use weights::{load_bundle, save_bundle, serialize_bundle, weights_hash};

use crate::error::{Error, Result};

/// Everything a pipeline needs, serialized together: the split encoder, the
/// MIL head, the selection scorer, and (during pretraining) the teacher
/// projection heads.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub encoder: Encoder,
    pub abmil: Option<AbmilHead>,
    pub scorer: Option<ScoringNet>,
    pub projections: Vec<ProjectionHead>,
}

impl ModelBundle {
    pub fn new(encoder: Encoder) -> Self {
        ModelBundle {
            encoder,
            abmil: None,
            scorer: None,
            projections: Vec::new(),
        }
    }

    pub fn abmil(&self) -> Result<&AbmilHead> {
        self.abmil
            .as_ref()
            .ok_or_else(|| Error::Config("bundle has no ABMIL head".to_string()))
    }

    pub fn scorer(&self) -> Result<&ScoringNet> {
        self.scorer
            .as_ref()
            .ok_or_else(|| Error::Config("bundle has no scoring network".to_string()))
    }
}
