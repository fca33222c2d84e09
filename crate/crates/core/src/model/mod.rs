//! The sampler network: transformer feature embedding, a `(C+1)`-way frame
//! classifier, and a temporal-attention video head trained on salient and
//! non-salient pooled representations.

mod checkpoint;
mod config;
mod network;

pub use checkpoint::{config_path, decode_checkpoint, encode_checkpoint, NSC_MAGIC};
pub use config::ModelConfig;
pub use network::{
    complementary_weights, fsm_loss, fsm_saliency, vgm_loss, vgm_saliency, ForwardNodes,
    ForwardOutput, LossNodes, SamplerModel,
};

use crate::error::Result;
use crate::numerics::{Array, Differentiable, NodeId, ParamStore, Tape};

/// One training example after pre-sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    /// `[T×D_l]`
    pub features: Array,
    /// `[T×(C+1)]`
    pub frame_targets: Array,
    pub label: usize,
}

/// Batch-mean objective, used for gradient verification.
pub struct BatchObjective {
    pub model: SamplerModel,
    pub batch: Vec<TrainItem>,
    /// Runs the forward pass in training mode with dropout masks drawn from
    /// this seed.
    pub dropout_seed: Option<u64>,
}

impl BatchObjective {
    pub fn batch_loss(&self, tape: &mut Tape) -> Result<NodeId> {
        let mut total: Option<NodeId> = None;
        for item in &self.batch {
            let mut rng = self
                .dropout_seed
                .map(|s| crate::rng::stream(s, crate::rng::DROPOUT, &[]));
            let fwd = self.model.forward(tape, &item.features, rng.as_mut())?;
            let l = self
                .model
                .total_loss(tape, &fwd, item.frame_targets.clone(), item.label)?
                .total;
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
        let total = total.unwrap_or_else(|| tape.constant(Array::scalar(0.0)));
        Ok(tape.scale(total, 1.0 / self.batch.len().max(1) as f64))
    }
}

impl Differentiable for BatchObjective {
    fn params(&self) -> &ParamStore {
        self.model.params()
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        self.model.params_mut()
    }

    fn is_deterministic(&self) -> bool {
        self.dropout_seed.is_none() || !self.model.config().has_dropout()
    }

    fn loss(&self, tape: &mut Tape) -> Result<NodeId> {
        self.batch_loss(tape)
    }
}
