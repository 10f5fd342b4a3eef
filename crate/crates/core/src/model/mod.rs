//! Road encoder and factorized motion decoder.
//!
//! The road encoder embeds road tokens and refines them with self-attention
//! over graph neighborhoods. The motion decoder stacks fusion blocks of
//! temporal attention over an agent's own past tokens, attention to other
//! agents at the same step and attention to nearby road tokens. All geometry
//! enters through relative-position embeddings of edge pairs, so outputs are
//! invariant to rigid transforms of the scene.

mod checkpoint;
mod config;
mod decode;
mod graph;
mod net;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CheckpointHeader, ParamEntry, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::ModelConfig;
pub use decode::{DecodeCache, StepLogits};
pub use graph::{rpe_features, AgentSeq, EdgeSet, MotionGraph, RoadInput, RPE_FEATURES};
pub use net::{
    block_layers, init_params, motion_decode, motion_targets, param_shapes, road_encode, road_ntp_logits, AttnKind, HEAD_MULT,
};

use crate::autodiff::{AdError, ParamStore, Scalar, Tape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config field {field}: {reason}")]
    Config { field: String, reason: String },
    #[error("{what} token {index} outside vocabulary of size {size}")]
    Vocab { what: String, index: usize, size: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AdError),
}

/// Configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<S: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
}

impl<S: Scalar> Model<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let params = init_params(&config, seed)?;
        Ok(Model { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<S>) -> Result<Self, ModelError> {
        config.validate()?;
        let expected = param_shapes(&config);
        let ok = expected.len() == params.len()
            && expected.iter().zip(params.iter()).all(|((n, r, c), (name, t))| n == name && (*r, *c) == t.shape());
        if !ok {
            return Err(ModelError::Checkpoint("parameters do not match the configuration".into()));
        }
        Ok(Model { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.element_count()
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model { config: self.config.clone(), params: self.params.cast() }
    }

    /// Road embeddings in inference mode.
    pub fn road_embeddings(&self, road: &RoadInput) -> Result<Tensor<S>, ModelError> {
        let mut t = Tape::new(&self.params, false, 0.0, 0);
        let v = road_encode(&mut t, &self.config, road, false)?;
        Ok(t.value(v).clone())
    }

    /// Full-sequence motion logits in inference mode, in graph node order.
    pub fn motion_logits(&self, agents: &[AgentSeq], road: &RoadInput) -> Result<(MotionGraph, Tensor<S>), ModelError> {
        let graph = MotionGraph::build(agents, &road.poses, self.config.agent_neighbor_radius);
        let mut t = Tape::new(&self.params, false, 0.0, 0);
        let r = road_encode(&mut t, &self.config, road, false)?;
        let v = motion_decode(&mut t, &self.config, agents, &graph, r)?;
        Ok((graph, t.value(v).clone()))
    }
}

#[cfg(test)]
mod tests;
