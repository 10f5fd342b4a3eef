use serde::{Deserialize, Serialize};

use super::ModelError;

/// Architecture hyperparameters.
///
/// The motion decoder is a stack of `fusion_blocks` blocks. Block `k`
/// contains, in order, a temporal layer if `k < temporal_layers`, an
/// agent-agent layer if `k < a2a_layers` and an agent-map layer if
/// `k < m2a_layers`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub road_layers: usize,
    pub road_dim: usize,
    /// Road self-attention neighborhood in graph hops along segment adjacency.
    pub road_attn_radius: usize,
    pub temporal_layers: usize,
    pub a2a_layers: usize,
    pub m2a_layers: usize,
    pub fusion_blocks: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub agent_dim: usize,
    /// Motion vocabulary size per agent class (vehicle, pedestrian, cyclist).
    pub motion_vocab_sizes: [usize; 3],
    pub road_vocab_size: usize,
    /// Agent-agent and agent-map neighborhood radius in meters.
    pub agent_neighbor_radius: f64,
    /// Feed-forward hidden width as a multiple of the model width.
    pub ffn_mult: usize,
    /// Embed road tokens through the road vocabulary; when false, raw segment
    /// descriptors go through a linear projection and no road head exists.
    pub road_vocab_tokens: bool,
}

impl ModelConfig {
    /// The 1M-parameter preset: 64-wide, 8 heads of 8, one road layer, one
    /// temporal and two agent-agent and agent-map layers.
    pub fn smart_1m() -> Self {
        ModelConfig {
            name: "smart-1m".into(),
            road_layers: 1,
            road_dim: 64,
            road_attn_radius: 10,
            temporal_layers: 1,
            a2a_layers: 2,
            m2a_layers: 2,
            fusion_blocks: 2,
            n_heads: 8,
            head_dim: 8,
            agent_dim: 64,
            motion_vocab_sizes: [512, 512, 512],
            road_vocab_size: 1024,
            agent_neighbor_radius: 50.0,
            ffn_mult: 4,
            road_vocab_tokens: true,
        }
    }

    /// Reduced preset for fast experiments and tests.
    pub fn smart_1m_tiny() -> Self {
        ModelConfig {
            name: "smart-1m-tiny".into(),
            road_layers: 1,
            road_dim: 32,
            temporal_layers: 1,
            a2a_layers: 1,
            m2a_layers: 1,
            fusion_blocks: 1,
            n_heads: 4,
            head_dim: 8,
            agent_dim: 32,
            ffn_mult: 2,
            ..Self::smart_1m()
        }
    }

    /// A width/depth family used by scaling sweeps.
    pub fn sized(name: &str, width: usize, heads: usize, blocks: usize) -> Self {
        ModelConfig {
            name: name.into(),
            road_dim: width,
            agent_dim: width,
            n_heads: heads,
            head_dim: width / heads.max(1),
            road_layers: 1,
            temporal_layers: blocks,
            a2a_layers: blocks,
            m2a_layers: blocks,
            fusion_blocks: blocks,
            ffn_mult: 2,
            ..Self::smart_1m()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "smart-1m" => Some(Self::smart_1m()),
            "smart-1m-tiny" => Some(Self::smart_1m_tiny()),
            _ => None,
        }
    }

    pub fn motion_vocab_total(&self) -> usize {
        self.motion_vocab_sizes.iter().sum()
    }

    /// Column offset of each class slice in the motion logit table.
    pub fn class_offsets(&self) -> [usize; 3] {
        let s = self.motion_vocab_sizes;
        [0, s[0], s[0] + s[1]]
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |field: &str, msg: &str| Err(ModelError::Config { field: field.to_string(), reason: msg.to_string() });
        for (field, v) in [
            ("road_layers", self.road_layers),
            ("road_dim", self.road_dim),
            ("temporal_layers", self.temporal_layers),
            ("a2a_layers", self.a2a_layers),
            ("m2a_layers", self.m2a_layers),
            ("fusion_blocks", self.fusion_blocks),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("agent_dim", self.agent_dim),
            ("ffn_mult", self.ffn_mult),
        ] {
            if v == 0 {
                return bad(field, "must be at least 1");
            }
        }
        if self.agent_dim != self.n_heads * self.head_dim {
            return bad("agent_dim", "must equal n_heads * head_dim");
        }
        if self.road_dim != self.agent_dim {
            return bad("road_dim", "must equal agent_dim");
        }
        for (field, v) in [("temporal_layers", self.temporal_layers), ("a2a_layers", self.a2a_layers), ("m2a_layers", self.m2a_layers)] {
            if v > self.fusion_blocks {
                return bad(field, "must not exceed fusion_blocks");
            }
        }
        if self.motion_vocab_sizes.iter().all(|&v| v == 0) {
            return bad("motion_vocab_sizes", "at least one class needs a vocabulary");
        }
        if self.road_vocab_tokens && self.road_vocab_size == 0 {
            return bad("road_vocab_size", "must be at least 1 when road vocabulary tokens are used");
        }
        if !(self.agent_neighbor_radius.is_finite() && self.agent_neighbor_radius > 0.0) {
            return bad("agent_neighbor_radius", "must be positive");
        }
        Ok(())
    }
}
