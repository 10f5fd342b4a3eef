//! Incremental decoding: one token step at a time, reusing cached keys and
//! values of earlier steps and road embeddings encoded once.

use super::graph::{AgentSeq, EdgeSet, MotionGraph, RoadInput};
use super::net::{attend, block_layers, embed_nodes, layer_prefix, motion_head, norm, project_kv, road_encode, AttnKind, GraphRpe};
use super::{Model, ModelError};
use crate::autodiff::{Scalar, Tape, Tensor};

/// Decoder state carried across steps of one scene.
#[derive(Clone, Debug)]
pub struct DecodeCache<S: Scalar> {
    pub graph: MotionGraph,
    /// Key/value bases of the road embeddings per fusion block with an
    /// agent-map layer.
    road_kv: Vec<Option<(Tensor<S>, Tensor<S>)>>,
    /// Key/value bases of every committed node per fusion block with a
    /// temporal layer; row `i` belongs to node `i`.
    temporal_kv: Vec<Option<(Tensor<S>, Tensor<S>)>>,
    /// Number of road encodings performed for this cache.
    pub map_encodes: usize,
}

/// Logits of the nodes added by one decode step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLogits<S> {
    pub step: usize,
    /// Agent index per row of `logits`.
    pub agents: Vec<usize>,
    pub logits: Tensor<S>,
}

/// Edges of queries `range` of `edges`, with sources shifted by `-shift`.
fn sub_edges(edges: &EdgeSet, range: std::ops::Range<usize>, shift: usize) -> EdgeSet {
    let mut out = EdgeSet::default();
    for q in range {
        out.push_query(edges.edges_of(q).map(|(s, f)| (s - shift, *f)));
    }
    out
}

fn gather<S: Scalar>(t: &Tensor<S>, idx: &[usize]) -> Tensor<S> {
    t.select_rows(idx)
}

fn append_rows<S: Scalar>(dst: &mut Tensor<S>, src: &Tensor<S>) {
    debug_assert_eq!(dst.cols, src.cols);
    dst.data.extend_from_slice(&src.data);
    dst.rows += src.rows;
}

impl<S: Scalar> Model<S> {
    /// Encodes the map and prepares an empty decoder state.
    pub fn start_decode(&self, agents: &[AgentSeq], road: &RoadInput) -> Result<DecodeCache<S>, ModelError> {
        let cfg = &self.config;
        let d = cfg.agent_dim;
        let mut t = Tape::new(&self.params, false, 0.0, 0);
        let emb = road_encode(&mut t, cfg, road, false)?;
        let mut road_kv = Vec::with_capacity(cfg.fusion_blocks);
        let mut temporal_kv = Vec::with_capacity(cfg.fusion_blocks);
        for k in 0..cfg.fusion_blocks {
            let layers = block_layers(cfg, k);
            road_kv.push(if layers.contains(&AttnKind::AgentMap) {
                let (kb, vb) = project_kv(&mut t, &layer_prefix(k, AttnKind::AgentMap), emb)?;
                Some((t.value(kb).clone(), t.value(vb).clone()))
            } else {
                None
            });
            temporal_kv.push(layers.contains(&AttnKind::Temporal).then(|| (Tensor::zeros(0, d), Tensor::zeros(0, d))));
        }
        Ok(DecodeCache {
            graph: MotionGraph::empty(agents, cfg.agent_neighbor_radius),
            road_kv,
            temporal_kv,
            map_encodes: 1,
        })
    }

    /// Decodes the next step of `agents`, whose tokens and poses must be
    /// committed up to that step. Earlier steps are read from the cache only.
    pub fn decode_step(&self, cache: &mut DecodeCache<S>, agents: &[AgentSeq], road: &RoadInput) -> Result<StepLogits<S>, ModelError> {
        let cfg = &self.config;
        let step = cache.graph.steps();
        cache.graph.push_step(agents, &road.poses);
        let range = cache.graph.step_nodes(step);
        let first = range.start;
        let g = &cache.graph;
        let nodes = &g.nodes[range.clone()];
        let temporal = sub_edges(&g.temporal, range.clone(), 0);
        let a2a = sub_edges(&g.a2a, range.clone(), first);
        let m2a = sub_edges(&g.m2a, range.clone(), 0);

        let mut t = Tape::new(&self.params, false, 0.0, 0);
        let mut x = embed_nodes(&mut t, cfg, agents, nodes)?;
        let rpe = GraphRpe::encode(&mut t, cfg, &temporal, &a2a, &m2a)?;
        let mut new_temporal = Vec::new();
        for k in 0..cfg.fusion_blocks {
            for kind in block_layers(cfg, k) {
                let prefix = layer_prefix(k, kind);
                let xn = norm(&mut t, &format!("{prefix}.ln1"), x)?;
                let (ke, ve, offsets) = match kind {
                    AttnKind::Temporal => {
                        let (kb, vb) = project_kv(&mut t, &prefix, xn)?;
                        new_temporal.push((k, t.value(kb).clone(), t.value(vb).clone()));
                        let (ck, cv) = cache.temporal_kv[k].as_ref().expect("temporal cache for temporal block");
                        debug_assert_eq!(ck.rows, first);
                        let ke = t.constant(gather(ck, &temporal.src))?;
                        let ve = t.constant(gather(cv, &temporal.src))?;
                        (ke, ve, temporal.offsets.clone())
                    }
                    AttnKind::AgentAgent => {
                        let (kb, vb) = project_kv(&mut t, &prefix, xn)?;
                        let ke = t.gather_rows(kb, a2a.src.clone())?;
                        let ve = t.gather_rows(vb, a2a.src.clone())?;
                        (ke, ve, a2a.offsets.clone())
                    }
                    AttnKind::AgentMap => {
                        let (rk, rv) = cache.road_kv[k].as_ref().expect("road cache for agent-map block");
                        let ke = t.constant(gather(rk, &m2a.src))?;
                        let ve = t.constant(gather(rv, &m2a.src))?;
                        (ke, ve, m2a.offsets.clone())
                    }
                };
                x = attend(&mut t, cfg, &prefix, x, xn, ke, ve, rpe.get(kind), offsets)?;
            }
        }
        let logits = motion_head(&mut t, x)?;
        let out = StepLogits { step, agents: nodes.iter().map(|n| n.0).collect(), logits: t.value(logits).clone() };
        for (k, kb, vb) in new_temporal {
            let (ck, cv) = cache.temporal_kv[k].as_mut().expect("temporal cache for temporal block");
            append_rows(ck, &kb);
            append_rows(cv, &vb);
        }
        Ok(out)
    }
}
