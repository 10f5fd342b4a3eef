//! Parameter layout and forward computation of the road encoder and the
//! motion decoder.

use rand_distr::{Distribution, Normal};

use super::graph::{AgentSeq, EdgeSet, MotionGraph, RoadInput, RPE_FEATURES};
use super::{ModelConfig, ModelError};
use crate::autodiff::{ParamStore, Scalar, Tape, Tensor, Var};
use crate::geom::PolylineKind;
use crate::seed::rng_for;

const INIT_STD: f64 = 0.02;
/// Hidden width of the prediction heads as a multiple of the model width.
pub const HEAD_MULT: usize = 2;
const SHAPE_FEATURES: usize = 2;
const DESCRIPTOR_SCALE: f64 = 0.2;

/// Attention types of the decoder, in fusion-block order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnKind {
    Temporal,
    AgentAgent,
    AgentMap,
}

impl AttnKind {
    pub fn name(self) -> &'static str {
        match self {
            AttnKind::Temporal => "temporal",
            AttnKind::AgentAgent => "a2a",
            AttnKind::AgentMap => "m2a",
        }
    }
}

/// Attention layers of fusion block `k` in execution order.
pub fn block_layers(cfg: &ModelConfig, k: usize) -> Vec<AttnKind> {
    let mut v = Vec::new();
    if k < cfg.temporal_layers {
        v.push(AttnKind::Temporal);
    }
    if k < cfg.a2a_layers {
        v.push(AttnKind::AgentAgent);
    }
    if k < cfg.m2a_layers {
        v.push(AttnKind::AgentMap);
    }
    v
}

pub(crate) fn layer_prefix(k: usize, kind: AttnKind) -> String {
    format!("motion.block{k}.{}", kind.name())
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Parameter names, shapes and initializers in canonical order.
fn layout(cfg: &ModelConfig) -> Vec<(String, usize, usize, Init)> {
    let d = cfg.agent_dim;
    let h = d * cfg.ffn_mult;
    let mut v: Vec<(String, usize, usize, Init)> = Vec::new();
    let mut push = |name: String, r: usize, c: usize, init: Init| v.push((name, r, c, init));
    let linear = |push: &mut dyn FnMut(String, usize, usize, Init), p: &str, i: usize, o: usize| {
        push(format!("{p}.w"), i, o, Init::Normal);
        push(format!("{p}.b"), 1, o, Init::Zeros);
    };
    let norm = |push: &mut dyn FnMut(String, usize, usize, Init), p: &str| {
        push(format!("{p}.g"), 1, d, Init::Ones);
        push(format!("{p}.b"), 1, d, Init::Zeros);
    };
    let attn = |push: &mut dyn FnMut(String, usize, usize, Init), p: &str| {
        norm(push, &format!("{p}.ln1"));
        for n in ["q", "k", "v"] {
            linear(push, &format!("{p}.{n}"), d, d);
        }
        push(format!("{p}.rk"), d, d, Init::Normal);
        push(format!("{p}.rv"), d, d, Init::Normal);
        linear(push, &format!("{p}.o"), d, d);
        norm(push, &format!("{p}.ln2"));
        linear(push, &format!("{p}.ffn1"), d, h);
        linear(push, &format!("{p}.ffn2"), h, d);
    };
    let head = |push: &mut dyn FnMut(String, usize, usize, Init), p: &str, out: usize| {
        let hh = d * HEAD_MULT;
        linear(push, &format!("{p}.l1"), d, hh);
        linear(push, &format!("{p}.l2"), hh, hh);
        linear(push, &format!("{p}.l3"), hh, out);
    };

    push("motion.token_emb".into(), cfg.motion_vocab_total(), d, Init::Normal);
    push("motion.class_emb".into(), 3, d, Init::Normal);
    linear(&mut push, "motion.shape", SHAPE_FEATURES, d);
    if cfg.road_vocab_tokens {
        push("road.token_emb".into(), cfg.road_vocab_size, d, Init::Normal);
    } else {
        linear(&mut push, "road.proj", 3, d);
    }
    push("road.kind_emb".into(), PolylineKind::COUNT, d, Init::Normal);
    let mut rpe_kinds = vec!["road"];
    for (kind, n) in [("temporal", cfg.temporal_layers), ("a2a", cfg.a2a_layers), ("m2a", cfg.m2a_layers)] {
        if n > 0 {
            rpe_kinds.push(kind);
        }
    }
    for kind in rpe_kinds {
        linear(&mut push, &format!("rpe.{kind}.l1"), RPE_FEATURES, d);
        linear(&mut push, &format!("rpe.{kind}.l2"), d, d);
    }
    for l in 0..cfg.road_layers {
        attn(&mut push, &format!("road.layer{l}"));
    }
    norm(&mut push, "road.final_ln");
    for k in 0..cfg.fusion_blocks {
        for kind in block_layers(cfg, k) {
            attn(&mut push, &layer_prefix(k, kind));
        }
    }
    norm(&mut push, "motion.final_ln");
    head(&mut push, "head.motion", cfg.motion_vocab_total());
    if cfg.road_vocab_tokens {
        head(&mut push, "head.road", cfg.road_vocab_size);
    }
    v
}

/// Parameter names and shapes in canonical order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, usize, usize)> {
    layout(cfg).into_iter().map(|(n, r, c, _)| (n, r, c)).collect()
}

/// Fresh parameters: weights and embeddings from normal(0, 0.02), biases
/// zero, normalization gains one.
pub fn init_params<S: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<S>, ModelError> {
    cfg.validate()?;
    let mut rng = rng_for(seed, &[0x1A17]);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut store = ParamStore::new();
    for (name, r, c, init) in layout(cfg) {
        let data = match init {
            Init::Normal => (0..r * c).map(|_| S::from_f64(normal.sample(&mut rng))).collect(),
            Init::Zeros => vec![S::ZERO; r * c],
            Init::Ones => vec![S::ONE; r * c],
        };
        store.add(&name, Tensor::from_vec(r, c, data))?;
    }
    Ok(store)
}

fn p<S: Scalar>(t: &mut Tape<'_, S>, name: &str) -> Result<Var, ModelError> {
    Ok(t.param_by_name(name)?)
}

pub(crate) fn linear<S: Scalar>(t: &mut Tape<'_, S>, prefix: &str, x: Var) -> Result<Var, ModelError> {
    let w = p(t, &format!("{prefix}.w"))?;
    let b = p(t, &format!("{prefix}.b"))?;
    Ok(t.linear(x, w, b)?)
}

pub(crate) fn norm<S: Scalar>(t: &mut Tape<'_, S>, prefix: &str, x: Var) -> Result<Var, ModelError> {
    let g = p(t, &format!("{prefix}.g"))?;
    let b = p(t, &format!("{prefix}.b"))?;
    Ok(t.layer_norm(x, g, b)?)
}

fn mlp3<S: Scalar>(t: &mut Tape<'_, S>, prefix: &str, x: Var) -> Result<Var, ModelError> {
    let h = linear(t, &format!("{prefix}.l1"), x)?;
    let h = t.gelu(h)?;
    let h = linear(t, &format!("{prefix}.l2"), h)?;
    let h = t.gelu(h)?;
    linear(t, &format!("{prefix}.l3"), h)
}

/// Embeds relative-position features of an edge set.
pub(crate) fn rpe_encode<S: Scalar>(t: &mut Tape<'_, S>, kind: &str, feats: Tensor<S>) -> Result<Var, ModelError> {
    let f = t.constant(feats)?;
    let h = linear(t, &format!("rpe.{kind}.l1"), f)?;
    let h = t.gelu(h)?;
    linear(t, &format!("rpe.{kind}.l2"), h)
}

/// Key and value bases of attention sources: `src·W + b`.
pub(crate) fn project_kv<S: Scalar>(t: &mut Tape<'_, S>, prefix: &str, src: Var) -> Result<(Var, Var), ModelError> {
    Ok((linear(t, &format!("{prefix}.k"), src)?, linear(t, &format!("{prefix}.v"), src)?))
}

/// One pre-norm attention layer with a feed-forward sublayer.
///
/// `k_edges`/`v_edges` hold the key/value bases of each edge's source; the
/// edge's relative-position embedding is projected and added here.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend<S: Scalar>(
    t: &mut Tape<'_, S>,
    cfg: &ModelConfig,
    prefix: &str,
    x: Var,
    xn: Var,
    k_edges: Var,
    v_edges: Var,
    rpe: Var,
    offsets: Vec<usize>,
) -> Result<Var, ModelError> {
    let q = linear(t, &format!("{prefix}.q"), xn)?;
    let rk = p(t, &format!("{prefix}.rk"))?;
    let rv = p(t, &format!("{prefix}.rv"))?;
    let kr = t.matmul(rpe, rk)?;
    let k = t.add(k_edges, kr)?;
    let vr = t.matmul(rpe, rv)?;
    let v = t.add(v_edges, vr)?;
    let a = t.attention(q, k, v, offsets, cfg.n_heads)?;
    let o = linear(t, &format!("{prefix}.o"), a)?;
    let o = t.dropout(o)?;
    let h = t.add(x, o)?;
    let hn = norm(t, &format!("{prefix}.ln2"), h)?;
    let f = linear(t, &format!("{prefix}.ffn1"), hn)?;
    let f = t.gelu(f)?;
    let f = linear(t, &format!("{prefix}.ffn2"), f)?;
    let f = t.dropout(f)?;
    Ok(t.add(h, f)?)
}

/// Self-attention of a node set over itself along `edges`.
fn self_attend<S: Scalar>(t: &mut Tape<'_, S>, cfg: &ModelConfig, prefix: &str, x: Var, edges: &EdgeSet, rpe: Var) -> Result<Var, ModelError> {
    let xn = norm(t, &format!("{prefix}.ln1"), x)?;
    let (kb, vb) = project_kv(t, prefix, xn)?;
    let ke = t.gather_rows(kb, edges.src.clone())?;
    let ve = t.gather_rows(vb, edges.src.clone())?;
    attend(t, cfg, prefix, x, xn, ke, ve, rpe, edges.offsets.clone())
}

/// Cross-attention from `x` to external sources (already normalized).
fn cross_attend<S: Scalar>(
    t: &mut Tape<'_, S>,
    cfg: &ModelConfig,
    prefix: &str,
    x: Var,
    src: Var,
    edges: &EdgeSet,
    rpe: Var,
) -> Result<Var, ModelError> {
    let xn = norm(t, &format!("{prefix}.ln1"), x)?;
    let (kb, vb) = project_kv(t, prefix, src)?;
    let ke = t.gather_rows(kb, edges.src.clone())?;
    let ve = t.gather_rows(vb, edges.src.clone())?;
    attend(t, cfg, prefix, x, xn, ke, ve, rpe, edges.offsets.clone())
}

fn check_road_tokens(cfg: &ModelConfig, road: &RoadInput) -> Result<(), ModelError> {
    if cfg.road_vocab_tokens {
        if let Some(&bad) = road.tokens.iter().chain(&road.labels).find(|&&i| i >= cfg.road_vocab_size) {
            return Err(ModelError::Vocab { what: "road".into(), index: bad, size: cfg.road_vocab_size });
        }
    }
    Ok(())
}

/// Road encoder: token embeddings refined by self-attention over graph
/// neighborhoods. With `upstream_only`, each token sees only itself and
/// tokens upstream along successor links.
pub fn road_encode<S: Scalar>(t: &mut Tape<'_, S>, cfg: &ModelConfig, road: &RoadInput, upstream_only: bool) -> Result<Var, ModelError> {
    check_road_tokens(cfg, road)?;
    let base = if cfg.road_vocab_tokens {
        let table = p(t, "road.token_emb")?;
        t.gather_rows(table, road.tokens.clone())?
    } else {
        let data: Vec<f64> = road.descriptors.iter().flat_map(|d| d.iter().map(|v| v * DESCRIPTOR_SCALE)).collect();
        let f = t.constant(Tensor::from_f64(road.len(), 3, &data))?;
        linear(t, "road.proj", f)?
    };
    let kinds = p(t, "road.kind_emb")?;
    let ke = t.gather_rows(kinds, road.kinds.clone())?;
    let mut x = t.add(base, ke)?;
    let edges = if upstream_only { &road.upstream } else { &road.full };
    let rpe = rpe_encode(t, "road", edges.feature_tensor())?;
    for l in 0..cfg.road_layers {
        x = self_attend(t, cfg, &format!("road.layer{l}"), x, edges, rpe)?;
    }
    norm(t, "road.final_ln", x)
}

/// Road next-token logits: position `j` of every sequence predicts the
/// label of position `j + 1` from an upstream-only encoding. Returns the
/// logits (or `None` when no sequence has two tokens), the targets and the
/// number of skipped sequences.
pub fn road_ntp_logits<S: Scalar>(
    t: &mut Tape<'_, S>,
    cfg: &ModelConfig,
    road: &RoadInput,
) -> Result<(Option<Var>, Vec<usize>, usize), ModelError> {
    if !cfg.road_vocab_tokens {
        return Err(ModelError::Config { field: "road_vocab_tokens".into(), reason: "road prediction needs road vocabulary tokens".into() });
    }
    let (pairs, skipped) = road.ntp_pairs();
    if pairs.is_empty() {
        return Ok((None, Vec::new(), skipped));
    }
    let emb = road_encode(t, cfg, road, true)?;
    let rows = t.gather_rows(emb, pairs.iter().map(|p| p.0).collect())?;
    let logits = mlp3(t, "head.road", rows)?;
    Ok((Some(logits), pairs.into_iter().map(|p| p.1).collect(), skipped))
}

fn check_agents(cfg: &ModelConfig, agents: &[AgentSeq]) -> Result<(), ModelError> {
    for a in agents {
        let size = cfg.motion_vocab_sizes[a.class.index()];
        let what = || format!("motion/{}", a.class.name());
        if let Some(&bad) = a.tokens.iter().find(|&&i| i as usize >= size) {
            return Err(ModelError::Vocab { what: what(), index: bad as usize, size });
        }
        if let Some(bad) = a.targets.iter().flatten().find(|&&i| i as usize >= size) {
            return Err(ModelError::Vocab { what: what(), index: *bad as usize, size });
        }
    }
    Ok(())
}

/// Input embeddings of decoder nodes: token embedding plus class embedding
/// plus a projection of the agent's footprint.
pub(crate) fn embed_nodes<S: Scalar>(
    t: &mut Tape<'_, S>,
    cfg: &ModelConfig,
    agents: &[AgentSeq],
    nodes: &[(usize, usize)],
) -> Result<Var, ModelError> {
    let offsets = cfg.class_offsets();
    let tok: Vec<usize> = nodes.iter().map(|&(a, s)| offsets[agents[a].class.index()] + agents[a].tokens[s] as usize).collect();
    let cls: Vec<usize> = nodes.iter().map(|&(a, _)| agents[a].class.index()).collect();
    let shape: Vec<f64> = nodes.iter().flat_map(|&(a, _)| [agents[a].length / 5.0, agents[a].width / 2.0]).collect();
    let table = p(t, "motion.token_emb")?;
    let e = t.gather_rows(table, tok)?;
    let ct = p(t, "motion.class_emb")?;
    let c = t.gather_rows(ct, cls)?;
    let f = t.constant(Tensor::from_f64(nodes.len(), SHAPE_FEATURES, &shape))?;
    let s = linear(t, "motion.shape", f)?;
    let x = t.add(e, c)?;
    Ok(t.add(x, s)?)
}

/// Motion head on final node states.
pub(crate) fn motion_head<S: Scalar>(t: &mut Tape<'_, S>, x: Var) -> Result<Var, ModelError> {
    let x = norm(t, "motion.final_ln", x)?;
    mlp3(t, "head.motion", x)
}

/// Relative-position embeddings of a decoder graph, per attention kind.
pub(crate) struct GraphRpe {
    pub temporal: Option<Var>,
    pub a2a: Option<Var>,
    pub m2a: Option<Var>,
}

impl GraphRpe {
    pub(crate) fn encode<S: Scalar>(
        t: &mut Tape<'_, S>,
        cfg: &ModelConfig,
        temporal: &EdgeSet,
        a2a: &EdgeSet,
        m2a: &EdgeSet,
    ) -> Result<Self, ModelError> {
        let mut enc = |n: usize, kind: &str, e: &EdgeSet| -> Result<Option<Var>, ModelError> {
            if n == 0 {
                return Ok(None);
            }
            rpe_encode(t, kind, e.feature_tensor()).map(Some)
        };
        Ok(GraphRpe {
            temporal: enc(cfg.temporal_layers, "temporal", temporal)?,
            a2a: enc(cfg.a2a_layers, "a2a", a2a)?,
            m2a: enc(cfg.m2a_layers, "m2a", m2a)?,
        })
    }

    pub(crate) fn get(&self, kind: AttnKind) -> Var {
        match kind {
            AttnKind::Temporal => self.temporal,
            AttnKind::AgentAgent => self.a2a,
            AttnKind::AgentMap => self.m2a,
        }
        .expect("embedding exists for every configured attention kind")
    }
}

/// Motion decoder over a whole graph: logits of shape
/// `(graph nodes × total motion vocabulary)` in graph node order.
pub fn motion_decode<S: Scalar>(
    t: &mut Tape<'_, S>,
    cfg: &ModelConfig,
    agents: &[AgentSeq],
    graph: &MotionGraph,
    road_emb: Var,
) -> Result<Var, ModelError> {
    check_agents(cfg, agents)?;
    let mut x = embed_nodes(t, cfg, agents, &graph.nodes)?;
    let rpe = GraphRpe::encode(t, cfg, &graph.temporal, &graph.a2a, &graph.m2a)?;
    for k in 0..cfg.fusion_blocks {
        for kind in block_layers(cfg, k) {
            let prefix = layer_prefix(k, kind);
            x = match kind {
                AttnKind::Temporal => self_attend(t, cfg, &prefix, x, &graph.temporal, rpe.get(kind))?,
                AttnKind::AgentAgent => self_attend(t, cfg, &prefix, x, &graph.a2a, rpe.get(kind))?,
                AttnKind::AgentMap => cross_attend(t, cfg, &prefix, x, road_emb, &graph.m2a, rpe.get(kind))?,
            };
        }
    }
    motion_head(t, x)
}

/// Motion targets of a graph: `(node, target index within class, class
/// column range)` for every node with a target.
pub fn motion_targets(cfg: &ModelConfig, agents: &[AgentSeq], graph: &MotionGraph) -> Vec<(usize, usize, (usize, usize))> {
    let offsets = cfg.class_offsets();
    graph
        .nodes
        .iter()
        .enumerate()
        .filter_map(|(n, &(a, s))| {
            let c = agents[a].class.index();
            agents[a].targets[s].map(|y| (n, y as usize, (offsets[c], cfg.motion_vocab_sizes[c])))
        })
        .collect()
}
