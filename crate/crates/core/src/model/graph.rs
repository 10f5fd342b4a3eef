//! Model inputs and the attention neighborhoods between them.

use std::collections::VecDeque;

use crate::autodiff::{Scalar, Tensor};
use crate::geom::{se2_relative, AgentClass, Pose2};
use crate::tokens::{TokenizedMap, TokenizedTrack};

/// Relative-position features per attention edge: scaled distance, sine
/// and cosine of the bearing, sine and cosine of the relative heading, and
/// scaled token-step offset.
pub const RPE_FEATURES: usize = 6;

const DIST_SCALE: f64 = 0.1;
const DT_SCALE: f64 = 0.1;
/// Below this separation the bearing is undefined and its features are zero.
const BEARING_MIN_DIST: f64 = 1e-6;

/// Features of `key` seen from `query`, invariant under rigid transforms of
/// both poses.
pub fn rpe_features(query: &Pose2, key: &Pose2, dt_steps: f64) -> [f64; RPE_FEATURES] {
    let rel = se2_relative(query, key);
    let (sb, cb) = if rel.dist < BEARING_MIN_DIST { (0.0, 0.0) } else { rel.bearing.sin_cos() };
    let (sy, cy) = rel.dyaw.sin_cos();
    [rel.dist * DIST_SCALE, sb, cb, sy, cy, dt_steps * DT_SCALE]
}

/// Neighbor lists in compressed form: query `i` attends to sources
/// `src[offsets[i]..offsets[i+1]]` with per-edge features.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeSet {
    pub offsets: Vec<usize>,
    pub src: Vec<usize>,
    pub feats: Vec<[f64; RPE_FEATURES]>,
}

impl Default for EdgeSet {
    fn default() -> Self {
        EdgeSet { offsets: vec![0], src: Vec::new(), feats: Vec::new() }
    }
}

impl EdgeSet {
    pub fn queries(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn push_query(&mut self, edges: impl IntoIterator<Item = (usize, [f64; RPE_FEATURES])>) {
        for (s, f) in edges {
            self.src.push(s);
            self.feats.push(f);
        }
        self.offsets.push(self.src.len());
    }

    pub fn feature_tensor<S: Scalar>(&self) -> Tensor<S> {
        let data = self.feats.iter().flat_map(|f| f.iter().map(|&v| S::from_f64(v))).collect();
        Tensor::from_vec(self.feats.len(), RPE_FEATURES, data)
    }

    /// Edges of query `i` as `(source, features)` pairs.
    pub fn edges_of(&self, i: usize) -> impl Iterator<Item = (usize, &[f64; RPE_FEATURES])> {
        let r = self.offsets[i]..self.offsets[i + 1];
        self.src[r.clone()].iter().copied().zip(&self.feats[r])
    }
}

/// Road tokens of one map with their self-attention neighborhoods.
#[derive(Clone, Debug, PartialEq)]
pub struct RoadInput {
    /// Token fed to the model per instance.
    pub tokens: Vec<usize>,
    /// Nearest-token label per instance (next-token targets).
    pub labels: Vec<usize>,
    pub kinds: Vec<usize>,
    pub descriptors: Vec<[f64; 3]>,
    pub poses: Vec<Pose2>,
    /// Neighbors within the hop radius over undirected adjacency, self included.
    pub full: EdgeSet,
    /// Neighbors reachable backwards along successor links within the hop
    /// radius, self included; nothing downstream is visible.
    pub upstream: EdgeSet,
    pub sequences: Vec<Vec<usize>>,
}

impl RoadInput {
    pub fn new(map: &TokenizedMap, hops: usize) -> Self {
        let n = map.instances.len();
        let pred = map.predecessors();
        let undirected: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                let mut v: Vec<usize> = map.instances[i].successors.iter().chain(&pred[i]).copied().collect();
                v.sort_unstable();
                v.dedup();
                v
            })
            .collect();
        let poses: Vec<Pose2> = map.instances.iter().map(|r| r.pose).collect();
        let build = |adj: &[Vec<usize>]| {
            let mut edges = EdgeSet::default();
            for i in 0..n {
                let mut near = within_hops(adj, i, hops);
                near.sort_unstable();
                edges.push_query(near.into_iter().map(|j| (j, rpe_features(&poses[i], &poses[j], 0.0))));
            }
            edges
        };
        let full = build(&undirected);
        let upstream = build(&pred);
        RoadInput {
            tokens: map.instances.iter().map(|r| r.index as usize).collect(),
            labels: map.instances.iter().map(|r| r.label as usize).collect(),
            kinds: map.instances.iter().map(|r| r.kind.index()).collect(),
            descriptors: map.instances.iter().map(|r| r.descriptor).collect(),
            poses,
            full,
            upstream,
            sequences: map.sequences.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Next-token prediction pairs `(position instance, target label)` over
    /// all sequences, and the number of sequences too short to contribute.
    pub fn ntp_pairs(&self) -> (Vec<(usize, usize)>, usize) {
        let mut pairs = Vec::new();
        let mut skipped = 0;
        for seq in &self.sequences {
            if seq.len() < 2 {
                skipped += 1;
                continue;
            }
            for w in seq.windows(2) {
                pairs.push((w[0], self.labels[w[1]]));
            }
        }
        (pairs, skipped)
    }
}

fn within_hops(adj: &[Vec<usize>], start: usize, hops: usize) -> Vec<usize> {
    let mut seen = vec![false; adj.len()];
    let mut out = vec![start];
    seen[start] = true;
    let mut queue = VecDeque::from([(start, 0usize)]);
    while let Some((u, d)) = queue.pop_front() {
        if d == hops {
            continue;
        }
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                out.push(v);
                queue.push_back((v, d + 1));
            }
        }
    }
    out
}

/// Token sequence of one agent as seen by the motion decoder.
///
/// The token at step `t` moves the agent to `poses[t]`; its embedding sits
/// at that pose. `targets[t]` is the label of step `t + 1` when both steps
/// are valid.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentSeq {
    pub agent_id: u32,
    pub class: AgentClass,
    pub length: f64,
    pub width: f64,
    pub tokens: Vec<u32>,
    pub poses: Vec<Pose2>,
    pub valid: Vec<bool>,
    pub targets: Vec<Option<u32>>,
}

impl AgentSeq {
    pub fn from_tokenized(t: &TokenizedTrack) -> Self {
        let n = t.steps();
        let targets = (0..n)
            .map(|s| (t.valid[s] && s + 1 < n && t.valid[s + 1]).then(|| t.labels[s + 1]))
            .collect();
        AgentSeq {
            agent_id: t.agent_id,
            class: t.class,
            length: t.length,
            width: t.width,
            tokens: t.indices.clone(),
            poses: t.ref_poses[1..].to_vec(),
            valid: t.valid.clone(),
            targets,
        }
    }

    pub fn steps(&self) -> usize {
        self.tokens.len()
    }

    /// Keeps the first `steps` token steps.
    pub fn truncated(&self, steps: usize) -> AgentSeq {
        let k = steps.min(self.steps());
        let mut out = AgentSeq {
            tokens: self.tokens[..k].to_vec(),
            poses: self.poses[..k].to_vec(),
            valid: self.valid[..k].to_vec(),
            targets: self.targets[..k].to_vec(),
            ..self.clone()
        };
        if let Some(last) = out.targets.last_mut() {
            *last = None;
        }
        out
    }
}

/// Decoder nodes (valid agent token steps) ordered by step, then agent id,
/// with their temporal, agent-agent and agent-map neighborhoods.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionGraph {
    /// Agent indices sorted by agent id; the canonical processing order.
    pub order: Vec<usize>,
    /// `(agent index, step)` per node.
    pub nodes: Vec<(usize, usize)>,
    /// Node id per agent index and step.
    pub node_of: Vec<Vec<Option<usize>>>,
    /// First node id of each step, plus the total node count.
    pub step_starts: Vec<usize>,
    pub temporal: EdgeSet,
    pub a2a: EdgeSet,
    pub m2a: EdgeSet,
    pub radius: f64,
}

impl MotionGraph {
    pub fn empty(agents: &[AgentSeq], radius: f64) -> Self {
        let mut order: Vec<usize> = (0..agents.len()).collect();
        order.sort_by_key(|&i| (agents[i].agent_id, i));
        MotionGraph {
            order,
            nodes: Vec::new(),
            node_of: vec![Vec::new(); agents.len()],
            step_starts: vec![0],
            temporal: EdgeSet::default(),
            a2a: EdgeSet::default(),
            m2a: EdgeSet::default(),
            radius,
        }
    }

    pub fn build(agents: &[AgentSeq], road_poses: &[Pose2], radius: f64) -> Self {
        let mut g = Self::empty(agents, radius);
        let steps = agents.iter().map(AgentSeq::steps).max().unwrap_or(0);
        for t in 0..steps {
            g.push_step(agents, road_poses);
            debug_assert_eq!(g.steps(), t + 1);
        }
        g
    }

    pub fn steps(&self) -> usize {
        self.step_starts.len() - 1
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Node ids of step `t`.
    pub fn step_nodes(&self, t: usize) -> std::ops::Range<usize> {
        self.step_starts[t]..self.step_starts[t + 1]
    }

    /// Appends the nodes of the next step and their neighborhoods. Only
    /// data at steps up to the new one is read, so appending steps one at a
    /// time yields the same graph as building it at once.
    pub fn push_step(&mut self, agents: &[AgentSeq], road_poses: &[Pose2]) {
        let t = self.steps();
        let first = self.nodes.len();
        for &a in &self.order {
            let present = t < agents[a].steps() && agents[a].valid[t];
            self.node_of[a].push(present.then_some(self.nodes.len()));
            if present {
                self.nodes.push((a, t));
            }
        }
        for n in first..self.nodes.len() {
            let (a, _) = self.nodes[n];
            let pose = agents[a].poses[t];
            self.temporal.push_query(
                (0..t).filter_map(|s| self.node_of[a][s].map(|m| (m, rpe_features(&pose, &agents[a].poses[s], (t - s) as f64)))),
            );
            let peers = (first..self.nodes.len()).filter_map(|m| {
                let b = self.nodes[m].0;
                let q = agents[b].poses[t];
                (m != n && pose.distance(&q) <= self.radius).then(|| (m, rpe_features(&pose, &q, 0.0)))
            });
            let peers: Vec<_> = peers.collect();
            self.a2a.push_query(peers);
            let near: Vec<_> = road_poses
                .iter()
                .enumerate()
                .filter(|(_, r)| pose.distance(r) <= self.radius)
                .map(|(j, r)| (j, rpe_features(&pose, r, 0.0)))
                .collect();
            self.m2a.push_query(near);
        }
        self.step_starts.push(self.nodes.len());
    }
}
