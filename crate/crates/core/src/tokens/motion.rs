use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geom::{wrap_angle, AgentClass, Pose2};
use crate::io::{check_schema, SCHEMA_VERSION};
use crate::scenario::{Scenario, Track};
use crate::seed::rng_for;

use super::{argmin, greedy_cover, k_nearest, NoiseConfig, TokenError};

/// States per token: one token spans 0.5 s at 0.1 s resolution.
pub const TOKEN_STEPS: usize = 5;

/// Weight of the mean heading difference in [`token_distance`], in m/rad.
pub const YAW_WEIGHT: f64 = 1.0;

/// Five `(x, y, yaw)` waypoints at 0.1 s offsets in the frame of the segment
/// start state.
pub type Segment = [[f64; 3]; TOKEN_STEPS];

fn segment_from(start: &Pose2, next: &[Pose2]) -> Segment {
    let mut seg = [[0.0; 3]; TOKEN_STEPS];
    for (w, p) in seg.iter_mut().zip(next) {
        let l = start.to_local(p);
        *w = [l.x, l.y, l.yaw];
    }
    seg
}

fn waypoint(w: &[f64; 3]) -> Pose2 {
    Pose2 { x: w[0], y: w[1], yaw: w[2] }
}

/// Splits every run of consecutive valid states into back-to-back segments
/// of `TOKEN_STEPS` steps; a run of `n` states yields `⌊(n−1)/5⌋` segments.
pub fn extract_motion_segments(track: &Track) -> Vec<Segment> {
    let poses = track.poses();
    let mut out = Vec::new();
    let mut t = 0;
    while t < poses.len() {
        if !track.states[t].valid {
            t += 1;
            continue;
        }
        let start = t;
        while t < poses.len() && track.states[t].valid {
            t += 1;
        }
        let n = t - start;
        for j in 0..(n - 1) / TOKEN_STEPS {
            let a = start + j * TOKEN_STEPS;
            out.push(segment_from(&poses[a], &poses[a + 1..=a + TOKEN_STEPS]));
        }
    }
    out
}

/// Mean waypoint position distance plus `YAW_WEIGHT` times the mean wrapped
/// heading difference.
pub fn token_distance(a: &Segment, b: &Segment) -> f64 {
    let mut pos = 0.0;
    let mut yaw = 0.0;
    for (p, q) in a.iter().zip(b) {
        pos += (p[0] - q[0]).hypot(p[1] - q[1]);
        yaw += wrap_angle(p[2] - q[2]).abs();
    }
    (pos + YAW_WEIGHT * yaw) / TOKEN_STEPS as f64
}

/// Motion token vocabulary of one agent class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionVocab {
    pub schema: u32,
    pub class: AgentClass,
    pub epsilon: f64,
    pub seed: u64,
    pub tokens: Vec<Segment>,
}

impl MotionVocab {
    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    /// Pose at the end of token `i`, relative to its start.
    pub fn endpoint(&self, i: usize) -> Pose2 {
        waypoint(&self.tokens[i][TOKEN_STEPS - 1])
    }

    pub fn distances(&self, target: &Segment) -> Vec<f64> {
        self.tokens.iter().map(|t| token_distance(t, target)).collect()
    }

    pub fn validate(&self) -> Result<(), crate::Error> {
        check_schema(self.schema, "motion vocabulary")?;
        if self.tokens.is_empty() {
            return Err(TokenError::EmptyVocab.into());
        }
        if self.tokens.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(TokenError::InvalidVocab("non-finite waypoint".into()).into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, crate::Error> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let schema = value.get("schema").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        check_schema(schema, "motion vocabulary")?;
        let v: MotionVocab = serde_json::from_value(value)?;
        v.validate()?;
        Ok(v)
    }
}

/// Greedy disk cover over `segments` with cover radius `epsilon`.
pub fn build_motion_vocab(
    segments: &[Segment],
    class: AgentClass,
    target_size: usize,
    epsilon: f64,
    seed: u64,
) -> Result<MotionVocab, TokenError> {
    if segments.is_empty() {
        return Err(TokenError::EmptyInput);
    }
    let tokens = greedy_cover(segments, target_size, epsilon, seed, token_distance);
    Ok(MotionVocab { schema: SCHEMA_VERSION, class, epsilon, seed, tokens })
}

/// Default number of rolling-matching refinement rounds in
/// [`build_motion_vocab_from_tracks`].
pub const REFINE_ROUNDS: usize = 3;

/// Builds a vocabulary from whole tracks. After an initial cover of the
/// clean segments, each round tokenizes the tracks by rolling matching and
/// adds every target segment left farther than `epsilon` from its nearest
/// token to the sample pool before covering again. Rolling matching sees
/// segments expressed in drifted reference frames, which the clean
/// segments alone do not cover.
pub fn build_motion_vocab_from_tracks(
    tracks: &[&Track],
    class: AgentClass,
    target_size: usize,
    epsilon: f64,
    seed: u64,
    rounds: usize,
) -> Result<MotionVocab, TokenError> {
    let mut pool: Vec<Segment> = tracks.iter().flat_map(|t| extract_motion_segments(t)).collect();
    let mut vocab = build_motion_vocab(&pool, class, target_size, epsilon, seed)?;
    for _ in 0..rounds {
        let mut missed = Vec::new();
        for tr in tracks {
            let Ok(tok) = tokenize_track(&vocab, tr, &NoiseConfig::OFF, 0) else { continue };
            let poses = tr.poses();
            for t in (0..tok.steps()).filter(|&t| tok.valid[t] && tok.residuals[t] > epsilon) {
                let a = t * TOKEN_STEPS;
                missed.push(segment_from(&tok.ref_poses[t], &poses[a + 1..=a + TOKEN_STEPS]));
            }
        }
        if missed.is_empty() {
            break;
        }
        pool.extend(missed);
        vocab = build_motion_vocab(&pool, class, target_size, epsilon, seed)?;
    }
    Ok(vocab)
}

/// Exact nearest token; ties go to the lowest index.
pub fn nearest_token(vocab: &MotionVocab, target: &Segment) -> (usize, f64) {
    argmin(vocab.tokens.iter().map(|t| token_distance(t, target)))
}

/// One vocabulary per agent class present in the data.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MotionVocabSet {
    pub vocabs: Vec<MotionVocab>,
}

impl MotionVocabSet {
    pub fn new(vocabs: Vec<MotionVocab>) -> Self {
        MotionVocabSet { vocabs }
    }

    pub fn get(&self, class: AgentClass) -> Result<&MotionVocab, TokenError> {
        self.vocabs.iter().find(|v| v.class == class).ok_or_else(|| TokenError::ClassMismatch {
            vocab: "none".into(),
            track: class.name().into(),
        })
    }

    /// Vocabulary size per class index; 0 for classes without a vocabulary.
    pub fn sizes(&self) -> [usize; 3] {
        let mut out = [0; 3];
        for v in &self.vocabs {
            out[v.class.index()] = v.size();
        }
        out
    }
}

/// Rolling-matched token sequence of one agent on the scenario token grid.
///
/// Step `t` covers states `5t ..= 5t+5`. `ref_poses[t]` is the reference
/// frame in which step `t` was matched and `ref_poses[t+1]` the reference
/// after committing `indices[t]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizedTrack {
    pub agent_id: u32,
    pub class: AgentClass,
    pub length: f64,
    pub width: f64,
    /// Committed (possibly noised) token per step.
    pub indices: Vec<u32>,
    /// Nearest token to the ground truth from the committed reference.
    pub labels: Vec<u32>,
    pub ref_poses: Vec<Pose2>,
    pub noised: Vec<bool>,
    pub valid: Vec<bool>,
    /// Distance between the matched label and its target segment.
    pub residuals: Vec<f64>,
}

impl TokenizedTrack {
    pub fn steps(&self) -> usize {
        self.indices.len()
    }
}

/// Number of token steps on the grid of a track with `n_states` states.
pub fn token_steps(n_states: usize) -> usize {
    n_states.saturating_sub(1) / TOKEN_STEPS
}

/// Rolling matching: each step's ground-truth motion is expressed in the
/// frame reached by the previously committed token, matched to its nearest
/// token, and optionally replaced by a uniform draw among the `k` nearest.
/// After an invalid step the reference is re-anchored to the ground truth.
pub fn tokenize_track(
    vocab: &MotionVocab,
    track: &Track,
    noise: &NoiseConfig,
    seed: u64,
) -> Result<TokenizedTrack, TokenError> {
    if vocab.class != track.class {
        return Err(TokenError::ClassMismatch { vocab: vocab.class.name().into(), track: track.class.name().into() });
    }
    if vocab.tokens.is_empty() {
        return Err(TokenError::EmptyVocab);
    }
    let poses = track.poses();
    let n_steps = token_steps(poses.len());
    let step_valid: Vec<bool> = (0..n_steps)
        .map(|t| track.states[t * TOKEN_STEPS..=(t + 1) * TOKEN_STEPS].iter().all(|s| s.valid))
        .collect();
    if !step_valid.iter().any(|&v| v) {
        return Err(TokenError::NoSegment);
    }
    let mut rng = rng_for(seed, &[track.id as u64, 0x4D4F_54]);
    let mut out = TokenizedTrack {
        agent_id: track.id,
        class: track.class,
        length: track.length,
        width: track.width,
        indices: vec![0; n_steps],
        labels: vec![0; n_steps],
        ref_poses: vec![poses[0]; n_steps + 1],
        noised: vec![false; n_steps],
        valid: step_valid.clone(),
        residuals: vec![0.0; n_steps],
    };
    let mut current: Option<Pose2> = None;
    for t in 0..n_steps {
        let a = t * TOKEN_STEPS;
        if !step_valid[t] {
            current = None;
            out.ref_poses[t + 1] = if track.states[a + TOKEN_STEPS].valid { poses[a + TOKEN_STEPS] } else { out.ref_poses[t] };
            continue;
        }
        let base = current.unwrap_or(poses[a]);
        out.ref_poses[t] = base;
        let target = segment_from(&base, &poses[a + 1..=a + TOKEN_STEPS]);
        let dists = vocab.distances(&target);
        let (label, residual) = argmin(dists.iter().copied());
        let mut index = label;
        if noise.active() && rng.random::<f64>() < noise.p {
            let near = k_nearest(&dists, noise.k);
            index = near[rng.random_range(0..near.len())];
            out.noised[t] = true;
        }
        let next = base.compose(&vocab.endpoint(index));
        out.indices[t] = index as u32;
        out.labels[t] = label as u32;
        out.residuals[t] = residual;
        out.ref_poses[t + 1] = next;
        current = Some(next);
    }
    Ok(out)
}

/// Tokenizes every agent of a scenario with its class vocabulary. Agents
/// without a complete valid token step are skipped.
pub fn tokenize_scenario(
    vocabs: &MotionVocabSet,
    scenario: &Scenario,
    noise: &NoiseConfig,
    seed: u64,
) -> Result<Vec<TokenizedTrack>, TokenError> {
    let mut out = Vec::with_capacity(scenario.agents.len());
    for tr in &scenario.agents {
        match tokenize_track(vocabs.get(tr.class)?, tr, noise, seed) {
            Ok(t) => out.push(t),
            Err(TokenError::NoSegment) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Chains token waypoints from `start`, producing `5·len + 1` poses.
pub fn detokenize(vocab: &MotionVocab, start: Pose2, indices: &[u32]) -> Result<Vec<Pose2>, TokenError> {
    let mut out = Vec::with_capacity(indices.len() * TOKEN_STEPS + 1);
    out.push(start);
    let mut cur = start;
    for &i in indices {
        let i = i as usize;
        if i >= vocab.size() {
            return Err(TokenError::IndexOutOfRange { index: i, size: vocab.size() });
        }
        for w in &vocab.tokens[i] {
            out.push(cur.compose(&waypoint(w)));
        }
        cur = cur.compose(&vocab.endpoint(i));
    }
    Ok(out)
}
