//! Discrete motion and road vocabularies built by greedy disk cover, plus
//! matching of continuous trajectories and polylines onto them.

pub mod motion;
pub mod road;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::seed::rng_for;

pub use motion::{
    build_motion_vocab, build_motion_vocab_from_tracks, detokenize, extract_motion_segments, nearest_token, token_distance, tokenize_scenario,
    token_steps, tokenize_track, MotionVocab, MotionVocabSet, Segment, TokenizedTrack, REFINE_ROUNDS, TOKEN_STEPS,
};
pub use road::{
    build_road_vocab, descriptor_distance, split_polylines, tokenize_map, RoadSegment, RoadTokenInstance, RoadVocab,
    TokenizedMap, MAX_SEGMENT_LENGTH,
};

#[derive(Debug, thiserror::Error)]
pub enum TokenError {
    #[error("cannot build a vocabulary from zero samples")]
    EmptyInput,
    #[error("vocabulary is empty")]
    EmptyVocab,
    #[error("vocabulary class {vocab} does not match track class {track}")]
    ClassMismatch { vocab: String, track: String },
    #[error("token index {index} out of range for vocabulary of size {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("track has no complete token segment")]
    NoSegment,
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
}

/// Replacement of a matched token by a random near neighbor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub enabled: bool,
    /// Number of nearest tokens eligible as replacements.
    pub k: usize,
    /// Probability of replacing the matched token.
    pub p: f64,
}

impl NoiseConfig {
    pub const OFF: NoiseConfig = NoiseConfig { enabled: false, k: 1, p: 0.0 };

    pub fn motion_default() -> Self {
        NoiseConfig { enabled: true, k: 5, p: 0.5 }
    }

    pub fn road_default() -> Self {
        NoiseConfig { enabled: true, k: 5, p: 0.2 }
    }

    fn active(&self) -> bool {
        self.enabled && self.k > 1 && self.p > 0.0
    }
}

/// Greedy disk cover: visits samples in a seeded random order and accepts a
/// sample iff it is farther than `epsilon` from every accepted one.
pub(crate) fn greedy_cover<T: Clone>(
    samples: &[T],
    target_size: usize,
    epsilon: f64,
    seed: u64,
    dist: impl Fn(&T, &T) -> f64,
) -> Vec<T> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng_for(seed, &[0x5EED]));
    let mut accepted: Vec<T> = Vec::new();
    for i in order {
        if accepted.len() >= target_size {
            break;
        }
        let s = &samples[i];
        if accepted.iter().all(|a| dist(a, s) > epsilon) {
            accepted.push(s.clone());
        }
    }
    accepted
}

/// Indices of the `k` smallest distances, ordered by (distance, index).
pub(crate) fn k_nearest(dists: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dists.len()).collect();
    idx.sort_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(a.cmp(&b)));
    idx.truncate(k.max(1));
    idx
}

/// Exact argmin with ties broken toward the lowest index.
pub(crate) fn argmin(dists: impl IntoIterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, d) in dists.into_iter().enumerate() {
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}
