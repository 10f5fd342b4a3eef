//! From scenarios to model inputs: vocabulary construction over a corpus
//! and per-scene tokenization.

use std::collections::BTreeMap;

use crate::geom::AgentClass;
use crate::io::sha256_hex;
use crate::model::{AgentSeq, ModelConfig, RoadInput};
use crate::scenario::Scenario;
use crate::tokens::{
    build_motion_vocab_from_tracks, build_road_vocab, split_polylines, tokenize_map, tokenize_scenario, MotionVocabSet, NoiseConfig,
    RoadVocab, TokenizedMap, TokenizedTrack, MAX_SEGMENT_LENGTH, REFINE_ROUNDS,
};
use crate::{Error, Track};

/// Default motion cover radius in meters per class.
pub fn default_motion_epsilon(class: AgentClass) -> f64 {
    match class {
        AgentClass::Vehicle => 0.2,
        AgentClass::Pedestrian | AgentClass::Cyclist => 0.05,
    }
}

/// Default road descriptor cover radius.
pub const DEFAULT_ROAD_EPSILON: f64 = 0.1;
/// Road self-attention radius in graph hops.
pub const DEFAULT_ROAD_HOPS: usize = 10;

/// All vocabularies a model is trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabularies {
    pub motion: MotionVocabSet,
    pub road: RoadVocab,
}

impl Vocabularies {
    /// Builds one motion vocabulary per class present in `scenarios` and a
    /// road vocabulary over all their maps, with default cover radii.
    pub fn build(scenarios: &[Scenario], motion_size: usize, road_size: usize, seed: u64) -> Result<Self, Error> {
        let mut vocabs = Vec::new();
        for class in AgentClass::ALL {
            let tracks: Vec<&Track> = scenarios.iter().flat_map(|s| s.agents.iter()).filter(|t| t.class == class).collect();
            if tracks.is_empty() {
                continue;
            }
            match build_motion_vocab_from_tracks(&tracks, class, motion_size, default_motion_epsilon(class), seed, REFINE_ROUNDS) {
                Ok(v) => vocabs.push(v),
                Err(crate::tokens::TokenError::EmptyInput) => continue,
                Err(e) => return Err(e.into()),
            }
        }
        let segments: Vec<_> = scenarios.iter().flat_map(|s| split_polylines(&s.map, MAX_SEGMENT_LENGTH)).collect();
        let road = build_road_vocab(&segments, road_size, DEFAULT_ROAD_EPSILON, seed)?;
        Ok(Vocabularies { motion: MotionVocabSet::new(vocabs), road })
    }

    /// Content hash of each vocabulary's JSON form, keyed by class name.
    pub fn hashes(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        for v in &self.motion.vocabs {
            out.insert(v.class.name().to_string(), sha256_hex(v.to_json().as_bytes()));
        }
        out.insert(RoadVocab::CLASS.to_string(), sha256_hex(self.road.to_json().as_bytes()));
        out
    }

    /// Sets the vocabulary sizes of `config` to match.
    pub fn configure(&self, config: &mut ModelConfig) {
        config.motion_vocab_sizes = self.motion.sizes();
        config.road_vocab_size = self.road.size();
    }
}

/// Noise injection and seeding for [`prepare_scene`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenizeOptions {
    pub motion_noise: NoiseConfig,
    pub road_noise: NoiseConfig,
    pub seed: u64,
    pub road_hops: usize,
}

impl TokenizeOptions {
    pub fn clean(seed: u64) -> Self {
        TokenizeOptions { motion_noise: NoiseConfig::OFF, road_noise: NoiseConfig::OFF, seed, road_hops: DEFAULT_ROAD_HOPS }
    }
}

/// A tokenized scene ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneInput {
    pub agents: Vec<AgentSeq>,
    pub road: RoadInput,
    pub tracks: Vec<TokenizedTrack>,
    pub map: TokenizedMap,
}

pub fn prepare_scene(scenario: &Scenario, vocabs: &Vocabularies, opts: &TokenizeOptions) -> Result<SceneInput, Error> {
    let tracks = tokenize_scenario(&vocabs.motion, scenario, &opts.motion_noise, opts.seed)?;
    let map = tokenize_map(&vocabs.road, &scenario.map, &opts.road_noise, opts.seed)?;
    let road = RoadInput::new(&map, opts.road_hops);
    let agents = tracks.iter().map(AgentSeq::from_tokenized).collect();
    Ok(SceneInput { agents, road, tracks, map })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_map, generate_scenario, MapKind, MapSpec, TrafficSpec};

    #[test]
    fn vocabularies_cover_present_classes_and_configure_model() {
        let map = generate_map(&MapSpec::new(MapKind::Straight, 2, 1)).unwrap();
        let s = generate_scenario(&map, &TrafficSpec::new(4, 1)).unwrap();
        let v = Vocabularies::build(std::slice::from_ref(&s), 64, 32, 0).unwrap();
        assert_eq!(v.motion.sizes()[1], 0);
        assert!(v.motion.sizes()[0] > 0);
        let mut cfg = ModelConfig::smart_1m_tiny();
        v.configure(&mut cfg);
        assert_eq!(cfg.motion_vocab_sizes, v.motion.sizes());
        assert_eq!(v.hashes().len(), 2);
        let scene = prepare_scene(&s, &v, &TokenizeOptions::clean(0)).unwrap();
        assert_eq!(scene.agents.len(), 4);
        assert_eq!(scene.road.len(), scene.map.instances.len());
    }
}
