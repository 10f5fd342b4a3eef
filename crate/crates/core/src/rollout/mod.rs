//! Closed-loop simulation: every agent is driven by the model, one token
//! step at a time, with cached incremental decoding and top-k sampling.

mod sampler;
mod timing;

pub use sampler::{sample_logits, sample_top_k, softmax_with_temperature, top_k_probs};
pub use timing::{decode_cost_curve, loglog_slope, straight_line_agents, TimingPoint};

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::dataset::{prepare_scene, TokenizeOptions, Vocabularies};
use crate::geom::Pose2;
use crate::model::{AgentSeq, DecodeCache, Model, ModelError, RoadInput, StepLogits};
use crate::scenario::Scenario;
use crate::seed::{derive_seed, rng_for};
use crate::tokens::{detokenize, token_steps, TokenError, TOKEN_STEPS};

#[derive(Debug, thiserror::Error)]
pub enum RolloutError {
    #[error("invalid rollout config field {field}: {reason}")]
    Config { field: String, reason: String },
    #[error("no agent has a valid warm-start state")]
    NoAgents,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error(transparent)]
    Data(Box<crate::Error>),
}

impl From<crate::Error> for RolloutError {
    fn from(e: crate::Error) -> Self {
        match e {
            crate::Error::Model(m) => RolloutError::Model(m),
            crate::Error::Token(t) => RolloutError::Token(t),
            other => RolloutError::Data(Box::new(other)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    pub n_rollouts: usize,
    pub top_k: usize,
    pub temperature: f64,
    /// Ground-truth warm-start tokens; defaults to the scenario history.
    pub history_tokens: Option<usize>,
    /// Generated tokens; defaults to the rest of the scenario horizon.
    pub future_tokens: Option<usize>,
    pub seed: u64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig { n_rollouts: 32, top_k: 5, temperature: 1.0, history_tokens: None, future_tokens: None, seed: 0 }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<(), RolloutError> {
        let bad = |field: &str, reason: &str| Err(RolloutError::Config { field: field.into(), reason: reason.into() });
        if self.n_rollouts == 0 {
            return bad("n_rollouts", "must be at least 1");
        }
        if self.top_k == 0 {
            return bad("top_k", "must be at least 1");
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad("temperature", "must be finite and positive");
        }
        if self.history_tokens == Some(0) {
            return bad("history_tokens", "must be at least 1");
        }
        Ok(())
    }
}

/// One simulated agent: sampled token indices and the 0.1 s poses they
/// detokenize to, starting at the warm-start pose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentRollout {
    pub agent_id: u32,
    pub tokens: Vec<u32>,
    /// `(x, y, yaw)` per 0.1 s, `5 · tokens.len() + 1` entries.
    pub trajectory: Vec<[f64; 3]>,
}

impl AgentRollout {
    pub fn poses(&self) -> Vec<Pose2> {
        self.trajectory.iter().map(|p| Pose2::new(p[0], p[1], p[2])).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub seed: u64,
    pub agents: Vec<AgentRollout>,
}

/// All simulations of one scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutSet {
    pub schema: u32,
    pub config: RolloutConfig,
    pub history_tokens: usize,
    pub future_tokens: usize,
    /// Scenario state index of the first trajectory pose.
    pub start_step: usize,
    pub agent_ids: Vec<u32>,
    /// Agents without a valid warm-start state.
    pub excluded: Vec<u32>,
    /// Number of road encodings performed for the whole set.
    pub map_encodes: usize,
    pub rollouts: Vec<Rollout>,
    /// Wall-clock milliseconds of each decode step, per rollout.
    #[serde(skip)]
    pub step_ms: Vec<Vec<f64>>,
}

impl RolloutSet {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("rollout set serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, crate::Error> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value.get("schema").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        crate::io::check_schema(found, "rollout set")?;
        Ok(serde_json::from_value(value)?)
    }
}

/// Warm-started agents and road of a scenario.
#[derive(Clone, Debug)]
pub struct WarmStart {
    pub agents: Vec<AgentSeq>,
    pub road: RoadInput,
    pub excluded: Vec<u32>,
    pub history_tokens: usize,
    pub future_tokens: usize,
}

/// Tokenizes the scenario and keeps the agents whose last history token
/// step is valid, truncated to the history.
pub fn warm_start(scenario: &Scenario, vocabs: &Vocabularies, config: &RolloutConfig) -> Result<WarmStart, RolloutError> {
    config.validate()?;
    let scene = prepare_scene(scenario, vocabs, &TokenizeOptions::clean(0))?;
    let total = token_steps(scenario.total_steps());
    let history = config.history_tokens.unwrap_or(scenario.history_steps.saturating_sub(1) / TOKEN_STEPS);
    if history == 0 || history > total {
        return Err(RolloutError::Config {
            field: "history_tokens".into(),
            reason: format!("{history} warm-start tokens do not fit a scenario of {total} token steps"),
        });
    }
    let future = config.future_tokens.unwrap_or(total - history);
    let mut agents = Vec::new();
    for a in &scene.agents {
        if a.valid[history - 1] {
            agents.push(a.truncated(history));
        }
    }
    let kept: Vec<u32> = agents.iter().map(|a| a.agent_id).collect();
    let excluded: Vec<u32> = scenario.agents.iter().map(|t| t.id).filter(|id| !kept.contains(id)).collect();
    if !excluded.is_empty() {
        log::warn!("agents without a valid warm-start state are not simulated: {excluded:?}");
    }
    if agents.is_empty() {
        return Err(RolloutError::NoAgents);
    }
    for a in &agents {
        let size = vocabs.motion.get(a.class)?.size();
        if config.top_k > size {
            return Err(RolloutError::Config {
                field: "top_k".into(),
                reason: format!("{} exceeds the {} vocabulary size {size}", config.top_k, a.class.name()),
            });
        }
    }
    Ok(WarmStart { agents, road: scene.road, excluded, history_tokens: history, future_tokens: future })
}

/// Samples one token per row of `step` within its agent's class range.
fn sample_step<S: Scalar>(
    model: &Model<S>,
    agents: &[AgentSeq],
    step: &StepLogits<S>,
    config: &RolloutConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<(usize, u32)> {
    let offsets = model.config.class_offsets();
    let sizes = model.config.motion_vocab_sizes;
    step.agents
        .iter()
        .enumerate()
        .map(|(row, &a)| {
            let c = agents[a].class.index();
            let logits = &step.logits.row(row)[offsets[c]..offsets[c] + sizes[c]];
            (a, sample_logits(logits, config.top_k, config.temperature, rng) as u32)
        })
        .collect()
}

/// Appends a sampled token to every agent, advancing its pose by the
/// token's endpoint.
fn commit(agents: &mut [AgentSeq], vocabs: &Vocabularies, choices: &[(usize, u32)]) -> Result<(), RolloutError> {
    for &(a, tok) in choices {
        let seq = &mut agents[a];
        let end = vocabs.motion.get(seq.class)?.endpoint(tok as usize);
        let last = *seq.poses.last().expect("warm-started agents have a pose");
        seq.tokens.push(tok);
        seq.poses.push(last.compose(&end));
        seq.valid.push(true);
        seq.targets.push(None);
    }
    Ok(())
}

fn run_one<S: Scalar>(
    model: &Model<S>,
    vocabs: &Vocabularies,
    warm: &WarmStart,
    cache: &DecodeCache<S>,
    first: &StepLogits<S>,
    config: &RolloutConfig,
    index: usize,
) -> Result<(Rollout, Vec<f64>), RolloutError> {
    let seed = derive_seed(config.seed, &[index as u64]);
    let mut rng = rng_for(seed, &[]);
    let mut agents = warm.agents.clone();
    let mut cache = cache.clone();
    let mut logits = first.clone();
    let mut step_ms = Vec::with_capacity(warm.future_tokens);
    for f in 0..warm.future_tokens {
        let choices = sample_step(model, &agents, &logits, config, &mut rng);
        commit(&mut agents, vocabs, &choices)?;
        if f + 1 < warm.future_tokens {
            let t0 = Instant::now();
            logits = model.decode_step(&mut cache, &agents, &warm.road)?;
            step_ms.push(t0.elapsed().as_secs_f64() * 1e3);
        }
    }
    let h = warm.history_tokens;
    let mut out = Vec::with_capacity(agents.len());
    for a in &agents {
        let tokens = a.tokens[h..].to_vec();
        let start = a.poses[h - 1];
        let poses = detokenize(vocabs.motion.get(a.class)?, start, &tokens)?;
        out.push(AgentRollout { agent_id: a.agent_id, tokens, trajectory: poses.iter().map(|p| [p.x, p.y, p.yaw]).collect() });
    }
    Ok((Rollout { seed, agents: out }, step_ms))
}

/// Runs `config.n_rollouts` simulations of `scenario` on up to `threads`
/// worker threads. The map is encoded once and the warm-start cache is
/// shared by all simulations; each simulation's seed is derived from the
/// config seed and its index, so results do not depend on `threads`.
pub fn rollout<S: Scalar>(
    model: &Model<S>,
    scenario: &Scenario,
    vocabs: &Vocabularies,
    config: &RolloutConfig,
    threads: usize,
) -> Result<RolloutSet, RolloutError> {
    let warm = warm_start(scenario, vocabs, config)?;
    let mut cache = model.start_decode(&warm.agents, &warm.road)?;
    let mut first = None;
    for _ in 0..warm.history_tokens {
        first = Some(model.decode_step(&mut cache, &warm.agents, &warm.road)?);
    }
    let first = first.expect("at least one history token");
    let n = config.n_rollouts;
    let threads = threads.clamp(1, n);
    let mut results: Vec<Option<Result<(Rollout, Vec<f64>), RolloutError>>> = (0..n).map(|_| None).collect();
    if threads == 1 {
        for (i, slot) in results.iter_mut().enumerate() {
            *slot = Some(run_one(model, vocabs, &warm, &cache, &first, config, i));
        }
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|w| {
                    let (warm, cache, first) = (&warm, &cache, &first);
                    scope.spawn(move || {
                        (w..n).step_by(threads).map(|i| (i, run_one(model, vocabs, warm, cache, first, config, i))).collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("rollout worker panicked") {
                    results[i] = Some(r);
                }
            }
        });
    }
    let mut rollouts = Vec::with_capacity(n);
    let mut step_ms = Vec::with_capacity(n);
    for r in results {
        let (ro, ms) = r.expect("every rollout ran")?;
        rollouts.push(ro);
        step_ms.push(ms);
    }
    Ok(RolloutSet {
        schema: crate::io::SCHEMA_VERSION,
        config: config.clone(),
        history_tokens: warm.history_tokens,
        future_tokens: warm.future_tokens,
        start_step: warm.history_tokens * TOKEN_STEPS,
        agent_ids: warm.agents.iter().map(|a| a.agent_id).collect(),
        excluded: warm.excluded,
        map_encodes: cache.map_encodes,
        rollouts,
        step_ms,
    })
}

/// Worst discrepancy between cached incremental decoding and full
/// re-encoding of the truncated sequences, over steps `from_step..`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub max_abs_diff: f64,
    pub steps_compared: usize,
}

pub fn incremental_equivalence_check<S: Scalar>(
    model: &Model<S>,
    agents: &[AgentSeq],
    road: &RoadInput,
    from_step: usize,
) -> Result<EquivalenceReport, RolloutError> {
    let steps = agents.iter().map(AgentSeq::steps).max().unwrap_or(0);
    let mut cache = model.start_decode(agents, road)?;
    let mut report = EquivalenceReport { max_abs_diff: 0.0, steps_compared: 0 };
    for s in 0..steps {
        let inc = model.decode_step(&mut cache, agents, road)?;
        if s < from_step {
            continue;
        }
        let prefix: Vec<AgentSeq> = agents.iter().map(|a| a.truncated(s + 1)).collect();
        let (graph, full) = model.motion_logits(&prefix, road)?;
        let range = graph.step_nodes(s);
        debug_assert_eq!(range.len(), inc.agents.len());
        for (row, node) in range.enumerate() {
            debug_assert_eq!(graph.nodes[node].0, inc.agents[row]);
            report.max_abs_diff = report.max_abs_diff.max(max_abs_diff(full.row(node), inc.logits.row(row)));
        }
        report.steps_compared += 1;
    }
    Ok(report)
}

fn max_abs_diff<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.to_f64() - y.to_f64()).abs()).fold(0.0, f64::max)
}

/// Full-sequence class-restricted distribution of each agent at `step`,
/// keyed by agent index; used to audit sampled tokens offline.
pub fn step_distributions<S: Scalar>(
    model: &Model<S>,
    agents: &[AgentSeq],
    road: &RoadInput,
    step: usize,
    temperature: f64,
) -> Result<Vec<(usize, Vec<f64>)>, RolloutError> {
    let prefix: Vec<AgentSeq> = agents.iter().map(|a| a.truncated(step + 1)).collect();
    let (graph, logits): (_, Tensor<S>) = model.motion_logits(&prefix, road)?;
    let offsets = model.config.class_offsets();
    let sizes = model.config.motion_vocab_sizes;
    Ok(graph
        .step_nodes(step)
        .map(|n| {
            let a = graph.nodes[n].0;
            let c = agents[a].class.index();
            (a, softmax_with_temperature(&logits.row(n)[offsets[c]..offsets[c] + sizes[c]], temperature))
        })
        .collect())
}
