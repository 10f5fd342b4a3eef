use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::RolloutError;
use crate::autodiff::Scalar;
use crate::geom::{AgentClass, Pose2};
use crate::model::{AgentSeq, Model, RoadInput};
use crate::seed::rng_for;

/// Per-step decode cost at one history length.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingPoint {
    pub history: usize,
    /// Cost of one cached decode step after `history` committed steps.
    pub cached_ms: f64,
    /// Cost of re-encoding all `history + 1` steps from scratch.
    pub full_ms: f64,
}

/// `n_agents` vehicles driving in parallel lanes for `steps` token steps
/// with random tokens of the first class.
pub fn straight_line_agents(n_agents: usize, steps: usize, vocab_size: usize, seed: u64) -> Vec<AgentSeq> {
    let mut rng = rng_for(seed, &[0x71DE]);
    (0..n_agents)
        .map(|i| AgentSeq {
            agent_id: i as u32,
            class: AgentClass::Vehicle,
            length: 4.5,
            width: 2.0,
            tokens: (0..steps).map(|_| rng.random_range(0..vocab_size as u32)).collect(),
            poses: (0..steps).map(|s| Pose2::new(5.0 * s as f64, 4.0 * i as f64, 0.0)).collect(),
            valid: vec![true; steps],
            targets: vec![None; steps],
        })
        .collect()
}

/// How many more repetitions a cached step gets than a full re-encode.
pub const CACHED_REP_FACTOR: usize = 10;

/// Measures, for each history length in `lengths` (ascending), the minimum
/// over `reps` repetitions of a full re-encode, and the fastest of
/// `reps * CACHED_REP_FACTOR` consecutive cached decode steps starting at
/// that length (as in a rollout; the history grows by one step per sample).
pub fn decode_cost_curve<S: Scalar>(
    model: &Model<S>,
    agents: &[AgentSeq],
    road: &RoadInput,
    lengths: &[usize],
    reps: usize,
) -> Result<Vec<TimingPoint>, RolloutError> {
    let steps = agents.iter().map(AgentSeq::steps).min().unwrap_or(0);
    let reps = reps.max(1);
    let cached_steps = reps * CACHED_REP_FACTOR;
    let mut cache = model.start_decode(agents, road)?;
    let mut out = Vec::with_capacity(lengths.len());
    for &len in lengths {
        if len + cached_steps >= steps {
            return Err(RolloutError::Config { field: "lengths".into(), reason: format!("history {len} plus {cached_steps} timed steps needs more than the {steps} available") });
        }
        while cache.graph.steps() < len {
            model.decode_step(&mut cache, agents, road)?;
        }
        let mut cached_ms = f64::INFINITY;
        let mut c = cache.clone();
        for _ in 0..cached_steps {
            let t0 = Instant::now();
            std::hint::black_box(model.decode_step(&mut c, agents, road)?);
            cached_ms = cached_ms.min(t0.elapsed().as_secs_f64() * 1e3);
        }
        let prefix: Vec<AgentSeq> = agents.iter().map(|a| a.truncated(len + 1)).collect();
        let mut full_ms = f64::INFINITY;
        for _ in 0..reps {
            let t0 = Instant::now();
            std::hint::black_box(model.motion_logits(&prefix, road)?);
            full_ms = full_ms.min(t0.elapsed().as_secs_f64() * 1e3);
        }
        out.push(TimingPoint { history: len, cached_ms, full_ms });
    }
    Ok(out)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let u: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let v: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    crate::scaling::fit_line(&u, &v).map(|(slope, _, _)| slope)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_exact_power_laws() {
        let xs = [8.0, 16.0, 32.0, 64.0];
        let lin: Vec<f64> = xs.iter().map(|x| 3.0 * x).collect();
        let quad: Vec<f64> = xs.iter().map(|x| 0.5 * x * x).collect();
        assert!((loglog_slope(&xs, &lin).unwrap() - 1.0).abs() < 1e-12);
        assert!((loglog_slope(&xs, &quad).unwrap() - 2.0).abs() < 1e-12);
        assert!(loglog_slope(&[1.0], &[1.0]).is_none());
    }
}
