//! Simulation realism metrics: nine per-step measurements scored by how
//! likely the ground truth is under histograms of the simulated values, plus
//! displacement error and collision / off-road rates.

mod histogram;
mod measure;

pub use histogram::{histogram_score, smoothed_probabilities, Bins, HistogramConfig};
pub use measure::{box_gap, compute_measurements, time_to_collision, AgentPath, Group, Measurement, Series, TTC_CONE, TTC_MAX};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::geom::{GeomError, Polyline, Pose2};
use crate::rollout::RolloutSet;
use crate::scenario::Scenario;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("invalid histogram config: {0}")]
    Config(String),
    #[error("no valid ground-truth samples")]
    NoGroundTruth,
    #[error("no simulated samples")]
    NoRollouts,
    #[error("horizon mismatch: {0}")]
    Horizon(String),
    #[error("agent {0} is not in the ground-truth scenario")]
    UnknownAgent(u32),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// Scores of one scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema: u32,
    /// Per-measurement score in `[0, 1]`; `None` where no cell was scorable.
    pub scores: BTreeMap<String, Option<f64>>,
    pub kinematic: Option<f64>,
    pub interactive: Option<f64>,
    pub map: Option<f64>,
    /// Mean of the available group means.
    pub meta: f64,
    pub min_ade: f64,
    /// Fraction of (agent, rollout) pairs with any overlap.
    pub collision_rate: f64,
    /// Fraction of (agent, rollout) pairs that ever leave the corridor.
    pub offroad_rate: f64,
    pub n_agents: usize,
    pub n_rollouts: usize,
}

impl MetricReport {
    pub fn score(&self, m: Measurement) -> Option<f64> {
        self.scores.get(m.name()).copied().flatten()
    }

    pub fn group(&self, g: Group) -> Option<f64> {
        match g {
            Group::Kinematic => self.kinematic,
            Group::Interactive => self.interactive,
            Group::Map => self.map,
        }
    }

    pub fn csv_header() -> String {
        let mut s = String::from("scenario");
        for m in Measurement::ALL {
            s.push(',');
            s.push_str(m.name());
        }
        s.push_str(",kinematic,interactive,map,meta,min_ade,collision_rate,offroad_rate");
        s
    }

    pub fn csv_row(&self, scenario: &str) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = scenario.to_string();
        for m in Measurement::ALL {
            let _ = write!(s, ",{}", opt(self.score(m)));
        }
        let _ = write!(
            s,
            ",{},{},{},{},{},{},{}",
            opt(self.kinematic),
            opt(self.interactive),
            opt(self.map),
            self.meta,
            self.min_ade,
            self.collision_rate,
            self.offroad_rate
        );
        s
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// Scores simulated paths against ground-truth paths of the same agents
/// over the same window. Every `(agent, step)` cell with a valid
/// ground-truth value is scored against the histogram of its simulated
/// values; a measurement's score is the geometric mean over its cells.
pub fn evaluate_paths(
    gt: &[AgentPath],
    rollouts: &[Vec<AgentPath>],
    map: &[Polyline],
    config: &HistogramConfig,
) -> Result<MetricReport, MetricsError> {
    config.validate()?;
    if rollouts.is_empty() {
        return Err(MetricsError::NoRollouts);
    }
    let steps = gt.iter().map(|a| a.poses.len()).max().unwrap_or(0);
    for r in rollouts {
        if r.len() != gt.len() || r.iter().any(|a| a.poses.len() != steps) {
            return Err(MetricsError::Horizon(format!("rollouts must cover {} agents over {steps} steps", gt.len())));
        }
    }
    let gt_m = compute_measurements(gt, map)?;
    let sim_m = rollouts.iter().map(|r| compute_measurements(r, map)).collect::<Result<Vec<_>, _>>()?;

    let mut scores = BTreeMap::new();
    let mut by_group: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
    for m in Measurement::ALL {
        let bins = config.bins_of(m);
        let mut ln_sum = 0.0;
        let mut cells = 0usize;
        for a in 0..gt.len() {
            for t in 0..steps {
                let Some(g) = gt_m[m.index()][a][t] else { continue };
                let sim: Vec<f64> = sim_m.iter().filter_map(|s| s[m.index()][a][t]).collect();
                if sim.is_empty() {
                    continue;
                }
                ln_sum += histogram_score(&sim, &[g], bins, config.alpha)?.ln();
                cells += 1;
            }
        }
        let score = (cells > 0).then(|| (ln_sum / cells as f64).exp());
        if let Some(s) = score {
            by_group.entry(m.group() as u8).or_default().push(s);
        }
        scores.insert(m.name().to_string(), score);
    }
    let group = |g: Group| by_group.get(&(g as u8)).and_then(|v| mean(v.iter().copied()));
    let (kinematic, interactive, map_group) = (group(Group::Kinematic), group(Group::Interactive), group(Group::Map));
    let meta = mean([kinematic, interactive, map_group].into_iter().flatten()).ok_or(MetricsError::NoGroundTruth)?;

    let mut ades = Vec::new();
    for (a, path) in gt.iter().enumerate() {
        let best = rollouts
            .iter()
            .filter_map(|r| {
                mean(path.poses.iter().zip(&r[a].poses).filter_map(|(g, s)| Some(g.as_ref()?.distance(s.as_ref()?))))
            })
            .fold(f64::INFINITY, f64::min);
        if best.is_finite() {
            ades.push(best);
        }
    }
    let min_ade = mean(ades).ok_or(MetricsError::NoGroundTruth)?;

    let pairs = (gt.len() * rollouts.len()).max(1) as f64;
    let any_flag = |m: Measurement| -> f64 {
        sim_m.iter().map(|s| s[m.index()].iter().filter(|row| row.contains(&Some(1.0))).count()).sum::<usize>() as f64
            / pairs
    };
    Ok(MetricReport {
        schema: crate::io::SCHEMA_VERSION,
        scores,
        kinematic,
        interactive,
        map: map_group,
        meta,
        min_ade,
        collision_rate: any_flag(Measurement::CollisionFlag),
        offroad_rate: any_flag(Measurement::OffroadFlag),
        n_agents: gt.len(),
        n_rollouts: rollouts.len(),
    })
}

/// Ground-truth paths of `agent_ids` over `steps` states from `start`.
pub fn ground_truth_paths(scenario: &Scenario, agent_ids: &[u32], start: usize, steps: usize) -> Result<Vec<AgentPath>, MetricsError> {
    if start + steps > scenario.total_steps() {
        return Err(MetricsError::Horizon(format!(
            "window of {steps} states from {start} exceeds the scenario's {} states",
            scenario.total_steps()
        )));
    }
    agent_ids
        .iter()
        .map(|&id| {
            let tr = scenario.agents.iter().find(|t| t.id == id).ok_or(MetricsError::UnknownAgent(id))?;
            Ok(AgentPath {
                length: tr.length,
                width: tr.width,
                class: tr.class,
                poses: tr.states[start..start + steps].iter().map(|s| s.valid.then(|| s.pose())).collect(),
            })
        })
        .collect()
}

/// Scores a rollout set against its ground-truth scenario.
pub fn evaluate(set: &RolloutSet, scenario: &Scenario, config: &HistogramConfig) -> Result<MetricReport, MetricsError> {
    let steps = set.future_tokens * crate::tokens::TOKEN_STEPS + 1;
    let gt = ground_truth_paths(scenario, &set.agent_ids, set.start_step, steps)?;
    let mut rollouts = Vec::with_capacity(set.rollouts.len());
    for r in &set.rollouts {
        if r.agents.len() != gt.len() {
            return Err(MetricsError::Horizon(format!("rollout has {} agents, expected {}", r.agents.len(), gt.len())));
        }
        let paths = r
            .agents
            .iter()
            .zip(&gt)
            .zip(&set.agent_ids)
            .map(|((ag, g), &id)| {
                if ag.agent_id != id {
                    return Err(MetricsError::UnknownAgent(ag.agent_id));
                }
                if ag.trajectory.len() != steps {
                    return Err(MetricsError::Horizon(format!("agent {id} has {} poses, expected {steps}", ag.trajectory.len())));
                }
                Ok(AgentPath { poses: ag.trajectory.iter().map(|p| Some(Pose2::new(p[0], p[1], p[2]))).collect(), ..g.clone() })
            })
            .collect::<Result<Vec<_>, _>>()?;
        rollouts.push(paths);
    }
    evaluate_paths(&gt, &rollouts, &scenario.map, config)
}

#[cfg(test)]
mod tests;
