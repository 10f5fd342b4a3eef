use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::rollout::{AgentRollout, Rollout, RolloutConfig};
use crate::synth::{generate_map, generate_scenario, MapKind, MapSpec, TrafficSpec};

fn scenario(lanes: usize, agents: usize, seed: u64) -> Scenario {
    let map = generate_map(&MapSpec::new(MapKind::Straight, lanes, seed)).unwrap();
    generate_scenario(&map, &TrafficSpec::new(agents, seed)).unwrap()
}

/// Rollout set whose every simulation is `f(rollout index, agent, pose)`
/// applied to the ground truth.
fn derived_set(s: &Scenario, n: usize, mut f: impl FnMut(usize, usize, Pose2) -> Pose2) -> RolloutSet {
    let future_tokens = 6;
    let start_step = 10;
    let ids: Vec<u32> = s.agents.iter().map(|t| t.id).collect();
    let rollouts = (0..n)
        .map(|r| Rollout {
            seed: r as u64,
            agents: s
                .agents
                .iter()
                .enumerate()
                .map(|(a, tr)| AgentRollout {
                    agent_id: tr.id,
                    tokens: vec![0; future_tokens],
                    trajectory: tr.states[start_step..=start_step + 5 * future_tokens]
                        .iter()
                        .map(|st| {
                            let p = f(r, a, st.pose());
                            [p.x, p.y, p.yaw]
                        })
                        .collect(),
                })
                .collect(),
        })
        .collect();
    RolloutSet {
        schema: 1,
        config: RolloutConfig::default(),
        history_tokens: 2,
        future_tokens,
        start_step,
        agent_ids: ids,
        excluded: vec![],
        map_encodes: 1,
        rollouts,
        step_ms: vec![],
    }
}

#[test]
fn ground_truth_copies_score_perfectly() {
    let s = scenario(2, 4, 1);
    let set = derived_set(&s, 32, |_, _, p| p);
    let r = evaluate(&set, &s, &HistogramConfig::default()).unwrap();
    for m in Measurement::ALL {
        assert_eq!(r.score(m), Some(1.0), "{}", m.name());
    }
    assert_eq!((r.kinematic, r.interactive, r.map), (Some(1.0), Some(1.0), Some(1.0)));
    assert_eq!(r.meta, 1.0);
    assert_eq!(r.min_ade, 0.0);
    assert_eq!(r.collision_rate, 0.0);
    assert_eq!(r.offroad_rate, 0.0);
}

#[test]
fn forced_overlap_lowers_the_interactive_group() {
    let s = scenario(2, 3, 2);
    let oracle = evaluate(&derived_set(&s, 32, |_, _, p| p), &s, &HistogramConfig::default()).unwrap();
    // In the first simulation, agent 1 drives head-on through agent 0.
    let target: Vec<Pose2> = s.agents[0].states.iter().map(|st| st.pose()).collect();
    let mut k = 10;
    let set = derived_set(&s, 32, |r, a, p| {
        if r == 0 && a == 1 {
            let q = target[k];
            k += 1;
            Pose2::new(q.x, q.y, q.yaw + std::f64::consts::PI)
        } else {
            p
        }
    });
    let r = evaluate(&set, &s, &HistogramConfig::default()).unwrap();
    assert!(r.collision_rate > 0.0);
    assert!(r.interactive.unwrap() < oracle.interactive.unwrap());
}

#[test]
fn leaving_the_road_lowers_the_map_group() {
    let s = scenario(1, 2, 3);
    let oracle = evaluate(&derived_set(&s, 32, |_, _, p| p), &s, &HistogramConfig::default()).unwrap();
    let set = derived_set(&s, 32, |_, _, p| {
        let (sn, cs) = p.yaw.sin_cos();
        Pose2::new(p.x - 5.0 * sn, p.y + 5.0 * cs, p.yaw)
    });
    let r = evaluate(&set, &s, &HistogramConfig::default()).unwrap();
    assert_eq!(r.offroad_rate, 1.0);
    assert!(r.map.unwrap() < oracle.map.unwrap());
    assert!((r.min_ade - 5.0).abs() < 1e-9);
}

fn noisy(s: &Scenario, n: usize, sigma: f64, seed: u64) -> RolloutSet {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let d = Normal::new(0.0, sigma).unwrap();
    derived_set(s, n, |_, _, p| Pose2::new(p.x + d.sample(&mut rng), p.y + d.sample(&mut rng), p.yaw + 0.1 * d.sample(&mut rng)))
}

#[test]
fn scores_are_rigid_invariant() {
    let s = scenario(2, 3, 4);
    let set = noisy(&s, 8, 0.05, 1);
    let t = Pose2::new(31.0, -12.0, 0.7);
    let moved_s = s.transformed(&t);
    let mut moved = set.clone();
    for r in &mut moved.rollouts {
        for a in &mut r.agents {
            for p in &mut a.trajectory {
                let q = t.compose(&Pose2::new(p[0], p[1], p[2]));
                *p = [q.x, q.y, q.yaw];
            }
        }
    }
    let a = evaluate(&set, &s, &HistogramConfig::default()).unwrap();
    let b = evaluate(&moved, &moved_s, &HistogramConfig::default()).unwrap();
    assert!((a.meta - b.meta).abs() < 1e-9, "{} vs {}", a.meta, b.meta);
    assert!((a.min_ade - b.min_ade).abs() < 1e-9);
}

#[test]
fn corrupting_rollouts_does_not_raise_the_meta_score_on_average() {
    let s = scenario(2, 4, 5);
    let (mut clean, mut corrupted) = (0.0, 0.0);
    for seed in 0..20 {
        clean += evaluate(&noisy(&s, 16, 0.02, seed), &s, &HistogramConfig::default()).unwrap().meta;
        corrupted += evaluate(&noisy(&s, 16, 0.3, seed), &s, &HistogramConfig::default()).unwrap().meta;
    }
    assert!(corrupted <= clean, "{corrupted} > {clean}");
}

#[test]
fn scores_stay_in_range_and_meta_is_the_group_mean() {
    let s = scenario(2, 4, 6);
    let r = evaluate(&noisy(&s, 8, 0.2, 3), &s, &HistogramConfig::default()).unwrap();
    for m in Measurement::ALL {
        let v = r.score(m).unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
    let groups = [r.kinematic.unwrap(), r.interactive.unwrap(), r.map.unwrap()];
    assert_eq!(r.meta, groups.iter().sum::<f64>() / 3.0);
    assert!(r.min_ade >= 0.0);
}

#[test]
fn single_agent_scenes_skip_the_interactive_group() {
    let s = scenario(2, 1, 7);
    let r = evaluate(&derived_set(&s, 4, |_, _, p| p), &s, &HistogramConfig::default()).unwrap();
    assert_eq!(r.interactive, None);
    assert_eq!(r.score(Measurement::DistToNearest), None);
    assert_eq!(r.meta, 1.0);
}

#[test]
fn horizon_mismatch_is_an_error() {
    let s = scenario(2, 2, 8);
    let mut set = derived_set(&s, 2, |_, _, p| p);
    set.rollouts[1].agents[0].trajectory.pop();
    assert!(matches!(evaluate(&set, &s, &HistogramConfig::default()), Err(MetricsError::Horizon(_))));
    let mut long = derived_set(&s, 2, |_, _, p| p);
    long.future_tokens = 40;
    assert!(matches!(evaluate(&long, &s, &HistogramConfig::default()), Err(MetricsError::Horizon(_))));
}

#[test]
fn csv_row_matches_header() {
    let s = scenario(2, 1, 9);
    let r = evaluate(&derived_set(&s, 2, |_, _, p| p), &s, &HistogramConfig::default()).unwrap();
    let header = MetricReport::csv_header();
    let row = r.csv_row("scene_0");
    assert_eq!(header.split(',').count(), row.split(',').count());
    assert!(row.starts_with("scene_0,1,"));
}
