//! Deterministic synthetic maps and traffic scenarios.

mod map;
mod traffic;

use serde::{Deserialize, Serialize};

use crate::geom::{obb_intersects, signed_corridor_distance, AgentClass};
use crate::scenario::{Scenario, DT};

pub use map::{generate_map, MapKind, MapSpec, MAX_POINT_SPACING};
pub use traffic::{generate_scenario, TrafficSpec};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("could only place {placed} of {requested} agents with the required spawn gap")]
    Placement { placed: usize, requested: usize },
    #[error("no collision-free scenario found after {attempts} attempts")]
    Unresolvable { attempts: u64 },
}

/// Acceleration magnitude above which a finite-difference step is flagged.
pub const ACCEL_LIMIT: f64 = 4.0;

/// Brute-force plausibility counts over a scenario.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    /// Colliding agent pairs at the first step.
    pub collisions_at_start: usize,
    /// Colliding (pair, step) combinations over the whole scenario.
    pub collision_steps: usize,
    /// Valid vehicle states outside the drivable corridor.
    pub offroad_steps: usize,
    /// Finite-difference accelerations above the limit.
    pub accel_violations: usize,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        *self == ValidationReport::default()
    }
}

pub fn validate_scenario(s: &Scenario) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n_steps = s.agents.iter().map(|a| a.states.len()).min().unwrap_or(0);
    for t in 0..n_steps {
        let states: Vec<_> = s.agents.iter().map(|a| a.state(t)).collect();
        for i in 0..states.len() {
            for j in i + 1..states.len() {
                if states[i].valid && states[j].valid && obb_intersects(&states[i], &states[j]) {
                    report.collision_steps += 1;
                    if t == 0 {
                        report.collisions_at_start += 1;
                    }
                }
            }
        }
    }
    for tr in &s.agents {
        if tr.class == AgentClass::Vehicle {
            for st in tr.states.iter().filter(|st| st.valid) {
                if let Ok(d) = signed_corridor_distance([st.x, st.y], &s.map) {
                    if d > 0.0 {
                        report.offroad_steps += 1;
                    }
                }
            }
        }
        let speeds: Vec<Option<f64>> = tr
            .states
            .windows(2)
            .map(|w| (w[0].valid && w[1].valid).then(|| (w[1].x - w[0].x).hypot(w[1].y - w[0].y) / DT))
            .collect();
        for w in speeds.windows(2) {
            if let (Some(a), Some(b)) = (w[0], w[1]) {
                if ((b - a) / DT).abs() > ACCEL_LIMIT {
                    report.accel_violations += 1;
                }
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{Polyline, PolylineKind};
    use crate::scenario::{StateSample, Track};

    fn lane() -> Vec<Polyline> {
        vec![Polyline {
            id: 0,
            kind: PolylineKind::Lane,
            lane_width: 4.0,
            points: vec![[-100.0, 0.0], [100.0, 0.0]],
            successor_ids: vec![],
        }]
    }

    fn track(id: u32, xs: &[f64]) -> Track {
        let states = xs.iter().map(|&x| StateSample { x, y: 0.0, yaw: 0.0, valid: true }).collect();
        Track { id, class: AgentClass::Vehicle, length: 4.0, width: 2.0, states }
    }

    #[test]
    fn identical_poses_collide_at_start() {
        let s = Scenario::new(lane(), vec![track(0, &[0.0, 1.0, 2.0]), track(1, &[0.0, 1.0, 2.0])], 1, 2);
        let r = validate_scenario(&s);
        assert!(r.collisions_at_start >= 1);
        assert_eq!(r.collision_steps, 3);
    }

    #[test]
    fn acceleration_jump_is_flagged() {
        // Speed jumps from 0 to 1 m/s in one 0.1 s step: 10 m/s^2.
        let s = Scenario::new(lane(), vec![track(0, &[0.0, 0.0, 0.1, 0.2])], 2, 2);
        assert!(validate_scenario(&s).accel_violations >= 1);
    }

    #[test]
    fn off_corridor_vehicle_counts_but_pedestrian_does_not() {
        let mut t = track(0, &[0.0, 1.0]);
        t.states.iter_mut().for_each(|st| st.y = 10.0);
        let mut p = t.clone();
        p.id = 1;
        p.class = AgentClass::Pedestrian;
        p.states.iter_mut().for_each(|st| st.x += 50.0);
        let r = validate_scenario(&Scenario::new(lane(), vec![t, p], 1, 1));
        assert_eq!(r.offroad_steps, 2);
    }

    #[test]
    fn clean_hand_built_scenario_reports_zeros() {
        let s = Scenario::new(lane(), vec![track(0, &[0.0, 1.0, 2.0]), track(1, &[20.0, 21.0, 22.0])], 1, 2);
        assert!(validate_scenario(&s).is_clean());
    }
}
