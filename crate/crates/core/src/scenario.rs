//! Scenario container: a vectorized map plus agent tracks sampled at 0.1 s.

use serde::{Deserialize, Serialize};

use crate::geom::{validate_map, AgentClass, AgentState, Pose2, Polyline};
use crate::io::{check_schema, SCHEMA_VERSION};
use crate::Error;

/// Fixed sampling interval of every track.
pub const DT: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateSample {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub valid: bool,
}

impl StateSample {
    pub fn pose(&self) -> Pose2 {
        Pose2 { x: self.x, y: self.y, yaw: self.yaw }
    }

    pub fn from_pose(p: Pose2, valid: bool) -> Self {
        StateSample { x: p.x, y: p.y, yaw: p.yaw, valid }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub id: u32,
    pub class: AgentClass,
    pub length: f64,
    pub width: f64,
    pub states: Vec<StateSample>,
}

impl Track {
    /// Agent state at step `t`, with speed from the backward difference
    /// (forward difference at t = 0).
    pub fn state(&self, t: usize) -> AgentState {
        let s = self.states[t];
        let speed = if self.states.len() < 2 {
            0.0
        } else {
            let (a, b) = if t == 0 { (0, 1) } else { (t - 1, t) };
            let (sa, sb) = (self.states[a], self.states[b]);
            if sa.valid && sb.valid {
                (sb.x - sa.x).hypot(sb.y - sa.y) / DT
            } else {
                0.0
            }
        };
        AgentState {
            pose: s.pose(),
            speed,
            valid: s.valid,
            length: self.length,
            width: self.width,
            class: self.class,
        }
    }

    pub fn poses(&self) -> Vec<Pose2> {
        self.states.iter().map(StateSample::pose).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub schema: u32,
    pub dt: f64,
    pub history_steps: usize,
    pub future_steps: usize,
    pub map: Vec<Polyline>,
    pub agents: Vec<Track>,
}

impl Scenario {
    pub fn new(map: Vec<Polyline>, agents: Vec<Track>, history_steps: usize, future_steps: usize) -> Self {
        Scenario { schema: SCHEMA_VERSION, dt: DT, history_steps, future_steps, map, agents }
    }

    pub fn total_steps(&self) -> usize {
        self.history_steps + self.future_steps
    }

    pub fn validate(&self) -> Result<(), Error> {
        check_schema(self.schema, "scenario")?;
        if (self.dt - DT).abs() > 1e-12 {
            return Err(Error::Invalid(format!("scenario dt must be {DT}, got {}", self.dt)));
        }
        validate_map(&self.map)?;
        let n = self.total_steps();
        for tr in &self.agents {
            if tr.states.len() != n {
                return Err(Error::Invalid(format!(
                    "agent {} has {} states, expected {n}",
                    tr.id,
                    tr.states.len()
                )));
            }
            if !tr.states.iter().any(|s| s.valid) {
                return Err(Error::Invalid(format!("agent {} has no valid state", tr.id)));
            }
            if !(tr.length > 0.0 && tr.width > 0.0) {
                return Err(Error::Invalid(format!("agent {} has a non-positive extent", tr.id)));
            }
            if tr.states.iter().any(|s| s.valid && !s.pose().is_finite()) {
                return Err(Error::Invalid(format!("agent {} has a non-finite state", tr.id)));
            }
        }
        Ok(())
    }

    /// Applies one rigid transform to every map point and agent state.
    pub fn transformed(&self, t: &Pose2) -> Scenario {
        let map = self
            .map
            .iter()
            .map(|p| Polyline { points: p.points.iter().map(|q| t.transform_point(*q)).collect(), ..p.clone() })
            .collect();
        let agents = self
            .agents
            .iter()
            .map(|tr| Track {
                states: tr.states.iter().map(|s| StateSample::from_pose(t.compose(&s.pose()), s.valid)).collect(),
                ..tr.clone()
            })
            .collect();
        Scenario { map, agents, ..self.clone() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("scenario serializes")
    }

    pub fn from_json(text: &str) -> Result<Scenario, Error> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let schema = value.get("schema").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        check_schema(schema, "scenario")?;
        let s: Scenario = serde_json::from_value(value)?;
        s.validate()?;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::PolylineKind;

    fn tiny() -> Scenario {
        let map = vec![Polyline {
            id: 3,
            kind: PolylineKind::Lane,
            lane_width: 4.0,
            points: vec![[0.0, 0.0], [10.0, 0.0]],
            successor_ids: vec![],
        }];
        let states = (0..4).map(|i| StateSample { x: i as f64, y: 0.0, yaw: 0.0, valid: true }).collect();
        let agents = vec![Track { id: 1, class: AgentClass::Vehicle, length: 4.0, width: 2.0, states }];
        Scenario::new(map, agents, 2, 2)
    }

    #[test]
    fn json_uses_documented_field_names() {
        let s = tiny();
        let v: serde_json::Value = serde_json::from_str(&s.to_json()).unwrap();
        assert_eq!(v["schema"], 1);
        assert_eq!(v["map"][0]["successors"], serde_json::json!([]));
        assert_eq!(v["map"][0]["kind"], "lane");
        assert_eq!(v["agents"][0]["class"], "vehicle");
        assert_eq!(v["agents"][0]["states"][1]["x"], 1.0);
        assert_eq!(Scenario::from_json(&s.to_json()).unwrap(), s);
    }

    #[test]
    fn unknown_schema_is_rejected() {
        let text = tiny().to_json().replacen("\"schema\":1", "\"schema\":7", 1);
        let err = Scenario::from_json(&text).unwrap_err();
        assert!(err.to_string().contains("schema"), "{err}");
    }

    #[test]
    fn speed_from_differences() {
        let s = tiny();
        assert!((s.agents[0].state(2).speed - 10.0).abs() < 1e-9);
    }
}
