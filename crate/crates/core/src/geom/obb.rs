use serde::{Deserialize, Serialize};

use super::pose::Pose2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentClass {
    Vehicle,
    Pedestrian,
    Cyclist,
}

impl AgentClass {
    pub const ALL: [AgentClass; 3] = [AgentClass::Vehicle, AgentClass::Pedestrian, AgentClass::Cyclist];

    pub fn index(self) -> usize {
        match self {
            AgentClass::Vehicle => 0,
            AgentClass::Pedestrian => 1,
            AgentClass::Cyclist => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AgentClass::Vehicle => "vehicle",
            AgentClass::Pedestrian => "pedestrian",
            AgentClass::Cyclist => "cyclist",
        }
    }
}

impl std::str::FromStr for AgentClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vehicle" => Ok(AgentClass::Vehicle),
            "pedestrian" => Ok(AgentClass::Pedestrian),
            "cyclist" => Ok(AgentClass::Cyclist),
            other => Err(format!("unknown agent class '{other}'")),
        }
    }
}

/// Instantaneous state of one agent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentState {
    pub pose: Pose2,
    pub speed: f64,
    pub valid: bool,
    pub length: f64,
    pub width: f64,
    pub class: AgentClass,
}

impl AgentState {
    pub fn new(pose: Pose2, length: f64, width: f64, class: AgentClass) -> Self {
        AgentState { pose, speed: 0.0, valid: true, length, width, class }
    }

    pub fn corners(&self) -> [[f64; 2]; 4] {
        let hl = 0.5 * self.length;
        let hw = 0.5 * self.width;
        [
            self.pose.transform_point([hl, hw]),
            self.pose.transform_point([-hl, hw]),
            self.pose.transform_point([-hl, -hw]),
            self.pose.transform_point([hl, -hw]),
        ]
    }

    /// Half-extent of the box projected onto the unit direction `dir`.
    pub fn support_extent(&self, dir: [f64; 2]) -> f64 {
        let (s, c) = self.pose.yaw.sin_cos();
        let along = (dir[0] * c + dir[1] * s).abs();
        let across = (-dir[0] * s + dir[1] * c).abs();
        0.5 * self.length * along + 0.5 * self.width * across
    }
}

fn project(corners: &[[f64; 2]; 4], axis: [f64; 2]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for c in corners {
        let p = c[0] * axis[0] + c[1] * axis[1];
        lo = lo.min(p);
        hi = hi.max(p);
    }
    (lo, hi)
}

/// Separating-axis overlap test for two oriented rectangles. Touching boxes
/// count as intersecting.
pub fn obb_intersects(a: &AgentState, b: &AgentState) -> bool {
    let ca = a.corners();
    let cb = b.corners();
    let (sa, cos_a) = a.pose.yaw.sin_cos();
    let (sb, cos_b) = b.pose.yaw.sin_cos();
    let axes = [[cos_a, sa], [-sa, cos_a], [cos_b, sb], [-sb, cos_b]];
    for axis in axes {
        let (a_lo, a_hi) = project(&ca, axis);
        let (b_lo, b_hi) = project(&cb, axis);
        if a_hi < b_lo || b_hi < a_lo {
            return false;
        }
    }
    true
}
