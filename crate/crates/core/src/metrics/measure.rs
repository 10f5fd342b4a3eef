use serde::{Deserialize, Serialize};

use crate::geom::{obb_intersects, signed_corridor_distance, wrap_angle, AgentClass, AgentState, GeomError, Polyline, Pose2};
use crate::scenario::DT;

/// Half-angle of the cone ahead of an agent in which leaders are sought.
pub const TTC_CONE: f64 = 10.0 * std::f64::consts::PI / 180.0;
/// Time-to-collision reported when no leader is closing in.
pub const TTC_MAX: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measurement {
    LinearSpeed,
    LinearAccel,
    AngularSpeed,
    AngularAccel,
    DistToNearest,
    CollisionFlag,
    Ttc,
    DistToRoadEdge,
    OffroadFlag,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Kinematic,
    Interactive,
    Map,
}

impl Measurement {
    pub const ALL: [Measurement; 9] = [
        Measurement::LinearSpeed,
        Measurement::LinearAccel,
        Measurement::AngularSpeed,
        Measurement::AngularAccel,
        Measurement::DistToNearest,
        Measurement::CollisionFlag,
        Measurement::Ttc,
        Measurement::DistToRoadEdge,
        Measurement::OffroadFlag,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Measurement::LinearSpeed => "linear_speed",
            Measurement::LinearAccel => "linear_accel",
            Measurement::AngularSpeed => "angular_speed",
            Measurement::AngularAccel => "angular_accel",
            Measurement::DistToNearest => "dist_to_nearest",
            Measurement::CollisionFlag => "collision_flag",
            Measurement::Ttc => "ttc",
            Measurement::DistToRoadEdge => "dist_to_road_edge",
            Measurement::OffroadFlag => "offroad_flag",
        }
    }

    pub fn group(self) -> Group {
        match self {
            Measurement::LinearSpeed | Measurement::LinearAccel | Measurement::AngularSpeed | Measurement::AngularAccel => {
                Group::Kinematic
            }
            Measurement::DistToNearest | Measurement::CollisionFlag | Measurement::Ttc => Group::Interactive,
            Measurement::DistToRoadEdge | Measurement::OffroadFlag => Group::Map,
        }
    }
}

/// Poses of one agent over the evaluation window (`None` where invalid).
#[derive(Clone, Debug, PartialEq)]
pub struct AgentPath {
    pub length: f64,
    pub width: f64,
    pub class: AgentClass,
    pub poses: Vec<Option<Pose2>>,
}

/// Per-agent, per-step values of one measurement; `None` where undefined.
pub type Series = Vec<Vec<Option<f64>>>;

/// Planar velocity from the backward difference ending at `t`.
fn velocity(p: &[Option<Pose2>], t: usize) -> Option<[f64; 2]> {
    if t == 0 {
        return None;
    }
    let (a, b) = (p[t - 1]?, p[t]?);
    Some([(b.x - a.x) / DT, (b.y - a.y) / DT])
}

fn yaw_rate(p: &[Option<Pose2>], t: usize) -> Option<f64> {
    if t == 0 {
        return None;
    }
    Some(wrap_angle(p[t]?.yaw - p[t - 1]?.yaw) / DT)
}

fn state(a: &AgentPath, pose: Pose2) -> AgentState {
    AgentState::new(pose, a.length, a.width, a.class)
}

/// Gap between two boxes along the line joining their centers: center
/// distance minus both half-extents in that direction, floored at zero.
pub fn box_gap(a: &AgentState, b: &AgentState) -> f64 {
    let (dx, dy) = (b.pose.x - a.pose.x, b.pose.y - a.pose.y);
    let d = dx.hypot(dy);
    if d == 0.0 {
        return 0.0;
    }
    let dir = [dx / d, dy / d];
    (d - a.support_extent(dir) - b.support_extent(dir)).max(0.0)
}

/// Time to collision with the nearest agent ahead within the heading cone;
/// [`TTC_MAX`] when there is none or it is not closing in.
pub fn time_to_collision(me: &AgentState, my_velocity: [f64; 2], others: &[(AgentState, [f64; 2])]) -> f64 {
    let (s, c) = me.pose.yaw.sin_cos();
    let mut best: Option<(f64, f64)> = None;
    for (other, v) in others {
        let (dx, dy) = (other.pose.x - me.pose.x, other.pose.y - me.pose.y);
        let ahead = dx * c + dy * s;
        if ahead <= 0.0 {
            continue;
        }
        let bearing = (-dx * s + dy * c).atan2(ahead);
        if bearing.abs() > TTC_CONE {
            continue;
        }
        let gap = box_gap(me, other);
        if best.is_none_or(|(g, _)| gap < g) {
            let closing = (my_velocity[0] - v[0]) * c + (my_velocity[1] - v[1]) * s;
            best = Some((gap, closing));
        }
    }
    match best {
        Some((gap, closing)) if closing > 0.0 => (gap / closing).min(TTC_MAX),
        _ => TTC_MAX,
    }
}

/// All nine measurements of a scene, indexed by [`Measurement::index`].
/// Interaction measurements are undefined when fewer than two agents are
/// valid at a step.
pub fn compute_measurements(paths: &[AgentPath], map: &[Polyline]) -> Result<Vec<Series>, GeomError> {
    let n = paths.len();
    let steps = paths.iter().map(|a| a.poses.len()).max().unwrap_or(0);
    let mut out: Vec<Series> = (0..Measurement::ALL.len()).map(|_| vec![vec![None; steps]; n]).collect();
    let set = |out: &mut Vec<Series>, m: Measurement, a: usize, t: usize, v: f64| out[m.index()][a][t] = Some(v);
    for (i, a) in paths.iter().enumerate() {
        let p = &a.poses;
        for t in 0..p.len() {
            if let Some(v) = velocity(p, t) {
                set(&mut out, Measurement::LinearSpeed, i, t, v[0].hypot(v[1]));
            }
            if t >= 1 {
                if let (Some(v0), Some(v1)) = (velocity(p, t - 1), velocity(p, t)) {
                    set(&mut out, Measurement::LinearAccel, i, t, (v1[0].hypot(v1[1]) - v0[0].hypot(v0[1])) / DT);
                }
                if let (Some(w0), Some(w1)) = (yaw_rate(p, t - 1), yaw_rate(p, t)) {
                    set(&mut out, Measurement::AngularAccel, i, t, ((w1 - w0) / DT).abs());
                }
            }
            if let Some(w) = yaw_rate(p, t) {
                set(&mut out, Measurement::AngularSpeed, i, t, w);
            }
            if let Some(pose) = p[t] {
                let d = signed_corridor_distance(pose.position(), map)?;
                set(&mut out, Measurement::DistToRoadEdge, i, t, d);
                set(&mut out, Measurement::OffroadFlag, i, t, if d > 0.0 { 1.0 } else { 0.0 });
            }
        }
    }
    for t in 0..steps {
        let present: Vec<(usize, AgentState)> =
            (0..n).filter_map(|i| paths[i].poses.get(t).copied().flatten().map(|p| (i, state(&paths[i], p)))).collect();
        if present.len() < 2 {
            continue;
        }
        for &(i, me) in &present {
            let others = present.iter().filter(|(j, _)| *j != i);
            let nearest = others.clone().map(|(_, o)| box_gap(&me, o)).fold(f64::INFINITY, f64::min);
            let collided = others.clone().any(|(_, o)| obb_intersects(&me, o));
            set(&mut out, Measurement::DistToNearest, i, t, nearest);
            set(&mut out, Measurement::CollisionFlag, i, t, if collided { 1.0 } else { 0.0 });
            if let Some(v) = velocity(&paths[i].poses, t) {
                let moving: Vec<(AgentState, [f64; 2])> =
                    others.filter_map(|&(j, o)| velocity(&paths[j].poses, t).map(|vj| (o, vj))).collect();
                if !moving.is_empty() {
                    set(&mut out, Measurement::Ttc, i, t, time_to_collision(&me, v, &moving));
                }
            }
        }
    }
    Ok(out)
}
