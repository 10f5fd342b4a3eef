use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geom::{obb_intersects, signed_corridor_distance, wrap_angle, AgentClass, Polyline, PolylineKind, Pose2};
use crate::scenario::{Scenario, StateSample, Track, DT};

use super::SynthError;

const SUBSTEPS: usize = 5;
const MAX_ACCEL: f64 = 2.0;
const MAX_BRAKE: f64 = 3.5;
const MAX_JERK: f64 = 8.0;
const MAX_YAW_RATE: f64 = 1.0;
const LAT_ACCEL: f64 = 2.5;
const SPAWN_GAP: f64 = 10.0;
const ATTEMPTS: u64 = 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrafficSpec {
    /// Number of vehicles.
    pub n_agents: usize,
    #[serde(default)]
    pub n_pedestrians: usize,
    #[serde(default)]
    pub n_cyclists: usize,
    pub speed_range: [f64; 2],
    pub history_steps: usize,
    /// Number of future steps after the history window.
    pub horizon_steps: usize,
    /// Lane-change rate per second of simulated time.
    pub lane_change_prob: f64,
    pub seed: u64,
}

impl TrafficSpec {
    pub fn new(n_agents: usize, seed: u64) -> Self {
        TrafficSpec {
            n_agents,
            n_pedestrians: 0,
            n_cyclists: 0,
            speed_range: [4.0, 12.0],
            history_steps: 11,
            horizon_steps: 30,
            lane_change_prob: 0.05,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_agents + self.n_pedestrians + self.n_cyclists < 1 {
            return Err(SynthError::InvalidSpec("n_agents must be >= 1".into()));
        }
        let [lo, hi] = self.speed_range;
        if !(0.0..=30.0).contains(&lo) || !(0.0..=30.0).contains(&hi) || lo > hi {
            return Err(SynthError::InvalidSpec("speed_range must lie within [0, 30] and be ordered".into()));
        }
        if self.history_steps < 1 || self.horizon_steps < 1 {
            return Err(SynthError::InvalidSpec("history_steps and horizon_steps must be >= 1".into()));
        }
        if !(0.0..=10.0).contains(&self.lane_change_prob) {
            return Err(SynthError::InvalidSpec("lane_change_prob must lie within [0, 10]".into()));
        }
        Ok(())
    }
}

/// Dense reference path with cumulative arc length.
#[derive(Clone, Debug)]
struct Path {
    pts: Vec<[f64; 2]>,
    cum: Vec<f64>,
    /// `(polyline id, start s, end s)` of each member polyline.
    parts: Vec<(u32, f64, f64)>,
}

impl Path {
    fn from_chain(chain: &[&Polyline]) -> Path {
        let mut pts: Vec<[f64; 2]> = Vec::new();
        let mut parts = Vec::new();
        let mut cum = Vec::new();
        for pl in chain {
            let start_s = cum.last().copied().unwrap_or(0.0);
            for p in &pl.points {
                if let Some(last) = pts.last() {
                    let d = crate::geom::dist(*last, *p);
                    if d < 1e-9 {
                        continue;
                    }
                    cum.push(cum.last().unwrap() + d);
                } else {
                    cum.push(0.0);
                }
                pts.push(*p);
            }
            parts.push((pl.id, start_s, *cum.last().unwrap()));
        }
        Path { pts, cum, parts }
    }

    fn len(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    fn segment_at(&self, s: f64) -> usize {
        let i = self.cum.partition_point(|&c| c <= s);
        i.clamp(1, self.pts.len() - 1) - 1
    }

    fn heading_at(&self, s: f64) -> f64 {
        let i = self.segment_at(s);
        let (a, b) = (self.pts[i], self.pts[i + 1]);
        (b[1] - a[1]).atan2(b[0] - a[0])
    }

    /// Point at arc length `s`, extrapolated linearly beyond either end.
    fn point_at(&self, s: f64) -> [f64; 2] {
        let i = self.segment_at(s);
        let (a, b) = (self.pts[i], self.pts[i + 1]);
        let seg = self.cum[i + 1] - self.cum[i];
        let t = (s - self.cum[i]) / seg;
        [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
    }

    /// Returns `(s, lateral distance)` of the closest point.
    fn project(&self, p: [f64; 2]) -> (f64, f64) {
        let mut best = (0.0, f64::INFINITY);
        for i in 0..self.pts.len() - 1 {
            let (a, b) = (self.pts[i], self.pts[i + 1]);
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let len2 = dx * dx + dy * dy;
            let t = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0);
            let d = (p[0] - a[0] - t * dx).hypot(p[1] - a[1] - t * dy);
            if d < best.1 {
                best = (self.cum[i] + t * (self.cum[i + 1] - self.cum[i]), d);
            }
        }
        best
    }

    fn curvature_radius(&self, s: f64) -> f64 {
        let dh = wrap_angle(self.heading_at(s + 2.0) - self.heading_at(s - 2.0)).abs();
        if dh < 1e-9 {
            f64::INFINITY
        } else {
            4.0 / dh
        }
    }

    fn polyline_at(&self, s: f64) -> u32 {
        self.parts.iter().find(|(_, a, b)| s >= *a && s < *b).map(|p| p.0).unwrap_or(self.parts.last().unwrap().0)
    }
}

struct RoadGraph {
    routes: Vec<Path>,
    /// Lanes that are both entered from and exit into other lanes.
    connectors: HashSet<u32>,
    /// Parallel neighbor lanes for isolated lanes, by polyline id.
    adjacent: HashMap<u32, Vec<u32>>,
    lane_paths: HashMap<u32, Path>,
}

impl RoadGraph {
    fn build(map: &[Polyline]) -> RoadGraph {
        let lanes: Vec<&Polyline> = map.iter().filter(|p| p.kind == PolylineKind::Lane).collect();
        let by_id: HashMap<u32, &Polyline> = lanes.iter().map(|p| (p.id, *p)).collect();
        let mut has_pred = HashSet::new();
        for l in &lanes {
            for s in &l.successor_ids {
                has_pred.insert(*s);
            }
        }
        let connectors: HashSet<u32> =
            lanes.iter().filter(|l| has_pred.contains(&l.id) && !l.successor_ids.is_empty()).map(|l| l.id).collect();

        let mut routes = Vec::new();
        for src in lanes.iter().filter(|l| !has_pred.contains(&l.id)) {
            let mut stack = vec![vec![*src]];
            while let Some(chain) = stack.pop() {
                let last = chain.last().unwrap();
                let next: Vec<&Polyline> =
                    last.successor_ids.iter().filter_map(|id| by_id.get(id).copied()).collect();
                if next.is_empty() {
                    routes.push(Path::from_chain(&chain));
                } else {
                    for n in next.into_iter().rev() {
                        let mut c = chain.clone();
                        c.push(n);
                        stack.push(c);
                    }
                }
            }
        }

        let isolated: Vec<&Polyline> =
            lanes.iter().copied().filter(|l| !has_pred.contains(&l.id) && l.successor_ids.is_empty()).collect();
        let mut adjacent: HashMap<u32, Vec<u32>> = HashMap::new();
        for a in &isolated {
            for b in &isolated {
                if a.id == b.id {
                    continue;
                }
                let w = a.lane_width;
                let probe = [a.points[0], a.points[a.points.len() / 2], *a.points.last().unwrap()];
                if probe.iter().all(|p| (b.distance_to(*p) - w).abs() < 0.25 * w) {
                    adjacent.entry(a.id).or_default().push(b.id);
                }
            }
        }
        let lane_paths = lanes.iter().map(|l| (l.id, Path::from_chain(&[*l]))).collect();
        RoadGraph { routes, connectors, adjacent, lane_paths }
    }
}

#[derive(Clone, Debug)]
struct LaneChange {
    target: u32,
    elapsed: f64,
}

#[derive(Clone, Debug)]
struct Vehicle {
    path: Path,
    v: f64,
    a: f64,
    cruise: f64,
    next_cruise_change: f64,
    lane_change: Option<LaneChange>,
    reserved: bool,
}

#[derive(Clone, Debug)]
enum Mover {
    Vehicle(Box<Vehicle>),
    Constant { v: f64 },
}

#[derive(Clone, Debug)]
struct SimAgent {
    class: AgentClass,
    length: f64,
    width: f64,
    mover: Mover,
    pose: Pose2,
    speed: f64,
    inbound: Option<u32>,
}

impl SimAgent {
    fn state(&self) -> crate::geom::AgentState {
        crate::geom::AgentState {
            pose: self.pose,
            speed: self.speed,
            valid: true,
            length: self.length,
            width: self.width,
            class: self.class,
        }
    }
}

fn bumper_gap(a: &SimAgent, b: &SimAgent) -> f64 {
    a.pose.distance(&b.pose) - 0.5 * (a.length + b.length)
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

const LANE_CHANGE_TIME: f64 = 4.0;

/// Generates a scenario of lane-following vehicles (pure pursuit steering,
/// jerk-limited speed control with car following) plus constant-velocity
/// pedestrians and cyclists off the drivable corridor.
///
/// Attempts are resampled until the whole horizon is collision-free and no
/// vehicle leaves the corridor.
pub fn generate_scenario(map: &[Polyline], spec: &TrafficSpec) -> Result<Scenario, SynthError> {
    spec.validate()?;
    if map.is_empty() {
        return Err(SynthError::InvalidSpec("map is empty".into()));
    }
    let graph = RoadGraph::build(map);
    if spec.n_agents > 0 && graph.routes.is_empty() {
        return Err(SynthError::InvalidSpec("map has no lanes to place vehicles on".into()));
    }
    let requested = spec.n_agents + spec.n_pedestrians + spec.n_cyclists;
    let mut best_placed = 0;
    let mut placement_failures = 0;
    for attempt in 0..ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(attempt));
        let agents = match place(map, &graph, spec, &mut rng) {
            Ok(a) => a,
            Err(placed) => {
                best_placed = best_placed.max(placed);
                placement_failures += 1;
                continue;
            }
        };
        if let Some(scenario) = simulate(map, &graph, spec, agents, &mut rng) {
            return Ok(scenario);
        }
    }
    if placement_failures == ATTEMPTS {
        return Err(SynthError::Placement { placed: best_placed, requested });
    }
    Err(SynthError::Unresolvable { attempts: ATTEMPTS })
}

fn place(map: &[Polyline], graph: &RoadGraph, spec: &TrafficSpec, rng: &mut ChaCha8Rng) -> Result<Vec<SimAgent>, usize> {
    let mut agents: Vec<SimAgent> = Vec::new();
    for _ in 0..spec.n_agents {
        let mut ok = false;
        for _ in 0..200 {
            let path = &graph.routes[rng.random_range(0..graph.routes.len())];
            let cruise = rng.random_range(spec.speed_range[0]..=spec.speed_range[1]);
            // Keep clear of the end-of-route braking zone for the whole
            // scenario when the route is long enough.
            let duration = (spec.history_steps + spec.horizon_steps) as f64 * DT;
            let margin = (8.0 + cruise * cruise / 4.0 + cruise * duration).min(0.5 * path.len());
            if path.len() - margin <= 5.0 {
                continue;
            }
            let s = rng.random_range(5.0..path.len() - margin);
            if graph.connectors.contains(&path.polyline_at(s)) {
                continue;
            }
            let p = path.point_at(s);
            let pose = Pose2::new(p[0], p[1], path.heading_at(s));
            let length = rng.random_range(4.0..5.0);
            let width = rng.random_range(1.8..2.1);
            let cand = SimAgent {
                class: AgentClass::Vehicle,
                length,
                width,
                mover: Mover::Vehicle(Box::new(Vehicle {
                    path: path.clone(),
                    v: cruise,
                    a: 0.0,
                    cruise,
                    next_cruise_change: rng.random_range(2.0..4.0),
                    lane_change: None,
                    reserved: false,
                })),
                pose,
                speed: cruise,
                inbound: path.parts.first().map(|p| p.0),
            };
            if agents.iter().all(|o| bumper_gap(o, &cand) >= SPAWN_GAP) {
                agents.push(cand);
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(agents.len());
        }
    }
    let lanes: Vec<&Polyline> =
        map.iter().filter(|p| p.kind == PolylineKind::Lane && !graph.connectors.contains(&p.id)).collect();
    let horizon = (spec.history_steps + spec.horizon_steps) as f64 * DT;
    for (class, n) in [(AgentClass::Pedestrian, spec.n_pedestrians), (AgentClass::Cyclist, spec.n_cyclists)] {
        for _ in 0..n {
            let mut ok = false;
            for _ in 0..400 {
                if lanes.is_empty() {
                    break;
                }
                let lane = lanes[rng.random_range(0..lanes.len())];
                let path = &graph.lane_paths[&lane.id];
                let s = rng.random_range(0.0..path.len());
                let heading = path.heading_at(s);
                let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let off = rng.random_range(0.5 * lane.lane_width + 1.8..0.5 * lane.lane_width + 5.0) * side;
                let p = path.point_at(s);
                let pos = [p[0] - heading.sin() * off, p[1] + heading.cos() * off];
                let (v, length, width, yaw) = match class {
                    AgentClass::Pedestrian => {
                        let flip = if rng.random_bool(0.5) { std::f64::consts::PI } else { 0.0 };
                        (rng.random_range(0.8..1.6), 0.6, 0.6, heading + flip)
                    }
                    _ => (rng.random_range(3.0..6.0), 1.8, 0.7, heading),
                };
                let pose = Pose2::new(pos[0], pos[1], yaw);
                // Reject straight paths that would cross the drivable corridor.
                let stays_off = (0..=10).all(|k| {
                    let d = v * horizon * k as f64 / 10.0;
                    let q = [pos[0] + d * yaw.cos(), pos[1] + d * yaw.sin()];
                    signed_corridor_distance(q, map).map(|x| x > 1.5).unwrap_or(true)
                });
                if !stays_off {
                    continue;
                }
                let cand = SimAgent { class, length, width, mover: Mover::Constant { v }, pose, speed: v, inbound: None };
                if agents.iter().all(|o| bumper_gap(o, &cand) >= SPAWN_GAP) {
                    agents.push(cand);
                    ok = true;
                    break;
                }
            }
            if !ok {
                return Err(agents.len());
            }
        }
    }
    // Cap initial speeds so every follower can stop behind its leader.
    let snapshot = agents.clone();
    for (i, ag) in agents.iter_mut().enumerate() {
        if let Mover::Vehicle(veh) = &mut ag.mover {
            if let Some((gap, v_lead)) = leader(i, &snapshot, &veh.path, veh.path.project(ag.pose.position()).0) {
                let cap = v_lead + (2.0 * 2.0 * (gap - 3.0).max(0.0)).sqrt();
                if veh.v > cap {
                    veh.v = cap;
                    ag.speed = cap;
                }
            }
        }
    }
    Ok(agents)
}

/// Nearest agent ahead along `path`: returns `(bumper gap, speed along path)`.
fn leader(me: usize, agents: &[SimAgent], path: &Path, s_me: f64) -> Option<(f64, f64)> {
    let ego = &agents[me];
    let mut best: Option<(f64, f64)> = None;
    for (j, o) in agents.iter().enumerate() {
        if j == me {
            continue;
        }
        let (s, lat) = path.project(o.pose.position());
        let ds = s - s_me;
        if ds <= 0.0 || ds > 60.0 || lat > 0.5 * (ego.width + o.width) + 0.8 {
            continue;
        }
        let gap = ds - 0.5 * (ego.length + o.length);
        let v_along = o.speed * wrap_angle(o.pose.yaw - path.heading_at(s)).cos();
        if best.is_none_or(|b| gap < b.0) {
            best = Some((gap, v_along));
        }
    }
    best
}

fn idm_brake(v: f64, gap: f64, v_lead: f64) -> f64 {
    let s_star = 2.0 + 1.2 * v + v * (v - v_lead) / (2.0 * (MAX_ACCEL * MAX_BRAKE).sqrt());
    let s_star = s_star.max(2.0);
    MAX_ACCEL * (1.0 - (s_star / gap.max(0.1)).powi(2))
}

fn simulate(
    map: &[Polyline],
    graph: &RoadGraph,
    spec: &TrafficSpec,
    mut agents: Vec<SimAgent>,
    rng: &mut ChaCha8Rng,
) -> Option<Scenario> {
    let n_steps = spec.history_steps + spec.horizon_steps;
    let mut tracks: Vec<Vec<StateSample>> = agents.iter().map(|a| vec![StateSample::from_pose(a.pose, true)]).collect();
    let mut time = 0.0;
    for _ in 1..n_steps {
        let snapshot = agents.clone();
        // Box reservations by inbound lane, first-come first-served.
        let holders: Vec<(usize, Option<u32>)> = snapshot
            .iter()
            .enumerate()
            .filter_map(|(i, a)| match &a.mover {
                Mover::Vehicle(v) if v.reserved => Some((i, a.inbound)),
                _ => None,
            })
            .collect();
        let mut new_holders = holders.clone();
        for i in 0..agents.len() {
            let ag = &mut agents[i];
            let Mover::Vehicle(veh) = &mut ag.mover else { continue };
            let (s, _) = veh.path.project(ag.pose.position());
            // Speed limits from curvature and the end of the route, decel-limited.
            let mut allow = veh.cruise;
            let mut probe = 0.0;
            while probe <= 40.0 {
                let sp = s + probe;
                let r = veh.path.curvature_radius(sp);
                let end_room = (veh.path.len() - 8.0 - sp).max(0.0);
                let lim = (LAT_ACCEL * r).sqrt().min((2.0 * 2.0 * end_room).sqrt());
                allow = allow.min((lim * lim + 2.0 * 2.0 * probe).sqrt());
                probe += 2.0;
            }
            let mut a_des = (allow - veh.v).clamp(-MAX_BRAKE, MAX_ACCEL);
            if let Some((gap, v_lead)) = leader(i, &snapshot, &veh.path, s) {
                a_des = a_des.min(idm_brake(veh.v, gap, v_lead));
            }
            // Intersection box: wait at the stop line unless the box is free.
            if let Some(&(_, c_start, c_end)) = veh.path.parts.iter().find(|p| graph.connectors.contains(&p.0)) {
                let d_stop = c_start - s - 0.5 * ag.length;
                if veh.reserved && s > c_end + ag.length {
                    veh.reserved = false;
                    new_holders.retain(|h| h.0 != i);
                } else if !veh.reserved && d_stop > -0.5 * ag.length
                    && d_stop < veh.v * veh.v / (2.0 * 2.5) + 6.0 {
                        let blocked = new_holders.iter().any(|h| h.0 != i && h.1 != ag.inbound);
                        if blocked {
                            a_des = a_des.min(idm_brake(veh.v, d_stop.max(0.1), 0.0));
                        } else {
                            veh.reserved = true;
                            new_holders.push((i, ag.inbound));
                        }
                    }
            }
            a_des = a_des.clamp(-MAX_BRAKE, MAX_ACCEL);
            let jerk = ((a_des - veh.a) / DT).clamp(-MAX_JERK, MAX_JERK);
            veh.a = (veh.a + jerk * DT).clamp(-MAX_BRAKE, MAX_ACCEL);
            let v0 = veh.v;
            let mut v1 = v0 + veh.a * DT;
            if v1 <= 0.0 {
                v1 = 0.0;
                veh.a = 0.0;
            }
            veh.v = v1;

            // Lane changes on isolated parallel lanes.
            if veh.lane_change.is_none() && spec.lane_change_prob > 0.0 && veh.path.parts.len() == 1 {
                let here = veh.path.parts[0].0;
                if let Some(neigh) = graph.adjacent.get(&here) {
                    if rng.random::<f64>() < spec.lane_change_prob * DT {
                        let target = neigh[rng.random_range(0..neigh.len())];
                        let tpath = &graph.lane_paths[&target];
                        let (s_t, _) = tpath.project(ag.pose.position());
                        let clear = snapshot.iter().enumerate().all(|(j, o)| {
                            if j == i {
                                return true;
                            }
                            let (so, lat) = tpath.project(o.pose.position());
                            lat > 3.0 || (so - s_t).abs() > 18.0
                        });
                        if clear && s_t < tpath.len() - 60.0 {
                            veh.lane_change = Some(LaneChange { target, elapsed: 0.0 });
                        }
                    }
                }
            }

            // Pure pursuit steering with substeps.
            let h = DT / SUBSTEPS as f64;
            let mut pose = ag.pose;
            for k in 0..SUBSTEPS {
                let va = v0 + (v1 - v0) * (k as f64 + 0.5) / SUBSTEPS as f64;
                let ld = (0.6 * va + 4.0).clamp(4.0, 12.0);
                let (s_here, _) = veh.path.project(pose.position());
                let mut target = veh.path.point_at(s_here + ld);
                if let Some(lc) = &veh.lane_change {
                    let tpath = &graph.lane_paths[&lc.target];
                    let (s_t, _) = tpath.project(pose.position());
                    let q = tpath.point_at(s_t + ld);
                    let w = smoothstep((lc.elapsed + k as f64 * h) / LANE_CHANGE_TIME);
                    target = [target[0] + w * (q[0] - target[0]), target[1] + w * (q[1] - target[1])];
                }
                let local = pose.to_local(&Pose2 { x: target[0], y: target[1], yaw: 0.0 });
                let alpha = local.y.atan2(local.x);
                let omega = (va * 2.0 * alpha.sin() / ld).clamp(-MAX_YAW_RATE, MAX_YAW_RATE);
                let mid = pose.yaw + 0.5 * omega * h;
                pose = Pose2::new(pose.x + va * h * mid.cos(), pose.y + va * h * mid.sin(), pose.yaw + omega * h);
            }
            if let Some(lc) = &mut veh.lane_change {
                lc.elapsed += DT;
                if lc.elapsed >= LANE_CHANGE_TIME {
                    veh.path = graph.lane_paths[&lc.target].clone();
                    veh.lane_change = None;
                }
            }
            time_varying_cruise(veh, time + DT, spec, rng);
            ag.pose = pose;
            ag.speed = v1;
        }
        for ag in agents.iter_mut() {
            if let Mover::Constant { v } = ag.mover {
                let p = ag.pose;
                ag.pose = Pose2 { x: p.x + v * DT * p.yaw.cos(), y: p.y + v * DT * p.yaw.sin(), yaw: p.yaw };
            }
        }
        time += DT;
        for (tr, ag) in tracks.iter_mut().zip(&agents) {
            tr.push(StateSample::from_pose(ag.pose, true));
        }
        // Reject on any collision or vehicle departure.
        for i in 0..agents.len() {
            for j in i + 1..agents.len() {
                if obb_intersects(&agents[i].state(), &agents[j].state()) {
                    return None;
                }
            }
            if agents[i].class == AgentClass::Vehicle {
                match signed_corridor_distance(agents[i].pose.position(), map) {
                    Ok(d) if d > 0.0 => return None,
                    _ => {}
                }
            }
        }
    }
    let tracks = agents
        .iter()
        .zip(tracks)
        .enumerate()
        .map(|(i, (ag, states))| Track { id: i as u32, class: ag.class, length: ag.length, width: ag.width, states })
        .collect();
    Some(Scenario::new(map.to_vec(), tracks, spec.history_steps, spec.horizon_steps))
}

fn time_varying_cruise(veh: &mut Vehicle, time: f64, spec: &TrafficSpec, rng: &mut ChaCha8Rng) {
    if time >= veh.next_cruise_change {
        veh.cruise = rng.random_range(spec.speed_range[0]..=spec.speed_range[1]);
        veh.next_cruise_change = time + rng.random_range(2.0..4.0);
    }
}
