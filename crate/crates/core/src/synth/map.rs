use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geom::{Polyline, PolylineKind, Pose2};

use super::SynthError;

/// Largest spacing between consecutive generated map points.
pub const MAX_POINT_SPACING: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Straight,
    Arc,
    Intersection,
}

impl std::str::FromStr for MapKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "straight" => Ok(MapKind::Straight),
            "arc" => Ok(MapKind::Arc),
            "intersection" => Ok(MapKind::Intersection),
            other => Err(format!("unknown map kind '{other}'")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapSpec {
    pub kind: MapKind,
    pub n_lanes: usize,
    pub lane_width: f64,
    /// Lane length for straight roads, inner-lane arc length for arcs and
    /// arm length for intersections.
    pub length: f64,
    pub arc_radius: f64,
    pub seed: u64,
}

impl MapSpec {
    pub fn new(kind: MapKind, n_lanes: usize, seed: u64) -> Self {
        let length = match kind {
            MapKind::Intersection => 60.0,
            _ => 300.0,
        };
        MapSpec { kind, n_lanes, lane_width: 4.0, length, arc_radius: 80.0, seed }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_lanes < 1 {
            return Err(SynthError::InvalidSpec("n_lanes must be >= 1".into()));
        }
        if !(self.lane_width > 0.0 && self.lane_width.is_finite()) {
            return Err(SynthError::InvalidSpec("lane_width must be positive".into()));
        }
        if !(self.length > 0.0 && self.length.is_finite()) {
            return Err(SynthError::InvalidSpec("length must be positive".into()));
        }
        if self.kind == MapKind::Arc && !(self.arc_radius > 2.0 * self.lane_width) {
            return Err(SynthError::InvalidSpec("arc_radius must exceed 2 * lane_width".into()));
        }
        Ok(())
    }
}

/// Evenly resamples the segment `a → b` with spacing at most `MAX_POINT_SPACING`.
fn line(a: [f64; 2], b: [f64; 2]) -> Vec<[f64; 2]> {
    let len = (b[0] - a[0]).hypot(b[1] - a[1]);
    let n = (len / MAX_POINT_SPACING).ceil().max(1.0) as usize;
    (0..=n)
        .map(|i| {
            let t = i as f64 / n as f64;
            [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
        })
        .collect()
}

/// Cubic Bézier between two poses, sampled densely enough that every chord
/// is at most `MAX_POINT_SPACING`.
fn bezier(start: Pose2, end: Pose2) -> Vec<[f64; 2]> {
    let chord = start.distance(&end);
    let h = 0.39 * chord;
    let p0 = start.position();
    let p1 = [p0[0] + h * start.yaw.cos(), p0[1] + h * start.yaw.sin()];
    let p3 = end.position();
    let p2 = [p3[0] - h * end.yaw.cos(), p3[1] - h * end.yaw.sin()];
    let eval = |t: f64| {
        let u = 1.0 - t;
        let (b0, b1, b2, b3) = (u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t);
        [
            b0 * p0[0] + b1 * p1[0] + b2 * p2[0] + b3 * p3[0],
            b0 * p0[1] + b1 * p1[1] + b2 * p2[1] + b3 * p3[1],
        ]
    };
    let mut n = (chord * 1.6 / MAX_POINT_SPACING).ceil().max(2.0) as usize;
    loop {
        let pts: Vec<[f64; 2]> = (0..=n).map(|i| eval(i as f64 / n as f64)).collect();
        if pts.windows(2).all(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]) <= MAX_POINT_SPACING) {
            return pts;
        }
        n *= 2;
    }
}

fn arc_points(center: [f64; 2], radius: f64, span: f64) -> Vec<[f64; 2]> {
    let n = (radius * span / MAX_POINT_SPACING).ceil().max(1.0) as usize;
    (0..=n)
        .map(|i| {
            let phi = span * i as f64 / n as f64;
            [center[0] + radius * phi.sin(), center[1] - radius * phi.cos()]
        })
        .collect()
}

fn poly(id: u32, kind: PolylineKind, lane_width: f64, points: Vec<[f64; 2]>, succ: Vec<u32>) -> Polyline {
    Polyline { id, kind, lane_width, points, successor_ids: succ }
}

/// Generates a synthetic vectorized map. The whole map is placed with a
/// seed-dependent rigid transform so corpora cover many global headings.
pub fn generate_map(spec: &MapSpec) -> Result<Vec<Polyline>, SynthError> {
    spec.validate()?;
    let mut map = match spec.kind {
        MapKind::Straight => straight(spec),
        MapKind::Arc => arc(spec),
        MapKind::Intersection => intersection(spec),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let placement = Pose2::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-PI..PI));
    for pl in &mut map {
        for p in &mut pl.points {
            *p = placement.transform_point(*p);
        }
    }
    Ok(map)
}

fn straight(spec: &MapSpec) -> Vec<Polyline> {
    let w = spec.lane_width;
    let n = spec.n_lanes;
    let mut map: Vec<Polyline> = (0..n)
        .map(|k| {
            let y = -(k as f64) * w;
            poly(k as u32, PolylineKind::Lane, w, line([0.0, y], [spec.length, y]), vec![])
        })
        .collect();
    let left = 0.5 * w;
    let right = -(n as f64 - 0.5) * w;
    map.push(poly(n as u32, PolylineKind::RoadEdge, 0.0, line([0.0, left], [spec.length, left]), vec![]));
    map.push(poly(n as u32 + 1, PolylineKind::RoadEdge, 0.0, line([0.0, right], [spec.length, right]), vec![]));
    map
}

fn arc(spec: &MapSpec) -> Vec<Polyline> {
    let w = spec.lane_width;
    let r0 = spec.arc_radius;
    let span = (spec.length / r0).min(PI);
    let center = [0.0, r0];
    let n = spec.n_lanes;
    // Lane 0 is the innermost; higher indices lie further right.
    let mut map: Vec<Polyline> = (0..n)
        .map(|k| poly(k as u32, PolylineKind::Lane, w, arc_points(center, r0 + k as f64 * w, span), vec![]))
        .collect();
    map.push(poly(n as u32, PolylineKind::RoadEdge, 0.0, arc_points(center, r0 - 0.5 * w, span), vec![]));
    map.push(poly(
        n as u32 + 1,
        PolylineKind::RoadEdge,
        0.0,
        arc_points(center, r0 + (n as f64 - 0.5) * w, span),
        vec![],
    ));
    map
}

/// Ids of the four-arm intersection layout, shared with the traffic generator.
pub(crate) struct IntersectionIds {
    pub n_lanes: usize,
}

impl IntersectionIds {
    pub fn inbound(&self, arm: usize, k: usize) -> u32 {
        (arm * self.n_lanes + k) as u32
    }
    pub fn outbound(&self, arm: usize, k: usize) -> u32 {
        (4 * self.n_lanes + arm * self.n_lanes + k) as u32
    }
    pub fn connector_base(&self) -> u32 {
        (8 * self.n_lanes) as u32
    }
}

fn intersection(spec: &MapSpec) -> Vec<Polyline> {
    let w = spec.lane_width;
    let n = spec.n_lanes;
    let half_road = n as f64 * w;
    // Box half-size leaves room for turning radii of roughly 6 m.
    let h = half_road + 4.0;
    let arm_len = spec.length;
    let ids = IntersectionIds { n_lanes: n };
    let dir = |arm: usize| {
        let psi = arm as f64 * FRAC_PI_2;
        ([psi.cos(), psi.sin()], [-psi.sin(), psi.cos()], psi)
    };
    let at = |u: [f64; 2], nv: [f64; 2], s: f64, lat: f64| [s * u[0] + lat * nv[0], s * u[1] + lat * nv[1]];

    let mut lanes_in = Vec::new();
    let mut lanes_out = Vec::new();
    for arm in 0..4 {
        let (u, nv, _) = dir(arm);
        for k in 0..n {
            let lat = (k as f64 + 0.5) * w;
            lanes_in.push(poly(
                ids.inbound(arm, k),
                PolylineKind::Lane,
                w,
                line(at(u, nv, h + arm_len, lat), at(u, nv, h, lat)),
                vec![],
            ));
        }
    }
    for arm in 0..4 {
        let (u, nv, _) = dir(arm);
        for k in 0..n {
            let lat = -(k as f64 + 0.5) * w;
            lanes_out.push(poly(
                ids.outbound(arm, k),
                PolylineKind::Lane,
                w,
                line(at(u, nv, h, lat), at(u, nv, h + arm_len, lat)),
                vec![],
            ));
        }
    }

    let mut connectors = Vec::new();
    let mut next_id = ids.connector_base();
    for arm in 0..4 {
        let (u, nv, psi) = dir(arm);
        for k in 0..n {
            let lat = (k as f64 + 0.5) * w;
            let p = at(u, nv, h, lat);
            let start = Pose2::new(p[0], p[1], psi + PI);
            // (target arm, target lane) for straight, right and left movements.
            let mut moves = vec![((arm + 2) % 4, k)];
            if k == n - 1 {
                moves.push(((arm + 1) % 4, n - 1));
            }
            if k == 0 {
                moves.push(((arm + 3) % 4, 0));
            }
            for (to_arm, to_k) in moves {
                let (tu, tn, tpsi) = dir(to_arm);
                let q = at(tu, tn, h, -(to_k as f64 + 0.5) * w);
                let end = Pose2::new(q[0], q[1], tpsi);
                let pts = if to_arm == (arm + 2) % 4 { line(start.position(), q) } else { bezier(start, end) };
                connectors.push(poly(next_id, PolylineKind::Lane, w, pts, vec![ids.outbound(to_arm, to_k)]));
                let idx = arm * n + k;
                lanes_in[idx].successor_ids.push(next_id);
                next_id += 1;
            }
        }
    }

    let mut extras = Vec::new();
    for arm in 0..4 {
        let (u, nv, _) = dir(arm);
        for side in [-1.0, 1.0] {
            extras.push(poly(
                next_id,
                PolylineKind::RoadEdge,
                0.0,
                line(at(u, nv, h, side * half_road), at(u, nv, h + arm_len, side * half_road)),
                vec![],
            ));
            next_id += 1;
        }
        extras.push(poly(
            next_id,
            PolylineKind::Crosswalk,
            3.0,
            line(at(u, nv, h + 2.0, -half_road), at(u, nv, h + 2.0, half_road)),
            vec![],
        ));
        next_id += 1;
    }

    let mut map = lanes_in;
    map.extend(lanes_out);
    map.extend(connectors);
    map.extend(extras);
    map
}
