use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::GeomError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolylineKind {
    Lane,
    RoadEdge,
    Crosswalk,
}

impl PolylineKind {
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        match self {
            PolylineKind::Lane => 0,
            PolylineKind::RoadEdge => 1,
            PolylineKind::Crosswalk => 2,
        }
    }
}

/// A typed map polyline with lane topology.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub id: u32,
    pub kind: PolylineKind,
    pub lane_width: f64,
    pub points: Vec<[f64; 2]>,
    #[serde(rename = "successors", default)]
    pub successor_ids: Vec<u32>,
}

impl Polyline {
    pub fn length(&self) -> f64 {
        self.points.windows(2).map(|w| dist(w[0], w[1])).sum()
    }

    /// Unsigned distance from `p` to the polyline centerline.
    pub fn distance_to(&self, p: [f64; 2]) -> f64 {
        self.points
            .windows(2)
            .map(|w| point_segment_distance(p, w[0], w[1]))
            .fold(f64::INFINITY, f64::min)
    }
}

#[inline]
pub fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (b[0] - a[0]).hypot(b[1] - a[1])
}

pub fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let cx = a[0] + t * dx;
    let cy = a[1] + t * dy;
    (p[0] - cx).hypot(p[1] - cy)
}

/// Checks the structural invariants of a map: point counts, distinct
/// consecutive points, known successor ids and an acyclic successor graph.
pub fn validate_map(map: &[Polyline]) -> Result<(), GeomError> {
    let mut ids = HashSet::new();
    for pl in map {
        if !ids.insert(pl.id) {
            return Err(GeomError::InvalidMap(format!("duplicate polyline id {}", pl.id)));
        }
        if pl.points.len() < 2 {
            return Err(GeomError::InvalidMap(format!("polyline {} has fewer than 2 points", pl.id)));
        }
        if pl.points.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(GeomError::InvalidMap(format!("polyline {} has non-finite points", pl.id)));
        }
        if pl.points.windows(2).any(|w| w[0] == w[1]) {
            return Err(GeomError::InvalidMap(format!("polyline {} repeats a point", pl.id)));
        }
        if !(pl.lane_width >= 0.0) {
            return Err(GeomError::InvalidMap(format!("polyline {} has negative lane width", pl.id)));
        }
    }
    for pl in map {
        if let Some(bad) = pl.successor_ids.iter().find(|s| !ids.contains(s)) {
            return Err(GeomError::InvalidMap(format!("polyline {} names unknown successor {bad}", pl.id)));
        }
    }
    // Kahn's algorithm over the successor graph.
    let index: HashMap<u32, usize> = map.iter().enumerate().map(|(i, p)| (p.id, i)).collect();
    let mut indeg = vec![0usize; map.len()];
    for pl in map {
        for s in &pl.successor_ids {
            indeg[index[s]] += 1;
        }
    }
    let mut stack: Vec<usize> = (0..map.len()).filter(|&i| indeg[i] == 0).collect();
    let mut seen = 0;
    while let Some(i) = stack.pop() {
        seen += 1;
        for s in &map[i].successor_ids {
            let j = index[s];
            indeg[j] -= 1;
            if indeg[j] == 0 {
                stack.push(j);
            }
        }
    }
    if seen != map.len() {
        return Err(GeomError::InvalidMap("successor topology contains a cycle".into()));
    }
    Ok(())
}

/// Signed distance from `point` to the drivable corridor, the union of
/// lane-centerline bands of half-width `lane_width / 2`.
///
/// Negative inside, positive outside. Outside the corridor the magnitude is
/// the exact distance to the union. Inside, it is the depth within the
/// deepest containing band.
pub fn signed_corridor_distance(point: [f64; 2], map: &[Polyline]) -> Result<f64, GeomError> {
    let mut best = f64::INFINITY;
    let mut any_lane = false;
    for pl in map.iter().filter(|p| p.kind == PolylineKind::Lane) {
        any_lane = true;
        best = best.min(pl.distance_to(point) - 0.5 * pl.lane_width);
    }
    if !any_lane {
        return Err(GeomError::NoDrivableArea);
    }
    Ok(best)
}
