use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geom::{dist, wrap_angle, Polyline, PolylineKind, Pose2};
use crate::io::{check_schema, SCHEMA_VERSION};
use crate::seed::rng_for;

use super::{argmin, greedy_cover, k_nearest, NoiseConfig, TokenError};

/// Longest arc length covered by one road token, in meters.
pub const MAX_SEGMENT_LENGTH: f64 = 5.0;

/// Pieces shorter than this are not split off.
const MIN_PIECE: f64 = 1e-6;

/// A piece of a polyline of bounded arc length, with its canonical shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoadSegment {
    pub polyline_id: u32,
    /// Position of the segment within its polyline.
    pub index: usize,
    pub kind: PolylineKind,
    /// Start point with the direction of the first chord.
    pub start: Pose2,
    /// End point and end-chord direction in the start frame: `(dx, dy, dyaw)`.
    pub descriptor: [f64; 3],
    pub length: f64,
    pub points: Vec<[f64; 2]>,
    /// `(polyline id, segment index)` of topological successors.
    pub successors: Vec<(u32, usize)>,
}

fn heading(a: [f64; 2], b: [f64; 2]) -> f64 {
    (b[1] - a[1]).atan2(b[0] - a[0])
}

fn split_points(points: &[[f64; 2]], max_len: f64) -> Vec<Vec<[f64; 2]>> {
    let total: f64 = points.windows(2).map(|w| dist(w[0], w[1])).sum();
    let mut pieces = Vec::new();
    let mut cur = vec![points[0]];
    let mut next_cut = max_len;
    let mut s0 = 0.0;
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        let s1 = s0 + dist(a, b);
        while next_cut < s1 - 1e-9 && next_cut < total - MIN_PIECE {
            let p = if next_cut - s0 < 1e-9 {
                a
            } else {
                let t = (next_cut - s0) / (s1 - s0);
                [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
            };
            if dist(p, *cur.last().unwrap()) > 0.0 {
                cur.push(p);
            }
            pieces.push(std::mem::replace(&mut cur, vec![p]));
            next_cut += max_len;
        }
        cur.push(b);
        s0 = s1;
    }
    pieces.push(cur);
    pieces
}

/// Cuts every polyline at arc-length multiples of `max_len`.
pub fn split_polylines(map: &[Polyline], max_len: f64) -> Vec<RoadSegment> {
    let counts: HashMap<u32, usize> =
        map.iter().map(|pl| (pl.id, split_points(&pl.points, max_len).len())).collect();
    let mut out = Vec::new();
    for pl in map {
        let pieces = split_points(&pl.points, max_len);
        let n = pieces.len();
        for (i, pts) in pieces.into_iter().enumerate() {
            let m = pts.len();
            let start = Pose2::new(pts[0][0], pts[0][1], heading(pts[0], pts[1]));
            let end = Pose2::new(pts[m - 1][0], pts[m - 1][1], heading(pts[m - 2], pts[m - 1]));
            let rel = start.to_local(&end);
            let successors = if i + 1 < n {
                vec![(pl.id, i + 1)]
            } else {
                pl.successor_ids.iter().filter(|s| counts.contains_key(s)).map(|&s| (s, 0)).collect()
            };
            out.push(RoadSegment {
                polyline_id: pl.id,
                index: i,
                kind: pl.kind,
                start,
                descriptor: [rel.x, rel.y, rel.yaw],
                length: pts.windows(2).map(|w| dist(w[0], w[1])).sum(),
                points: pts,
                successors,
            });
        }
    }
    out
}

/// Euclidean end-point distance plus the absolute end-direction difference.
pub fn descriptor_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1]) + wrap_angle(a[2] - b[2]).abs()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoadVocab {
    pub schema: u32,
    pub class: String,
    pub epsilon: f64,
    pub seed: u64,
    pub tokens: Vec<[f64; 3]>,
}

impl RoadVocab {
    pub const CLASS: &'static str = "road";

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn distances(&self, d: &[f64; 3]) -> Vec<f64> {
        self.tokens.iter().map(|t| descriptor_distance(t, d)).collect()
    }

    pub fn nearest(&self, d: &[f64; 3]) -> (usize, f64) {
        argmin(self.tokens.iter().map(|t| descriptor_distance(t, d)))
    }

    pub fn validate(&self) -> Result<(), crate::Error> {
        check_schema(self.schema, "road vocabulary")?;
        if self.class != Self::CLASS {
            return Err(TokenError::InvalidVocab(format!("expected class \"road\", got {:?}", self.class)).into());
        }
        if self.tokens.is_empty() {
            return Err(TokenError::EmptyVocab.into());
        }
        if self.tokens.iter().flatten().any(|v| !v.is_finite()) {
            return Err(TokenError::InvalidVocab("non-finite descriptor".into()).into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, crate::Error> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let schema = value.get("schema").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        check_schema(schema, "road vocabulary")?;
        let v: RoadVocab = serde_json::from_value(value)?;
        v.validate()?;
        Ok(v)
    }
}

pub fn build_road_vocab(segments: &[RoadSegment], size: usize, epsilon: f64, seed: u64) -> Result<RoadVocab, TokenError> {
    if segments.is_empty() {
        return Err(TokenError::EmptyInput);
    }
    let descs: Vec<[f64; 3]> = segments.iter().map(|s| s.descriptor).collect();
    let tokens = greedy_cover(&descs, size, epsilon, seed, descriptor_distance);
    Ok(RoadVocab { schema: SCHEMA_VERSION, class: RoadVocab::CLASS.into(), epsilon, seed, tokens })
}

/// A placed road token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoadTokenInstance {
    pub pose: Pose2,
    /// Token fed to the model (possibly noised).
    pub index: u32,
    /// Nearest token to the segment.
    pub label: u32,
    pub noised: bool,
    pub kind: PolylineKind,
    pub polyline_id: u32,
    pub seq_index: usize,
    pub length: f64,
    pub descriptor: [f64; 3],
    /// Instance ids of topological successors.
    pub successors: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenizedMap {
    pub instances: Vec<RoadTokenInstance>,
    /// Maximal successor chains of instance ids.
    pub sequences: Vec<Vec<usize>>,
}

impl TokenizedMap {
    pub fn predecessors(&self) -> Vec<Vec<usize>> {
        let mut pred = vec![Vec::new(); self.instances.len()];
        for (i, inst) in self.instances.iter().enumerate() {
            for &s in &inst.successors {
                pred[s].push(i);
            }
        }
        pred
    }

    /// The sub-map of instances satisfying `keep`, with successor links and
    /// sequences re-indexed and links to dropped instances removed.
    pub fn subset(&self, keep: impl Fn(&RoadTokenInstance) -> bool) -> TokenizedMap {
        let kept: Vec<usize> = (0..self.instances.len()).filter(|&i| keep(&self.instances[i])).collect();
        let mut new_id = vec![None; self.instances.len()];
        for (n, &i) in kept.iter().enumerate() {
            new_id[i] = Some(n);
        }
        let instances = kept
            .iter()
            .map(|&i| {
                let mut inst = self.instances[i].clone();
                inst.successors = inst.successors.iter().filter_map(|&s| new_id[s]).collect();
                inst
            })
            .collect();
        let sequences = self
            .sequences
            .iter()
            .map(|q| q.iter().filter_map(|&s| new_id[s]).collect::<Vec<_>>())
            .filter(|q| !q.is_empty())
            .collect();
        TokenizedMap { instances, sequences }
    }
}

/// Matches every segment to its nearest road token and enumerates
/// successor chains. Instances are ordered by `(polyline id, segment index)`,
/// so the result does not depend on the order of polylines in `map`. Noise
/// draws are keyed by segment identity for the same reason.
pub fn tokenize_map(vocab: &RoadVocab, map: &[Polyline], noise: &NoiseConfig, seed: u64) -> Result<TokenizedMap, TokenError> {
    if vocab.tokens.is_empty() {
        return Err(TokenError::EmptyVocab);
    }
    let mut segs = split_polylines(map, MAX_SEGMENT_LENGTH);
    segs.sort_by_key(|s| (s.polyline_id, s.index));
    let id_of: BTreeMap<(u32, usize), usize> =
        segs.iter().enumerate().map(|(i, s)| ((s.polyline_id, s.index), i)).collect();
    let instances = segs
        .iter()
        .map(|s| {
            let dists = vocab.distances(&s.descriptor);
            let (label, _) = argmin(dists.iter().copied());
            let mut index = label;
            let mut noised = false;
            if noise.active() {
                let mut rng = rng_for(seed, &[s.polyline_id as u64, s.index as u64, 0x524F_4144]);
                if rng.random::<f64>() < noise.p {
                    let near = k_nearest(&dists, noise.k);
                    index = near[rng.random_range(0..near.len())];
                    noised = true;
                }
            }
            RoadTokenInstance {
                pose: s.start,
                index: index as u32,
                label: label as u32,
                noised,
                kind: s.kind,
                polyline_id: s.polyline_id,
                seq_index: s.index,
                length: s.length,
                descriptor: s.descriptor,
                successors: s.successors.iter().filter_map(|k| id_of.get(k).copied()).collect(),
            }
        })
        .collect();
    let mut out = TokenizedMap { instances, sequences: Vec::new() };
    out.sequences = enumerate_sequences(&out);
    Ok(out)
}

/// One sequence per root-to-leaf path; branches duplicate the shared
/// prefix and a cycle ends the path at the segment that would repeat.
fn enumerate_sequences(map: &TokenizedMap) -> Vec<Vec<usize>> {
    let n = map.instances.len();
    let pred = map.predecessors();
    let mut visited = vec![false; n];
    let mut out = Vec::new();
    let mut roots: Vec<usize> = (0..n).filter(|&i| pred[i].is_empty()).collect();
    let mut next_root = 0;
    loop {
        while next_root < roots.len() {
            let root = roots[next_root];
            next_root += 1;
            let mut stack = vec![vec![root]];
            while let Some(path) = stack.pop() {
                let last = *path.last().unwrap();
                visited[last] = true;
                let next: Vec<usize> =
                    map.instances[last].successors.iter().copied().filter(|s| !path.contains(s)).collect();
                if next.is_empty() {
                    out.push(path);
                } else {
                    for s in next.into_iter().rev() {
                        let mut p = path.clone();
                        p.push(s);
                        stack.push(p);
                    }
                }
            }
        }
        // Pure cycles have no root: enter at their lowest unvisited id.
        match (0..n).find(|&i| !visited[i]) {
            Some(i) => roots.push(i),
            None => break,
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lane(id: u32, pts: Vec<[f64; 2]>, succ: Vec<u32>) -> Polyline {
        Polyline { id, kind: PolylineKind::Lane, lane_width: 4.0, points: pts, successor_ids: succ }
    }

    fn line(a: [f64; 2], b: [f64; 2], n: usize) -> Vec<[f64; 2]> {
        (0..=n).map(|i| {
            let t = i as f64 / n as f64;
            [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
        }).collect()
    }

    /// Points on a circle of `radius` with unit chord length.
    fn unit_chord_arc(radius: f64, chords: usize) -> Vec<[f64; 2]> {
        let step = 2.0 * (0.5 / radius).asin();
        (0..=chords).map(|i| {
            let a = i as f64 * step;
            [radius * a.sin(), radius * (1.0 - a.cos())]
        }).collect()
    }

    #[test]
    fn twelve_meter_lane_splits_five_five_two() {
        for n in [1, 12, 7] {
            let segs = split_polylines(&[lane(0, line([0.0, 0.0], [12.0, 0.0], n), vec![])], 5.0);
            let lens: Vec<f64> = segs.iter().map(|s| s.length).collect();
            assert_eq!(lens.len(), 3);
            for (l, e) in lens.iter().zip([5.0, 5.0, 2.0]) {
                assert!((l - e).abs() < 1e-9, "{lens:?}");
            }
        }
        assert_eq!(split_polylines(&[lane(0, line([0.0, 0.0], [4.0, 0.0], 4), vec![])], 5.0).len(), 1);
    }

    #[test]
    fn constant_curvature_gives_identical_descriptors() {
        let segs = split_polylines(&[lane(0, unit_chord_arc(20.0, 120), vec![])], 5.0);
        assert_eq!(segs.len(), 24);
        for s in &segs {
            for k in 0..3 {
                assert!((s.descriptor[k] - segs[0].descriptor[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn segments_reproduce_polyline() {
        let pts = vec![[0.0, 0.0], [3.0, 0.0], [3.0, 7.5], [10.0, 8.0], [10.0, 21.0]];
        let pl = lane(4, pts.clone(), vec![]);
        let segs = split_polylines(std::slice::from_ref(&pl), 5.0);
        let mut joined: Vec<[f64; 2]> = vec![segs[0].points[0]];
        for s in &segs {
            assert!(s.length <= 5.0 + 1e-9 && s.length > 0.0);
            assert_eq!(s.points[0], *joined.last().unwrap());
            joined.extend_from_slice(&s.points[1..]);
        }
        let total: f64 = segs.iter().map(|s| s.length).sum();
        assert!((total - pl.length()).abs() < 1e-9);
        for p in &pts {
            assert!(joined.iter().any(|q| dist(*p, *q) < 1e-9));
        }
        for q in &joined {
            assert!(pl.distance_to(*q) < 1e-9);
        }
    }

    #[test]
    fn vocab_sizes_for_simple_maps() {
        let straight = lane(0, line([0.0, 0.0], [50.0, 0.0], 50), vec![]);
        let segs = split_polylines(std::slice::from_ref(&straight), 5.0);
        assert_eq!(build_road_vocab(&segs, 1024, 0.1, 0).unwrap().size(), 1);
        let arc = lane(1, unit_chord_arc(20.0, 50), vec![]);
        let segs = split_polylines(&[straight, arc], 5.0);
        let v = build_road_vocab(&segs, 1024, 0.1, 0).unwrap();
        assert_eq!(v.size(), 2);
        assert!(descriptor_distance(&v.tokens[0], &v.tokens[1]) > 0.1);
        assert!(matches!(build_road_vocab(&[], 8, 0.1, 0), Err(TokenError::EmptyInput)));
    }

    fn branching_map() -> Vec<Polyline> {
        vec![
            lane(0, line([0.0, 0.0], [10.0, 0.0], 10), vec![1, 2]),
            lane(1, line([10.0, 0.0], [18.0, 6.0], 10), vec![]),
            lane(2, line([10.0, 0.0], [18.0, -6.0], 10), vec![]),
        ]
    }

    fn vocab_for(map: &[Polyline]) -> RoadVocab {
        build_road_vocab(&split_polylines(map, 5.0), 1024, 0.01, 0).unwrap()
    }

    #[test]
    fn branching_successor_gives_two_sequences_with_shared_prefix() {
        let map = branching_map();
        let tm = tokenize_map(&vocab_for(&map), &map, &NoiseConfig::OFF, 0).unwrap();
        assert_eq!(tm.sequences.len(), 2);
        assert_eq!(tm.sequences[0][..2], tm.sequences[1][..2]);
        for seq in &tm.sequences {
            assert_eq!(seq.len(), 4);
            for w in seq.windows(2) {
                assert!(tm.instances[w[0]].successors.contains(&w[1]));
            }
        }
    }

    #[test]
    fn pure_cycle_is_broken_at_entry() {
        let map = vec![
            lane(0, line([0.0, 0.0], [10.0, 0.0], 2), vec![1]),
            lane(1, line([10.0, 0.0], [0.0, 0.0], 2), vec![0]),
        ];
        let tm = tokenize_map(&vocab_for(&map), &map, &NoiseConfig::OFF, 0).unwrap();
        assert_eq!(tm.sequences, vec![vec![0, 1, 2, 3]]);
    }

    #[test]
    fn map_from_vocab_descriptors_is_recovered_exactly() {
        let map = branching_map();
        let v = vocab_for(&map);
        let tm = tokenize_map(&v, &map, &NoiseConfig::OFF, 0).unwrap();
        for inst in &tm.instances {
            assert_eq!(inst.index, inst.label);
            assert!(descriptor_distance(&v.tokens[inst.index as usize], &inst.descriptor) <= v.epsilon);
            assert_eq!(v.nearest(&inst.descriptor).0, inst.index as usize);
        }
    }

    #[test]
    fn noised_indices_come_from_top_k() {
        let map = crate::synth::generate_map(&crate::synth::MapSpec::new(crate::synth::MapKind::Intersection, 2, 1)).unwrap();
        let segs = split_polylines(&map, 5.0);
        let v = build_road_vocab(&segs, 1024, 0.1, 0).unwrap();
        let noise = NoiseConfig { enabled: true, k: 5, p: 0.5 };
        let tm = tokenize_map(&v, &map, &noise, 3).unwrap();
        let frac = tm.instances.iter().filter(|i| i.noised).count() as f64 / tm.instances.len() as f64;
        assert!((0.3..0.7).contains(&frac), "{frac}");
        for inst in &tm.instances {
            let near = k_nearest(&v.distances(&inst.descriptor), 5);
            assert!(near.contains(&(inst.index as usize)));
        }
    }

    #[test]
    fn road_vocab_json_round_trip() {
        let map = branching_map();
        let v = vocab_for(&map);
        assert_eq!(RoadVocab::from_json(&v.to_json()).unwrap(), v);
        let bad = v.to_json().replacen("\"schema\":1", "\"schema\":3", 1);
        assert!(RoadVocab::from_json(&bad).is_err());
    }

    proptest! {
        #[test]
        fn matching_equals_brute_force_and_is_rigid_invariant(
            seed in 0u64..200, tx in -80.0..80.0f64, ty in -80.0..80.0f64, th in -3.1..3.1f64) {
            let kind = [crate::synth::MapKind::Straight, crate::synth::MapKind::Arc, crate::synth::MapKind::Intersection][seed as usize % 3];
            let map = crate::synth::generate_map(&crate::synth::MapSpec::new(kind, 1 + seed as usize % 2, seed)).unwrap();
            let v = build_road_vocab(&split_polylines(&map, 5.0), 64, 0.3, seed).unwrap();
            let tm = tokenize_map(&v, &map, &NoiseConfig::OFF, 0).unwrap();
            for inst in &tm.instances {
                let mut best = (0usize, f64::INFINITY);
                for (i, t) in v.tokens.iter().enumerate() {
                    let d = descriptor_distance(t, &inst.descriptor);
                    if d < best.1 { best = (i, d); }
                }
                prop_assert_eq!(inst.label as usize, best.0);
            }
            let t = Pose2::new(tx, ty, th);
            let moved: Vec<Polyline> = map.iter().map(|p| Polyline {
                points: p.points.iter().map(|q| t.transform_point(*q)).collect(), ..p.clone()
            }).collect();
            let tm2 = tokenize_map(&v, &moved, &NoiseConfig::OFF, 0).unwrap();
            for (a, b) in tm.instances.iter().zip(&tm2.instances) {
                prop_assert!(descriptor_distance(&a.descriptor, &b.descriptor) < 1e-9);
                prop_assert_eq!(a.label, b.label);
            }
        }

        #[test]
        fn tokenization_ignores_polyline_order(seed in 0u64..100, rot in 0usize..10) {
            let map = crate::synth::generate_map(&crate::synth::MapSpec::new(crate::synth::MapKind::Intersection, 2, seed)).unwrap();
            let v = build_road_vocab(&split_polylines(&map, 5.0), 256, 0.1, 0).unwrap();
            let mut shuffled = map.clone();
            let r = rot % shuffled.len();
            shuffled.rotate_left(r);
            shuffled.reverse();
            let noise = NoiseConfig::road_default();
            prop_assert_eq!(tokenize_map(&v, &map, &noise, seed).unwrap(), tokenize_map(&v, &shuffled, &noise, seed).unwrap());
        }
    }
}
