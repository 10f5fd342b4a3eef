use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

/// Wraps an angle to the half-open interval (−π, π].
#[inline]
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    if w > PI {
        w - TAU
    } else {
        w
    }
}

/// Rigid 2-D pose: position in meters, heading in radians.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

/// Relative pose of a key element as seen from a query element.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct RelPose {
    pub dist: f64,
    /// Direction of the key, measured in the query frame.
    pub bearing: f64,
    pub dyaw: f64,
}

impl Pose2 {
    pub const IDENTITY: Pose2 = Pose2 { x: 0.0, y: 0.0, yaw: 0.0 };

    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Pose2 { x, y, yaw: wrap_angle(yaw) }
    }

    #[inline]
    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    /// `self ∘ other`: interprets `other` in the frame of `self`.
    #[inline]
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let (s, c) = self.yaw.sin_cos();
        Pose2 {
            x: self.x + c * other.x - s * other.y,
            y: self.y + s * other.x + c * other.y,
            yaw: wrap_angle(self.yaw + other.yaw),
        }
    }

    #[inline]
    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.yaw.sin_cos();
        Pose2 {
            x: -(c * self.x + s * self.y),
            y: -(-s * self.x + c * self.y),
            yaw: wrap_angle(-self.yaw),
        }
    }

    /// Expresses `other` (a world pose) in the frame of `self`.
    #[inline]
    pub fn to_local(&self, other: &Pose2) -> Pose2 {
        let (s, c) = self.yaw.sin_cos();
        let dx = other.x - self.x;
        let dy = other.y - self.y;
        Pose2 {
            x: c * dx + s * dy,
            y: -s * dx + c * dy,
            yaw: wrap_angle(other.yaw - self.yaw),
        }
    }

    #[inline]
    pub fn transform_point(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }

    #[inline]
    pub fn distance(&self, other: &Pose2) -> f64 {
        (other.x - self.x).hypot(other.y - self.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.yaw.is_finite()
    }
}

pub fn se2_compose(a: &Pose2, b: &Pose2) -> Pose2 {
    a.compose(b)
}

/// Relative pose of `key` seen from `query`. Invariant under any rigid
/// transform applied to both poses.
pub fn se2_relative(query: &Pose2, key: &Pose2) -> RelPose {
    let local = query.to_local(key);
    let dist = local.x.hypot(local.y);
    let bearing = if dist == 0.0 { 0.0 } else { local.y.atan2(local.x) };
    RelPose { dist, bearing, dyaw: local.yaw }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &Pose2, b: &Pose2, tol: f64) -> bool {
        (a.x - b.x).abs() < tol
            && (a.y - b.y).abs() < tol
            && wrap_angle(a.yaw - b.yaw).abs() < tol
    }

    #[test]
    fn wrap_is_half_open() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-0.5) + 0.5).abs() < 1e-15);
    }

    #[test]
    fn compose_examples() {
        let p = Pose2::new(3.0, -1.0, 0.7);
        assert_eq!(Pose2::IDENTITY.compose(&p), p);
        let r = Pose2::new(1.0, 0.0, PI / 2.0).compose(&Pose2::new(1.0, 0.0, 0.0));
        assert!(close(&r, &Pose2::new(1.0, 1.0, PI / 2.0), 1e-12));
        assert!(close(&p.compose(&p.inverse()), &Pose2::IDENTITY, 1e-12));
    }

    #[test]
    fn relative_examples() {
        let p = Pose2::new(2.0, 5.0, 1.0);
        let r = se2_relative(&p, &p);
        assert_eq!((r.dist, r.bearing, r.dyaw), (0.0, 0.0, 0.0));
        let r = se2_relative(&Pose2::IDENTITY, &Pose2::new(1.0, 1.0, 0.0));
        assert!((r.dist - 2f64.sqrt()).abs() < 1e-12);
        assert!((r.bearing - PI / 4.0).abs() < 1e-12);
        assert_eq!(r.dyaw, 0.0);
    }

    fn pose() -> impl Strategy<Value = Pose2> {
        (-100.0..100.0f64, -100.0..100.0f64, -PI..PI).prop_map(|(x, y, t)| Pose2::new(x, y, t))
    }

    proptest! {
        #[test]
        fn group_laws(a in pose(), b in pose(), c in pose()) {
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            prop_assert!(close(&l, &r, 1e-9));
            prop_assert!(close(&a.inverse().compose(&a), &Pose2::IDENTITY, 1e-12));
            prop_assert!(close(&a.compose(&Pose2::IDENTITY), &a, 1e-12));
            prop_assert!(a.yaw > -PI && a.yaw <= PI);
        }

        #[test]
        fn relative_is_frame_invariant(q in pose(), k in pose(), t in pose()) {
            let r0 = se2_relative(&q, &k);
            let r1 = se2_relative(&t.compose(&q), &t.compose(&k));
            prop_assert!((r0.dist - r1.dist).abs() < 1e-9);
            prop_assert!(wrap_angle(r0.bearing - r1.bearing).abs() < 1e-9);
            prop_assert!(wrap_angle(r0.dyaw - r1.dyaw).abs() < 1e-9);
            prop_assert!(r0.dist >= 0.0);
        }
    }
}
