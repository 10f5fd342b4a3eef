//! SE(2) poses, oriented-box collision and map-distance primitives.

mod map;
mod obb;
mod pose;

pub use map::{
    dist, point_segment_distance, signed_corridor_distance, validate_map, Polyline, PolylineKind,
};
pub use obb::{obb_intersects, AgentClass, AgentState};
pub use pose::{se2_compose, se2_relative, wrap_angle, Pose2, RelPose};

#[derive(Debug, thiserror::Error)]
pub enum GeomError {
    #[error("no drivable area")]
    NoDrivableArea,
    #[error("invalid map: {0}")]
    InvalidMap(String),
}
