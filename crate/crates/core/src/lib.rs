//! Motion tokenization, a factorized next-token transformer, closed-loop
//! rollout and simulation metrics for multi-agent traffic scenarios.

use std::path::{Path, PathBuf};

pub mod autodiff;
pub mod dataset;
pub mod diagnostics;
pub mod geom;
pub mod io;
pub mod metrics;
pub mod model;
pub mod rollout;
pub mod scaling;
pub mod scenario;
pub mod seed;
pub mod synth;
pub mod tokens;
pub mod training;

pub use geom::{AgentClass, AgentState, Polyline, PolylineKind, Pose2, RelPose};
pub use scenario::{Scenario, StateSample, Track, DT};

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unsupported {what} schema version {found} (expected {expected})")]
    Schema { what: String, found: u32, expected: u32 },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Geom(#[from] geom::GeomError),
    #[error(transparent)]
    Synth(#[from] synth::SynthError),
    #[error(transparent)]
    Token(#[from] tokens::TokenError),
    #[error(transparent)]
    Autodiff(#[from] autodiff::AdError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }
}
