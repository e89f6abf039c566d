//! Single-lane ring-road microsimulation.
//!
//! Human-driven vehicles follow the Intelligent Driver Model; CAVs execute a
//! single externally broadcast acceleration. All vehicles update synchronously
//! with a ballistic scheme at a fixed time step, so a run is a pure function of
//! the initial [`RingState`] and the command sequence.

mod export;
mod idm;
mod ring;

pub use export::{RingSnapshot, TrajectoryLog, SNAPSHOT_FORMAT_VERSION};
pub use idm::{idm_acceleration, IdmParams};
pub use ring::{CollisionReport, FormationStrategy, LoadingOptions, RemovalPolicy, RingState};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VehicleKind {
    Human,
    Cav,
}

impl VehicleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            VehicleKind::Human => "human",
            VehicleKind::Cav => "cav",
        }
    }
}

/// One vehicle on the ring. `position` is the front bumper, in `[0, L)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleState {
    pub id: u32,
    pub kind: VehicleKind,
    pub position: f64,
    pub speed: f64,
    pub last_accel: f64,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid IDM parameters: {0}")]
    InvalidParams(String),
    #[error("invalid ring: {0}")]
    InvalidRing(String),
    #[error("vehicles already colliding (gap {gap} m)")]
    AlreadyColliding { gap: f64 },
    #[error("ring has fewer than two vehicles, no leader exists")]
    NoLeader,
    #[error("unknown vehicle id {0}")]
    UnknownVehicle(u32),
    #[error("target of {requested} vehicles exceeds loop capacity of {capacity}")]
    Capacity { requested: usize, capacity: usize },
    #[error("loading stalled at {reached} of {requested} vehicles after {steps} steps")]
    LoadingStalled { reached: usize, requested: usize, steps: u64 },
    #[error("cannot remove {requested} vehicles from a ring holding {available}")]
    RemovalUnderflow { requested: usize, available: usize },
    #[error("cannot mark {requested} CAVs in a ring holding {available} vehicles")]
    TooManyCavs { requested: usize, available: usize },
    #[error("snapshot error: {0}")]
    Snapshot(String),
}
