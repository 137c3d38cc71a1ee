//! Collaborative dense RGB-D surfel SLAM.
//!
//! Multiple cameras with unknown initial relative poses each build a surfel
//! submap, discover overlap between submaps through fern-based place
//! recognition, and merge into a single shared reconstruction that every
//! camera then tracks against and updates.

pub mod collab;
pub mod fern;
pub mod frame;
pub mod geometry;
pub mod loopclosure;
pub mod odometry;
pub mod surfelmap;

pub use collab::{
    map_and_track, CameraState, CameraStep, FrameTiming, ReferenceFrame, Scheduling, Session,
    SessionConfig, SessionError, StageTimings, TrajectoryRecord,
};
pub use fern::{
    dissimilarity, encode, AddOutcome, FernDatabase, FernEncoding, FernError, FernSnapshot,
    FernSpec, KeyframeEntry, MatchResult,
};
pub use frame::{build_pyramid, FrameError, FramePyramid, Grid, PyramidLevel, RgbdFrame, Z_MAX};
pub use geometry::{GeometryError, Intrinsics, RigidTransform, Twist, Z_MIN};
pub use loopclosure::{
    close_global_loop, close_local_loop, inter_map_closure, merge_maps, AppliedClosure,
    ClosureParams, DeformationGraph, DeformationNode, MergeEvent, OptimizeOutcome, OptimizeParams,
    SurfaceConstraint,
};
pub use odometry::{track, Acceptance, CheckConfig, TrackConfig, TrackingResult};
pub use surfelmap::{
    ExportMode, FusionStats, ModelView, Region, Stability, Surfel, SurfelMap, SurfelMapError,
    NEVER,
};
