//! Reference-frame lifecycle and the collaborative per-timestep loop.
//!
//! Every camera starts in its own reference frame and runs the dense
//! pipeline against that frame's map: predict, track, loop closures, fuse,
//! keyframe harvest. The session schedules pending frames camera by camera,
//! then hunts for inter-map loop closures between reference frames; a
//! validated closure merges two frames into one, and over time all cameras
//! converge onto a single shared map.

use std::collections::{BTreeMap, VecDeque};
use std::time::Instant;

use thiserror::Error;

use crate::fern::{encode, FernDatabase, FernError, FernSnapshot, FernSpec};
use crate::fern::{
    DEFAULT_FERN_HEIGHT, DEFAULT_FERN_WIDTH, DEFAULT_NUM_FERNS, DEFAULT_T_ADD, DEFAULT_T_MATCH,
};
use crate::frame::{build_pyramid_filtered, FramePyramid, RgbdFrame};
use crate::geometry::{Intrinsics, RigidTransform};
use crate::loopclosure::{
    close_global_loop, close_local_loop, inter_map_closure, merge_maps, ClosureParams,
    DeformationGraph, MergeEvent,
};
use crate::odometry::{check_constrained, model_pyramid, track, Acceptance};
use crate::surfelmap::{
    FusionStats, Region, Stability, SurfelMap, SurfelMapError, CAMERA_PALETTE, DEFAULT_DELTA_T,
    DEFAULT_W_STABLE,
};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("camera {0} is already registered")]
    DuplicateCamera(u32),
    #[error("camera {0} is not registered")]
    UnknownCamera(u32),
    #[error("camera {camera} is not a member of reference frame {frame}")]
    CameraNotInFrame { camera: u32, frame: u32 },
    #[error("frame carries camera id {got}, expected {want}")]
    CameraMismatch { want: u32, got: u32 },
    #[error("camera {camera}: frame is {got_w}x{got_h}, registered {want_w}x{want_h}")]
    ResolutionMismatch {
        camera: u32,
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("camera {camera}: frame index {got} does not advance past {last}")]
    NonMonotoneFrame { camera: u32, last: u64, got: u64 },
    #[error("invalid session config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Map(#[from] SurfelMapError),
    #[error(transparent)]
    Fern(#[from] FernError),
}

/// How process_timestep orders the cameras that have a pending frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheduling {
    /// Ascending camera id; reproducible regardless of submission order.
    Lockstep,
    /// Submission order; serves live ingestion where cameras free-run.
    ArrivalOrder,
}

#[derive(Clone, Debug)]
pub struct SessionConfig {
    /// Tracking, validation and deformation tunables shared with the
    /// loop-closure operations.
    pub closure: ClosureParams,
    pub w_stable: f64,
    pub delta_t: u64,
    pub num_ferns: usize,
    pub fern_width: usize,
    pub fern_height: usize,
    pub fern_seed: u64,
    pub t_add: f64,
    pub t_match: f64,
    pub bilateral_filter: bool,
    pub scheduling: Scheduling,
    /// One distinct color per camera for contribution export.
    pub palette: Vec<[u8; 3]>,
    /// Pending frames kept per camera; beyond this the oldest is dropped.
    pub queue_capacity: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            closure: ClosureParams::default(),
            w_stable: DEFAULT_W_STABLE,
            delta_t: DEFAULT_DELTA_T,
            num_ferns: DEFAULT_NUM_FERNS,
            fern_width: DEFAULT_FERN_WIDTH,
            fern_height: DEFAULT_FERN_HEIGHT,
            fern_seed: 17,
            t_add: DEFAULT_T_ADD,
            t_match: DEFAULT_T_MATCH,
            bilateral_filter: false,
            scheduling: Scheduling::Lockstep,
            palette: CAMERA_PALETTE.to_vec(),
            queue_capacity: 8,
        }
    }
}

impl SessionConfig {
    fn validate(&self) -> Result<(), SessionError> {
        if self.num_ferns == 0 || self.fern_width == 0 || self.fern_height == 0 {
            return Err(SessionError::InvalidConfig(
                "fern spec dimensions must be positive".into(),
            ));
        }
        if self.queue_capacity == 0 {
            return Err(SessionError::InvalidConfig(
                "queue capacity must be positive".into(),
            ));
        }
        for (i, a) in self.palette.iter().enumerate() {
            if self.palette[..i].contains(a) {
                return Err(SessionError::InvalidConfig(format!(
                    "palette color {a:?} repeats; contribution export needs distinct entries"
                )));
            }
        }
        Ok(())
    }
}

/// Timestamped pose history entry. The frame index keys deformation
/// influence lookups; the wall time keys trajectory export.
#[derive(Clone, Copy, Debug)]
pub struct TrajectoryRecord {
    pub frame_index: u64,
    pub wall_time: f64,
    pub pose: RigidTransform,
}

#[derive(Clone, Debug)]
pub struct CameraState {
    pub intrinsics: Intrinsics,
    /// Current pose in the owning reference frame: camera to map coordinates.
    pub pose: RigidTransform,
    pub trajectory: Vec<TrajectoryRecord>,
    /// Index of the most recently processed frame.
    pub last_index: Option<u64>,
    /// Most recent accepted frame; backfills holes in the next tracking
    /// prediction while the map is still sparse.
    pub last_frame: Option<RgbdFrame>,
    pub tracking_failures: u64,
    /// Set once the first frame has been fused; tracking starts after.
    pub bootstrapped: bool,
}

impl CameraState {
    fn new(intrinsics: Intrinsics) -> Self {
        Self {
            intrinsics,
            pose: RigidTransform::identity(),
            trajectory: Vec::new(),
            last_index: None,
            last_frame: None,
            tracking_failures: 0,
            bootstrapped: false,
        }
    }
}

/// One reference frame: a map, the cameras localized in it, and the
/// recognition state those cameras share. Cameras in a frame track against
/// that frame's map only.
#[derive(Clone, Debug)]
pub struct ReferenceFrame {
    pub id: u32,
    pub map: SurfelMap,
    pub cameras: BTreeMap<u32, CameraState>,
    pub fern_db: FernDatabase,
    /// Graph from the most recent accepted deformation; rebuilt per closure.
    pub graph: DeformationGraph,
    /// Advances whenever any member camera processes a frame.
    pub timestep: u64,
}

/// Which intra-map closure corrected the pose this frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClosureKind {
    Global,
    Local,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct StageTimings {
    pub predict_ms: f64,
    pub track_ms: f64,
    pub closure_ms: f64,
    pub fuse_ms: f64,
    pub fern_ms: f64,
    pub total_ms: f64,
}

/// Everything map_and_track produces for one frame. The snapshot and pyramid
/// let the session run inter-map queries without re-rendering.
#[derive(Clone, Debug)]
pub struct CameraStep {
    pub pose: RigidTransform,
    /// False on bootstrap and on tracking failure; inter-map closures are
    /// only attempted for tracked frames.
    pub tracked: bool,
    pub closure: Option<ClosureKind>,
    pub fusion: Option<FusionStats>,
    /// Stable-model prediction at the final pose, fern resolution.
    pub snapshot: FernSnapshot,
    /// Live frame pyramid, reused for inter-map refinement.
    pub pyramid: FramePyramid,
    pub timings: StageTimings,
}

/// One row of the per-frame timing log.
#[derive(Clone, Copy, Debug)]
pub struct FrameTiming {
    pub timestep: u64,
    pub camera: u32,
    pub frame_index: u64,
    pub timings: StageTimings,
    pub tracked: bool,
    /// Set when this camera's frame triggered a map merge this timestep.
    pub merged: bool,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Runs the full per-frame pipeline for one camera against its reference
/// frame: predict the active model view at the previous pose, track, attempt
/// a global then a local loop closure, fuse at the corrected pose, harvest a
/// fern keyframe, and advance the camera's activity clock.
///
/// The camera's first frame bootstraps instead: fused at the current
/// (registration) pose with no tracking. A tracking failure holds the pose,
/// skips fusion and harvest, and counts the failure; time still advances.
pub fn map_and_track(
    rf: &mut ReferenceFrame,
    camera: u32,
    frame: RgbdFrame,
    cfg: &SessionConfig,
) -> Result<CameraStep, SessionError> {
    let t_total = Instant::now();
    let state = rf
        .cameras
        .get(&camera)
        .ok_or(SessionError::CameraNotInFrame {
            camera,
            frame: rf.id,
        })?;
    if frame.camera_id != camera {
        return Err(SessionError::CameraMismatch {
            want: camera,
            got: frame.camera_id,
        });
    }
    let k = state.intrinsics;
    if frame.intrinsics.width != k.width || frame.intrinsics.height != k.height {
        return Err(SessionError::ResolutionMismatch {
            camera,
            got_w: frame.intrinsics.width,
            got_h: frame.intrinsics.height,
            want_w: k.width,
            want_h: k.height,
        });
    }
    if let Some(last) = state.last_index {
        if frame.index <= last {
            return Err(SessionError::NonMonotoneFrame {
                camera,
                last,
                got: frame.index,
            });
        }
    }
    let now = frame.index;
    let prev_pose = state.pose;
    let bootstrapped = state.bootstrapped;
    let mut timings = StageTimings::default();

    let t0 = Instant::now();
    let live = build_pyramid_filtered(&frame, cfg.bilateral_filter);
    timings.track_ms += ms_since(t0);

    let mut pose = prev_pose;
    let mut tracked = false;
    let mut closure = None;
    let mut fusion = None;

    if bootstrapped {
        let t0 = Instant::now();
        let mut view =
            rf.map
                .predict_view(camera, &prev_pose, &k, Region::Active, Stability::StableOnly)?;
        if let Some(prev) = rf.cameras.get(&camera).and_then(|s| s.last_frame.as_ref()) {
            view.fill_in_from(prev);
        }
        timings.predict_ms += ms_since(t0);

        let t0 = Instant::now();
        let model = model_pyramid(&view);
        let result = track(&model, &live, &RigidTransform::identity(), &cfg.closure.track);
        timings.track_ms += ms_since(t0);
        if check_constrained(&result, &cfg.closure.check.scaled_for(&k)) == Acceptance::Accepted {
            pose = prev_pose.compose(&result.increment);
            tracked = true;
        }
    }

    // Stable-model prediction at the tracked pose: global-closure query now,
    // keyframe harvest after fusion, inter-map query by the caller.
    let t0 = Instant::now();
    let mut view_t =
        rf.map
            .predict_view(camera, &pose, &k, Region::Active, Stability::StableOnly)?;
    timings.predict_ms += ms_since(t0);
    let spec_w = rf.fern_db.spec().width();
    let spec_h = rf.fern_db.spec().height();
    let mut snapshot = FernSnapshot::downsample_from(&view_t.color, &view_t.depth, spec_w, spec_h);

    if tracked {
        let t0 = Instant::now();
        let applied = close_global_loop(rf, camera, &snapshot, &pose, now, &cfg.closure)
            .map(|a| (a, ClosureKind::Global))
            .or_else(|| {
                close_local_loop(rf, camera, &pose, now, &cfg.closure)
                    .map(|a| (a, ClosureKind::Local))
            });
        timings.closure_ms += ms_since(t0);
        if let Some((applied, kind)) = applied {
            pose = applied.pose;
            closure = Some(kind);
            // The map deformed under the prediction; re-render at the
            // corrected pose before harvesting.
            let t0 = Instant::now();
            view_t =
                rf.map
                    .predict_view(camera, &pose, &k, Region::Active, Stability::StableOnly)?;
            snapshot =
                FernSnapshot::downsample_from(&view_t.color, &view_t.depth, spec_w, spec_h);
            timings.predict_ms += ms_since(t0);
        }
    }

    if tracked || !bootstrapped {
        let t0 = Instant::now();
        fusion = Some(rf.map.fuse_frame_with_maps(&frame, live.finest(), &pose, now)?);
        timings.fuse_ms += ms_since(t0);

        // Keyframe views are live-fused predictions: model where it exists,
        // raw frame in the holes.
        let t0 = Instant::now();
        view_t.fill_in_from(&frame);
        let harvest =
            FernSnapshot::downsample_from(&view_t.color, &view_t.depth, spec_w, spec_h);
        rf.fern_db.try_add_keyframe(&harvest, &pose, camera, now)?;
        timings.fern_ms += ms_since(t0);
    }

    rf.map.advance_time(camera, now)?;
    rf.timestep += 1;
    let state = rf.cameras.get_mut(&camera).expect("membership checked");
    state.trajectory.push(TrajectoryRecord {
        frame_index: now,
        wall_time: frame.wall_time,
        pose,
    });
    state.last_index = Some(now);
    if tracked || !bootstrapped {
        state.last_frame = Some(frame);
    } else {
        state.tracking_failures += 1;
    }
    state.pose = pose;
    state.bootstrapped = true;

    timings.total_ms = ms_since(t_total);
    Ok(CameraStep {
        pose,
        tracked,
        closure,
        fusion,
        snapshot,
        pyramid: live,
        timings,
    })
}

/// A collaborative mapping session: reference frames, the camera-to-frame
/// assignment, per-camera ingestion queues and the session logs.
#[derive(Debug)]
pub struct Session {
    config: SessionConfig,
    spec: FernSpec,
    frames: BTreeMap<u32, ReferenceFrame>,
    camera_to_frame: BTreeMap<u32, u32>,
    queues: BTreeMap<u32, VecDeque<(u64, RgbdFrame)>>,
    dropped: BTreeMap<u32, u64>,
    arrivals: u64,
    next_frame_id: u32,
    /// Camera slots every map carries; camera ids index these directly.
    slots: usize,
    timestep: u64,
    merge_log: Vec<MergeEvent>,
    timings: Vec<FrameTiming>,
}

impl Session {
    pub fn new(config: SessionConfig) -> Result<Self, SessionError> {
        config.validate()?;
        let spec = FernSpec::generate(
            config.num_ferns,
            config.fern_width,
            config.fern_height,
            config.fern_seed,
        );
        Ok(Self {
            config,
            spec,
            frames: BTreeMap::new(),
            camera_to_frame: BTreeMap::new(),
            queues: BTreeMap::new(),
            dropped: BTreeMap::new(),
            arrivals: 0,
            next_frame_id: 0,
            slots: 0,
            timestep: 0,
            merge_log: Vec::new(),
            timings: Vec::new(),
        })
    }

    /// Puts a new camera in a fresh reference frame at identity pose and
    /// grows every map's camera slots to cover it. Returns the frame id.
    pub fn register_camera(
        &mut self,
        camera_id: u32,
        intrinsics: Intrinsics,
    ) -> Result<u32, SessionError> {
        if self.camera_to_frame.contains_key(&camera_id) {
            return Err(SessionError::DuplicateCamera(camera_id));
        }
        if self.camera_to_frame.len() + 1 > self.config.palette.len() {
            return Err(SessionError::InvalidConfig(format!(
                "palette has {} colors; cannot register camera {}",
                self.config.palette.len(),
                self.camera_to_frame.len() + 1
            )));
        }
        let slots = self.slots.max(camera_id as usize + 1);
        for rf in self.frames.values_mut() {
            while rf.map.num_cameras() < slots {
                rf.map.add_camera();
            }
        }
        self.slots = slots;

        let id = self.next_frame_id;
        self.next_frame_id += 1;
        let mut graph = DeformationGraph::empty();
        graph.set_influence_mode(self.config.closure.influence);
        let rf = ReferenceFrame {
            id,
            map: SurfelMap::with_params(slots, self.config.w_stable, self.config.delta_t),
            cameras: BTreeMap::from([(camera_id, CameraState::new(intrinsics))]),
            fern_db: FernDatabase::with_thresholds(
                self.spec.clone(),
                self.config.t_add,
                self.config.t_match,
            ),
            graph,
            timestep: 0,
        };
        self.frames.insert(id, rf);
        self.camera_to_frame.insert(camera_id, id);
        self.queues.insert(camera_id, VecDeque::new());
        self.dropped.insert(camera_id, 0);
        Ok(id)
    }

    /// Queues a frame for its camera. Beyond the configured capacity the
    /// oldest pending frame is dropped and counted.
    pub fn submit_frame(&mut self, frame: RgbdFrame) -> Result<(), SessionError> {
        let camera = frame.camera_id;
        let queue = self
            .queues
            .get_mut(&camera)
            .ok_or(SessionError::UnknownCamera(camera))?;
        queue.push_back((self.arrivals, frame));
        self.arrivals += 1;
        if queue.len() > self.config.queue_capacity {
            queue.pop_front();
            *self.dropped.get_mut(&camera).expect("queue implies counter") += 1;
        }
        Ok(())
    }

    /// Processes at most one pending frame per camera, then attempts
    /// inter-map loop closures for every tracked camera. A validated closure
    /// merges the two reference frames immediately; each camera triggers at
    /// most one merge per timestep. Returns the merges of this timestep.
    pub fn process_timestep(&mut self) -> Result<Vec<MergeEvent>, SessionError> {
        let mut batch = Vec::new();
        for (&camera, queue) in self.queues.iter_mut() {
            if let Some((seq, frame)) = queue.pop_front() {
                batch.push((seq, camera, frame));
            }
        }
        match self.config.scheduling {
            Scheduling::Lockstep => batch.sort_by_key(|(_, camera, _)| *camera),
            Scheduling::ArrivalOrder => batch.sort_by_key(|(seq, _, _)| *seq),
        }

        let mut steps = Vec::new();
        for (_, camera, frame) in batch {
            let frame_index = frame.index;
            let fid = *self
                .camera_to_frame
                .get(&camera)
                .expect("registered camera maps to a frame");
            let rf = self.frames.get_mut(&fid).expect("mapping is total");
            let step = map_and_track(rf, camera, frame, &self.config)?;
            self.timings.push(FrameTiming {
                timestep: self.timestep,
                camera,
                frame_index,
                timings: step.timings,
                tracked: step.tracked,
                merged: false,
            });
            steps.push((camera, step));
        }

        let mut events = Vec::new();
        for (camera, step) in &steps {
            if !step.tracked || self.frames.len() < 2 {
                continue;
            }
            let own = *self.camera_to_frame.get(camera).expect("mapping is total");
            let encoding = encode(&step.snapshot, &self.spec)?;
            // Query every other live frame's database; refine only the
            // cheapest candidate this timestep.
            let mut candidates = Vec::new();
            for (&fid, rf) in &self.frames {
                if fid == own {
                    continue;
                }
                if let Some(m) = rf.fern_db.find_match_encoded(&encoding)? {
                    candidates.push((m.dissimilarity, fid));
                }
            }
            candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let Some(&(_, other)) = candidates.first() else {
                continue;
            };
            let rf_own = self.frames.get(&own).expect("mapping is total");
            let rf_other = self.frames.get(&other).expect("candidate frame is live");
            let event = inter_map_closure(
                rf_own,
                rf_other,
                *camera,
                &step.snapshot,
                &step.pyramid,
                self.timestep,
                &self.config.closure,
            );
            if let Some(event) = event {
                let absorbed = self
                    .frames
                    .remove(&event.absorbed)
                    .expect("absorbed frame is live");
                let survivor = self
                    .frames
                    .get_mut(&event.surviving)
                    .expect("surviving frame is live");
                merge_maps(absorbed, survivor, &event, &self.config.closure);
                for fid in self.camera_to_frame.values_mut() {
                    if *fid == event.absorbed {
                        *fid = event.surviving;
                    }
                }
                if let Some(row) = self
                    .timings
                    .iter_mut()
                    .rev()
                    .find(|r| r.timestep == self.timestep && r.camera == *camera)
                {
                    row.merged = true;
                }
                self.merge_log.push(event);
                events.push(event);
            }
        }
        self.timestep += 1;
        Ok(events)
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn fern_spec(&self) -> &FernSpec {
        &self.spec
    }

    pub fn frames(&self) -> impl Iterator<Item = &ReferenceFrame> {
        self.frames.values()
    }

    pub fn frame(&self, id: u32) -> Option<&ReferenceFrame> {
        self.frames.get(&id)
    }

    pub fn live_frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn frame_of_camera(&self, camera: u32) -> Option<&ReferenceFrame> {
        let fid = self.camera_to_frame.get(&camera)?;
        self.frames.get(fid)
    }

    pub fn camera_state(&self, camera: u32) -> Option<&CameraState> {
        self.frame_of_camera(camera)?.cameras.get(&camera)
    }

    pub fn cameras(&self) -> impl Iterator<Item = u32> + '_ {
        self.camera_to_frame.keys().copied()
    }

    pub fn pending_frames(&self, camera: u32) -> usize {
        self.queues.get(&camera).map_or(0, |q| q.len())
    }

    pub fn dropped_frames(&self, camera: u32) -> u64 {
        self.dropped.get(&camera).copied().unwrap_or(0)
    }

    pub fn merge_log(&self) -> &[MergeEvent] {
        &self.merge_log
    }

    pub fn timings(&self) -> &[FrameTiming] {
        &self.timings
    }

    pub fn timestep(&self) -> u64 {
        self.timestep
    }
}
