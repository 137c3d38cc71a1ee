//! Shared dense surfel map: per-camera last-seen times and activity windows,
//! projective-association fusion, and model view prediction by splatting.

use std::io::{BufRead, Write};

use nalgebra::Vector3;
use thiserror::Error;

use crate::frame::{normal_map, vertex_map, Grid, PyramidLevel, RgbdFrame};
use crate::geometry::{Intrinsics, RigidTransform, Z_MIN};

/// Sentinel for "this camera has never observed this surfel".
pub const NEVER: u64 = u64::MAX;

/// Index-map entry for "no surfel splats here".
pub const NO_SURFEL: u32 = u32::MAX;

/// Default activity window, timesteps.
pub const DEFAULT_DELTA_T: u64 = 200;

/// Default stability threshold in accumulated fusion weight.
pub const DEFAULT_W_STABLE: f64 = 10.0;

/// Primary colors assigned to cameras for contribution rendering; camera i
/// uses entry i mod 8.
pub const CAMERA_PALETTE: [[u8; 3]; 8] = [
    [255, 0, 0],
    [0, 255, 0],
    [0, 0, 255],
    [255, 255, 0],
    [255, 0, 255],
    [0, 255, 255],
    [255, 128, 0],
    [128, 0, 255],
];

#[derive(Debug, Error)]
pub enum SurfelMapError {
    #[error("camera {camera} not registered (map has {cameras} cameras)")]
    UnknownCamera { camera: u32, cameras: usize },
    #[error("camera {camera} time regressed: now {now} < previous {previous}")]
    TimeRegression { camera: u32, now: u64, previous: u64 },
    #[error("frame intrinsics {frame_w}x{frame_h} do not match the prediction {view_w}x{view_h}")]
    IntrinsicsMismatch {
        frame_w: usize,
        frame_h: usize,
        view_w: usize,
        view_h: usize,
    },
    #[error("snapshot line {line}: {msg}")]
    Snapshot { line: usize, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// One surface element. `last_seen` is indexed by camera slot; entries for
/// cameras that never observed the surfel hold `NEVER`.
#[derive(Clone, Debug, PartialEq)]
pub struct Surfel {
    pub position: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub radius: f64,
    pub weight: f64,
    pub color: [u8; 3],
    pub init_time: u64,
    pub last_seen: Vec<u64>,
}

/// Which activity region of a camera to draw from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Active,
    Inactive,
    All,
}

/// Whether a prediction may include surfels below the stability threshold.
/// Tracking predictions must use `StableOnly`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stability {
    StableOnly,
    Any,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FusionStats {
    pub merged: usize,
    pub inserted: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportMode {
    Color,
    Contribution,
}

/// Predicted view of the map from a camera pose: depth/color/normal maps and
/// the index of the winning surfel per pixel.
#[derive(Clone, Debug)]
pub struct ModelView {
    pub pose: RigidTransform,
    pub intrinsics: Intrinsics,
    pub depth: Grid<f32>,
    pub color: Grid<[u8; 3]>,
    pub normal: Grid<Vector3<f64>>,
    pub index: Grid<u32>,
}

impl ModelView {
    fn empty(pose: RigidTransform, k: Intrinsics) -> Self {
        Self {
            pose,
            intrinsics: k,
            depth: Grid::filled(k.width, k.height, 0.0),
            color: Grid::filled(k.width, k.height, [0u8; 3]),
            normal: Grid::filled(k.width, k.height, Vector3::zeros()),
            index: Grid::filled(k.width, k.height, NO_SURFEL),
        }
    }

    pub fn valid_depth_count(&self) -> usize {
        self.depth.data().iter().filter(|d| **d > 0.0).count()
    }

    /// Backfills empty pixels from a live frame: where the prediction has no
    /// depth but the frame does, depth and color are copied while the index
    /// map keeps `NO_SURFEL`. Resolves the bootstrap case where the map has
    /// no stable surfels to track against yet.
    pub fn fill_in_from(&mut self, frame: &RgbdFrame) {
        assert_eq!(frame.intrinsics.width, self.intrinsics.width);
        assert_eq!(frame.intrinsics.height, self.intrinsics.height);
        for y in 0..self.depth.height() {
            for x in 0..self.depth.width() {
                let live = frame.depth.get(x, y);
                if self.depth.get(x, y) == 0.0 && live > 0.0 {
                    self.depth.set(x, y, live);
                    self.color.set(x, y, frame.color.get(x, y));
                }
            }
        }
    }
}

/// The shared dense map. Camera slots are session-wide: every map in a
/// session registers the same cameras in the same order, so merged maps need
/// no slot remapping.
#[derive(Clone, Debug)]
pub struct SurfelMap {
    surfels: Vec<Surfel>,
    w_stable: f64,
    delta_t: u64,
    /// Per-camera current time as of the last advance_time.
    clocks: Vec<u64>,
}

impl SurfelMap {
    pub fn new(num_cameras: usize) -> Self {
        Self::with_params(num_cameras, DEFAULT_W_STABLE, DEFAULT_DELTA_T)
    }

    pub fn with_params(num_cameras: usize, w_stable: f64, delta_t: u64) -> Self {
        Self {
            surfels: Vec::new(),
            w_stable,
            delta_t,
            clocks: vec![0; num_cameras],
        }
    }

    pub fn num_cameras(&self) -> usize {
        self.clocks.len()
    }

    pub fn w_stable(&self) -> f64 {
        self.w_stable
    }

    pub fn delta_t(&self) -> u64 {
        self.delta_t
    }

    pub fn len(&self) -> usize {
        self.surfels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfels.is_empty()
    }

    pub fn surfels(&self) -> &[Surfel] {
        &self.surfels
    }

    pub fn surfels_mut(&mut self) -> &mut [Surfel] {
        &mut self.surfels
    }

    pub fn clock(&self, camera: u32) -> Option<u64> {
        self.clocks.get(camera as usize).copied()
    }

    /// Registers another camera slot; existing surfels gain a NEVER entry.
    pub fn add_camera(&mut self) -> u32 {
        let slot = self.clocks.len() as u32;
        self.clocks.push(0);
        for s in &mut self.surfels {
            s.last_seen.push(NEVER);
        }
        slot
    }

    /// Appends a surfel whose last_seen length already matches the map.
    pub fn push_surfel(&mut self, surfel: Surfel) {
        assert_eq!(surfel.last_seen.len(), self.clocks.len());
        self.surfels.push(surfel);
    }

    /// Consumes another map with the same camera slots, appending its
    /// surfels and taking the elementwise maximum of the per-camera clocks.
    /// Surfel data is moved unchanged; any coordinate alignment must happen
    /// before the call.
    pub fn absorb(&mut self, other: SurfelMap) {
        assert_eq!(other.clocks.len(), self.clocks.len());
        for (clock, theirs) in self.clocks.iter_mut().zip(&other.clocks) {
            *clock = (*clock).max(*theirs);
        }
        self.surfels.extend(other.surfels);
    }

    pub fn is_stable(&self, surfel: &Surfel) -> bool {
        surfel.weight >= self.w_stable
    }

    /// Whether `surfel` is in camera's active region Θ at that camera's
    /// current clock. The window boundary is inclusive: now - last_seen may
    /// equal delta_t.
    pub fn is_active(&self, surfel: &Surfel, camera: u32) -> bool {
        let now = self.clocks[camera as usize];
        let seen = surfel.last_seen[camera as usize];
        seen != NEVER && now.saturating_sub(seen) <= self.delta_t
    }

    pub fn active_count(&self, camera: u32) -> usize {
        self.surfels
            .iter()
            .filter(|s| self.is_active(s, camera))
            .count()
    }

    fn check_camera(&self, camera: u32) -> Result<(), SurfelMapError> {
        if (camera as usize) < self.clocks.len() {
            Ok(())
        } else {
            Err(SurfelMapError::UnknownCamera {
                camera,
                cameras: self.clocks.len(),
            })
        }
    }

    /// Moves camera's activity window forward; surfel data is untouched.
    pub fn advance_time(&mut self, camera: u32, now: u64) -> Result<(), SurfelMapError> {
        self.check_camera(camera)?;
        let clock = &mut self.clocks[camera as usize];
        if now < *clock {
            return Err(SurfelMapError::TimeRegression {
                camera,
                now,
                previous: *clock,
            });
        }
        *clock = now;
        Ok(())
    }

    /// Forward point-splatting with z-buffering. Each surfel covers a disc of
    /// pixel radius max(1, radius * fx / z); the nearest surfel wins each
    /// pixel and the index map records the winner.
    pub fn predict_view(
        &self,
        camera: u32,
        pose: &RigidTransform,
        k: &Intrinsics,
        region: Region,
        stability: Stability,
    ) -> Result<ModelView, SurfelMapError> {
        self.check_camera(camera)?;
        let mut view = ModelView::empty(*pose, *k);
        // Winner bookkeeping. Surfels compete by centre depth, not fragment
        // depth: centres carry no tangent-plane extrapolation noise, so the
        // nearest-wins rule cannot systematically favour discs whose noisy
        // plane happens to dip toward the camera. Discs of one surface tie
        // within their radius band and the centre closest to the pixel wins.
        let mut best_d2 = Grid::filled(k.width, k.height, f64::INFINITY);
        let mut best_center = Grid::filled(k.width, k.height, f64::INFINITY);
        let mut best_radius = Grid::filled(k.width, k.height, 0.0f64);
        let world_to_cam = pose.inverse();
        for (i, s) in self.surfels.iter().enumerate() {
            if stability == Stability::StableOnly && !self.is_stable(s) {
                continue;
            }
            match region {
                Region::All => {}
                Region::Active => {
                    if !self.is_active(s, camera) {
                        continue;
                    }
                }
                Region::Inactive => {
                    if self.is_active(s, camera) {
                        continue;
                    }
                }
            }
            let p = world_to_cam.transform_point(&s.position);
            if p.z <= Z_MIN {
                continue;
            }
            let u = k.fx * p.x / p.z + k.cx;
            let v = k.fy * p.y / p.z + k.cy;
            // Padded so pixels sitting exactly on the disc boundary are
            // included regardless of floating-point rounding.
            let r_px = (s.radius * k.fx / p.z).max(1.0) + 1e-6;
            if u + r_px < 0.0
                || v + r_px < 0.0
                || u - r_px > (k.width - 1) as f64
                || v - r_px > (k.height - 1) as f64
            {
                continue;
            }
            let n_cam = world_to_cam.rotation() * s.normal;
            let x0 = ((u - r_px).ceil().max(0.0)) as usize;
            let x1 = ((u + r_px).floor().min((k.width - 1) as f64)) as usize;
            let y0 = ((v - r_px).ceil().max(0.0)) as usize;
            let y1 = ((v + r_px).floor().min((k.height - 1) as f64)) as usize;
            let r2 = r_px * r_px;
            // Each fragment carries the depth of the surfel's tangent plane
            // along its own pixel ray, so backprojecting the view recovers
            // the surface instead of a frontal facet per disc. Every point of
            // the physical disc lies within `radius` of the centre, so
            // fragments whose plane intersection leaves that band are
            // footprint overhang past the disc's actual extent and are
            // dropped; the surfels that own that surface cover those pixels.
            let n_dot_p = n_cam.x * p.x + n_cam.y * p.y + n_cam.z * p.z;
            let max_dz = s.radius;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let dx = x as f64 - u;
                    let dy = y as f64 - v;
                    let d2 = dx * dx + dy * dy;
                    if d2 > r2 {
                        continue;
                    }
                    let denom = n_cam.x * (x as f64 - k.cx) / k.fx
                        + n_cam.y * (y as f64 - k.cy) / k.fy
                        + n_cam.z;
                    if denom.abs() < 1e-9 {
                        continue;
                    }
                    let z = n_dot_p / denom;
                    if !(z > Z_MIN && (z - p.z).abs() <= max_dz) {
                        continue;
                    }
                    let win = if view.depth.get(x, y) == 0.0 {
                        true
                    } else {
                        let bc = best_center.get(x, y);
                        if (p.z - bc).abs() <= s.radius.max(best_radius.get(x, y)) {
                            d2 < best_d2.get(x, y)
                        } else {
                            p.z < bc
                        }
                    };
                    if win {
                        view.depth.set(x, y, z as f32);
                        view.color.set(x, y, s.color);
                        view.normal.set(x, y, n_cam);
                        view.index.set(x, y, i as u32);
                        best_d2.set(x, y, d2);
                        best_center.set(x, y, p.z);
                        best_radius.set(x, y, s.radius);
                    }
                }
            }
        }
        Ok(view)
    }

    /// Fuses a frame taken at the tracked camera-to-world `pose`. Builds the
    /// frame's vertex/normal maps internally; use `fuse_frame_with_maps` when
    /// a pyramid level 0 already exists.
    pub fn fuse_frame(
        &mut self,
        frame: &RgbdFrame,
        pose: &RigidTransform,
        time: u64,
    ) -> Result<FusionStats, SurfelMapError> {
        let vertex = vertex_map(&frame.depth, &frame.intrinsics);
        let normal = normal_map(&frame.depth, &vertex);
        self.fuse_maps(frame, &vertex, &normal, pose, time)
    }

    /// Fusion against precomputed level-0 vertex/normal maps.
    pub fn fuse_frame_with_maps(
        &mut self,
        frame: &RgbdFrame,
        level0: &PyramidLevel,
        pose: &RigidTransform,
        time: u64,
    ) -> Result<FusionStats, SurfelMapError> {
        if level0.intrinsics.width != frame.intrinsics.width
            || level0.intrinsics.height != frame.intrinsics.height
        {
            return Err(SurfelMapError::IntrinsicsMismatch {
                frame_w: frame.intrinsics.width,
                frame_h: frame.intrinsics.height,
                view_w: level0.intrinsics.width,
                view_h: level0.intrinsics.height,
            });
        }
        self.fuse_maps(frame, &level0.vertex, &level0.normal, pose, time)
    }

    fn fuse_maps(
        &mut self,
        frame: &RgbdFrame,
        vertex: &Grid<Vector3<f64>>,
        normal: &Grid<Vector3<f64>>,
        pose: &RigidTransform,
        time: u64,
    ) -> Result<FusionStats, SurfelMapError> {
        let camera = frame.camera_id;
        self.check_camera(camera)?;
        let k = &frame.intrinsics;
        let view = self.predict_view(camera, pose, k, Region::All, Stability::Any)?;
        let world_to_cam = pose.inverse();
        let rot = pose.rotation();
        // Weight falloff is Gaussian in radial distance normalized by the
        // principal-point-to-corner distance.
        let radial_norm = (k.cx * k.cx + k.cy * k.cy).sqrt().max(1.0);
        const SIGMA: f64 = 0.6;
        const COS_NORMAL_GATE: f64 = 0.866_025_403_784_438_6; // cos 30 deg

        // Measured radii, then a clamp at twice the 3x3 neighborhood median.
        let mut radii = Grid::filled(k.width, k.height, 0.0f64);
        for y in 0..k.height {
            for x in 0..k.width {
                let z = frame.depth.get(x, y) as f64;
                let n = normal.get(x, y);
                if z > 0.0 && n != Vector3::zeros() {
                    radii.set(x, y, measured_radius(z, k.fx, n.z));
                }
            }
        }

        let mut stats = FusionStats::default();
        let mut inserted: Vec<Surfel> = Vec::new();
        for y in 0..k.height {
            for x in 0..k.width {
                let z_meas = frame.depth.get(x, y) as f64;
                if z_meas <= 0.0 {
                    continue;
                }
                let n_cam = normal.get(x, y);
                if n_cam == Vector3::zeros() {
                    continue;
                }
                let v_cam = vertex.get(x, y);
                let p_world = pose.transform_point(&v_cam);
                let n_world = rot * n_cam;
                let radius = clamped_radius(&radii, x, y);
                let dx_pp = x as f64 - k.cx;
                let dy_pp = y as f64 - k.cy;
                let gamma = (dx_pp * dx_pp + dy_pp * dy_pp).sqrt() / radial_norm;
                let w_meas = (-gamma * gamma / (2.0 * SIGMA * SIGMA)).exp();

                // Association: distinct surfels splatted within +-1 px whose
                // center projects back to exactly this pixel; best candidate
                // by depth agreement. The projection test makes each surfel
                // mergeable by at most one pixel per frame.
                let mut best: Option<(u32, f64)> = None;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let Some(idx) = view.index.try_get(x as i64 + dx, y as i64 + dy) else {
                            continue;
                        };
                        if idx == NO_SURFEL {
                            continue;
                        }
                        if best.is_some_and(|(b, _)| b == idx) {
                            continue;
                        }
                        let s = &self.surfels[idx as usize];
                        let p_cam = world_to_cam.transform_point(&s.position);
                        if p_cam.z <= Z_MIN {
                            continue;
                        }
                        let u = k.fx * p_cam.x / p_cam.z + k.cx;
                        let v = k.fy * p_cam.y / p_cam.z + k.cy;
                        if u.round() as i64 != x as i64 || v.round() as i64 != y as i64 {
                            continue;
                        }
                        let dz = (p_cam.z - z_meas).abs();
                        if dz >= 0.05 * z_meas {
                            continue;
                        }
                        let n_s_cam = world_to_cam.rotation() * s.normal;
                        if n_s_cam.dot(&n_cam) < COS_NORMAL_GATE {
                            continue;
                        }
                        if best.is_none_or(|(_, bd)| dz < bd) {
                            best = Some((idx, dz));
                        }
                    }
                }

                match best {
                    Some((idx, _)) => {
                        let s = &mut self.surfels[idx as usize];
                        let w = s.weight;
                        let total = w + w_meas;
                        s.position = (s.position * w + p_world * w_meas) / total;
                        let n = s.normal * w + n_world * w_meas;
                        s.normal = n / n.norm();
                        let live = frame.color.get(x, y);
                        for (sc, lc) in s.color.iter_mut().zip(live) {
                            *sc = ((w * *sc as f64 + w_meas * lc as f64) / total).round() as u8;
                        }
                        s.weight = total;
                        s.radius = s.radius.min(radius);
                        s.last_seen[camera as usize] = time;
                        stats.merged += 1;
                    }
                    None => {
                        let mut last_seen = vec![NEVER; self.clocks.len()];
                        last_seen[camera as usize] = time;
                        inserted.push(Surfel {
                            position: p_world,
                            normal: n_world,
                            radius,
                            weight: w_meas,
                            color: frame.color.get(x, y),
                            init_time: time,
                            last_seen,
                        });
                        stats.inserted += 1;
                    }
                }
            }
        }
        self.surfels.extend(inserted);
        Ok(stats)
    }

    /// Rigid map update: p <- T p, n <- R n; every other field unchanged.
    pub fn apply_transform(&mut self, t: &RigidTransform) {
        let rot = *t.rotation();
        for s in &mut self.surfels {
            s.position = t.transform_point(&s.position);
            s.normal = rot * s.normal;
        }
    }

    /// Marks every surfel that falls in the given frustum as just seen by
    /// `camera`. Used by local loop closures to bring a revisited inactive
    /// region back into the camera's active window.
    pub fn reactivate_in_view(
        &mut self,
        camera: u32,
        pose: &RigidTransform,
        k: &Intrinsics,
        now: u64,
    ) -> Result<usize, SurfelMapError> {
        self.check_camera(camera)?;
        let world_to_cam = pose.inverse();
        let mut count = 0;
        for s in &mut self.surfels {
            let p = world_to_cam.transform_point(&s.position);
            if p.z <= Z_MIN {
                continue;
            }
            let u = k.fx * p.x / p.z + k.cx;
            let v = k.fy * p.y / p.z + k.cy;
            if u >= 0.0 && v >= 0.0 && u <= (k.width - 1) as f64 && v <= (k.height - 1) as f64 {
                s.last_seen[camera as usize] = now;
                count += 1;
            }
        }
        Ok(count)
    }

    /// ASCII PLY export. Contribution mode colors each surfel by the
    /// equal-weight blend of the palette entries of every camera whose
    /// last_seen is not NEVER.
    pub fn export_ply(&self, mode: ExportMode) -> Vec<u8> {
        let mut out = String::new();
        out.push_str("ply\nformat ascii 1.0\ncomment cosurf surfel map\n");
        out.push_str(&format!("element vertex {}\n", self.surfels.len()));
        out.push_str(
            "property float x\nproperty float y\nproperty float z\n\
             property float nx\nproperty float ny\nproperty float nz\n\
             property float radius\n\
             property uchar red\nproperty uchar green\nproperty uchar blue\n\
             end_header\n",
        );
        for s in &self.surfels {
            let color = match mode {
                ExportMode::Color => s.color,
                ExportMode::Contribution => contribution_color(&s.last_seen),
            };
            out.push_str(&format!(
                "{:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {} {} {}\n",
                s.position.x,
                s.position.y,
                s.position.z,
                s.normal.x,
                s.normal.y,
                s.normal.z,
                s.radius,
                color[0],
                color[1],
                color[2]
            ));
        }
        out.into_bytes()
    }

    /// Plain-text snapshot, loadable with `read_snapshot`.
    pub fn write_snapshot(&self, mut w: impl Write) -> Result<(), SurfelMapError> {
        writeln!(w, "cosurf-map 1")?;
        writeln!(w, "cameras {}", self.clocks.len())?;
        writeln!(w, "w_stable {}", self.w_stable)?;
        writeln!(w, "delta_t {}", self.delta_t)?;
        write!(w, "clocks")?;
        for c in &self.clocks {
            write!(w, " {c}")?;
        }
        writeln!(w)?;
        writeln!(w, "surfels {}", self.surfels.len())?;
        for s in &self.surfels {
            write!(
                w,
                "{} {} {} {} {} {} {} {} {} {} {} {}",
                s.position.x,
                s.position.y,
                s.position.z,
                s.normal.x,
                s.normal.y,
                s.normal.z,
                s.radius,
                s.weight,
                s.color[0],
                s.color[1],
                s.color[2],
                s.init_time
            )?;
            for t in &s.last_seen {
                write!(w, " {t}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_snapshot(r: impl BufRead) -> Result<Self, SurfelMapError> {
        let mut lines = r.lines().enumerate();
        let mut next = || -> Result<(usize, String), SurfelMapError> {
            match lines.next() {
                Some((i, Ok(l))) => Ok((i + 1, l)),
                Some((i, Err(e))) => Err(SurfelMapError::Snapshot {
                    line: i + 1,
                    msg: e.to_string(),
                }),
                None => Err(SurfelMapError::Snapshot {
                    line: 0,
                    msg: "unexpected end of snapshot".into(),
                }),
            }
        };
        let err = |line: usize, msg: &str| SurfelMapError::Snapshot {
            line,
            msg: msg.to_string(),
        };

        let (ln, header) = next()?;
        if header.trim() != "cosurf-map 1" {
            return Err(err(ln, "bad magic, expected 'cosurf-map 1'"));
        }
        let field = |line: usize, text: &str, name: &str| -> Result<String, SurfelMapError> {
            let rest = text
                .strip_prefix(name)
                .ok_or_else(|| err(line, &format!("expected '{name} ...'")))?;
            Ok(rest.trim().to_string())
        };
        let (ln, l) = next()?;
        let cameras: usize = field(ln, &l, "cameras")?
            .parse()
            .map_err(|_| err(ln, "bad camera count"))?;
        let (ln, l) = next()?;
        let w_stable: f64 = field(ln, &l, "w_stable")?
            .parse()
            .map_err(|_| err(ln, "bad w_stable"))?;
        let (ln, l) = next()?;
        let delta_t: u64 = field(ln, &l, "delta_t")?
            .parse()
            .map_err(|_| err(ln, "bad delta_t"))?;
        let (ln, l) = next()?;
        let clocks: Vec<u64> = field(ln, &l, "clocks")?
            .split_whitespace()
            .map(|t| t.parse::<u64>().map_err(|_| err(ln, "bad clock value")))
            .collect::<Result<_, _>>()?;
        if clocks.len() != cameras {
            return Err(err(ln, "clock count does not match camera count"));
        }
        let (ln, l) = next()?;
        let count: usize = field(ln, &l, "surfels")?
            .parse()
            .map_err(|_| err(ln, "bad surfel count"))?;

        let mut map = SurfelMap {
            surfels: Vec::with_capacity(count),
            w_stable,
            delta_t,
            clocks,
        };
        for _ in 0..count {
            let (ln, l) = next()?;
            let tok: Vec<&str> = l.split_whitespace().collect();
            if tok.len() != 12 + cameras {
                return Err(err(ln, "wrong field count for surfel"));
            }
            let f = |i: usize| -> Result<f64, SurfelMapError> {
                tok[i].parse().map_err(|_| err(ln, "bad float"))
            };
            let u = |i: usize| -> Result<u64, SurfelMapError> {
                tok[i].parse().map_err(|_| err(ln, "bad integer"))
            };
            let mut last_seen = Vec::with_capacity(cameras);
            for c in 0..cameras {
                last_seen.push(u(12 + c)?);
            }
            map.surfels.push(Surfel {
                position: Vector3::new(f(0)?, f(1)?, f(2)?),
                normal: Vector3::new(f(3)?, f(4)?, f(5)?),
                radius: f(6)?,
                weight: f(7)?,
                color: [u(8)? as u8, u(9)? as u8, u(10)? as u8],
                init_time: u(11)?,
                last_seen,
            });
        }
        Ok(map)
    }
}

/// Surfel radius for a measurement at depth z with camera-frame normal z
/// component n_z: z * sqrt(2) / (f * |n_z|), |n_z| floored at 0.5 so grazing
/// surfaces do not blow up.
fn measured_radius(z: f64, fx: f64, n_z: f64) -> f64 {
    z * std::f64::consts::SQRT_2 / (fx * n_z.abs().max(0.5))
}

fn clamped_radius(radii: &Grid<f64>, x: usize, y: usize) -> f64 {
    let r = radii.get(x, y);
    let mut neighbors: [f64; 9] = [0.0; 9];
    let mut n = 0;
    for dy in -1i64..=1 {
        for dx in -1i64..=1 {
            if let Some(v) = radii.try_get(x as i64 + dx, y as i64 + dy) {
                if v > 0.0 {
                    neighbors[n] = v;
                    n += 1;
                }
            }
        }
    }
    if n < 3 {
        return r;
    }
    neighbors[..n].sort_by(|a, b| a.partial_cmp(b).unwrap());
    r.min(2.0 * neighbors[(n - 1) / 2])
}

fn contribution_color(last_seen: &[u64]) -> [u8; 3] {
    let mut sum = [0u32; 3];
    let mut n = 0u32;
    for (cam, seen) in last_seen.iter().enumerate() {
        if *seen != NEVER {
            let c = CAMERA_PALETTE[cam % CAMERA_PALETTE.len()];
            for i in 0..3 {
                sum[i] += c[i] as u32;
            }
            n += 1;
        }
    }
    if n == 0 {
        return [0, 0, 0];
    }
    [
        (sum[0] / n) as u8,
        (sum[1] / n) as u8,
        (sum[2] / n) as u8,
    ]
}
