//! Synthetic RGB-D scenes: axis-aligned boxes and triangles rendered with a
//! pinhole ray caster, plus camera trajectory bookkeeping.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::frame::{Grid, RgbdFrame, Z_MAX};
use crate::geometry::{Intrinsics, RigidTransform, Z_MIN};

/// Directional light for Lambertian shading, pointing from the light into the
/// scene.
const LIGHT_DIR: [f64; 3] = [0.30, -0.52, 0.80];
const AMBIENT: f64 = 0.35;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("scene line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Additive depth noise with standard deviation `sigma0 * z^2`.
#[derive(Clone, Copy, Debug)]
pub struct NoiseSpec {
    pub sigma0: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub const NONE: NoiseSpec = NoiseSpec {
        sigma0: 0.0,
        seed: 0,
    };

    pub fn new(sigma0: f64, seed: u64) -> Self {
        Self { sigma0, seed }
    }

    /// Decorrelated spec for the frame at `index` within a sequence.
    pub fn for_frame(&self, index: u64) -> Self {
        Self {
            sigma0: self.sigma0,
            seed: self
                .seed
                .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Triangle {
    pub vertices: [Vector3<f64>; 3],
    pub albedo: [u8; 3],
}

/// Axis-aligned box with per-face albedo, face order -x,+x,-y,+y,-z,+z.
#[derive(Clone, Debug)]
pub struct Box3 {
    pub center: Vector3<f64>,
    pub size: Vector3<f64>,
    pub albedo: [[u8; 3]; 6],
}

impl Box3 {
    pub fn min(&self) -> Vector3<f64> {
        self.center - self.size * 0.5
    }

    pub fn max(&self) -> Vector3<f64> {
        self.center + self.size * 0.5
    }
}

/// World model plus one trajectory per camera, keyed by timestep.
#[derive(Clone, Debug, Default)]
pub struct SyntheticScene {
    pub triangles: Vec<Triangle>,
    pub boxes: Vec<Box3>,
    pub trajectories: BTreeMap<u32, Vec<(u64, RigidTransform)>>,
}

impl SyntheticScene {
    pub fn add_box(&mut self, center: Vector3<f64>, size: Vector3<f64>, albedo: [u8; 3]) {
        self.boxes.push(Box3 {
            center,
            size,
            albedo: [albedo; 6],
        });
    }

    pub fn add_box_faces(
        &mut self,
        center: Vector3<f64>,
        size: Vector3<f64>,
        albedo: [[u8; 3]; 6],
    ) {
        self.boxes.push(Box3 {
            center,
            size,
            albedo,
        });
    }

    pub fn add_triangle(&mut self, a: Vector3<f64>, b: Vector3<f64>, c: Vector3<f64>, albedo: [u8; 3]) {
        self.triangles.push(Triangle {
            vertices: [a, b, c],
            albedo,
        });
    }

    /// Appends a pose for `camera` at `timestep`; timesteps must increase.
    pub fn push_pose(&mut self, camera: u32, timestep: u64, pose: RigidTransform) {
        let traj = self.trajectories.entry(camera).or_default();
        if let Some((last, _)) = traj.last() {
            assert!(*last < timestep, "trajectory timesteps must increase");
        }
        traj.push((timestep, pose));
    }

    pub fn trajectory(&self, camera: u32) -> Option<&[(u64, RigidTransform)]> {
        self.trajectories.get(&camera).map(|t| t.as_slice())
    }

    pub fn pose_at(&self, camera: u32, timestep: u64) -> Option<&RigidTransform> {
        self.trajectories
            .get(&camera)?
            .iter()
            .find(|(t, _)| *t == timestep)
            .map(|(_, p)| p)
    }

    /// Fraction of trajectory frames for `camera` in which at least 30% of a
    /// quarter-resolution render hits scene geometry.
    pub fn frustum_coverage(&self, camera: u32, k: &Intrinsics) -> f64 {
        let Some(traj) = self.trajectories.get(&camera) else {
            return 0.0;
        };
        if traj.is_empty() {
            return 0.0;
        }
        let k_small = k.level(2);
        let mut covered = 0usize;
        for (_, pose) in traj {
            let frame = render_synthetic_frame(self, pose, &k_small, &NoiseSpec::NONE);
            let valid = frame.valid_depth_count();
            if valid * 10 >= k_small.pixel_count() * 3 {
                covered += 1;
            }
        }
        covered as f64 / traj.len() as f64
    }

    /// Serializes to the text scene format (`box`, `tri`, `traj` lines).
    /// Per-face albedo collapses to the first face's color.
    pub fn to_scene_string(&self) -> String {
        let mut out = String::new();
        for b in &self.boxes {
            let a = b.albedo[0];
            writeln!(
                out,
                "box {} {} {} {} {} {} {} {} {}",
                b.center.x, b.center.y, b.center.z, b.size.x, b.size.y, b.size.z, a[0], a[1], a[2]
            )
            .unwrap();
        }
        for t in &self.triangles {
            let [p, q, r] = &t.vertices;
            writeln!(
                out,
                "tri {} {} {} {} {} {} {} {} {} {} {} {}",
                p.x, p.y, p.z, q.x, q.y, q.z, r.x, r.y, r.z, t.albedo[0], t.albedo[1], t.albedo[2]
            )
            .unwrap();
        }
        for (cam, traj) in &self.trajectories {
            for (t, pose) in traj {
                let q = pose.quaternion_xyzw();
                let tr = pose.translation();
                writeln!(
                    out,
                    "traj {} {} {} {} {} {} {} {} {}",
                    cam, t, tr.x, tr.y, tr.z, q[0], q[1], q[2], q[3]
                )
                .unwrap();
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), SceneError> {
        std::fs::write(path, self.to_scene_string())?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, SceneError> {
        let mut scene = SyntheticScene::default();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let parse_err = |msg: &str| SceneError::Parse {
                line: line_no,
                msg: msg.to_string(),
            };
            let floats = |n: usize| -> Result<Vec<f64>, SceneError> {
                if fields.len() != n + 1 {
                    return Err(parse_err(&format!(
                        "expected {} fields after '{}', found {}",
                        n,
                        fields[0],
                        fields.len() - 1
                    )));
                }
                fields[1..]
                    .iter()
                    .map(|f| {
                        f.parse::<f64>()
                            .map_err(|_| parse_err(&format!("bad number '{f}'")))
                    })
                    .collect()
            };
            match fields[0] {
                "box" => {
                    let v = floats(9)?;
                    scene.add_box(
                        Vector3::new(v[0], v[1], v[2]),
                        Vector3::new(v[3], v[4], v[5]),
                        color_from(&v[6..9], line_no)?,
                    );
                }
                "tri" => {
                    let v = floats(12)?;
                    scene.add_triangle(
                        Vector3::new(v[0], v[1], v[2]),
                        Vector3::new(v[3], v[4], v[5]),
                        Vector3::new(v[6], v[7], v[8]),
                        color_from(&v[9..12], line_no)?,
                    );
                }
                "traj" => {
                    let v = floats(9)?;
                    let cam = v[0] as u32;
                    let t = v[1] as u64;
                    if v[0].fract() != 0.0 || v[0] < 0.0 || v[1].fract() != 0.0 || v[1] < 0.0 {
                        return Err(parse_err("camera id and timestep must be non-negative integers"));
                    }
                    let pose = RigidTransform::from_quaternion_translation(
                        [v[5], v[6], v[7], v[8]],
                        Vector3::new(v[2], v[3], v[4]),
                    );
                    let traj = scene.trajectories.entry(cam).or_default();
                    if let Some((last, _)) = traj.last() {
                        if *last >= t {
                            return Err(parse_err("trajectory timesteps must increase"));
                        }
                    }
                    traj.push((t, pose));
                }
                other => return Err(parse_err(&format!("unknown primitive '{other}'"))),
            }
        }
        Ok(scene)
    }

    pub fn load(path: &Path) -> Result<Self, SceneError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

fn color_from(v: &[f64], line: usize) -> Result<[u8; 3], SceneError> {
    let mut c = [0u8; 3];
    for (i, x) in v.iter().enumerate() {
        if *x < 0.0 || *x > 255.0 || x.fract() != 0.0 {
            return Err(SceneError::Parse {
                line,
                msg: format!("color channel '{x}' not an integer in 0..=255"),
            });
        }
        c[i] = *x as u8;
    }
    Ok(c)
}

struct Hit {
    depth: f64,
    normal: Vector3<f64>,
    albedo: [u8; 3],
}

/// Renders the scene from a camera-to-world pose. Depth is camera-frame z;
/// pixels with no hit inside (Z_MIN, Z_MAX) get depth 0 and black color.
///
/// Depth comes from a single ray through the integer pixel centre, so
/// geometric values are exact plane intersections. Color integrates over the
/// pixel footprint where it matters: pixels whose centre-ray color differs
/// from a 4-neighbour are re-shaded as the mean of a 3x3 subray grid, which
/// keeps flat face interiors bit-stable while giving edges the subpixel
/// position a real sensor records.
pub fn render_synthetic_frame(
    scene: &SyntheticScene,
    pose: &RigidTransform,
    k: &Intrinsics,
    noise: &NoiseSpec,
) -> RgbdFrame {
    let mut color = Grid::filled(k.width, k.height, [0u8; 3]);
    let mut depth = Grid::filled(k.width, k.height, 0.0f32);
    let origin = pose.translation();
    let rot = pose.rotation();
    let light = Vector3::new(LIGHT_DIR[0], LIGHT_DIR[1], LIGHT_DIR[2]).normalize();
    let mut rng = (noise.sigma0 > 0.0).then(|| ChaCha8Rng::seed_from_u64(noise.seed));
    // Shaded color of the surface seen along pixel coords (u, v); None if the
    // ray escapes. Unit z in camera frame, so the ray parameter equals
    // z-depth.
    let shade_at = |u: f64, v: f64| -> Option<(f64, [f64; 3])> {
        let dir_cam = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        let dir = rot * dir_cam;
        let hit = cast_ray(scene, origin, &dir)?;
        let mut n = hit.normal;
        if n.dot(&dir) > 0.0 {
            n = -n;
        }
        let shade = AMBIENT + (1.0 - AMBIENT) * n.dot(&-light).max(0.0);
        let c = [
            hit.albedo[0] as f64 * shade,
            hit.albedo[1] as f64 * shade,
            hit.albedo[2] as f64 * shade,
        ];
        Some((hit.depth, c))
    };
    let quantize = |c: [f64; 3]| -> [u8; 3] {
        [
            c[0].round().min(255.0) as u8,
            c[1].round().min(255.0) as u8,
            c[2].round().min(255.0) as u8,
        ]
    };
    let mut hit_mask = vec![false; k.width * k.height];
    for y in 0..k.height {
        for x in 0..k.width {
            let Some((z_hit, c)) = shade_at(x as f64, y as f64) else {
                continue;
            };
            let z = match rng.as_mut() {
                Some(r) => {
                    let z = z_hit + noise.sigma0 * z_hit * z_hit * standard_normal(r);
                    if z <= Z_MIN || z >= Z_MAX {
                        continue;
                    }
                    z
                }
                None => z_hit,
            };
            hit_mask[y * k.width + x] = true;
            color.set(x, y, quantize(c));
            depth.set(x, y, z as f32);
        }
    }
    // Supersample pass. The 3x3 offsets are the midpoint rule over the unit
    // pixel footprint; subrays that escape contribute the background black.
    const SUB: [f64; 3] = [-1.0 / 3.0, 0.0, 1.0 / 3.0];
    let mut blended: Vec<(usize, usize, [u8; 3])> = Vec::new();
    for y in 0..k.height {
        for x in 0..k.width {
            if !hit_mask[y * k.width + x] {
                continue;
            }
            let own = color.get(x, y);
            let edge = [(1isize, 0isize), (-1, 0), (0, 1), (0, -1)]
                .iter()
                .any(|(dx, dy)| {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    nx >= 0
                        && ny >= 0
                        && (nx as usize) < k.width
                        && (ny as usize) < k.height
                        && color.get(nx as usize, ny as usize) != own
                });
            if !edge {
                continue;
            }
            let mut acc = [0.0f64; 3];
            for dv in SUB {
                for du in SUB {
                    if let Some((_, c)) = shade_at(x as f64 + du, y as f64 + dv) {
                        acc = [acc[0] + c[0], acc[1] + c[1], acc[2] + c[2]];
                    }
                }
            }
            blended.push((x, y, quantize([acc[0] / 9.0, acc[1] / 9.0, acc[2] / 9.0])));
        }
    }
    for (x, y, c) in blended {
        color.set(x, y, c);
    }
    RgbdFrame::new(0, 0, 0.0, color, depth, *k).expect("render dims match intrinsics")
}

/// Renders every trajectory frame of `camera`. Frame index is the ordinal
/// position; wall time is the trajectory timestep in seconds.
pub fn render_sequence(
    scene: &SyntheticScene,
    camera: u32,
    k: &Intrinsics,
    noise: &NoiseSpec,
) -> Vec<RgbdFrame> {
    let Some(traj) = scene.trajectory(camera) else {
        return Vec::new();
    };
    traj.iter()
        .enumerate()
        .map(|(i, (t, pose))| {
            let mut frame = render_synthetic_frame(scene, pose, k, &noise.for_frame(*t));
            frame.camera_id = camera;
            frame.index = i as u64;
            frame.wall_time = *t as f64;
            frame
        })
        .collect()
}

fn cast_ray(scene: &SyntheticScene, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for b in &scene.boxes {
        if let Some(hit) = intersect_box(b, origin, dir) {
            if best.as_ref().is_none_or(|h| hit.depth < h.depth) {
                best = Some(hit);
            }
        }
    }
    for t in &scene.triangles {
        if let Some(hit) = intersect_triangle(t, origin, dir) {
            if best.as_ref().is_none_or(|h| hit.depth < h.depth) {
                best = Some(hit);
            }
        }
    }
    best
}

/// Slab test; returns the entry intersection. Rays starting inside miss.
fn intersect_box(b: &Box3, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
    let lo = b.min();
    let hi = b.max();
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    let mut axis = 0usize;
    for i in 0..3 {
        if dir[i].abs() < 1e-15 {
            if origin[i] < lo[i] || origin[i] > hi[i] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[i];
        let (mut t0, mut t1) = ((lo[i] - origin[i]) * inv, (hi[i] - origin[i]) * inv);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > t_enter {
            t_enter = t0;
            axis = i;
        }
        t_exit = t_exit.min(t1);
    }
    if t_enter > t_exit || t_enter <= Z_MIN || t_enter >= Z_MAX {
        return None;
    }
    let mut normal = Vector3::zeros();
    normal[axis] = if dir[axis] > 0.0 { -1.0 } else { 1.0 };
    let face = 2 * axis + usize::from(dir[axis] < 0.0);
    Some(Hit {
        depth: t_enter,
        normal,
        albedo: b.albedo[face],
    })
}

/// Moller-Trumbore with a non-normalized direction, so the returned parameter
/// is already camera z-depth.
fn intersect_triangle(tri: &Triangle, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
    let [a, b, c] = &tri.vertices;
    let e1 = b - a;
    let e2 = c - a;
    let pvec = dir.cross(&e2);
    let det = e1.dot(&pvec);
    if det.abs() < 1e-12 {
        return None;
    }
    let inv_det = 1.0 / det;
    let tvec = origin - a;
    let u = tvec.dot(&pvec) * inv_det;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let qvec = tvec.cross(&e1);
    let v = dir.dot(&qvec) * inv_det;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&qvec) * inv_det;
    if t <= Z_MIN || t >= Z_MAX {
        return None;
    }
    Some(Hit {
        depth: t,
        normal: e1.cross(&e2).normalize(),
        albedo: tri.albedo,
    })
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; keeps the dependency surface to plain uniform sampling.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Camera-to-world pose at `position` looking toward `target`, image y axis
/// pointing down in world (+y up convention).
pub fn look_at(position: Vector3<f64>, target: Vector3<f64>) -> RigidTransform {
    let forward = (target - position).normalize();
    let up = Vector3::new(0.0, -1.0, 0.0);
    let mut right = up.cross(&forward);
    if right.norm() < 1e-9 {
        right = Vector3::new(1.0, 0.0, 0.0);
    } else {
        right = right.normalize();
    }
    let down = forward.cross(&right);
    let rot = nalgebra::Matrix3::from_columns(&[right, down, forward]);
    RigidTransform::from_parts(rot, position)
}

/// Fixture palette: saturated, mutually distant colors.
pub const PALETTE: [[u8; 3]; 12] = [
    [204, 62, 44],
    [58, 134, 201],
    [84, 176, 74],
    [224, 178, 48],
    [142, 84, 190],
    [214, 110, 166],
    [90, 196, 188],
    [226, 130, 56],
    [108, 112, 208],
    [160, 196, 64],
    [196, 88, 88],
    [72, 156, 128],
];

fn palette_faces(start: usize) -> [[u8; 3]; 6] {
    std::array::from_fn(|i| PALETTE[(start + i) % PALETTE.len()])
}

/// Room interior with color-varied boxes and two ramp triangles; geometry and
/// texture rich enough for ICP, photometric tracking and fern encoding.
pub fn textured_room() -> SyntheticScene {
    let mut scene = SyntheticScene::default();
    // Floor, then four walls around [-3, 3] x [-3, 3], y up.
    scene.add_box_faces(
        Vector3::new(0.0, -1.05, 0.0),
        Vector3::new(8.0, 0.1, 8.0),
        palette_faces(0),
    );
    scene.add_box_faces(
        Vector3::new(-3.05, 0.5, 0.0),
        Vector3::new(0.1, 3.0, 8.0),
        palette_faces(2),
    );
    scene.add_box_faces(
        Vector3::new(3.05, 0.5, 0.0),
        Vector3::new(0.1, 3.0, 8.0),
        palette_faces(4),
    );
    scene.add_box_faces(
        Vector3::new(0.0, 0.5, -3.05),
        Vector3::new(8.0, 3.0, 0.1),
        palette_faces(6),
    );
    scene.add_box_faces(
        Vector3::new(0.0, 0.5, 3.05),
        Vector3::new(8.0, 3.0, 0.1),
        palette_faces(8),
    );
    // Interior furniture.
    scene.add_box_faces(
        Vector3::new(-1.2, -0.25, 0.9),
        Vector3::new(0.4, 1.6, 0.4),
        palette_faces(1),
    );
    scene.add_box_faces(
        Vector3::new(1.1, -0.7, -0.7),
        Vector3::new(0.6, 0.7, 0.6),
        palette_faces(5),
    );
    scene.add_box_faces(
        Vector3::new(0.5, -0.1, 1.7),
        Vector3::new(0.5, 2.0, 0.3),
        palette_faces(7),
    );
    scene.add_box_faces(
        Vector3::new(-0.4, -0.85, -1.6),
        Vector3::new(0.5, 0.4, 0.6),
        palette_faces(9),
    );
    scene.add_box_faces(
        Vector3::new(1.9, -0.55, 1.2),
        Vector3::new(0.4, 1.0, 0.4),
        palette_faces(10),
    );
    // Ramp triangles break the axis-aligned regularity.
    scene.add_triangle(
        Vector3::new(-2.2, -1.0, -2.2),
        Vector3::new(-0.8, -1.0, -2.2),
        Vector3::new(-2.2, 0.2, -2.8),
        PALETTE[3],
    );
    scene.add_triangle(
        Vector3::new(2.0, -1.0, 2.4),
        Vector3::new(2.8, 0.4, 2.9),
        Vector3::new(1.2, -1.0, 2.9),
        PALETTE[11],
    );
    scene
}

/// Corner of a room: floor and two walls meeting at the origin, with small
/// boxes on each surface so all six degrees of freedom are observable.
pub fn corner_scene() -> SyntheticScene {
    let mut scene = SyntheticScene::default();
    // Floor (y = 0 plane), wall at x = 0, wall at z = 0; the open octant is
    // +x, +y, +z.
    scene.add_box_faces(
        Vector3::new(2.0, -0.05, 2.0),
        Vector3::new(4.0, 0.1, 4.0),
        palette_faces(0),
    );
    scene.add_box_faces(
        Vector3::new(-0.05, 2.0, 2.0),
        Vector3::new(0.1, 4.0, 4.0),
        palette_faces(3),
    );
    scene.add_box_faces(
        Vector3::new(2.0, 2.0, -0.05),
        Vector3::new(4.0, 4.0, 0.1),
        palette_faces(6),
    );
    scene.add_box_faces(
        Vector3::new(0.5, 0.15, 0.8),
        Vector3::new(0.3, 0.3, 0.3),
        palette_faces(1),
    );
    scene.add_box_faces(
        Vector3::new(0.12, 0.9, 0.5),
        Vector3::new(0.24, 0.3, 0.25),
        palette_faces(4),
    );
    scene.add_box_faces(
        Vector3::new(0.8, 0.5, 0.14),
        Vector3::new(0.35, 0.4, 0.28),
        palette_faces(8),
    );
    scene
}

/// Appends an inward-looking orbit around `center` to `camera`'s trajectory:
/// `steps` poses on a circle of `radius` at height `height`, sweeping from
/// `angle0` to `angle1` radians, starting at timestep `t0`.
#[allow(clippy::too_many_arguments)]
pub fn push_orbit(
    scene: &mut SyntheticScene,
    camera: u32,
    center: Vector3<f64>,
    radius: f64,
    height: f64,
    angle0: f64,
    angle1: f64,
    steps: usize,
    t0: u64,
) {
    assert!(steps >= 1);
    for i in 0..steps {
        let s = if steps == 1 {
            0.0
        } else {
            i as f64 / (steps - 1) as f64
        };
        let a = angle0 + s * (angle1 - angle0);
        let pos = center + Vector3::new(radius * a.sin(), height, radius * a.cos());
        scene.push_pose(camera, t0 + i as u64, look_at(pos, center));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn scene_round_trips_through_text_format() {
        let mut scene = textured_room();
        push_orbit(
            &mut scene,
            0,
            Vector3::zeros(),
            2.0,
            0.3,
            0.0,
            0.5,
            5,
            0,
        );
        let text = scene.to_scene_string();
        let parsed = SyntheticScene::parse(&text).unwrap();
        assert_eq!(parsed.boxes.len(), scene.boxes.len());
        assert_eq!(parsed.triangles.len(), scene.triangles.len());
        let a = scene.trajectory(0).unwrap();
        let b = parsed.trajectory(0).unwrap();
        assert_eq!(a.len(), b.len());
        for ((ta, pa), (tb, pb)) in a.iter().zip(b) {
            assert_eq!(ta, tb);
            assert!(pa.approx_eq(pb, 1e-12));
        }
    }

    #[test]
    fn parse_reports_line_numbers() {
        let text = "box 0 0 0 1 1 1 10 10 10\nbogus 1 2 3\n";
        match SyntheticScene::parse(text) {
            Err(SceneError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        let text = "tri 0 0 0 1 0 0 0 1 0 300 0 0\n";
        assert!(matches!(
            SyntheticScene::parse(text),
            Err(SceneError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn empty_scene_renders_all_invalid() {
        let k = Intrinsics::new(60.0, 60.0, 40.0, 30.0, 80, 60).unwrap();
        let frame = render_synthetic_frame(
            &SyntheticScene::default(),
            &RigidTransform::identity(),
            &k,
            &NoiseSpec::NONE,
        );
        assert_eq!(frame.valid_depth_count(), 0);
        assert!(frame.color.data().iter().all(|c| *c == [0, 0, 0]));
    }

    #[test]
    fn oblique_wall_depth_matches_closed_form() {
        let mut scene = SyntheticScene::default();
        scene.add_box(
            Vector3::new(0.0, 0.0, 0.05),
            Vector3::new(40.0, 40.0, 0.1),
            [200, 200, 200],
        );
        let k = Intrinsics::new(120.0, 120.0, 80.0, 60.0, 160, 120).unwrap();
        let angle = 30f64.to_radians();
        let pose = crate::geometry::Twist::from_slice(&[0.0, 0.0, 0.0, 0.0, angle, 0.0])
            .exp()
            .compose(&RigidTransform::from_translation(Vector3::new(
                0.0, 0.0, -1.0,
            )));
        let frame = render_synthetic_frame(&scene, &pose, &k, &NoiseSpec::NONE);
        // Plane z=0 seen from pose: for pixel ray d_cam, depth solves
        // (R d_cam)_z * depth = -origin_z.
        let rot = pose.rotation();
        let origin = pose.translation();
        for y in (0..120).step_by(11) {
            for x in (0..160).step_by(13) {
                let d_cam = Vector3::new((x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0);
                let dz = (rot * d_cam).z;
                let expected = -origin.z / dz;
                let got = frame.depth.get(x, y) as f64;
                if expected > Z_MIN && expected < Z_MAX {
                    assert_abs_diff_eq!(got, expected, epsilon = 1e-6);
                } else {
                    assert_eq!(got, 0.0);
                }
            }
        }
    }

    #[test]
    fn depth_noise_is_deterministic_and_scaled() {
        let mut scene = SyntheticScene::default();
        scene.add_box(
            Vector3::new(0.0, 0.0, 2.05),
            Vector3::new(40.0, 40.0, 0.1),
            [200, 200, 200],
        );
        let k = Intrinsics::new(120.0, 120.0, 80.0, 60.0, 160, 120).unwrap();
        let pose = RigidTransform::identity();
        let noise = NoiseSpec::new(0.002, 7);
        let a = render_synthetic_frame(&scene, &pose, &k, &noise);
        let b = render_synthetic_frame(&scene, &pose, &k, &noise);
        assert_eq!(a.depth.data(), b.depth.data());
        let clean = render_synthetic_frame(&scene, &pose, &k, &NoiseSpec::NONE);
        let mut sq_sum = 0.0;
        let mut n = 0usize;
        for (d, c) in a.depth.data().iter().zip(clean.depth.data()) {
            assert!(*d > 0.0);
            let e = (*d - *c) as f64;
            sq_sum += e * e;
            n += 1;
        }
        let rms = (sq_sum / n as f64).sqrt();
        // sigma(z) = sigma0 * z^2 = 0.002 * 4 = 8 mm at z = 2.
        assert!((rms - 0.008).abs() < 0.001, "rms {rms}");
    }

    #[test]
    fn look_at_points_camera_z_at_target() {
        let pos = Vector3::new(2.0, 1.0, -3.0);
        let target = Vector3::new(0.0, 0.0, 0.0);
        let pose = look_at(pos, target);
        assert_abs_diff_eq!(pose.rotation().determinant(), 1.0, epsilon = 1e-12);
        let fwd = pose.rotation() * Vector3::new(0.0, 0.0, 1.0);
        let expected = (target - pos).normalize();
        assert!((fwd - expected).norm() < 1e-12);
        // Camera y axis points down in world (+y up).
        let cam_y = pose.rotation() * Vector3::new(0.0, 1.0, 0.0);
        assert!(cam_y.y < 0.0);
    }

    #[test]
    fn room_orbit_keeps_scene_in_frustum() {
        let mut scene = textured_room();
        push_orbit(
            &mut scene,
            0,
            Vector3::new(0.0, -0.2, 0.0),
            2.0,
            0.6,
            0.0,
            std::f64::consts::FRAC_PI_2,
            30,
            0,
        );
        let k = Intrinsics::new(120.0, 120.0, 80.0, 60.0, 160, 120).unwrap();
        assert!(scene.frustum_coverage(0, &k) >= 0.9);
    }
}
