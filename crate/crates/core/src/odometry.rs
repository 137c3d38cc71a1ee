//! Frame-to-model tracking: Gauss-Newton over a twist minimizing a joint
//! point-to-plane ICP + photometric cost over the 3-level pyramid. Also the
//! alignment engine reused by loop-closure registration.

use nalgebra::{Matrix6, Vector2, Vector3, Vector6};

use crate::frame::{build_pyramid_from_parts, FramePyramid, PyramidLevel, PYRAMID_LEVELS};
use crate::geometry::{Intrinsics, RigidTransform, Twist, Z_MIN};
use crate::surfelmap::{ModelView, NO_SURFEL};

#[derive(Clone, Copy, Debug)]
pub struct TrackConfig {
    /// Gauss-Newton iterations per pyramid level, indexed by level.
    pub iterations: [usize; PYRAMID_LEVELS],
    /// Weight of the photometric term relative to the geometric term.
    pub lambda: f64,
    /// Huber delta for the ICP term, per metre of measured depth.
    pub huber_icp: f64,
    /// Huber delta for the photometric term, intensity units.
    pub huber_rgb: f64,
    /// Maximum live-to-model point distance for a geometric correspondence.
    pub assoc_max_dist: f64,
    /// Minimum cosine between live and model normals for a correspondence.
    pub assoc_min_cos: f64,
    /// Consecutive error increases before the solve is declared divergent.
    pub divergence_streak: u32,
    /// Minimum geometric inliers at the finest level.
    pub min_inliers: usize,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            iterations: [4, 5, 10],
            lambda: 0.1,
            huber_icp: 0.01,
            huber_rgb: 0.3,
            assoc_max_dist: 0.1,
            assoc_min_cos: 0.866_025_403_784_438_6, // cos 30 deg
            divergence_streak: 3,
            min_inliers: 50,
        }
    }
}

/// Acceptance thresholds for `check_constrained`.
#[derive(Clone, Copy, Debug)]
pub struct CheckConfig {
    pub eps_eig: f64,
    pub kappa_max: f64,
    pub eps_err: f64,
    pub n_min: usize,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            eps_eig: 1e-5,
            kappa_max: 1e6,
            eps_err: 5e-3,
            n_min: 2000,
        }
    }
}

impl CheckConfig {
    /// Defaults with the inlier floor scaled from the 160x120 baseline.
    pub fn for_intrinsics(k: &Intrinsics) -> Self {
        Self::default().scaled_for(k)
    }

    /// Same thresholds with the inlier floor rescaled for a resolution;
    /// n_min is read against the 160x120 baseline.
    pub fn scaled_for(&self, k: &Intrinsics) -> Self {
        Self {
            n_min: self.n_min * (k.width * k.height) / (160 * 120),
            ..*self
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Acceptance {
    Accepted,
    Underconstrained,
}

#[derive(Clone, Debug)]
pub struct TrackingResult {
    /// Maps live-camera coordinates into model-camera coordinates; the new
    /// global pose is model_pose * increment.
    pub increment: RigidTransform,
    /// Combined robustified mean error: icp_error + lambda * rgb_error.
    pub final_error: f64,
    pub icp_error: f64,
    pub rgb_error: f64,
    /// Geometric correspondences in the final evaluation at the finest level.
    pub inlier_count: usize,
    /// Eigenvalues of the final normal-equations matrix, ascending.
    pub hessian_spectrum: [f64; 6],
    pub converged: bool,
}

/// Builds the tracking pyramid for a predicted model view.
pub fn model_pyramid(view: &ModelView) -> FramePyramid {
    let mut pyr = build_pyramid_from_parts(&view.color, &view.depth, view.intrinsics);
    // Splatted pixels know their surfel's true tangent plane; central
    // differences across neighbouring discs would blur it and let fragments
    // of a mis-oriented disc slip past the association's normal gate. Pixels
    // backfilled from a live frame keep the recomputed normal.
    let finest = &mut pyr.levels[0];
    for y in 0..view.normal.height() {
        for x in 0..view.normal.width() {
            let n = view.normal.get(x, y);
            if view.index.get(x, y) != NO_SURFEL && n != Vector3::zeros() {
                let v = finest.vertex.get(x, y);
                finest.normal.set(x, y, if n.dot(&v) > 0.0 { -n } else { n });
            }
        }
    }
    pyr
}

struct IcpCorr {
    v_live: Vector3<f64>,
    v_model: Vector3<f64>,
    n_model: Vector3<f64>,
    /// Huber delta, 0.01 * measured depth.
    delta: f64,
}

struct RgbCorr {
    v_live: Vector3<f64>,
    i_live: f64,
}

fn associate(
    model: &PyramidLevel,
    live: &PyramidLevel,
    t: &RigidTransform,
    cfg: &TrackConfig,
) -> (Vec<IcpCorr>, Vec<RgbCorr>) {
    let k = &model.intrinsics;
    let mut icp = Vec::new();
    let mut rgb = Vec::new();
    for y in 0..live.depth.height() {
        for x in 0..live.depth.width() {
            let z = live.depth.get(x, y) as f64;
            if z <= 0.0 {
                continue;
            }
            let v_live = live.vertex.get(x, y);
            let p = t.transform_point(&v_live);
            if p.z <= Z_MIN {
                continue;
            }
            let u = k.fx * p.x / p.z + k.cx;
            let v = k.fy * p.y / p.z + k.cy;
            let (ui, vi) = (u.round() as i64, v.round() as i64);
            let model_z = model.depth.try_get(ui, vi).unwrap_or(0.0);
            let n_live = live.normal.get(x, y);
            let n_model = if model_z > 0.0 {
                model.normal.get(ui as usize, vi as usize)
            } else {
                Vector3::zeros()
            };
            let normals_agree = n_live == Vector3::zeros()
                || n_model == Vector3::zeros()
                || (t.rotation() * n_live).dot(&n_model) >= cfg.assoc_min_cos;

            // Photometric correspondence: warp must land on predicted
            // geometry so black no-surfel pixels are never sampled, and the
            // surfaces must agree where both normals are known, so fragments
            // of a mis-oriented disc do not inject a foreign color.
            if model_z > 0.0 && normals_agree {
                rgb.push(RgbCorr {
                    v_live,
                    i_live: live.intensity.get(x, y) as f64,
                });
            }

            // Geometric correspondence needs both normals for the gate.
            if n_live == Vector3::zeros() || n_model == Vector3::zeros() || !normals_agree {
                continue;
            }
            let v_model = model.vertex.get(ui as usize, vi as usize);
            if (p - v_model).norm() > cfg.assoc_max_dist {
                continue;
            }
            icp.push(IcpCorr {
                v_live,
                v_model,
                n_model,
                delta: cfg.huber_icp * z,
            });
        }
    }
    (icp, rgb)
}

fn icp_residual(c: &IcpCorr, t: &RigidTransform) -> f64 {
    c.n_model.dot(&(t.transform_point(&c.v_live) - c.v_model))
}

/// Jacobian of the point-to-plane residual wrt a left-multiplied twist
/// (v, w): d/dv = n, d/dw = (T v_live) x n.
fn icp_jacobian(c: &IcpCorr, t: &RigidTransform) -> Vector6<f64> {
    let p = t.transform_point(&c.v_live);
    let rot = p.cross(&c.n_model);
    Vector6::new(
        c.n_model.x,
        c.n_model.y,
        c.n_model.z,
        rot.x,
        rot.y,
        rot.z,
    )
}

/// Photometric residual I_model(warp(p)) - I_live and its exact Jacobian via
/// the analytic gradient of the bilinear interpolation. None when the warp
/// leaves the model image or its 2x2 stencil straddles a depth inconsistency:
/// interpolating across a hole or an occlusion boundary would blend a
/// foreign surface's intensity into the sample.
fn rgb_residual_jacobian(
    c: &RgbCorr,
    model: &PyramidLevel,
    t: &RigidTransform,
) -> Option<(f64, Vector6<f64>)> {
    let k = &model.intrinsics;
    let p = t.transform_point(&c.v_live);
    if p.z <= Z_MIN {
        return None;
    }
    let u = k.fx * p.x / p.z + k.cx;
    let v = k.fy * p.y / p.z + k.cy;
    let (x0, y0) = (u.floor() as i64, v.floor() as i64);
    for (sx, sy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
        let z = model.depth.try_get(x0 + sx, y0 + sy)? as f64;
        if z <= 0.0 || (z - p.z).abs() > 0.05 * p.z {
            return None;
        }
    }
    let (i_model, du, dv) = model.intensity_bilinear_grad(u, v)?;
    let r = i_model - c.i_live;
    let g = Vector2::new(du, dv);
    let inv_z = 1.0 / p.z;
    // d(u,v)/dp for the pinhole projection.
    let j_proj = nalgebra::Matrix2x3::new(
        k.fx * inv_z,
        0.0,
        -k.fx * p.x * inv_z * inv_z,
        0.0,
        k.fy * inv_z,
        -k.fy * p.y * inv_z * inv_z,
    );
    let gp = j_proj.transpose() * g;
    let rot = p.cross(&gp);
    Some((r, Vector6::new(gp.x, gp.y, gp.z, rot.x, rot.y, rot.z)))
}

#[cfg(test)]
fn rgb_residual(c: &RgbCorr, model: &PyramidLevel, t: &RigidTransform) -> Option<f64> {
    rgb_residual_jacobian(c, model, t).map(|(r, _)| r)
}

fn huber_weight(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        1.0
    } else {
        delta / a
    }
}

fn huber_cost(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        r * r
    } else {
        delta * (2.0 * a - delta)
    }
}

#[derive(Clone)]
struct Linearization {
    h: Matrix6<f64>,
    b: Vector6<f64>,
    icp_count: usize,
    icp_error: f64,
    rgb_error: f64,
    error: f64,
}

fn linearize(
    model: &PyramidLevel,
    live: &PyramidLevel,
    t: &RigidTransform,
    cfg: &TrackConfig,
) -> Linearization {
    let (icp, rgb) = associate(model, live, t, cfg);
    let mut h = Matrix6::zeros();
    let mut b = Vector6::zeros();
    let mut icp_cost = 0.0;
    for c in &icp {
        let r = icp_residual(c, t);
        let j = icp_jacobian(c, t);
        let w = huber_weight(r, c.delta);
        h += j * j.transpose() * w;
        b -= j * (w * r);
        icp_cost += huber_cost(r, c.delta);
    }
    let mut rgb_cost = 0.0;
    let mut rgb_count = 0usize;
    for c in &rgb {
        let Some((r, j)) = rgb_residual_jacobian(c, model, t) else {
            continue;
        };
        let w = cfg.lambda * huber_weight(r, cfg.huber_rgb);
        h += j * j.transpose() * w;
        b -= j * (w * r);
        rgb_cost += huber_cost(r, cfg.huber_rgb);
        rgb_count += 1;
    }
    let icp_error = icp_cost / icp.len().max(1) as f64;
    let rgb_error = rgb_cost / rgb_count.max(1) as f64;
    Linearization {
        h,
        b,
        icp_count: icp.len(),
        icp_error,
        rgb_error,
        error: icp_error + cfg.lambda * rgb_error,
    }
}

fn spectrum(h: &Matrix6<f64>) -> [f64; 6] {
    let mut eig: Vec<f64> = h
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .collect();
    eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
    eig.try_into().unwrap()
}

/// Coarse-to-fine Gauss-Newton alignment of `live` against `model`. Returns
/// the increment mapping live-camera coordinates into model-camera
/// coordinates plus diagnostics; deterministic for identical inputs.
pub fn track(
    model: &FramePyramid,
    live: &FramePyramid,
    init: &RigidTransform,
    cfg: &TrackConfig,
) -> TrackingResult {
    for l in 0..PYRAMID_LEVELS {
        let (mk, lk) = (&model.levels[l].intrinsics, &live.levels[l].intrinsics);
        assert_eq!(
            (mk.width, mk.height),
            (lk.width, lk.height),
            "pyramids must share per-level dimensions"
        );
    }
    let mut t = *init;
    // The returned increment is the best finest-level estimate evaluated,
    // seeded with the init: a warm start can therefore never end worse than
    // it began.
    let mut best_t = *init;
    let mut best = linearize(model.finest(), live.finest(), init, cfg);
    let init_error = best.error;

    for level in (0..PYRAMID_LEVELS).rev() {
        let m = &model.levels[level];
        let l = &live.levels[level];
        let mut prev_error = f64::INFINITY;
        let mut streak = 0u32;
        for _ in 0..cfg.iterations[level] {
            let lin = linearize(m, l, &t, cfg);
            if level == 0 && lin.error < best.error {
                best = lin.clone();
                best_t = t;
            }
            // Divergence needs substantial growth: discrete association
            // flips near the optimum jitter the error by a couple of percent
            // per iteration, while a genuinely diverging solve compounds
            // tens of percent. Three consecutive 20% increases mean the
            // error has grown at least 1.7x away from a local optimum.
            if prev_error.is_finite() {
                if lin.error > prev_error * 1.2 + 1e-12 {
                    streak += 1;
                    if streak >= cfg.divergence_streak {
                        return result_from(&best, &best_t, false);
                    }
                } else {
                    streak = 0;
                }
                if (lin.error - prev_error).abs() <= 1e-12 + 1e-6 * prev_error {
                    break;
                }
            }
            prev_error = lin.error;
            let Some(chol) = lin.h.cholesky() else {
                return result_from(&best, &best_t, false);
            };
            let delta = chol.solve(&lin.b);
            let step = Twist::new(
                Vector3::new(delta[0], delta[1], delta[2]),
                Vector3::new(delta[3], delta[4], delta[5]),
            );
            t = step.exp().compose(&t);
        }
    }

    let fin = linearize(model.finest(), live.finest(), &t, cfg);
    if fin.error < best.error {
        best = fin;
        best_t = t;
    }
    let converged =
        best.icp_count >= cfg.min_inliers && best.error <= init_error * (1.0 + 1e-6) + 1e-12;
    result_from(&best, &best_t, converged)
}

fn result_from(lin: &Linearization, t: &RigidTransform, converged: bool) -> TrackingResult {
    TrackingResult {
        increment: *t,
        final_error: lin.error,
        icp_error: lin.icp_error,
        rgb_error: lin.rgb_error,
        inlier_count: lin.icp_count,
        hessian_spectrum: spectrum(&lin.h),
        converged,
    }
}

/// Validates that a tracking result constrains all six degrees of freedom:
/// converged, smallest Hessian eigenvalue above eps_eig, condition number
/// below kappa_max, error below eps_err and enough inliers. The joint
/// (geometric + photometric) Hessian is checked; a geometric-only variant
/// would be stricter for texture-rich but geometry-poor views.
pub fn check_constrained(r: &TrackingResult, cfg: &CheckConfig) -> Acceptance {
    let min_eig = r.hessian_spectrum[0];
    let max_eig = r.hessian_spectrum[5];
    let accepted = r.converged
        && min_eig > cfg.eps_eig
        && max_eig / min_eig.max(f64::MIN_POSITIVE) < cfg.kappa_max
        && r.final_error < cfg.eps_err
        && r.inlier_count > cfg.n_min;
    if accepted {
        Acceptance::Accepted
    } else {
        Acceptance::Underconstrained
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::synthetic::{
        corner_scene, look_at, render_synthetic_frame, textured_room, NoiseSpec,
    };
    use crate::frame::{build_pyramid, Grid, RgbdFrame};
    use crate::geometry::Twist;
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k160() -> Intrinsics {
        Intrinsics::new(120.0, 120.0, 80.0, 60.0, 160, 120).unwrap()
    }

    fn room_pose() -> RigidTransform {
        look_at(Vector3::new(1.6, 0.4, -1.4), Vector3::new(-0.5, -0.4, 0.9))
    }

    #[test]
    fn zero_residual_fixpoint() {
        let k = k160();
        let frame = render_synthetic_frame(&textured_room(), &room_pose(), &k, &NoiseSpec::NONE);
        let pyr = build_pyramid(&frame);
        let res = track(
            &pyr,
            &pyr,
            &RigidTransform::identity(),
            &TrackConfig::default(),
        );
        assert!(res.converged);
        assert!(res.increment.translation().norm() < 1e-6);
        assert!(res.increment.log().unwrap().angular.norm() < 1e-6);
        assert!(res.inlier_count > 5000);
    }

    #[test]
    fn recovers_small_perturbation() {
        let k = k160();
        let scene = textured_room();
        let pose = room_pose();
        let xi = Twist::from_slice(&[0.012, -0.008, 0.009, 0.012, -0.018, 0.008]);
        let live_pose = pose.compose(&xi.exp());
        let model = build_pyramid(&render_synthetic_frame(&scene, &pose, &k, &NoiseSpec::NONE));
        let live = build_pyramid(&render_synthetic_frame(
            &scene,
            &live_pose,
            &k,
            &NoiseSpec::NONE,
        ));
        let res = track(&model, &live, &RigidTransform::identity(), &TrackConfig::default());
        assert!(res.converged);
        let truth = xi.exp();
        let err = res.increment.inverse().compose(&truth);
        let t_err = err.translation().norm();
        let r_err = err.log().unwrap().angular.norm().to_degrees();
        let t_mag = truth.translation().norm();
        assert!(
            t_err < 0.1 * t_mag,
            "translation error {t_err} vs magnitude {t_mag}"
        );
        assert!(r_err < 0.2, "rotation error {r_err} deg");
    }

    #[test]
    fn all_invalid_frames_are_degenerate() {
        let k = k160();
        let color = Grid::filled(160, 120, [0u8; 3]);
        let depth = Grid::filled(160, 120, 0.0f32);
        let frame = RgbdFrame::new(0, 0, 0.0, color, depth, k).unwrap();
        let pyr = build_pyramid(&frame);
        let res = track(&pyr, &pyr, &RigidTransform::identity(), &TrackConfig::default());
        assert!(!res.converged);
        assert_eq!(res.inlier_count, 0);
        assert_eq!(
            check_constrained(&res, &CheckConfig::default()),
            Acceptance::Underconstrained
        );
    }

    /// Frozen-association residuals against central finite differences. The
    /// analytic photometric Jacobian uses the exact gradient of the bilinear
    /// surface, so away from interpolation-cell boundaries the two agree to
    /// first order.
    #[test]
    fn jacobians_match_finite_differences() {
        let k = k160();
        let scene = textured_room();
        let pose = room_pose();
        let model = build_pyramid(&render_synthetic_frame(&scene, &pose, &k, &NoiseSpec::NONE));
        let live_pose = pose.compose(
            &Twist::from_slice(&[0.01, 0.004, -0.006, 0.008, 0.012, -0.006]).exp(),
        );
        let live = build_pyramid(&render_synthetic_frame(
            &scene,
            &live_pose,
            &k,
            &NoiseSpec::NONE,
        ));
        let cfg = TrackConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(99);

        for trial in 0..4 {
            // Random linearization point near the truth.
            let mut xi = [0.0f64; 6];
            for x in xi.iter_mut() {
                *x = rng.gen_range(-0.01..0.01);
            }
            let t = Twist::from_slice(&xi).exp();
            let (icp, rgb) = associate(model.finest(), live.finest(), &t, &cfg);
            assert!(icp.len() > 500, "trial {trial}: too few icp corrs");
            let h = 1e-6;
            let basis = |i: usize, s: f64| {
                let mut d = [0.0f64; 6];
                d[i] = s;
                Twist::from_slice(&d).exp().compose(&t)
            };

            let mut checked_icp = 0;
            for c in icp.iter().step_by(97) {
                let j = icp_jacobian(c, &t);
                for i in 0..6 {
                    let fd = (icp_residual(c, &basis(i, h)) - icp_residual(c, &basis(i, -h)))
                        / (2.0 * h);
                    let scale = j[i].abs().max(fd.abs()).max(1e-8);
                    assert!(
                        (j[i] - fd).abs() / scale < 1e-4,
                        "icp d{i}: analytic {} vs fd {fd}",
                        j[i]
                    );
                }
                checked_icp += 1;
            }
            assert!(checked_icp >= 5);

            let mut checked_rgb = 0;
            for c in rgb.iter().step_by(131) {
                let Some((_, j)) = rgb_residual_jacobian(c, model.finest(), &t) else {
                    continue;
                };
                // Skip warps close to an interpolation-cell boundary, where
                // the surface gradient is discontinuous and finite
                // differences straddle two cells.
                let p = t.transform_point(&c.v_live);
                let u = k.fx * p.x / p.z + k.cx;
                let v = k.fy * p.y / p.z + k.cy;
                let margin = 1e-3;
                let interior = |w: f64| {
                    let f = w - w.floor();
                    f > margin && f < 1.0 - margin
                };
                if !interior(u) || !interior(v) {
                    continue;
                }
                for i in 0..6 {
                    let ra = rgb_residual(c, model.finest(), &basis(i, h));
                    let rb = rgb_residual(c, model.finest(), &basis(i, -h));
                    let (Some(ra), Some(rb)) = (ra, rb) else {
                        continue;
                    };
                    let fd = (ra - rb) / (2.0 * h);
                    let scale = j[i].abs().max(fd.abs()).max(1e-6);
                    assert!(
                        (j[i] - fd).abs() / scale < 1e-4,
                        "rgb d{i}: analytic {} vs fd {fd}",
                        j[i]
                    );
                }
                checked_rgb += 1;
            }
            assert!(checked_rgb >= 5);
        }
    }

    #[test]
    fn pure_rotation_keeps_translation_small() {
        // Close-range corner: strong parallax separates rotation from
        // translation. Doubled resolution keeps ray quantization well under
        // the millimetre bound.
        let k = Intrinsics::new(240.0, 240.0, 160.0, 120.0, 320, 240).unwrap();
        let scene = corner_scene();
        let pose = look_at(Vector3::new(1.4, 1.0, 1.5), Vector3::new(0.2, 0.3, 0.2));
        let xi = Twist::from_slice(&[0.0, 0.0, 0.0, 0.0, 0.008, 0.004]);
        let model = build_pyramid(&render_synthetic_frame(&scene, &pose, &k, &NoiseSpec::NONE));
        let live = build_pyramid(&render_synthetic_frame(
            &scene,
            &pose.compose(&xi.exp()),
            &k,
            &NoiseSpec::NONE,
        ));
        let res = track(&model, &live, &RigidTransform::identity(), &TrackConfig::default());
        assert!(res.converged);
        assert!(
            res.increment.translation().norm() < 1e-3,
            "translation leak {}",
            res.increment.translation().norm()
        );
    }

    #[test]
    fn corner_alignment_is_accepted() {
        let k = k160();
        let scene = corner_scene();
        let pose = look_at(Vector3::new(1.6, 1.2, 1.7), Vector3::new(0.15, 0.35, 0.2));
        let xi = Twist::from_slice(&[0.008, -0.006, 0.01, -0.008, 0.012, 0.006]);
        let model = build_pyramid(&render_synthetic_frame(&scene, &pose, &k, &NoiseSpec::NONE));
        let live = build_pyramid(&render_synthetic_frame(
            &scene,
            &pose.compose(&xi.exp()),
            &k,
            &NoiseSpec::NONE,
        ));
        let res = track(&model, &live, &RigidTransform::identity(), &TrackConfig::default());
        assert!(res.converged);
        assert_eq!(
            check_constrained(&res, &CheckConfig::for_intrinsics(&k)),
            Acceptance::Accepted
        );
    }

    #[test]
    fn textureless_wall_is_underconstrained() {
        // Fronto-parallel uniform wall: in-plane translation and yaw are
        // unobservable, so the Hessian has near-zero eigenvalues.
        let k = k160();
        let mut scene = crate::frame::synthetic::SyntheticScene::default();
        scene.add_box(
            Vector3::new(0.0, 0.0, 2.05),
            Vector3::new(30.0, 30.0, 0.1),
            [150, 150, 150],
        );
        let pose = RigidTransform::identity();
        let pyr = build_pyramid(&render_synthetic_frame(&scene, &pose, &k, &NoiseSpec::NONE));
        let res = track(&pyr, &pyr, &RigidTransform::identity(), &TrackConfig::default());
        let cfg = CheckConfig::for_intrinsics(&k);
        assert!(
            res.hessian_spectrum[0] <= cfg.eps_eig
                || res.hessian_spectrum[5] / res.hessian_spectrum[0] >= cfg.kappa_max,
            "expected a null space, spectrum {:?}",
            res.hessian_spectrum
        );
        assert_eq!(check_constrained(&res, &cfg), Acceptance::Underconstrained);
    }

    #[test]
    fn tracking_is_deterministic() {
        let k = k160();
        let scene = textured_room();
        let pose = room_pose();
        let xi = Twist::from_slice(&[0.01, 0.0, -0.005, 0.0, 0.01, 0.0]);
        let model = build_pyramid(&render_synthetic_frame(&scene, &pose, &k, &NoiseSpec::NONE));
        let live = build_pyramid(&render_synthetic_frame(
            &scene,
            &pose.compose(&xi.exp()),
            &k,
            &NoiseSpec::NONE,
        ));
        let cfg = TrackConfig::default();
        let a = track(&model, &live, &RigidTransform::identity(), &cfg);
        let b = track(&model, &live, &RigidTransform::identity(), &cfg);
        assert_eq!(a.increment.rotation(), b.increment.rotation());
        assert_eq!(a.increment.translation(), b.increment.translation());
        assert_eq!(a.final_error.to_bits(), b.final_error.to_bits());
        assert_eq!(a.inlier_count, b.inlier_count);
        for i in 0..6 {
            assert_eq!(
                a.hessian_spectrum[i].to_bits(),
                b.hessian_spectrum[i].to_bits()
            );
        }
    }

    #[test]
    fn warm_start_cannot_worsen_error() {
        // Initializing at the exact solution must stay there.
        let k = k160();
        let scene = textured_room();
        let pose = room_pose();
        let xi = Twist::from_slice(&[0.015, 0.0, 0.0, 0.0, 0.015, 0.0]);
        let truth = xi.exp();
        let model = build_pyramid(&render_synthetic_frame(&scene, &pose, &k, &NoiseSpec::NONE));
        let live = build_pyramid(&render_synthetic_frame(
            &scene,
            &pose.compose(&truth),
            &k,
            &NoiseSpec::NONE,
        ));
        let cfg = TrackConfig::default();
        let res = track(&model, &live, &truth, &cfg);
        assert!(res.converged);
        let init_eval = linearize(model.finest(), live.finest(), &truth, &cfg);
        assert!(res.final_error <= init_eval.error + 1e-12);
        assert_abs_diff_eq!(
            (res.increment.inverse().compose(&truth))
                .translation()
                .norm(),
            0.0,
            epsilon = 2e-3
        );
    }
}
