//! SE(3)/SO(3) algebra, camera intrinsics and the pinhole projection model.

use nalgebra::{Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector3};
use thiserror::Error;

/// Depth values at or below this are treated as unobservable (metres).
pub const Z_MIN: f64 = 0.05;

/// Compositions between re-orthonormalization passes.
const REORTHO_PERIOD: u32 = 1000;

/// Below this rotation angle the exp/log coefficients switch to Taylor series.
const SMALL_ANGLE: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("rotation angle {0} rad is too close to pi for a stable logarithm")]
    LogAngleNearPi(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// An SE(3) element: rotation plus translation, metres.
#[derive(Clone, Copy, Debug)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    /// Length of the composition chain since the last re-orthonormalization.
    chain: u32,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            chain: 0,
        }
    }

    /// Build from a rotation matrix and translation vector. The rotation is
    /// trusted; use [`RigidTransform::re_orthonormalize`] if it came from an
    /// unreliable source.
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
            chain: 0,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::from_parts(Matrix3::identity(), translation)
    }

    /// Build from a (not necessarily normalized) quaternion `(qx, qy, qz, qw)`
    /// and a translation, the layout used by TUM trajectory files.
    pub fn from_quaternion_translation(q: [f64; 4], translation: Vector3<f64>) -> Self {
        let quat = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            q[3], q[0], q[1], q[2],
        ));
        Self::from_parts(quat.to_rotation_matrix().into_inner(), translation)
    }

    pub fn from_homogeneous(m: &Matrix4<f64>) -> Self {
        Self::from_parts(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Rotation as a unit quaternion `(qx, qy, qz, qw)`, TUM layout.
    pub fn quaternion_xyzw(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(
            self.rotation,
        ));
        [q.i, q.j, q.k, q.w]
    }

    /// Composition: the result applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let mut out = RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
            chain: self.chain.max(other.chain) + 1,
        };
        if out.chain >= REORTHO_PERIOD {
            out.re_orthonormalize();
        }
        out
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
            chain: self.chain,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Normals transform by the rotation alone.
    pub fn transform_normal(&self, n: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * n
    }

    /// `inf`-norm of `R^T R - I`.
    pub fn orthonormality_error(&self) -> f64 {
        let e = self.rotation.transpose() * self.rotation - Matrix3::identity();
        e.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Snap the rotation back onto SO(3) via its polar factor.
    pub fn re_orthonormalize(&mut self) {
        self.rotation = polar_rotation(&self.rotation);
        self.chain = 0;
    }

    /// Logarithm. Fails for rotations within `1e-6` rad of a half turn where
    /// the axis extraction is ill-conditioned.
    pub fn log(&self) -> Result<Twist, GeometryError> {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(
            self.rotation,
        ));
        let omega = q.scaled_axis();
        let theta = omega.norm();
        if theta >= std::f64::consts::PI - 1e-6 {
            return Err(GeometryError::LogAngleNearPi(theta));
        }
        // V^{-1} = I - 1/2 [w]x + D [w]x^2 with D = 1/theta^2 - cot(theta/2)/(2 theta).
        let d = if theta < SMALL_ANGLE {
            1.0 / 12.0 + theta * theta / 720.0
        } else {
            1.0 / (theta * theta) - (theta / 2.0).cos() / (2.0 * theta * (theta / 2.0).sin())
        };
        let wx = skew(&omega);
        let v_inv = Matrix3::identity() - 0.5 * wx + d * (wx * wx);
        Ok(Twist {
            linear: v_inv * self.translation,
            angular: omega,
        })
    }

    pub fn approx_eq(&self, other: &RigidTransform, tol: f64) -> bool {
        let dr = self.rotation - other.rotation;
        let dt = self.translation - other.translation;
        dr.iter().chain(dt.iter()).all(|v| v.abs() <= tol)
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl PartialEq for RigidTransform {
    fn eq(&self, other: &Self) -> bool {
        self.rotation == other.rotation && self.translation == other.translation
    }
}

/// se(3) tangent element: linear velocity (metres) and angular velocity (radians).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Twist {
    pub linear: Vector3<f64>,
    pub angular: Vector3<f64>,
}

impl Twist {
    pub fn zero() -> Self {
        Self {
            linear: Vector3::zeros(),
            angular: Vector3::zeros(),
        }
    }

    pub fn new(linear: Vector3<f64>, angular: Vector3<f64>) -> Self {
        Self { linear, angular }
    }

    pub fn from_slice(v: &[f64; 6]) -> Self {
        Self {
            linear: Vector3::new(v[0], v[1], v[2]),
            angular: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn norm(&self) -> f64 {
        (self.linear.norm_squared() + self.angular.norm_squared()).sqrt()
    }

    /// Exponential map onto SE(3) via Rodrigues' formula.
    pub fn exp(&self) -> RigidTransform {
        let theta = self.angular.norm();
        let wx = skew(&self.angular);
        let wx2 = wx * wx;
        // a = sin(t)/t, b = (1-cos(t))/t^2, c = (t-sin(t))/t^3
        let (a, b, c) = if theta < SMALL_ANGLE {
            let t2 = theta * theta;
            (1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
        } else {
            let t2 = theta * theta;
            let half_sin = (theta / 2.0).sin();
            (
                theta.sin() / theta,
                2.0 * half_sin * half_sin / t2,
                (theta - theta.sin()) / (t2 * theta),
            )
        };
        let rotation = Matrix3::identity() + a * wx + b * wx2;
        let v = Matrix3::identity() + b * wx + c * wx2;
        RigidTransform::from_parts(rotation, v * self.linear)
    }
}

pub(crate) fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation (polar) factor of a near-orthonormal matrix, determinant +1.
pub(crate) fn polar_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        // Flip the weakest singular direction to stay in SO(3).
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}

/// Pinhole camera intrinsics.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={fx} fy={fy}"
            )));
        }
        if cx < 0.0 || cx >= width as f64 || cy < 0.0 || cy >= height as f64 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Intrinsics for pyramid level `level`; focal lengths and the principal
    /// point halve per level so projections scale exactly by `2^-level`.
    pub fn level(&self, level: usize) -> Intrinsics {
        let s = (1u32 << level) as f64;
        Intrinsics {
            fx: self.fx / s,
            fy: self.fy / s,
            cx: self.cx / s,
            cy: self.cy / s,
            width: self.width.div_ceil(1 << level),
            height: self.height.div_ceil(1 << level),
        }
    }

    /// Intrinsics rescaled to an arbitrary resolution, same convention as
    /// `level` (principal point scales multiplicatively).
    pub fn scaled_to(&self, width: usize, height: usize) -> Intrinsics {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Intrinsics {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
        }
    }

    /// Pinhole projection. `None` when the point is behind the near plane or
    /// lands outside the image: a normal branch, not a failure.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= Z_MIN {
            return None;
        }
        let u = self.fx * p.x / p.z + self.cx;
        let v = self.fy * p.y / p.z + self.cy;
        if u < 0.0 || u >= self.width as f64 || v < 0.0 || v >= self.height as f64 {
            return None;
        }
        Some((u, v))
    }

    /// Ray through pixel `(u, v)` scaled to depth `z`. `None` for `z <= 0`.
    pub fn backproject(&self, u: f64, v: f64, z: f64) -> Option<Vector3<f64>> {
        if z <= 0.0 {
            return None;
        }
        Some(Vector3::new(
            (u - self.cx) * z / self.fx,
            (v - self.cy) * z / self.fy,
            z,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    pub(crate) fn random_transform(rng: &mut impl Rng) -> RigidTransform {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let angle: f64 = rng.gen_range(0.0..3.0);
        let angular = if axis.norm() < 1e-6 {
            Vector3::x() * angle
        } else {
            axis.normalize() * angle
        };
        let linear = Vector3::new(
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
        );
        Twist { linear, angular }.exp()
    }

    #[test]
    fn compose_identity_and_inverse() {
        let mut rng = StdRng::seed_from_u64(7);
        let t = random_transform(&mut rng);
        let i = RigidTransform::identity();
        assert!(i.compose(&t).approx_eq(&t, 1e-12));
        assert!(t.compose(&t.inverse()).approx_eq(&i, 1e-9));
    }

    #[test]
    fn compose_matches_homogeneous_product_oracle() {
        let mut rng = StdRng::seed_from_u64(42);
        for _ in 0..200 {
            let a = random_transform(&mut rng);
            let b = random_transform(&mut rng);
            let via = a.compose(&b).to_homogeneous();
            let oracle = a.to_homogeneous() * b.to_homogeneous();
            for (x, y) in via.iter().zip(oracle.iter()) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn inverse_matches_homogeneous_oracle() {
        assert!(RigidTransform::identity()
            .inverse()
            .approx_eq(&RigidTransform::identity(), 0.0));
        let t = RigidTransform::from_translation(Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(*t.inverse().translation(), Vector3::new(-1.0, -2.0, -3.0));

        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..100 {
            let t = random_transform(&mut rng);
            let oracle = t.to_homogeneous().try_inverse().expect("invertible");
            for (x, y) in t.inverse().to_homogeneous().iter().zip(oracle.iter()) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn compose_is_associative() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..100 {
            let a = random_transform(&mut rng);
            let b = random_transform(&mut rng);
            let c = random_transform(&mut rng);
            assert!(a
                .compose(&b)
                .compose(&c)
                .approx_eq(&a.compose(&b.compose(&c)), 1e-9));
        }
    }

    #[test]
    fn long_chains_stay_orthonormal() {
        let mut rng = StdRng::seed_from_u64(5);
        let step = random_transform(&mut rng);
        let mut acc = RigidTransform::identity();
        for _ in 0..10_000 {
            acc = acc.compose(&step);
        }
        assert!(acc.orthonormality_error() < 1e-9);
    }

    #[test]
    fn transformed_normals_stay_unit() {
        let mut rng = StdRng::seed_from_u64(13);
        for _ in 0..100 {
            let t = random_transform(&mut rng);
            let n = Vector3::new(
                rng.gen_range(-1.0..1.0f64),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalize();
            assert_abs_diff_eq!(t.transform_normal(&n).norm(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn project_on_axis_and_behind_camera() {
        let k = Intrinsics::new(525.0, 525.0, 320.0, 240.0, 640, 480).unwrap();
        assert_eq!(k.project(&Vector3::new(0.0, 0.0, 1.0)), Some((320.0, 240.0)));
        assert_eq!(k.project(&Vector3::new(0.0, 0.0, -1.0)), None);
    }

    #[test]
    fn project_hand_computed_pinhole() {
        // u = 500 * 0.5 / 2 + 320, v = 500 * 0.25 / 2 + 240
        let k = Intrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap();
        let (u, v) = k.project(&Vector3::new(0.5, 0.25, 2.0)).unwrap();
        assert_abs_diff_eq!(u, 445.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 302.5, epsilon = 1e-12);
    }

    #[test]
    fn backproject_inverts_projection() {
        let k = Intrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap();
        assert_eq!(
            k.backproject(320.0, 240.0, 1.0),
            Some(Vector3::new(0.0, 0.0, 1.0))
        );
        assert_eq!(k.backproject(320.0, 240.0, 0.0), None);
        assert_eq!(k.backproject(320.0, 240.0, -1.0), None);

        let p = k.backproject(445.0, 302.5, 2.0).unwrap();
        assert_abs_diff_eq!(p.x, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(p.y, 0.25, epsilon = 1e-12);

        let mut rng = StdRng::seed_from_u64(17);
        for _ in 0..200 {
            let p = Vector3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.4..0.4),
                rng.gen_range(0.2..5.0),
            );
            if let Some((u, v)) = k.project(&p) {
                let q = k.backproject(u, v, p.z).unwrap();
                let (u2, v2) = k.project(&q).unwrap();
                assert_abs_diff_eq!(u, u2, epsilon = 1e-6);
                assert_abs_diff_eq!(v, v2, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn exp_of_zero_is_identity() {
        assert!(Twist::zero().exp().approx_eq(&RigidTransform::identity(), 0.0));
    }

    #[test]
    fn exp_matches_rodrigues_oracle() {
        // 90 degrees about z: closed form Rodrigues rotation.
        let t = Twist::from_slice(&[0.0, 0.0, 0.0, 0.0, 0.0, std::f64::consts::FRAC_PI_2]).exp();
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        for (x, y) in t.rotation().iter().zip(expected.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(t.translation().norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn log_exp_round_trip() {
        let mut rng = StdRng::seed_from_u64(23);
        for _ in 0..1000 {
            let xi = Twist::new(
                Vector3::new(
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                ),
                Vector3::new(
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                ),
            );
            let back = xi.exp().log().unwrap();
            assert_abs_diff_eq!((back.linear - xi.linear).norm(), 0.0, epsilon = 1e-9);
            assert_abs_diff_eq!((back.angular - xi.angular).norm(), 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn exp_log_round_trip_near_pi_and_tiny() {
        for &theta in &[1e-12, 1e-9, 1e-7, 1.0, 3.0, std::f64::consts::PI - 1e-5] {
            let xi = Twist::new(
                Vector3::new(0.1, -0.2, 0.3),
                Vector3::new(1.0, 2.0, -0.5).normalize() * theta,
            );
            let t = xi.exp();
            let back = t.log().unwrap().exp();
            assert!(t.approx_eq(&back, 1e-9), "failed at theta={theta}");
        }
    }

    #[test]
    fn log_rejects_half_turn() {
        let xi = Twist::new(Vector3::zeros(), Vector3::z() * std::f64::consts::PI);
        assert!(matches!(
            xi.exp().log(),
            Err(GeometryError::LogAngleNearPi(_))
        ));
    }

    #[test]
    fn level_intrinsics_scale_projections() {
        let k = Intrinsics::new(250.0, 250.0, 80.0, 60.0, 160, 120).unwrap();
        let p = Vector3::new(0.11, -0.07, 1.3);
        let (u0, v0) = k.project(&p).unwrap();
        for level in 1..3usize {
            let kl = k.level(level);
            let (ul, vl) = kl.project(&p).unwrap();
            let s = (1 << level) as f64;
            assert!((ul - u0 / s).abs() < 0.5 && (vl - v0 / s).abs() < 0.5);
            assert_eq!(kl.width, 160usize.div_ceil(1 << level));
        }
    }
}
