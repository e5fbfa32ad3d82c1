//! Pinhole cameras, rigid poses and the reprojection chain.
//!
//! Conventions used throughout the crate:
//!
//! * camera coordinates: `+z` looks forward, `+x` right, `+y` down;
//! * pixel coordinates: `u` right, `v` down, pixel centers at integers;
//! * depth is the camera-space `z` coordinate, not the ray length;
//! * a [`Pose`] is stored **camera-to-world**. Reprojecting a pixel from a
//!   source camera into a destination camera therefore applies
//!   `dst⁻¹ ∘ src` to the lifted point.

use nalgebra::{Isometry3, Matrix3, Matrix4, Point3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square pixels, principal point at the image center, horizontal field of view in degrees.
    pub fn from_fov(width: usize, height: usize, hfov_deg: f64) -> Result<Self> {
        let fx = 0.5 * width as f64 / (0.5 * hfov_deg.to_radians()).tan();
        Self::new(
            fx,
            fx,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::Contract(format!("invalid focal lengths in {self:?}")));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Contract("image size must be nonzero".into()));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy)
        {
            return Err(Error::Contract(format!(
                "principal point ({}, {}) outside the {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Camera-space point at `depth` along the ray through `x`.
    #[inline]
    pub fn lift(&self, x: SubPixel, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (x.u - self.cx) / self.fx * depth,
            (x.v - self.cy) / self.fy * depth,
            depth,
        )
    }

    /// Pixel of a camera-space point. Only meaningful for `p.z > 0`.
    #[inline]
    pub fn pixel_of(&self, p: &Vector3<f64>) -> SubPixel {
        SubPixel {
            u: self.fx * p.x / p.z + self.cx,
            v: self.fy * p.y / p.z + self.cy,
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }
}

/// Continuous pixel position. Validity against image bounds is tracked separately.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SubPixel {
    pub u: f64,
    pub v: f64,
}

impl SubPixel {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }

    pub fn distance(&self, other: &SubPixel) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), t)
    }

    /// Builds a pose from raw `(w, x, y, z)` quaternion components, renormalizing them.
    pub fn from_wxyz(q: [f64; 4], t: [f64; 3]) -> Result<Self> {
        let raw = nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]);
        let norm = raw.norm();
        if !norm.is_finite() || norm < 1e-12 || !t.iter().all(|v| v.is_finite()) {
            return Err(Error::Contract(format!("invalid pose q={q:?} t={t:?}")));
        }
        Ok(Self::new(UnitQuaternion::new_normalize(raw), Vector3::from(t)))
    }

    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.coords.iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite())
    }

    pub fn inverse(&self) -> Self {
        let r = self.rotation.inverse();
        Self::new(r, -(r * self.translation))
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn to_isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.translation), self.rotation)
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        self.to_isometry().to_homogeneous()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Point3<f64> {
        Point3::from(self.translation)
    }
}

/// Rigid motion carrying `src` onto `dst`: `relative(src, dst) ∘ src = dst`.
///
/// With world-to-camera poses this is exactly the `P_dst · P_src⁻¹` factor
/// of the reprojection chain; [`Projector`] applies it to inverted
/// camera-to-world poses.
pub fn relative(src: &Pose, dst: &Pose) -> Pose {
    dst.compose(&src.inverse())
}

/// Result of reprojecting a pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: SubPixel,
    /// Depth of the point in the destination camera.
    pub depth: f64,
    /// False when the point lies at or behind the destination camera.
    pub valid: bool,
}

/// Precomputed source-camera → destination-camera reprojection.
///
/// Rendering evaluates the same camera pair for every pixel and sample, so
/// the rotation matrix and translation are folded once.
#[derive(Debug, Clone, Copy)]
pub struct Projector {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    k: Intrinsics,
}

impl Projector {
    pub fn new(src_pose: &Pose, dst_pose: &Pose, k: &Intrinsics) -> Self {
        // src camera -> world -> dst camera
        let cam_to_cam = dst_pose.inverse().compose(src_pose);
        Self {
            rotation: cam_to_cam.rotation.to_rotation_matrix().into_inner(),
            translation: cam_to_cam.translation,
            k: *k,
        }
    }

    #[inline]
    pub fn project(&self, x: SubPixel, depth: f64) -> Projection {
        let p = self.rotation * self.k.lift(x, depth) + self.translation;
        if p.z > 0.0 && p.z.is_finite() {
            let pixel = self.k.pixel_of(&p);
            if pixel.is_finite() {
                return Projection {
                    pixel,
                    depth: p.z,
                    valid: true,
                };
            }
        }
        Projection {
            pixel: SubPixel::default(),
            depth: if p.z.is_finite() { p.z } else { 0.0 },
            valid: false,
        }
    }
}

/// Lifts `x` at `depth` in the source camera and reprojects it into the destination camera.
///
/// In-bounds checks are left to the caller; `valid` only reports whether the
/// point is in front of the destination camera.
pub fn project(
    x: SubPixel,
    depth: f64,
    src_pose: &Pose,
    dst_pose: &Pose,
    k: &Intrinsics,
) -> Result<Projection> {
    if !x.is_finite() || !depth.is_finite() || !src_pose.is_finite() || !dst_pose.is_finite() {
        return Err(Error::Contract("non-finite input to project".into()));
    }
    if depth <= 0.0 {
        return Err(Error::Contract(format!("project requires depth > 0, got {depth}")));
    }
    Ok(Projector::new(src_pose, dst_pose, k).project(x, depth))
}

/// World point seen at pixel `x` with camera-space depth `depth`.
pub fn unproject(x: SubPixel, depth: f64, pose: &Pose, k: &Intrinsics) -> Result<Vector3<f64>> {
    if !x.is_finite() || !depth.is_finite() || !pose.is_finite() {
        return Err(Error::Contract("non-finite input to unproject".into()));
    }
    if depth <= 0.0 {
        return Err(Error::Contract(format!("unproject requires depth > 0, got {depth}")));
    }
    Ok(pose.transform_point(&k.lift(x, depth)))
}

/// Projects a world point into a camera. `None` when it lies at or behind the camera.
pub fn project_world(p: &Vector3<f64>, pose: &Pose, k: &Intrinsics) -> Option<(SubPixel, f64)> {
    let c = pose.inverse().transform_point(p);
    (c.z > 0.0).then(|| (k.pixel_of(&c), c.z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn k100() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 32.0, 24.0, 64, 48).unwrap()
    }

    fn pose_strategy() -> impl Strategy<Value = Pose> {
        (
            prop::array::uniform3(-0.5f64..0.5),
            prop::array::uniform3(-2.0f64..2.0),
        )
            .prop_map(|(r, t)| {
                Pose::new(
                    UnitQuaternion::from_scaled_axis(Vector3::from(r)),
                    Vector3::from(t),
                )
            })
    }

    /// World-to-camera 4x4 chain evaluated with plain homogeneous matrices.
    fn matrix_chain(x: SubPixel, depth: f64, src: &Pose, dst: &Pose, k: &Intrinsics) -> (f64, f64, f64) {
        let kinv = k.matrix().try_inverse().unwrap();
        let ray = kinv * Vector3::new(x.u, x.v, 1.0) * depth;
        let p = nalgebra::Vector4::new(ray.x, ray.y, ray.z, 1.0);
        let w2c_dst = dst.to_matrix().try_inverse().unwrap();
        let q = w2c_dst * src.to_matrix() * p;
        let pix = k.matrix() * Vector3::new(q.x, q.y, q.z);
        (pix.x / pix.z, pix.y / pix.z, q.z)
    }

    #[test]
    fn identity_projection() {
        let p = Pose::from_translation(Vector3::new(0.3, -1.0, 2.0));
        let r = project(SubPixel::new(10.5, 20.0), 3.0, &p, &p, &k100()).unwrap();
        assert!(r.valid);
        assert_relative_eq!(r.pixel.u, 10.5, epsilon = 1e-12);
        assert_relative_eq!(r.pixel.v, 20.0, epsilon = 1e-12);
        assert_relative_eq!(r.depth, 3.0, epsilon = 1e-12);
    }

    #[test]
    fn lateral_baseline_shifts_by_disparity() {
        let k = k100();
        let src = Pose::identity();
        let dst = Pose::from_translation(Vector3::new(0.1, 0.0, 0.0));
        let x = SubPixel::new(20.0, 17.0);
        let r = project(x, 2.0, &src, &dst, &k).unwrap();
        let (mu, mv, _) = matrix_chain(x, 2.0, &src, &dst, &k);
        assert_relative_eq!(mu - x.u, -5.0, epsilon = 1e-12);
        assert_relative_eq!(r.pixel.u - x.u, -5.0, epsilon = 1e-12);
        assert_relative_eq!(r.pixel.v, mv, epsilon = 1e-12);
        assert_relative_eq!(r.pixel.v, 17.0, epsilon = 1e-12);
    }

    #[test]
    fn behind_camera_is_invalid() {
        let dst = Pose::from_translation(Vector3::new(0.0, 0.0, 5.0));
        let r = project(SubPixel::new(32.0, 24.0), 2.0, &Pose::identity(), &dst, &k100()).unwrap();
        assert!(!r.valid);
        assert!(r.pixel.is_finite());
    }

    #[test]
    fn non_finite_inputs_are_rejected() {
        let p = Pose::identity();
        assert!(project(SubPixel::new(f64::NAN, 0.0), 1.0, &p, &p, &k100()).is_err());
        assert!(project(SubPixel::new(0.0, 0.0), f64::INFINITY, &p, &p, &k100()).is_err());
        assert!(project(SubPixel::new(0.0, 0.0), -1.0, &p, &p, &k100()).is_err());
        assert!(unproject(SubPixel::new(0.0, 0.0), 0.0, &p, &k100()).is_err());
    }

    #[test]
    fn principal_ray_and_hand_example() {
        let k = k100();
        let w = unproject(SubPixel::new(k.cx, k.cy), 7.0, &Pose::identity(), &k).unwrap();
        assert_relative_eq!(w, Vector3::new(0.0, 0.0, 7.0), epsilon = 1e-12);

        let unit = Intrinsics {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
            width: 8,
            height: 8,
        };
        let w = unproject(SubPixel::new(2.0, 3.0), 4.0, &Pose::identity(), &unit).unwrap();
        assert_relative_eq!(w, Vector3::new(8.0, 12.0, 4.0), epsilon = 1e-12);
    }

    #[test]
    fn relative_examples() {
        let p = Pose::new(
            UnitQuaternion::from_euler_angles(0.1, -0.2, 0.3),
            Vector3::new(1.0, 2.0, 3.0),
        );
        let id = relative(&p, &p);
        assert!(id.rotation.angle() < 1e-12);
        assert!(id.translation.norm() < 1e-12);

        let t = Vector3::new(0.5, -1.5, 2.0);
        let r = relative(&Pose::identity(), &Pose::from_translation(t));
        assert_relative_eq!(r.transform_point(&Vector3::zeros()), t, epsilon = 1e-12);
    }

    #[test]
    fn intrinsics_invariants() {
        assert!(Intrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, -0.1, 1.0, 4, 4).is_err());
        assert!(Intrinsics::from_fov(64, 64, 60.0).is_ok());
    }

    proptest! {
        #[test]
        fn relative_matches_matrix_product(a in pose_strategy(), b in pose_strategy()) {
            let r = relative(&a, &b).to_matrix();
            let oracle = b.to_matrix() * a.to_matrix().try_inverse().unwrap();
            prop_assert!((r - oracle).abs().max() < 1e-9);
        }

        #[test]
        fn relative_composes(a in pose_strategy(), b in pose_strategy(), c in pose_strategy()) {
            let lhs = relative(&a, &c).to_matrix();
            let rhs = relative(&b, &c).compose(&relative(&a, &b)).to_matrix();
            prop_assert!((lhs - rhs).abs().max() < 1e-9);
        }

        #[test]
        fn pose_inverse_is_identity(a in pose_strategy()) {
            let m = a.compose(&a.inverse()).to_matrix();
            prop_assert!((m - Matrix4::identity()).abs().max() < 1e-9);
            prop_assert!((a.rotation.norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn project_matches_matrix_chain(
            src in pose_strategy(),
            u in 0.0f64..64.0, v in 0.0f64..48.0, depth in 0.5f64..20.0,
            r in prop::array::uniform3(-0.05f64..0.05),
            t in prop::array::uniform3(-0.2f64..0.2),
        ) {
            let k = k100();
            let dst = src.compose(&Pose::new(UnitQuaternion::from_scaled_axis(Vector3::from(r)), Vector3::from(t)));
            let x = SubPixel::new(u, v);
            let p = project(x, depth, &src, &dst, &k).unwrap();
            let (mu, mv, mz) = matrix_chain(x, depth, &src, &dst, &k);
            prop_assert!(p.valid);
            prop_assert!((p.pixel.u - mu).abs() < 1e-6 && (p.pixel.v - mv).abs() < 1e-6);
            prop_assert!((p.depth - mz).abs() <= 1e-9 * mz.abs());
        }

        #[test]
        fn unproject_project_round_trip(
            pose in pose_strategy(),
            u in 0.0f64..64.0, v in 0.0f64..48.0, depth in 0.1f64..50.0,
        ) {
            let k = k100();
            let w = unproject(SubPixel::new(u, v), depth, &pose, &k).unwrap();
            let (px, z) = project_world(&w, &pose, &k).unwrap();
            prop_assert!((px.u - u).abs() < 1e-6 && (px.v - v).abs() < 1e-6);
            prop_assert!((z - depth).abs() <= 1e-9 * depth);
        }

        #[test]
        fn project_is_equivariant_under_world_change(
            src in pose_strategy(), g in pose_strategy(),
            r in prop::array::uniform3(-0.05f64..0.05),
            t in prop::array::uniform3(-0.2f64..0.2),
            u in 0.0f64..64.0, v in 0.0f64..48.0, depth in 0.5f64..20.0,
        ) {
            let k = k100();
            let dst = src.compose(&Pose::new(UnitQuaternion::from_scaled_axis(Vector3::from(r)), Vector3::from(t)));
            let x = SubPixel::new(u, v);
            let a = project(x, depth, &src, &dst, &k).unwrap();
            let b = project(x, depth, &g.compose(&src), &g.compose(&dst), &k).unwrap();
            prop_assert!(a.pixel.distance(&b.pixel) < 1e-6);
        }
    }
}
