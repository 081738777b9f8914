//! Rigid transforms and the isocenter pinhole model of an X-ray imaging system.
//!
//! The X-ray source sits at `(0, 0, c)` on the +z axis of the isocenter frame
//! and the detector plane is `z = c - d`. A point `X` projects to
//!
//! ```text
//! x' = K [R_view | t_view + h] (X; 1),   K = diag(-d, -d, 1),   h = (0, 0, -c)
//! x  = (x'/z', y'/z')
//! ```
//!
//! Detector coordinates are millimeters on the detector plane. Angles are
//! degrees at every public interface; rotations compose as `Rz * Ry * Rx`
//! (fixed axes).

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Vec2 = Vector2<f64>;

/// Rotation `Rz(θz) · Ry(θy) · Rx(θx)` for angles given in degrees.
pub fn rotation_from_euler(theta_deg: [f64; 3]) -> Matrix3<f64> {
    let [ax, ay, az] = theta_deg.map(f64::to_radians);
    let (sx, cx) = ax.sin_cos();
    let (sy, cy) = ay.sin_cos();
    let (sz, cz) = az.sin_cos();
    Matrix3::new(
        cz * cy,
        cz * sy * sx - sz * cx,
        cz * sy * cx + sz * sx,
        sz * cy,
        sz * sy * sx + cz * cx,
        sz * sy * cx - cz * sx,
        -sy,
        cy * sx,
        cy * cx,
    )
}

/// Inverse of [`rotation_from_euler`]; returns degrees. At gimbal lock
/// (`|θy| = 90°`) the x angle absorbs the remaining rotation.
pub fn euler_from_rotation(r: &Matrix3<f64>) -> [f64; 3] {
    let sy = (-r[(2, 0)]).clamp(-1.0, 1.0);
    let ay = sy.asin();
    let (ax, az) = if sy.abs() < 1.0 - 1e-12 {
        (r[(2, 1)].atan2(r[(2, 2)]), r[(1, 0)].atan2(r[(0, 0)]))
    } else {
        ((-r[(1, 2)]).atan2(r[(1, 1)]), 0.0)
    };
    [ax.to_degrees(), ay.to_degrees(), az.to_degrees()]
}

/// Six-parameter rigid pose: three rotations (degrees) and a translation (mm).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidPose {
    pub theta_deg: [f64; 3],
    pub t_mm: [f64; 3],
}

impl Default for RigidPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidPose {
    pub const fn identity() -> Self {
        Self {
            theta_deg: [0.0; 3],
            t_mm: [0.0; 3],
        }
    }

    pub const fn new(theta_deg: [f64; 3], t_mm: [f64; 3]) -> Self {
        Self { theta_deg, t_mm }
    }

    pub fn translation(t_mm: [f64; 3]) -> Self {
        Self::new([0.0; 3], t_mm)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rotation_from_euler(self.theta_deg)
    }

    pub fn to_transform(&self) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation(),
            translation: Vec3::from(self.t_mm),
        }
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        self.to_transform().to_matrix()
    }

    pub fn is_finite(&self) -> bool {
        self.theta_deg.iter().chain(&self.t_mm).all(|v| v.is_finite())
    }
}

/// A rigid transform in matrix form, `p ↦ R p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Self {
        Self {
            rotation: m.fixed_view::<3, 3>(0, 0).into_owned(),
            translation: m.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }

    pub fn to_pose(&self) -> RigidPose {
        RigidPose {
            theta_deg: euler_from_rotation(&self.rotation),
            t_mm: self.translation.into(),
        }
    }

    /// Angle of the relative rotation `R_other · Rᵀ`, in degrees.
    pub fn rotation_angle_to(&self, other: &RigidTransform) -> f64 {
        let rel = other.rotation * self.rotation.transpose();
        let cos = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        // acos is ill-conditioned near zero; recover small angles from the skew part
        let skew = Vec3::new(
            rel[(2, 1)] - rel[(1, 2)],
            rel[(0, 2)] - rel[(2, 0)],
            rel[(1, 0)] - rel[(0, 1)],
        );
        let sin = skew.norm() / 2.0;
        sin.atan2(cos).to_degrees()
    }
}

pub fn pose_apply(pose: &RigidPose, p: &Vec3) -> Vec3 {
    pose.to_transform().apply(p)
}

pub fn pose_compose(a: &RigidPose, b: &RigidPose) -> RigidTransform {
    a.to_transform().compose(&b.to_transform())
}

pub fn pose_invert(pose: &RigidPose) -> RigidTransform {
    pose.to_transform().inverse()
}

/// The transform `T_view` taking the canonical imaging setup to another view.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ViewPose(pub RigidPose);

impl ViewPose {
    pub fn anterior_posterior() -> Self {
        ViewPose(RigidPose::identity())
    }

    /// 90° about the y axis.
    pub fn lateral() -> Self {
        ViewPose(RigidPose::new([0.0, 90.0, 0.0], [0.0; 3]))
    }

    pub fn to_transform(&self) -> RigidTransform {
        self.0.to_transform()
    }
}

/// Source/detector distances and detector sampling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImagingGeometry {
    /// Source-to-detector distance.
    pub d_mm: f64,
    /// Source-to-isocenter distance.
    pub c_mm: f64,
    /// Detector size as `[width, height]` in pixels.
    pub det_px: [usize; 2],
    pub pixel_spacing_mm: f64,
}

impl Default for ImagingGeometry {
    fn default() -> Self {
        Self {
            d_mm: 1500.0,
            c_mm: 1000.0,
            det_px: [512, 512],
            pixel_spacing_mm: 0.388,
        }
    }
}

impl ImagingGeometry {
    /// Desk-scale detector: 128² pixels at 2 mm.
    pub fn desk() -> Self {
        Self {
            det_px: [128, 128],
            pixel_spacing_mm: 2.0,
            ..Self::default()
        }
    }

    pub fn width(&self) -> usize {
        self.det_px[0]
    }

    pub fn height(&self) -> usize {
        self.det_px[1]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::validation(format!("geometry.{field}"), msg));
        if !(self.c_mm.is_finite() && self.c_mm > 0.0) {
            return bad("c_mm", "must be finite and > 0");
        }
        if !(self.d_mm.is_finite() && self.d_mm > self.c_mm) {
            return bad("d_mm", "must be finite and > c_mm");
        }
        if self.det_px[0] < 1 || self.det_px[1] < 1 {
            return bad("det_px", "both dimensions must be >= 1");
        }
        if !(self.pixel_spacing_mm.is_finite() && self.pixel_spacing_mm > 0.0) {
            return bad("pixel_spacing_mm", "must be finite and > 0");
        }
        Ok(())
    }

    pub fn source_position(&self) -> Vec3 {
        Vec3::new(0.0, 0.0, self.c_mm)
    }

    /// Point on the detector plane (canonical frame) for detector mm coordinates.
    pub fn detector_point(&self, x: &Vec2) -> Vec3 {
        Vec3::new(x.x, x.y, self.c_mm - self.d_mm)
    }

    pub fn center_px(&self) -> Vec2 {
        Vec2::new(
            (self.det_px[0] as f64 - 1.0) / 2.0,
            (self.det_px[1] as f64 - 1.0) / 2.0,
        )
    }
}

/// Projects an isocenter-frame point through `view` onto the detector (mm).
pub fn project_point(x: &Vec3, view: &ViewPose, geom: &ImagingGeometry) -> Result<Vec2> {
    let y = view.to_transform().apply(x);
    let z = y.z - geom.c_mm;
    if z.abs() < 1e-9 || !z.is_finite() {
        return Err(Error::DegenerateProjection {
            index: 0,
            depth: z,
        });
    }
    Ok(Vec2::new(-geom.d_mm * y.x / z, -geom.d_mm * y.y / z))
}

/// Detector mm to pixel coordinates: mm origin at the image center,
/// +x along columns and +y along rows.
pub fn detector_mm_to_px(x: &Vec2, geom: &ImagingGeometry) -> Vec2 {
    x / geom.pixel_spacing_mm + geom.center_px()
}

pub fn detector_px_to_mm(px: &Vec2, geom: &ImagingGeometry) -> Vec2 {
    (px - geom.center_px()) * geom.pixel_spacing_mm
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn axis_rotations(theta_deg: [f64; 3]) -> [Matrix3<f64>; 3] {
        let [x, y, z] = theta_deg.map(f64::to_radians);
        [
            Matrix3::new(1.0, 0.0, 0.0, 0.0, x.cos(), -x.sin(), 0.0, x.sin(), x.cos()),
            Matrix3::new(y.cos(), 0.0, y.sin(), 0.0, 1.0, 0.0, -y.sin(), 0.0, y.cos()),
            Matrix3::new(z.cos(), -z.sin(), 0.0, z.sin(), z.cos(), 0.0, 0.0, 0.0, 1.0),
        ]
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> RigidPose {
        RigidPose::new(
            [0; 3].map(|_| rng.random_range(-180.0..180.0)),
            [0; 3].map(|_| rng.random_range(-200.0..200.0)),
        )
    }

    #[test]
    fn zero_rotation_is_identity() {
        assert_eq!(rotation_from_euler([0.0; 3]), Matrix3::identity());
    }

    #[test]
    fn quarter_turn_about_z() {
        let p = rotation_from_euler([0.0, 0.0, 90.0]) * Vec3::x();
        assert!((p - Vec3::y()).norm() < 1e-15);
    }

    #[test]
    fn euler_order_matches_axis_product() {
        let [rx, ry, rz] = axis_rotations([10.0, 20.0, 30.0]);
        let oracle = rz * ry * rx;
        let r = rotation_from_euler([10.0, 20.0, 30.0]);
        assert!((r - oracle).abs().max() < 1e-15);
    }

    #[test]
    fn rotations_are_proper() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let r = random_pose(&mut rng).rotation();
            assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-12);
            assert!((r.determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn euler_extraction_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let theta = [
                rng.random_range(-179.0..179.0),
                rng.random_range(-89.0..89.0),
                rng.random_range(-179.0..179.0),
            ];
            let back = euler_from_rotation(&rotation_from_euler(theta));
            for k in 0..3 {
                assert!((back[k] - theta[k]).abs() < 1e-9, "{theta:?} vs {back:?}");
            }
        }
    }

    #[test]
    fn apply_identity_and_translation() {
        let p = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(pose_apply(&RigidPose::identity(), &p), p);
        let t = RigidPose::translation([5.0, 0.0, 0.0]);
        assert_eq!(pose_apply(&t, &Vec3::zeros()), Vec3::new(5.0, 0.0, 0.0));
    }

    #[test]
    fn invert_then_apply_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let pose = random_pose(&mut rng);
            let p = Vec3::new(
                rng.random_range(-300.0..300.0),
                rng.random_range(-300.0..300.0),
                rng.random_range(-300.0..300.0),
            );
            let back = pose_invert(&pose).apply(&pose_apply(&pose, &p));
            assert!((back - p).norm() < 1e-10);
        }
    }

    #[test]
    fn compose_matches_matrix_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_pose(&mut rng);
        let b = random_pose(&mut rng);
        let m = pose_compose(&a, &b).to_matrix();
        assert!((m - a.to_matrix() * b.to_matrix()).abs().max() < 1e-12);
        let inv = pose_invert(&a).to_matrix();
        assert!((inv * a.to_matrix() - Matrix4::identity()).abs().max() < 1e-12);
    }

    #[test]
    fn isocenter_projects_to_origin() {
        let g = ImagingGeometry::default();
        let x = project_point(&Vec3::zeros(), &ViewPose::anterior_posterior(), &g).unwrap();
        assert_eq!(x, Vec2::zeros());
    }

    #[test]
    fn off_axis_point_is_magnified() {
        let g = ImagingGeometry::default();
        let x = project_point(&Vec3::new(10.0, 0.0, 0.0), &ViewPose::default(), &g).unwrap();
        assert!((x - Vec2::new(15.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn point_at_source_is_degenerate() {
        let g = ImagingGeometry::default();
        let err = project_point(&Vec3::new(0.0, 0.0, 1000.0), &ViewPose::default(), &g);
        assert!(matches!(err, Err(Error::DegenerateProjection { .. })));
    }

    #[test]
    fn projection_satisfies_linear_rewrite() {
        // D(x)(R X + t) = c x with D(x) = [diag(d, d) | x]
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = ImagingGeometry::default();
        for _ in 0..1000 {
            let view = ViewPose(RigidPose::new(
                [0; 3].map(|_| rng.random_range(-180.0..180.0)),
                [0; 3].map(|_| rng.random_range(-50.0..50.0)),
            ));
            let p = Vec3::new(
                rng.random_range(-100.0..100.0),
                rng.random_range(-100.0..100.0),
                rng.random_range(-100.0..100.0),
            );
            let x = project_point(&p, &view, &g).unwrap();
            let y = view.to_transform().apply(&p);
            let lhs = Vec2::new(g.d_mm * y.x + x.x * y.z, g.d_mm * y.y + x.y * y.z);
            let rhs = g.c_mm * x;
            let scale = lhs.norm().max(rhs.norm()).max(1.0);
            assert!((lhs - rhs).norm() / scale < 1e-8);
        }
    }

    #[test]
    fn projection_is_homogeneous_scale_invariant() {
        let g = ImagingGeometry::default();
        let y = Vec3::new(12.0, -30.0, 40.0);
        let xh = Vec3::new(-g.d_mm * y.x, -g.d_mm * y.y, y.z - g.c_mm);
        let x = project_point(&y, &ViewPose::default(), &g).unwrap();
        for lambda in [-3.0, 0.5, 7.0] {
            let s = xh * lambda;
            assert!((Vec2::new(s.x / s.z, s.y / s.z) - x).norm() < 1e-12);
        }
    }

    #[test]
    fn detector_pixel_convention() {
        let g = ImagingGeometry::default();
        assert_eq!(detector_mm_to_px(&Vec2::zeros(), &g), Vec2::new(255.5, 255.5));
        let px = detector_mm_to_px(&Vec2::new(0.388, 0.0), &g);
        assert!((px - Vec2::new(256.5, 255.5)).norm() < 1e-12);
    }

    #[test]
    fn detector_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = ImagingGeometry::default();
        for _ in 0..1000 {
            let x = Vec2::new(rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0));
            let back = detector_px_to_mm(&detector_mm_to_px(&x, &g), &g);
            assert!((back - x).norm() < 1e-12);
        }
    }

    #[test]
    fn geometry_validation_names_field() {
        let g = ImagingGeometry {
            d_mm: 900.0,
            ..ImagingGeometry::default()
        };
        match g.validate() {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "geometry.d_mm"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
