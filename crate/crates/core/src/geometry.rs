//! Rigid poses and the C-arm camera model.
//!
//! World frame: the detector lies in the plane `z = 0`, centered on the
//! origin, and the X-ray source sits at `(0, 0, sid)`. The isocenter is on the
//! principal axis at distance `siso` from the source, i.e. at
//! `(0, 0, sid - siso)`. A pose maps volume coordinates (millimeters, centered
//! on the volume midpoint) to world coordinates by
//! `world = isocenter + R * p + t`, so rotations act about the volume center.

use nalgebra::{Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Six-degree-of-freedom rigid pose: rotations in degrees, translations in mm.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose6 {
    pub rx: f64,
    pub ry: f64,
    pub rz: f64,
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
}

impl Pose6 {
    pub const IDENTITY: Pose6 = Pose6 {
        rx: 0.0,
        ry: 0.0,
        rz: 0.0,
        tx: 0.0,
        ty: 0.0,
        tz: 0.0,
    };

    pub fn new(rx: f64, ry: f64, rz: f64, tx: f64, ty: f64, tz: f64) -> Self {
        Pose6 {
            rx,
            ry,
            rz,
            tx,
            ty,
            tz,
        }
    }

    /// Component order `(rx, ry, rz, tx, ty, tz)`; this is the optimizer's search vector.
    pub fn to_array(&self) -> [f64; 6] {
        [self.rx, self.ry, self.rz, self.tx, self.ty, self.tz]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != 6 {
            return Err(Error::invalid(format!(
                "a pose needs 6 components, got {}",
                v.len()
            )));
        }
        Ok(Pose6::new(v[0], v[1], v[2], v[3], v[4], v[5]))
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|c| c.is_finite())
    }

    /// Component-wise sum, used to apply an offset to a ground-truth pose.
    pub fn offset_by(&self, other: &Pose6) -> Pose6 {
        let a = self.to_array();
        let b = other.to_array();
        Pose6::new(
            a[0] + b[0],
            a[1] + b[1],
            a[2] + b[2],
            a[3] + b[3],
            a[4] + b[4],
            a[5] + b[5],
        )
    }

    pub fn to_transform(&self) -> Result<RigidTransform> {
        pose_to_transform(self)
    }
}

impl std::fmt::Display for Pose6 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "({:.3}°, {:.3}°, {:.3}°, {:.3} mm, {:.3} mm, {:.3} mm)",
            self.rx, self.ry, self.rz, self.tx, self.ty, self.tz
        )
    }
}

impl std::str::FromStr for Pose6 {
    type Err = Error;

    /// Parses `rx,ry,rz,tx,ty,tz`.
    fn from_str(s: &str) -> Result<Self> {
        let parts = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::invalid(format!("bad pose component {p:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let pose = Pose6::from_slice(&parts)?;
        if !pose.is_finite() {
            return Err(Error::invalid("pose components must be finite"));
        }
        Ok(pose)
    }
}

pub fn rot_x(deg: f64) -> Matrix3<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(deg: f64) -> Matrix3<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(deg: f64) -> Matrix3<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Rotation plus translation acting on points as `R * p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        transform_point(self, p)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Recovers `(rx, ry, rz)` in degrees for the `Rz·Ry·Rx` convention.
    /// Unique while `|ry| < 90°`.
    pub fn euler_degrees(&self) -> (f64, f64, f64) {
        let r = &self.rotation;
        let ry = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
        let rx = r[(2, 1)].atan2(r[(2, 2)]);
        let rz = r[(1, 0)].atan2(r[(0, 0)]);
        (rx.to_degrees(), ry.to_degrees(), rz.to_degrees())
    }

    pub fn to_pose(&self) -> Pose6 {
        let (rx, ry, rz) = self.euler_degrees();
        Pose6::new(
            rx,
            ry,
            rz,
            self.translation.x,
            self.translation.y,
            self.translation.z,
        )
    }
}

/// Builds `R = Rz(rz)·Ry(ry)·Rx(rx)` and `t = (tx, ty, tz)`.
pub fn pose_to_transform(pose: &Pose6) -> Result<RigidTransform> {
    if !pose.is_finite() {
        return Err(Error::invalid(format!("non-finite pose {pose:?}")));
    }
    Ok(RigidTransform {
        rotation: rot_z(pose.rz) * rot_y(pose.ry) * rot_x(pose.rx),
        translation: Vector3::new(pose.tx, pose.ty, pose.tz),
    })
}

pub fn transform_point(t: &RigidTransform, p: &Point3<f64>) -> Point3<f64> {
    Point3::from(t.rotation * p.coords + t.translation)
}

/// Pinhole C-arm: flat detector of `width × height` pixels at `z = 0`,
/// source on the axis through the detector center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraFile", into = "CameraFile")]
pub struct CameraGeometry {
    width: usize,
    height: usize,
    spacing_mm: f64,
    sid_mm: f64,
    siso_mm: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraFile {
    detector_px: [usize; 2],
    spacing_mm: f64,
    sid_mm: f64,
    siso_mm: f64,
}

impl TryFrom<CameraFile> for CameraGeometry {
    type Error = Error;

    fn try_from(f: CameraFile) -> Result<Self> {
        make_camera(
            (f.detector_px[0], f.detector_px[1]),
            f.spacing_mm,
            f.sid_mm,
            f.siso_mm,
        )
    }
}

impl From<CameraGeometry> for CameraFile {
    fn from(c: CameraGeometry) -> Self {
        CameraFile {
            detector_px: [c.width, c.height],
            spacing_mm: c.spacing_mm,
            sid_mm: c.sid_mm,
            siso_mm: c.siso_mm,
        }
    }
}

/// Source-to-detector distance of the simulated C-arm, mm.
pub const DEFAULT_SID_MM: f64 = 1012.0;
/// Source-to-isocenter distance used when none is given: half the SID.
pub const DEFAULT_SISO_MM: f64 = DEFAULT_SID_MM / 2.0;

pub fn make_camera(
    detector_px: (usize, usize),
    spacing_mm: f64,
    sid_mm: f64,
    siso_mm: f64,
) -> Result<CameraGeometry> {
    let (width, height) = detector_px;
    if width == 0 || height == 0 {
        return Err(Error::invalid(format!(
            "detector dimensions must be positive, got {width}x{height}"
        )));
    }
    if !(spacing_mm.is_finite() && spacing_mm > 0.0) {
        return Err(Error::invalid(format!(
            "pixel spacing must be positive, got {spacing_mm}"
        )));
    }
    if !(sid_mm.is_finite() && sid_mm > 0.0) {
        return Err(Error::invalid(format!(
            "source-to-detector distance must be positive, got {sid_mm}"
        )));
    }
    if !(siso_mm.is_finite() && siso_mm > 0.0 && siso_mm < sid_mm) {
        return Err(Error::invalid(format!(
            "source-to-isocenter distance must lie in (0, sid={sid_mm}), got {siso_mm}"
        )));
    }
    Ok(CameraGeometry {
        width,
        height,
        spacing_mm,
        sid_mm,
        siso_mm,
    })
}

impl CameraGeometry {
    /// Full-resolution 1024² detector at 0.199 mm/px.
    pub fn full_resolution() -> Self {
        make_camera((1024, 1024), 0.199, DEFAULT_SID_MM, DEFAULT_SISO_MM).unwrap()
    }

    /// The 256² detector at 0.798 mm/px used for registration.
    pub fn downsampled() -> Self {
        make_camera((256, 256), 0.798, DEFAULT_SID_MM, DEFAULT_SISO_MM).unwrap()
    }

    /// Same field of view with `n × n` pixels.
    pub fn with_resolution(&self, width: usize, height: usize) -> Result<Self> {
        let spacing = self.spacing_mm * self.width as f64 / width as f64;
        make_camera((width, height), spacing, self.sid_mm, self.siso_mm)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn spacing_mm(&self) -> f64 {
        self.spacing_mm
    }

    pub fn sid_mm(&self) -> f64 {
        self.sid_mm
    }

    pub fn siso_mm(&self) -> f64 {
        self.siso_mm
    }

    pub fn source(&self) -> Point3<f64> {
        Point3::new(0.0, 0.0, self.sid_mm)
    }

    pub fn isocenter(&self) -> Point3<f64> {
        Point3::new(0.0, 0.0, self.sid_mm - self.siso_mm)
    }

    /// World position of the center of pixel `(col, row)`.
    pub fn pixel_center(&self, col: usize, row: usize) -> Point3<f64> {
        Point3::new(
            (col as f64 + 0.5 - self.width as f64 / 2.0) * self.spacing_mm,
            (row as f64 + 0.5 - self.height as f64 / 2.0) * self.spacing_mm,
            0.0,
        )
    }

    /// Continuous pixel coordinates `(col, row)` where the ray from the source
    /// through `p` hits the detector; pixel centers sit at half-integers.
    /// `None` when `p` is not strictly between the source plane and infinity
    /// on the detector side.
    pub fn project_point(&self, p: &Point3<f64>) -> Option<(f64, f64)> {
        let depth = self.sid_mm - p.z;
        if depth <= 0.0 {
            return None;
        }
        let mag = self.sid_mm / depth;
        Some((
            p.x * mag / self.spacing_mm + self.width as f64 / 2.0,
            p.y * mag / self.spacing_mm + self.height as f64 / 2.0,
        ))
    }

    /// Pixel coordinates of the principal point (detector center).
    pub fn principal_point(&self) -> (f64, f64) {
        (self.width as f64 / 2.0, self.height as f64 / 2.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_vec_close(a: &Point3<f64>, b: &Point3<f64>, tol: f64) {
        assert!((a - b).norm() < tol, "{a:?} vs {b:?}");
    }

    #[test]
    fn identity_pose_is_identity_transform() {
        let t = pose_to_transform(&Pose6::IDENTITY).unwrap();
        assert_eq!(t.rotation, Matrix3::identity());
        assert_eq!(t.translation, Vector3::zeros());
    }

    #[test]
    fn pure_translation() {
        let t = pose_to_transform(&Pose6::new(0.0, 0.0, 0.0, 5.0, -3.0, 10.0)).unwrap();
        assert_eq!(t.rotation, Matrix3::identity());
        assert_eq!(t.translation, Vector3::new(5.0, -3.0, 10.0));
    }

    #[test]
    fn quarter_turn_about_z() {
        let t = pose_to_transform(&Pose6::new(0.0, 0.0, 90.0, 0.0, 0.0, 0.0)).unwrap();
        let p = t.apply(&Point3::new(1.0, 0.0, 0.0));
        assert_vec_close(&p, &Point3::new(0.0, 1.0, 0.0), 1e-12);
    }

    #[test]
    fn transform_point_examples() {
        let id = RigidTransform::identity();
        assert_eq!(
            transform_point(&id, &Point3::new(1.0, 2.0, 3.0)),
            Point3::new(1.0, 2.0, 3.0)
        );
        let shift = pose_to_transform(&Pose6::new(0.0, 0.0, 0.0, 1.0, 0.0, 0.0)).unwrap();
        assert_eq!(shift.apply(&Point3::origin()), Point3::new(1.0, 0.0, 0.0));
        let flip = pose_to_transform(&Pose6::new(180.0, 0.0, 0.0, 0.0, 0.0, 0.0)).unwrap();
        assert_vec_close(
            &flip.apply(&Point3::new(0.0, 1.0, 0.0)),
            &Point3::new(0.0, -1.0, 0.0),
            1e-12,
        );
    }

    #[test]
    fn composition_order_is_zyx() {
        // Rx(90) first sends y to z, then Rz(90) leaves z alone.
        let t = pose_to_transform(&Pose6::new(90.0, 0.0, 90.0, 0.0, 0.0, 0.0)).unwrap();
        assert_vec_close(
            &t.apply(&Point3::new(0.0, 1.0, 0.0)),
            &Point3::new(0.0, 0.0, 1.0),
            1e-12,
        );
    }

    #[test]
    fn non_finite_pose_rejected() {
        let err = pose_to_transform(&Pose6::new(f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0));
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
        let err = pose_to_transform(&Pose6::new(0.0, 0.0, 0.0, f64::INFINITY, 0.0, 0.0));
        assert!(err.is_err());
    }

    #[test]
    fn pose_parses_from_csv() {
        let p: Pose6 = "1, 2,3,4,5,-6.5".parse().unwrap();
        assert_eq!(p, Pose6::new(1.0, 2.0, 3.0, 4.0, 5.0, -6.5));
        assert!("1,2,3".parse::<Pose6>().is_err());
        assert!("1,2,3,4,5,x".parse::<Pose6>().is_err());
    }

    #[test]
    fn camera_construction() {
        let full = make_camera((1024, 1024), 0.199, 1012.0, 506.0).unwrap();
        assert_eq!(full.width(), 1024);
        let down = make_camera((256, 256), 0.798, 1012.0, 506.0).unwrap();
        assert_eq!(down.spacing_mm(), 0.798);
        assert!(make_camera((256, 256), 0.798, 1012.0, 1100.0).is_err());
        assert!(make_camera((256, 256), 0.798, 1012.0, 1012.0).is_err());
        assert!(make_camera((0, 256), 0.798, 1012.0, 506.0).is_err());
        assert!(make_camera((256, 256), 0.0, 1012.0, 506.0).is_err());
        assert!(make_camera((256, 256), 0.798, -1.0, 506.0).is_err());
    }

    #[test]
    fn camera_json_keys() {
        let cam = CameraGeometry::downsampled();
        let json = serde_json::to_value(cam).unwrap();
        assert_eq!(json["detector_px"], serde_json::json!([256, 256]));
        assert_eq!(json["spacing_mm"], 0.798);
        assert_eq!(json["sid_mm"], 1012.0);
        assert_eq!(json["siso_mm"], 506.0);
        let back: CameraGeometry = serde_json::from_value(json).unwrap();
        assert_eq!(back, cam);
        let bad = serde_json::json!({
            "detector_px": [256, 256], "spacing_mm": 0.798, "sid_mm": 1012.0, "siso_mm": 2000.0
        });
        assert!(serde_json::from_value::<CameraGeometry>(bad).is_err());
    }

    #[test]
    fn isocenter_projects_to_principal_point() {
        let cam = CameraGeometry::downsampled();
        let (u, v) = cam.project_point(&cam.isocenter()).unwrap();
        assert_eq!((u, v), cam.principal_point());
        assert_eq!(cam.pixel_center(0, 0).x, -127.5 * 0.798);
    }

    #[test]
    fn fov_preserving_resolution_change() {
        let cam = CameraGeometry::downsampled()
            .with_resolution(64, 64)
            .unwrap();
        assert!((cam.spacing_mm() - 3.192).abs() < 1e-12);
    }

    fn small_angle_pose() -> impl Strategy<Value = Pose6> {
        (
            -60.0..60.0f64,
            -60.0..60.0f64,
            -60.0..60.0f64,
            -100.0..100.0f64,
            -100.0..100.0f64,
            -100.0..100.0f64,
        )
            .prop_map(|(a, b, c, d, e, f)| Pose6::new(a, b, c, d, e, f))
    }

    proptest! {
        #[test]
        fn rotation_is_orthonormal(p in small_angle_pose()) {
            let r = pose_to_transform(&p).unwrap().rotation;
            let rtr = r.transpose() * r;
            for i in 0..3 {
                for j in 0..3 {
                    let expected = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((rtr[(i, j)] - expected).abs() < 1e-9);
                }
            }
            prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn reversed_negated_rotations_invert(p in small_angle_pose()) {
            let t = pose_to_transform(&p).unwrap();
            // Undo: subtract translation, then Rx(-rx)·Ry(-ry)·Rz(-rz).
            let undo_rot = rot_x(-p.rx) * rot_y(-p.ry) * rot_z(-p.rz);
            let undo = RigidTransform {
                rotation: undo_rot,
                translation: -(undo_rot * t.translation),
            };
            let id = undo.compose(&t);
            prop_assert!((id.rotation - Matrix3::identity()).abs().max() < 1e-9);
            prop_assert!(id.translation.norm() < 1e-9);
            let inv = t.inverse().compose(&t);
            prop_assert!((inv.rotation - Matrix3::identity()).abs().max() < 1e-9);
        }

        #[test]
        fn euler_round_trip(
            rx in -89.0..89.0f64, ry in -89.0..89.0f64, rz in -89.0..89.0f64,
            tx in -50.0..50.0f64,
        ) {
            let p = Pose6::new(rx, ry, rz, tx, 0.0, 0.0);
            let back = pose_to_transform(&p).unwrap().to_pose();
            prop_assert!((back.rx - rx).abs() < 1e-8);
            prop_assert!((back.ry - ry).abs() < 1e-8);
            prop_assert!((back.rz - rz).abs() < 1e-8);
            prop_assert_eq!(back.tx, tx);
        }

        #[test]
        fn distances_preserved(
            p in small_angle_pose(),
            a in prop::array::uniform3(-200.0..200.0f64),
            b in prop::array::uniform3(-200.0..200.0f64),
        ) {
            let t = pose_to_transform(&p).unwrap();
            let pa = Point3::from(a);
            let pb = Point3::from(b);
            let d0 = (pa - pb).norm();
            let d1 = (t.apply(&pa) - t.apply(&pb)).norm();
            prop_assert!((d0 - d1).abs() < 1e-9);
        }
    }
}
