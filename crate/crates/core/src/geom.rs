//! Rotations, pinhole cameras, bounding boxes and the canonical-to-world
//! object alignment (global scale from mask/projection areas, then a
//! per-frame rigid placement).

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("empty point set")]
    EmptyPointSet,
    #[error("point {index} is not in front of the camera (depth {depth})")]
    PointBehindCamera { index: usize, depth: f64 },
    #[error("no frame produced a non-degenerate projection")]
    DegenerateProjection,
    #[error("{what}: expected {expected} entries, found {found}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("camera rotation is not orthonormal with det +1")]
    NotOrthonormal,
}

/// Unit quaternion `(w, x, y, z)` with `w >= 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct UnitRotation {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl From<[f64; 4]> for UnitRotation {
    fn from(q: [f64; 4]) -> Self {
        UnitRotation::new(q[0], q[1], q[2], q[3])
    }
}

impl From<UnitRotation> for [f64; 4] {
    fn from(q: UnitRotation) -> Self {
        q.wxyz()
    }
}

impl Default for UnitRotation {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl UnitRotation {
    pub const IDENTITY: UnitRotation = UnitRotation {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalises and picks the `w >= 0` representative. A zero
    /// quaternion maps to the identity.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Self::IDENTITY;
        }
        let s = if w < 0.0 { -1.0 / n } else { 1.0 / n };
        UnitRotation {
            w: w * s,
            x: x * s,
            y: y * s,
            z: z * s,
        }
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::IDENTITY;
        }
        let a = axis / n;
        let (s, c) = (0.5 * angle).sin_cos();
        Self::new(c, a.x * s, a.y * s, a.z * s)
    }

    /// Rotation by the axis-angle vector `v` (angle = `‖v‖`).
    pub fn from_rotation_vector(v: Vec3) -> Self {
        Self::from_axis_angle(v, v.norm())
    }

    pub fn rot_x(angle: f64) -> Self {
        Self::from_axis_angle(Vec3::x(), angle)
    }

    pub fn rot_y(angle: f64) -> Self {
        Self::from_axis_angle(Vec3::y(), angle)
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_axis_angle(Vec3::z(), angle)
    }

    pub fn wxyz(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(&self) -> f64 {
        let [w, x, y, z] = self.wxyz();
        (w * w + x * x + y * y + z * z).sqrt()
    }

    pub fn dot(&self, o: &UnitRotation) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    /// Hamilton product `self · o`.
    pub fn mul(&self, o: &UnitRotation) -> UnitRotation {
        let (a, b) = (self, o);
        UnitRotation::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        let [w, x, y, z] = self.wxyz();
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.to_matrix() * v
    }

    /// Angle of the relative rotation between `self` and `o`, in radians.
    pub fn angle_to(&self, o: &UnitRotation) -> f64 {
        2.0 * self.dot(o).abs().min(1.0).acos()
    }
}

/// Cut-off above which `|dot|` is treated as (anti)parallel.
pub const SLERP_LINEAR_THRESHOLD: f64 = 1.0 - 1e-6;

/// Geodesic interpolation along the shorter arc. Exact endpoints at
/// `u = 0` and `u = 1`; nearly parallel pairs use normalised linear
/// interpolation.
pub fn slerp(q0: &UnitRotation, q1: &UnitRotation, u: f64) -> UnitRotation {
    if u <= 0.0 {
        return *q0;
    }
    if u >= 1.0 {
        return *q1;
    }
    let mut dot = q0.dot(q1);
    let mut b = q1.wxyz();
    if dot < 0.0 {
        dot = -dot;
        b.iter_mut().for_each(|c| *c = -*c);
    }
    let a = q0.wxyz();
    let (s0, s1) = if dot > SLERP_LINEAR_THRESHOLD {
        (1.0 - u, u)
    } else {
        let omega = dot.acos();
        let so = omega.sin();
        (((1.0 - u) * omega).sin() / so, (u * omega).sin() / so)
    };
    UnitRotation::new(
        s0 * a[0] + s1 * b[0],
        s0 * a[1] + s1 * b[1],
        s0 * a[2] + s1 * b[2],
        s0 * a[3] + s1 * b[3],
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// World-to-camera pose plus pinhole intrinsics and the per-frame
/// camera-space shift used when placing a canonical object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    #[serde(with = "row_major")]
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
    pub intrinsics: Intrinsics,
    #[serde(default = "Vec3::zeros")]
    pub shift: Vec3,
}

mod row_major {
    use nalgebra::Matrix3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Matrix3<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]));
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix3<f64>, D::Error> {
        let rows = <[[f64; 3]; 3]>::deserialize(d)?;
        Ok(Matrix3::from_fn(|i, j| rows[i][j]))
    }
}

impl CameraPose {
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vec3,
        intrinsics: Intrinsics,
        shift: Vec3,
    ) -> Result<Self, GeomError> {
        let cam = CameraPose {
            rotation,
            translation,
            intrinsics,
            shift,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `center` whose optical axis points along `forward`, with
    /// image-down roughly along `-up`.
    pub fn look_at(center: Vec3, target: Vec3, up: Vec3, intrinsics: Intrinsics) -> Result<Self, GeomError> {
        let z = (target - center).normalize();
        let x = (-up).cross(&z).normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * center);
        Self::new(rotation, translation, intrinsics, Vec3::zeros())
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        let r = &self.rotation;
        let err = (r * r.transpose() - Matrix3::identity()).abs().max();
        if err > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(GeomError::NotOrthonormal);
        }
        Ok(())
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Pixel coordinates and depth of a world point.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64, f64)> {
        let c = self.world_to_camera(p);
        if !(c.z > 0.0) {
            return None;
        }
        let k = &self.intrinsics;
        Some((k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy, c.z))
    }
}

/// Axis-aligned pixel-space box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox2D {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl BBox2D {
    pub fn area(&self) -> f64 {
        (self.max_x - self.min_x).max(0.0) * (self.max_y - self.min_y).max(0.0)
    }

    fn point(x: f64, y: f64) -> Self {
        BBox2D {
            min_x: x,
            min_y: y,
            max_x: x,
            max_y: y,
        }
    }

    fn include(&mut self, x: f64, y: f64) {
        self.min_x = self.min_x.min(x);
        self.min_y = self.min_y.min(y);
        self.max_x = self.max_x.max(x);
        self.max_y = self.max_y.max(y);
    }
}

/// Bounding box of the pinhole projections of `points`, and its area.
pub fn project_bbox_area(points: &[Vec3], cam: &CameraPose) -> Result<(BBox2D, f64), GeomError> {
    let mut bbox: Option<BBox2D> = None;
    for (index, p) in points.iter().enumerate() {
        let (u, v, _) = cam.project(p).ok_or(GeomError::PointBehindCamera {
            index,
            depth: cam.world_to_camera(p).z,
        })?;
        match &mut bbox {
            Some(b) => b.include(u, v),
            None => bbox = Some(BBox2D::point(u, v)),
        }
    }
    let bbox = bbox.ok_or(GeomError::EmptyPointSet)?;
    Ok((bbox, bbox.area()))
}

/// `μ_world = R⁻¹((S·μ_can + v) − t)` with `R⁻¹ = Rᵀ`.
pub fn to_world(mu_can: &Vec3, scale: f64, cam: &CameraPose) -> Vec3 {
    cam.rotation.transpose() * ((scale * mu_can + cam.shift) - cam.translation)
}

/// Inverse of [`to_world`].
pub fn from_world(mu_world: &Vec3, scale: f64, cam: &CameraPose) -> Vec3 {
    ((cam.rotation * mu_world + cam.translation) - cam.shift) / scale
}

/// Global object scale: the mean over frames of `sqrt(A_mask / A_proj)`.
///
/// `A_proj` is the box area of the unit-scale canonical points placed by
/// [`to_world`] and projected with the same camera. Frames whose
/// projection fails or has zero area are left out of the mean.
pub fn estimate_scale(canonical_means: &[Vec3], masks: &[BBox2D], cams: &[CameraPose]) -> Result<f64, GeomError> {
    if masks.len() != cams.len() {
        return Err(GeomError::LengthMismatch {
            what: "mask boxes",
            expected: cams.len(),
            found: masks.len(),
        });
    }
    if canonical_means.is_empty() {
        return Err(GeomError::EmptyPointSet);
    }
    let mut total = 0.0;
    let mut valid = 0usize;
    for (mask, cam) in masks.iter().zip(cams) {
        let placed: Vec<Vec3> = canonical_means.iter().map(|m| to_world(m, 1.0, cam)).collect();
        let Ok((_, a_proj)) = project_bbox_area(&placed, cam) else {
            continue;
        };
        if a_proj <= 0.0 {
            continue;
        }
        total += (mask.area() / a_proj).sqrt();
        valid += 1;
    }
    if valid == 0 {
        return Err(GeomError::DegenerateProjection);
    }
    Ok(total / valid as f64)
}
