//! Equidistant fisheye cameras and the head-mounted stereo rig.
//!
//! A rig-frame point `X` maps into a camera as `X_cam = R·X + t`. The incidence
//! angle `θ` to the optical axis is distorted by an odd polynomial
//! `θ_d = θ(1 + k1θ² + k2θ⁴ + k3θ⁶ + k4θ⁸)` and the pixel radius from the
//! principal point is `focal·θ_d`. Pixel coordinates are continuous with the
//! origin at the center of the top-left pixel.

use std::fmt;
use std::path::Path;

use nalgebra::{Matrix2x3, Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::look_rotation;
use crate::io::{read_json, write_json};

const MONOTONICITY_SAMPLES: usize = 1024;
const NEWTON_MAX_ITERATIONS: usize = 50;
const NEWTON_TOLERANCE: f64 = 1e-12;

/// Default maximum incidence angle: 95° half-angle.
pub const DEFAULT_FOV_LIMIT: f64 = 95.0 * std::f64::consts::PI / 180.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraLabel {
    Left,
    Right,
}

impl CameraLabel {
    pub const BOTH: [CameraLabel; 2] = [CameraLabel::Left, CameraLabel::Right];

    pub fn as_str(self) -> &'static str {
        match self {
            CameraLabel::Left => "left",
            CameraLabel::Right => "right",
        }
    }
}

impl fmt::Display for CameraLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CameraLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(CameraLabel::Left),
            "right" => Ok(CameraLabel::Right),
            other => Err(Error::invalid("camera label", other.to_string())),
        }
    }
}

/// Lens and sensor parameters of one fisheye view.
#[derive(Clone, Debug, PartialEq)]
pub struct FisheyeIntrinsics {
    focal: f64,
    principal_point: Vector2<f64>,
    distortion: [f64; 4],
    image_size: (u32, u32),
    fov_limit: f64,
}

impl FisheyeIntrinsics {
    /// Validates the parameters, including strict monotonicity of the
    /// distorted radius over `[0, fov_limit]`.
    pub fn new(
        focal: f64,
        principal_point: Vector2<f64>,
        distortion: [f64; 4],
        image_size: (u32, u32),
        fov_limit: f64,
    ) -> Result<Self> {
        if !(focal > 0.0 && focal.is_finite()) {
            return Err(Error::invalid("intrinsics", format!("focal {focal} must be positive")));
        }
        if !(fov_limit > 0.0 && fov_limit <= std::f64::consts::PI) {
            return Err(Error::invalid(
                "intrinsics",
                format!("fov limit {fov_limit} rad outside (0, π]"),
            ));
        }
        if image_size.0 == 0 || image_size.1 == 0 {
            return Err(Error::invalid("intrinsics", "image size must be positive"));
        }
        if !principal_point.iter().chain(distortion.iter()).all(|v| v.is_finite()) {
            return Err(Error::invalid("intrinsics", "non-finite principal point or distortion"));
        }
        let intrinsics = FisheyeIntrinsics {
            focal,
            principal_point,
            distortion,
            image_size,
            fov_limit,
        };
        intrinsics.check_monotonic()?;
        Ok(intrinsics)
    }

    fn check_monotonic(&self) -> Result<()> {
        let mut prev = self.distort(0.0);
        for i in 1..=MONOTONICITY_SAMPLES {
            let theta = self.fov_limit * i as f64 / MONOTONICITY_SAMPLES as f64;
            let cur = self.distort(theta);
            if cur <= prev || self.distort_derivative(theta) <= 0.0 {
                return Err(Error::invalid(
                    "intrinsics",
                    format!(
                        "distortion {:?} makes the image radius non-increasing near θ = {theta:.4}",
                        self.distortion
                    ),
                ));
            }
            prev = cur;
        }
        Ok(())
    }

    pub fn focal(&self) -> f64 {
        self.focal
    }

    pub fn principal_point(&self) -> Vector2<f64> {
        self.principal_point
    }

    pub fn distortion(&self) -> [f64; 4] {
        self.distortion
    }

    pub fn image_size(&self) -> (u32, u32) {
        self.image_size
    }

    pub fn fov_limit(&self) -> f64 {
        self.fov_limit
    }

    /// Length of the image diagonal in pixels.
    pub fn diagonal(&self) -> f64 {
        (self.image_size.0 as f64).hypot(self.image_size.1 as f64)
    }

    /// `θ_d(θ)`.
    pub fn distort(&self, theta: f64) -> f64 {
        let [k1, k2, k3, k4] = self.distortion;
        let t2 = theta * theta;
        theta * (1.0 + t2 * (k1 + t2 * (k2 + t2 * (k3 + t2 * k4))))
    }

    /// `dθ_d/dθ`.
    pub fn distort_derivative(&self, theta: f64) -> f64 {
        let [k1, k2, k3, k4] = self.distortion;
        let t2 = theta * theta;
        1.0 + t2 * (3.0 * k1 + t2 * (5.0 * k2 + t2 * (7.0 * k3 + t2 * 9.0 * k4)))
    }

    /// Inverts `θ_d(θ)` on `[0, fov_limit]` by Newton's method, falling back to
    /// bisection whenever a Newton step leaves the current bracket.
    pub fn undistort(&self, theta_d: f64) -> Result<f64> {
        if theta_d <= 0.0 {
            return Ok(0.0);
        }
        let (mut lo, mut hi) = (0.0, self.fov_limit);
        if theta_d > self.distort(hi) {
            return Err(Error::OutsideFov);
        }
        let mut theta = theta_d.min(hi);
        for _ in 0..NEWTON_MAX_ITERATIONS {
            let residual = self.distort(theta) - theta_d;
            if residual == 0.0 {
                return Ok(theta);
            }
            if residual > 0.0 {
                hi = theta;
            } else {
                lo = theta;
            }
            let slope = self.distort_derivative(theta);
            let mut next = theta - residual / slope;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - theta).abs() < NEWTON_TOLERANCE {
                return Ok(next);
            }
            theta = next;
        }
        Err(Error::NoConvergence {
            iterations: NEWTON_MAX_ITERATIONS,
        })
    }
}

/// Rigid transform from the rig frame into a camera frame.
#[derive(Clone, Debug, PartialEq)]
pub struct RigExtrinsics {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl RigExtrinsics {
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        RigExtrinsics { rotation, translation }
    }

    /// Builds extrinsics from a raw `[x, y, z, w]` quaternion, rejecting any
    /// quaternion whose norm is not 1 within 1e-9.
    pub fn from_xyzw(xyzw: [f64; 4], translation: Vector3<f64>) -> Result<Self> {
        let q = Quaternion::new(xyzw[3], xyzw[0], xyzw[1], xyzw[2]);
        if (q.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(
                "extrinsics",
                format!("rotation quaternion norm {} is not 1", q.norm()),
            ));
        }
        Ok(RigExtrinsics {
            rotation: UnitQuaternion::new_unchecked(q),
            translation,
        })
    }

    /// Camera at `center` (rig frame) looking along `forward`, with image rows
    /// running along `down_hint`.
    pub fn looking(center: Vector3<f64>, forward: Vector3<f64>, down_hint: Vector3<f64>) -> Self {
        let rotation = look_rotation(&forward, &down_hint);
        let translation = -(rotation * center);
        RigExtrinsics { rotation, translation }
    }
}

/// A ray in the rig frame with unit direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FisheyeCamera {
    pub intrinsics: FisheyeIntrinsics,
    pub extrinsics: RigExtrinsics,
    pub label: CameraLabel,
}

impl FisheyeCamera {
    pub fn new(label: CameraLabel, intrinsics: FisheyeIntrinsics, extrinsics: RigExtrinsics) -> Self {
        FisheyeCamera {
            intrinsics,
            extrinsics,
            label,
        }
    }

    /// Optical center in the rig frame.
    pub fn center(&self) -> Vector3<f64> {
        -(self.extrinsics.rotation.inverse() * self.extrinsics.translation)
    }

    fn to_camera(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.extrinsics.rotation * point + self.extrinsics.translation
    }

    /// Incidence angle of a rig-frame point, for visibility tests.
    pub fn incidence_angle(&self, point: &Vector3<f64>) -> Result<f64> {
        let p = self.to_camera(point);
        if p.norm() < 1e-12 {
            return Err(Error::DegeneratePoint);
        }
        Ok(p.xy().norm().atan2(p.z))
    }

    /// Projects a rig-frame point to a distorted pixel.
    pub fn project(&self, point: &Vector3<f64>) -> Result<Vector2<f64>> {
        let p = self.to_camera(point);
        if p.norm() < 1e-12 {
            return Err(Error::DegeneratePoint);
        }
        let rho = p.xy().norm();
        let theta = rho.atan2(p.z);
        if theta > self.intrinsics.fov_limit {
            return Err(Error::OutsideFov);
        }
        let k = &self.intrinsics;
        if rho == 0.0 {
            return Ok(k.principal_point);
        }
        let radius = k.focal * k.distort(theta);
        Ok(k.principal_point + p.xy() * (radius / rho))
    }

    /// Back-projects a pixel to a unit ray from the optical center.
    pub fn unproject(&self, pixel: &Vector2<f64>) -> Result<Ray> {
        let k = &self.intrinsics;
        let offset = pixel - k.principal_point;
        let radius = offset.norm();
        let theta = k.undistort(radius / k.focal)?;
        let dir_cam = if radius == 0.0 {
            Vector3::z()
        } else {
            let u = offset / radius;
            let s = theta.sin();
            Vector3::new(s * u.x, s * u.y, theta.cos())
        };
        Ok(Ray {
            origin: self.center(),
            direction: (self.extrinsics.rotation.inverse() * dir_cam).normalize(),
        })
    }

    /// Analytic `∂pixel/∂point` with respect to the rig-frame point.
    pub fn project_jacobian(&self, point: &Vector3<f64>) -> Result<Matrix2x3<f64>> {
        let theta = self.incidence_angle(point)?;
        if theta >= self.intrinsics.fov_limit - 1e-6 {
            return Err(Error::OutsideFov);
        }
        Ok(self.project_with_jacobian(point)?.1)
    }

    /// Pixel and Jacobian together, without the strict-interior check of
    /// [`project_jacobian`](Self::project_jacobian).
    pub fn project_with_jacobian(&self, point: &Vector3<f64>) -> Result<(Vector2<f64>, Matrix2x3<f64>)> {
        let pixel = self.project(point)?;
        let p = self.to_camera(point);
        let k = &self.intrinsics;
        let rho = p.xy().norm();
        let r2 = p.norm_squared();
        let theta = rho.atan2(p.z);
        let slope = k.distort_derivative(theta);
        let (u, ratio) = if rho > 0.0 {
            (p.xy() / rho, k.distort(theta) / rho)
        } else {
            // On the axis both radial and tangential gains reduce to 1/z.
            (Vector2::x(), 1.0 / p.z)
        };
        let radial = slope * p.z / r2;
        let mut j_cam = Matrix2x3::zeros();
        for i in 0..2 {
            for c in 0..2 {
                let delta = if i == c { 1.0 } else { 0.0 };
                j_cam[(i, c)] = k.focal * (radial * u[i] * u[c] + ratio * (delta - u[i] * u[c]));
            }
            j_cam[(i, 2)] = -k.focal * slope * rho / r2 * u[i];
        }
        Ok((pixel, j_cam * self.extrinsics.rotation.to_rotation_matrix().matrix()))
    }

    /// Largest pixel radius reachable inside the field of view.
    pub fn max_radius(&self) -> f64 {
        self.intrinsics.focal * self.intrinsics.distort(self.intrinsics.fov_limit)
    }

    /// True if the pixel lies inside the image rectangle.
    pub fn in_bounds(&self, pixel: &Vector2<f64>) -> bool {
        let (w, h) = self.intrinsics.image_size;
        pixel.x >= -0.5 && pixel.y >= -0.5 && pixel.x < w as f64 - 0.5 && pixel.y < h as f64 - 0.5
    }
}

/// The calibrated stereo pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Rig {
    cameras: Vec<FisheyeCamera>,
}

impl Rig {
    pub fn new(cameras: Vec<FisheyeCamera>) -> Result<Self> {
        if cameras.is_empty() {
            return Err(Error::invalid("rig", "no cameras"));
        }
        for (i, a) in cameras.iter().enumerate() {
            if cameras[..i].iter().any(|b| b.label == a.label) {
                return Err(Error::invalid("rig", format!("duplicate camera label `{}`", a.label)));
            }
        }
        Ok(Rig { cameras })
    }

    /// Default helmet rig: two downward-facing cameras on a boom 22 cm in
    /// front of the head, 20 cm apart, tilted back toward the body.
    pub fn head_mounted(width: u32, height: u32) -> Self {
        let focal = 300.0 * width as f64 / 1280.0;
        let principal = Vector2::new(width as f64 / 2.0 - 0.5, height as f64 / 2.0 - 0.5);
        let intrinsics = FisheyeIntrinsics::new(
            focal,
            principal,
            [-0.01, 0.002, 0.0, 0.0],
            (width, height),
            DEFAULT_FOV_LIMIT,
        )
        .expect("default intrinsics are valid");
        let cameras = CameraLabel::BOTH
            .iter()
            .map(|&label| {
                let side = if label == CameraLabel::Left { 1.0 } else { -1.0 };
                let center = Vector3::new(0.1 * side, 0.0, 0.22);
                let target = Vector3::new(0.0, -0.8, 0.0);
                let extrinsics = RigExtrinsics::looking(center, target - center, Vector3::z());
                FisheyeCamera::new(label, intrinsics.clone(), extrinsics)
            })
            .collect();
        Rig { cameras }
    }

    pub fn cameras(&self) -> &[FisheyeCamera] {
        &self.cameras
    }

    pub fn camera(&self, label: CameraLabel) -> Option<&FisheyeCamera> {
        self.cameras.iter().find(|c| c.label == label)
    }

    /// Midpoint of the optical centers.
    pub fn midpoint(&self) -> Vector3<f64> {
        self.cameras.iter().map(|c| c.center()).sum::<Vector3<f64>>() / self.cameras.len() as f64
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: CalibrationFile = read_json(path)?;
        Rig::try_from(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, &CalibrationFile::from(self))
    }
}

/// On-disk calibration schema.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub cameras: Vec<CameraRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CameraRecord {
    pub label: CameraLabel,
    pub model: String,
    pub focal: f64,
    pub principal: [f64; 2],
    pub dist: [f64; 4],
    pub size: [u32; 2],
    pub fov_deg: f64,
    pub rotation_xyzw: [f64; 4],
    pub translation: [f64; 3],
}

impl TryFrom<CalibrationFile> for Rig {
    type Error = Error;

    fn try_from(file: CalibrationFile) -> Result<Self> {
        let cameras = file
            .cameras
            .into_iter()
            .map(|rec| {
                if rec.model != "equidistant" {
                    return Err(Error::invalid(
                        "calibration",
                        format!("unsupported model `{}`", rec.model),
                    ));
                }
                let intrinsics = FisheyeIntrinsics::new(
                    rec.focal,
                    Vector2::from(rec.principal),
                    rec.dist,
                    (rec.size[0], rec.size[1]),
                    rec.fov_deg.to_radians(),
                )?;
                let extrinsics = RigExtrinsics::from_xyzw(rec.rotation_xyzw, Vector3::from(rec.translation))?;
                Ok(FisheyeCamera::new(rec.label, intrinsics, extrinsics))
            })
            .collect::<Result<Vec<_>>>()?;
        Rig::new(cameras)
    }
}

impl From<&Rig> for CalibrationFile {
    fn from(rig: &Rig) -> Self {
        let cameras = rig
            .cameras
            .iter()
            .map(|c| {
                let q = c.extrinsics.rotation.quaternion();
                CameraRecord {
                    label: c.label,
                    model: "equidistant".into(),
                    focal: c.intrinsics.focal,
                    principal: [c.intrinsics.principal_point.x, c.intrinsics.principal_point.y],
                    dist: c.intrinsics.distortion,
                    size: [c.intrinsics.image_size.0, c.intrinsics.image_size.1],
                    fov_deg: c.intrinsics.fov_limit.to_degrees(),
                    rotation_xyzw: [q.i, q.j, q.k, q.w],
                    translation: c.extrinsics.translation.into(),
                }
            })
            .collect();
        CalibrationFile { cameras }
    }
}
