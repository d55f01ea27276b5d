//! Projected skeleton drawn over a camera image.

use serde::{Deserialize, Serialize};

use crate::camera::{CameraLabel, Rig};
use crate::error::{Error, Result};
use crate::raster::{Rgb, RgbImage};
use crate::skeleton::{PoseVector, Skeleton};

/// Points per bone polyline; straight 3D segments bend under the fisheye.
pub const BONE_POLYLINE_POINTS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlayStyle {
    pub joint_radius: f64,
    pub joint_color: Rgb,
    pub bone_color: Rgb,
}

impl Default for OverlayStyle {
    fn default() -> Self {
        OverlayStyle {
            joint_radius: 3.0,
            joint_color: [1.0, 0.9, 0.1],
            bone_color: [0.1, 0.9, 1.0],
        }
    }
}

pub fn render_overlay(
    image: &RgbImage,
    pose: &PoseVector,
    skeleton: &Skeleton,
    rig: &Rig,
    camera: CameraLabel,
) -> Result<RgbImage> {
    render_overlay_styled(image, pose, skeleton, rig, camera, &OverlayStyle::default())
}

/// Bones as polylines and named joints as discs. Points outside the field of
/// view are left out rather than clamped; other pixels are untouched.
pub fn render_overlay_styled(
    image: &RgbImage,
    pose: &PoseVector,
    skeleton: &Skeleton,
    rig: &Rig,
    camera: CameraLabel,
    style: &OverlayStyle,
) -> Result<RgbImage> {
    let cam = rig
        .camera(camera)
        .ok_or_else(|| Error::invalid("overlay", format!("rig has no {camera} camera")))?;
    if image.size() != cam.intrinsics.image_size() {
        return Err(Error::invalid("overlay", "image size differs from calibration"));
    }
    let posed = skeleton.forward_kinematics(pose)?;
    let mut out = image.clone();
    for (i, bone) in skeleton.bones().iter().enumerate() {
        let Some(parent) = bone.parent else { continue };
        let (a, b) = (posed.positions[parent], posed.positions[i]);
        let mut last: Option<[f64; 2]> = None;
        for k in 0..BONE_POLYLINE_POINTS {
            let t = k as f64 / (BONE_POLYLINE_POINTS - 1) as f64;
            let pixel = cam.project(&(a + (b - a) * t)).ok().map(|p| [p.x, p.y]);
            if let (Some(p), Some(q)) = (last, pixel) {
                out.draw_segment(p, q, style.bone_color);
            }
            last = pixel;
        }
    }
    for bone in skeleton.detection_bones()? {
        if let Ok(p) = cam.project(&posed.positions[bone]) {
            out.fill_disc(p.x, p.y, style.joint_radius, style.joint_color);
        }
    }
    Ok(out)
}
