//! The hybrid pose energy and its analytic gradient.
//!
//! `E(p) = w_color·E_color + w_detection·E_detection + E_pose + E_smooth`,
//! where `E_pose` and `E_smooth` carry their own weights. Gradients are taken
//! in the tangent parameterization of [`PoseVector`].

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DVector, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::body_model::{ray_residual, GaussianBodyModel, MarchScratch, RayCone};
use crate::camera::{CameraLabel, Ray, Rig};
use crate::error::{Error, Result};
use crate::geometry::left_jacobian_inv;
use crate::io::{read_jsonl, write_jsonl};
use crate::raster::RgbImage;
use crate::skeleton::{PoseVector, Skeleton, ROOT_DOF};

/// Side of a color-target tile, in samples.
const TILE_SAMPLES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Detection2D {
    pub camera: CameraLabel,
    pub joint_label: String,
    pub pixel: Vector2<f64>,
    pub confidence: f64,
}

/// One line of a detections JSONL file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub frame: usize,
    pub camera: CameraLabel,
    pub joint: String,
    pub x: f64,
    pub y: f64,
    pub conf: f64,
}

impl DetectionRecord {
    pub fn new(frame: usize, det: &Detection2D) -> Self {
        DetectionRecord {
            frame,
            camera: det.camera,
            joint: det.joint_label.clone(),
            x: det.pixel.x,
            y: det.pixel.y,
            conf: det.confidence,
        }
    }

    pub fn detection(&self) -> Detection2D {
        Detection2D {
            camera: self.camera,
            joint_label: self.joint.clone(),
            pixel: Vector2::new(self.x, self.y),
            confidence: self.conf,
        }
    }
}

/// Loads a detections file grouped by frame index.
pub fn load_detections(path: &Path) -> Result<BTreeMap<usize, Vec<Detection2D>>> {
    let mut out: BTreeMap<usize, Vec<Detection2D>> = BTreeMap::new();
    for rec in read_jsonl::<DetectionRecord>(path)? {
        out.entry(rec.frame).or_default().push(rec.detection());
    }
    Ok(out)
}

pub fn save_detections<'a>(path: &Path, frames: impl IntoIterator<Item = (usize, &'a [Detection2D])>) -> Result<()> {
    let records: Vec<DetectionRecord> = frames
        .into_iter()
        .flat_map(|(t, dets)| dets.iter().map(move |d| DetectionRecord::new(t, d)))
        .collect();
    write_jsonl(path, &records)
}

/// Stereo images and 2D detections at one time step.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameObservation {
    pub frame_index: usize,
    pub images: BTreeMap<CameraLabel, RgbImage>,
    pub detections: Vec<Detection2D>,
}

impl FrameObservation {
    /// Checks image sizes against the calibration and detections against the
    /// image bounds. Missing images are allowed here; the color term reports
    /// them when it needs them.
    pub fn validate(&self, rig: &Rig) -> Result<()> {
        for (label, img) in &self.images {
            let cam = rig
                .camera(*label)
                .ok_or_else(|| Error::invalid("observation", format!("no calibration for camera `{label}`")))?;
            if img.size() != cam.intrinsics.image_size() {
                return Err(Error::invalid(
                    "observation",
                    format!(
                        "frame {}: {label} image is {:?}, calibration says {:?}",
                        self.frame_index,
                        img.size(),
                        cam.intrinsics.image_size()
                    ),
                ));
            }
        }
        for det in &self.detections {
            let cam = rig
                .camera(det.camera)
                .ok_or_else(|| Error::invalid("detection", format!("no calibration for camera `{}`", det.camera)))?;
            if !cam.in_bounds(&det.pixel) || !(0.0..=1.0).contains(&det.confidence) {
                return Err(Error::invalid(
                    "detection",
                    format!(
                        "frame {}: {} {} at {:?} conf {} out of range",
                        self.frame_index, det.camera, det.joint_label, det.pixel, det.confidence
                    ),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyWeights {
    pub w_color: f64,
    pub w_detection: f64,
    pub w_limit: f64,
    pub w_rest: f64,
    pub w_smooth: f64,
    pub huber_delta: f64,
    pub ray_stride: usize,
}

impl Default for EnergyWeights {
    fn default() -> Self {
        EnergyWeights {
            w_color: 1e-3,
            w_detection: 1e-2,
            w_limit: 10.0,
            w_rest: 1e-2,
            w_smooth: 1.0,
            huber_delta: 15.0,
            ray_stride: 4,
        }
    }
}

impl EnergyWeights {
    pub fn zero() -> Self {
        EnergyWeights {
            w_color: 0.0,
            w_detection: 0.0,
            w_limit: 0.0,
            w_rest: 0.0,
            w_smooth: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.w_color, self.w_detection, self.w_limit, self.w_rest, self.w_smooth];
        if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) || !(self.huber_delta > 0.0) {
            return Err(Error::invalid(
                "weights",
                "weights must be finite and non-negative, huber_delta positive",
            ));
        }
        if self.ray_stride == 0 {
            return Err(Error::invalid("weights", "ray_stride must be at least 1"));
        }
        Ok(())
    }

    /// Every weight multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        EnergyWeights {
            w_color: self.w_color * factor,
            w_detection: self.w_detection * factor,
            w_limit: self.w_limit * factor,
            w_rest: self.w_rest * factor,
            w_smooth: self.w_smooth * factor,
            ..self.clone()
        }
    }
}

/// A scalar term and its gradient over the tangent pose parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TermValue {
    pub value: f64,
    pub gradient: DVector<f64>,
}

impl TermValue {
    fn zero(n: usize) -> Self {
        TermValue {
            value: 0.0,
            gradient: DVector::zeros(n),
        }
    }
}

/// Term values as reported: `e_color` and `e_detection` unweighted, `e_pose`
/// and `e_smooth` with their weights already applied.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnergyBreakdown {
    pub e_color: f64,
    pub e_detection: f64,
    pub e_pose: f64,
    pub e_smooth: f64,
    pub total: f64,
    #[serde(skip)]
    pub gradient: DVector<f64>,
}

impl EnergyBreakdown {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.gradient.iter().all(|g| g.is_finite())
    }
}

/// Target colors sampled on the strided pixel grid, with their rays.
///
/// Samples are grouped into square tiles of one camera each; the tiles are
/// the fixed units of parallel work, so results do not depend on the thread
/// count.
#[derive(Clone, Debug, Default)]
pub struct ColorTargets {
    rays: Vec<Ray>,
    colors: Vec<Vector3<f64>>,
    tiles: Vec<(std::ops::Range<usize>, RayCone)>,
}

impl ColorTargets {
    /// Samples every `stride`-th pixel (both axes, starting at 0) of each
    /// camera's image; pixels outside the field of view are skipped.
    pub fn new(rig: &Rig, images: &BTreeMap<CameraLabel, RgbImage>, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("ray stride", "must be at least 1"));
        }
        let mut targets = ColorTargets::default();
        let span = (TILE_SAMPLES * stride) as u32;
        for cam in rig.cameras() {
            let image = images
                .get(&cam.label)
                .ok_or_else(|| Error::MissingImage(cam.label.to_string()))?;
            if image.size() != cam.intrinsics.image_size() {
                return Err(Error::invalid(
                    "image",
                    format!("{} image size differs from calibration", cam.label),
                ));
            }
            for y0 in (0..image.height()).step_by(span as usize) {
                for x0 in (0..image.width()).step_by(span as usize) {
                    let start = targets.rays.len();
                    for y in (y0..(y0 + span).min(image.height())).step_by(stride) {
                        for x in (x0..(x0 + span).min(image.width())).step_by(stride) {
                            match cam.unproject(&Vector2::new(x as f64, y as f64)) {
                                Ok(ray) => {
                                    targets.rays.push(ray);
                                    targets.colors.push(Vector3::from(image.get(x, y)));
                                }
                                Err(Error::OutsideFov) => {}
                                Err(e) => return Err(e),
                            }
                        }
                    }
                    let end = targets.rays.len();
                    if let Some(cone) = RayCone::bounding(&targets.rays[start..end]) {
                        targets.tiles.push((start..end, cone));
                    }
                }
            }
        }
        Ok(targets)
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    /// Sample rays in storage order.
    pub fn rays(&self) -> &[Ray] {
        &self.rays
    }
}

/// Sum of squared color residuals over the target rays.
pub fn e_color_targets(
    pose: &PoseVector,
    targets: &ColorTargets,
    skeleton: &Skeleton,
    body: &GaussianBodyModel,
    with_gradient: bool,
) -> Result<TermValue> {
    body.check_skeleton(skeleton)?;
    let posed = skeleton.forward_kinematics(pose)?;
    let blobs = body.place(&posed);
    let background = Vector3::from(body.background_color());
    let n_blobs = blobs.len();

    let chunks: Vec<(f64, Vec<Vector3<f64>>)> = targets
        .tiles
        .par_iter()
        .map_init(
            || (MarchScratch::default(), Vec::new()),
            |(scratch, candidates), (range, cone)| {
                cone.candidates_into(&blobs, candidates);
                let mut value = 0.0;
                let mut grads = if with_gradient && !candidates.is_empty() {
                    vec![Vector3::zeros(); n_blobs]
                } else {
                    Vec::new()
                };
                let rays = &targets.rays[range.clone()];
                for (ray, target) in rays.iter().zip(&targets.colors[range.clone()]) {
                    value += if candidates.is_empty() {
                        (background - target).norm_squared()
                    } else {
                        let g = with_gradient.then_some(grads.as_mut_slice());
                        ray_residual(&blobs, Some(candidates), &background, ray, target, scratch, g)
                    };
                }
                (value, grads)
            },
        )
        .collect();

    let mut out = TermValue::zero(skeleton.param_count());
    let mut blob_grads = vec![Vector3::zeros(); if with_gradient { n_blobs } else { 0 }];
    for (value, grads) in chunks {
        out.value += value;
        for (acc, g) in blob_grads.iter_mut().zip(grads) {
            *acc += g;
        }
    }
    for (i, g) in blob_grads.iter().enumerate() {
        if *g != Vector3::zeros() {
            let bone = body.blobs()[i].bone;
            skeleton.accumulate_point_gradient(&posed, bone, &blobs[i].center, g, out.gradient.as_mut_slice());
        }
    }
    Ok(out)
}

/// Generative color term: squared difference between model and observed
/// colors on the strided pixel grid of both views.
pub fn e_color(
    pose: &PoseVector,
    observation: &FrameObservation,
    rig: &Rig,
    skeleton: &Skeleton,
    body: &GaussianBodyModel,
    weights: &EnergyWeights,
) -> Result<TermValue> {
    let targets = ColorTargets::new(rig, &observation.images, weights.ray_stride)?;
    e_color_targets(pose, &targets, skeleton, body, true)
}

/// `(Huber_δ(r), dHuber/dr / r)` for residual norm `r`.
fn huber(r: f64, delta: f64) -> (f64, f64) {
    if r <= delta {
        (0.5 * r * r, 1.0)
    } else {
        (delta * (r - 0.5 * delta), delta / r)
    }
}

/// Confidence-weighted Huber penalty between projected joints and detections.
pub fn e_detection(
    pose: &PoseVector,
    detections: &[Detection2D],
    rig: &Rig,
    skeleton: &Skeleton,
    weights: &EnergyWeights,
) -> Result<TermValue> {
    let posed = skeleton.forward_kinematics(pose)?;
    let mut out = TermValue::zero(skeleton.param_count());
    for det in detections {
        let bone = skeleton.joint_bone(&det.joint_label)?;
        let cam = rig
            .camera(det.camera)
            .ok_or_else(|| Error::invalid("detection", format!("no calibration for camera `{}`", det.camera)))?;
        let joint = posed.positions[bone];
        match cam.project_with_jacobian(&joint) {
            Ok((pixel, jac)) => {
                let residual = pixel - det.pixel;
                let (h, scale) = huber(residual.norm(), weights.huber_delta);
                out.value += det.confidence * h;
                let g = jac.transpose() * (residual * (det.confidence * scale));
                skeleton.accumulate_point_gradient(&posed, bone, &joint, &g, out.gradient.as_mut_slice());
            }
            Err(Error::OutsideFov | Error::DegeneratePoint) => {
                out.value += det.confidence * huber(cam.intrinsics.diagonal(), weights.huber_delta).0;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Joint-limit violations plus deviation from the rest pose (root excluded).
pub fn e_pose(
    pose: &PoseVector,
    skeleton: &Skeleton,
    rest_pose: &PoseVector,
    weights: &EnergyWeights,
) -> Result<TermValue> {
    if pose.joint_angles.len() != skeleton.dof_count() || rest_pose.joint_angles.len() != skeleton.dof_count() {
        return Err(Error::DimensionMismatch {
            expected: skeleton.dof_count(),
            actual: pose.joint_angles.len().max(rest_pose.joint_angles.len()),
        });
    }
    let mut out = TermValue::zero(skeleton.param_count());
    let violations = skeleton.clamp_report(pose);
    for (i, ((theta, rest), viol)) in pose
        .joint_angles
        .iter()
        .zip(&rest_pose.joint_angles)
        .zip(&violations)
        .enumerate()
    {
        let dev = theta - rest;
        out.value += weights.w_limit * viol * viol + weights.w_rest * dev * dev;
        out.gradient[ROOT_DOF + i] = 2.0 * (weights.w_limit * viol + weights.w_rest * dev);
    }
    Ok(out)
}

/// Temporal smoothness: squared finite-difference acceleration with two
/// predecessors, squared velocity with one, nothing without history.
pub fn e_smooth(
    pose: &PoseVector,
    prev: Option<&PoseVector>,
    prev_prev: Option<&PoseVector>,
    weights: &EnergyWeights,
) -> Result<TermValue> {
    let n = pose.param_count();
    let Some(prev) = prev else {
        return Ok(TermValue::zero(n));
    };
    for p in std::iter::once(prev).chain(prev_prev) {
        if p.param_count() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: p.param_count(),
            });
        }
    }
    let velocity = pose.difference(prev);
    let residual = match prev_prev {
        Some(pp) => &velocity - prev.difference(pp),
        None => velocity.clone(),
    };
    let mut gradient = &residual * (2.0 * weights.w_smooth);
    // The rotation block of `velocity` is log(q_t·q_{t−1}⁻¹); map its
    // sensitivity back to a left increment of q_t.
    let phi = Vector3::new(velocity[3], velocity[4], velocity[5]);
    let rot = left_jacobian_inv(&phi).transpose() * Vector3::new(gradient[3], gradient[4], gradient[5]);
    gradient.fixed_rows_mut::<3>(3).copy_from(&rot);
    Ok(TermValue {
        value: weights.w_smooth * residual.norm_squared(),
        gradient,
    })
}

/// Everything that stays fixed across a sequence.
#[derive(Clone, Debug)]
pub struct Scene {
    pub rig: Rig,
    pub skeleton: Skeleton,
    pub body: GaussianBodyModel,
    pub weights: EnergyWeights,
    pub rest_pose: PoseVector,
}

impl Scene {
    pub fn new(rig: Rig, skeleton: Skeleton, body: GaussianBodyModel, weights: EnergyWeights) -> Result<Self> {
        weights.validate()?;
        body.check_skeleton(&skeleton)?;
        let rest_pose = skeleton.rest_pose();
        Ok(Scene {
            rig,
            skeleton,
            body,
            weights,
            rest_pose,
        })
    }
}

/// Per-frame inputs to the energy: prepared color targets, detections and
/// the previously solved poses.
#[derive(Clone, Debug)]
pub struct FrameTerms {
    pub frame_index: usize,
    pub detections: Vec<Detection2D>,
    pub color: Option<ColorTargets>,
    pub prev: Option<PoseVector>,
    pub prev_prev: Option<PoseVector>,
}

impl FrameTerms {
    /// Prepares a frame. Color targets are built only when the color weight is
    /// positive, in which case both images are required.
    pub fn new(scene: &Scene, observation: &FrameObservation) -> Result<Self> {
        observation.validate(&scene.rig)?;
        for det in &observation.detections {
            scene.skeleton.joint_bone(&det.joint_label)?;
        }
        let color = if scene.weights.w_color > 0.0 {
            let targets = ColorTargets::new(&scene.rig, &observation.images, scene.weights.ray_stride)?;
            if targets.colors.iter().flatten().any(|c| !c.is_finite()) {
                return Err(Error::NonFiniteEnergy);
            }
            Some(targets)
        } else {
            None
        };
        Ok(FrameTerms {
            frame_index: observation.frame_index,
            detections: observation.detections.clone(),
            color,
            prev: None,
            prev_prev: None,
        })
    }

    pub fn with_history(mut self, prev: Option<PoseVector>, prev_prev: Option<PoseVector>) -> Self {
        self.prev = prev;
        self.prev_prev = if self.prev.is_some() { prev_prev } else { None };
        self
    }
}

/// Weighted sum of the four terms and the sum of their gradients.
pub fn total_energy(pose: &PoseVector, scene: &Scene, frame: &FrameTerms) -> Result<EnergyBreakdown> {
    evaluate(pose, scene, frame, true)
}

/// As [`total_energy`]; with `with_gradient == false` the gradient is left
/// zero and the color term takes its cheaper value-only path.
pub fn evaluate(pose: &PoseVector, scene: &Scene, frame: &FrameTerms, with_gradient: bool) -> Result<EnergyBreakdown> {
    let w = &scene.weights;
    let n = scene.skeleton.param_count();
    let color = match (&frame.color, w.w_color > 0.0) {
        (Some(targets), true) => e_color_targets(pose, targets, &scene.skeleton, &scene.body, with_gradient)?,
        _ => TermValue::zero(n),
    };
    let detection = e_detection(pose, &frame.detections, &scene.rig, &scene.skeleton, w)?;
    let prior = e_pose(pose, &scene.skeleton, &scene.rest_pose, w)?;
    let smooth = e_smooth(pose, frame.prev.as_ref(), frame.prev_prev.as_ref(), w)?;

    let total = w.w_color * color.value + w.w_detection * detection.value + prior.value + smooth.value;
    let gradient = if with_gradient {
        color.gradient * w.w_color + detection.gradient * w.w_detection + prior.gradient + smooth.gradient
    } else {
        DVector::zeros(n)
    };
    Ok(EnergyBreakdown {
        e_color: color.value,
        e_detection: detection.value,
        e_pose: prior.value,
        e_smooth: smooth.value,
        total,
        gradient,
    })
}
