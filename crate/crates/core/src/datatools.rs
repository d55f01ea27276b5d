//! Training-data tooling and evaluation metrics: annotation reprojection,
//! green-screen compositing, color jitter, PCK and 3D joint error.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraLabel, Rig};
use crate::energy::{save_detections, Detection2D};
use crate::error::{Error, Result};
use crate::io::create_parent;
use crate::raster::{Rgb, RgbImage};
use crate::skeleton::{load_poses, PoseVector, Skeleton, JOINT_LABELS};

/// Independent random stream `stream` of a run seeded with `seed`. Work items
/// draw from their own stream, so results do not depend on scheduling.
pub fn frame_rng(seed: u64, stream: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// World positions of the named joints, in `JOINT_LABELS` order.
pub fn named_joint_positions(skeleton: &Skeleton, pose: &PoseVector) -> Result<Vec<Vector3<f64>>> {
    let posed = skeleton.forward_kinematics(pose)?;
    skeleton
        .detection_bones()
        .map(|bones| bones.into_iter().map(|b| posed.positions[b]).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointAnnotation {
    pub label: String,
    pub pixel: Vector2<f64>,
    pub visible: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedFrame {
    pub frame_index: usize,
    pub camera: CameraLabel,
    pub image: RgbImage,
    pub annotations: Vec<JointAnnotation>,
}

/// Projects the 18 named joints (in `JOINT_LABELS` order) into every camera.
/// Joints outside a camera's field of view, at its center, or off its image
/// are marked invisible.
pub fn project_annotations(joints: &[Vector3<f64>], rig: &Rig) -> Result<BTreeMap<CameraLabel, Vec<JointAnnotation>>> {
    if joints.len() != JOINT_LABELS.len() {
        return Err(Error::DimensionMismatch {
            expected: JOINT_LABELS.len(),
            actual: joints.len(),
        });
    }
    Ok(rig
        .cameras()
        .iter()
        .map(|cam| {
            let annotations = JOINT_LABELS
                .iter()
                .zip(joints)
                .map(|(label, joint)| {
                    let (pixel, visible) = match cam.project(joint) {
                        Ok(px) => (px, cam.in_bounds(&px)),
                        Err(_) => (Vector2::zeros(), false),
                    };
                    JointAnnotation {
                        label: label.to_string(),
                        pixel,
                        visible,
                    }
                })
                .collect();
            (cam.label, annotations)
        })
        .collect())
}

/// Per-pixel foreground flags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    data: Vec<bool>,
}

impl Mask {
    pub fn filled(width: u32, height: u32, foreground: bool) -> Self {
        Mask {
            width,
            height,
            data: vec![foreground; width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, foreground: bool) {
        self.data[(y * self.width + x) as usize] = foreground;
    }

    pub fn count_foreground(&self) -> usize {
        self.data.iter().filter(|&&f| f).count()
    }

    fn check_size(&self, image: &RgbImage) -> Result<()> {
        if (self.width, self.height) != image.size() {
            return Err(Error::invalid("mask", "size differs from the image"));
        }
        Ok(())
    }
}

/// Distance between two colors with luminance removed: the norm of the
/// difference of their `(r − g, b − g)` coordinates.
pub fn chroma_distance(a: &Rgb, b: &Rgb) -> f64 {
    let da = (a[0] - a[1]) - (b[0] - b[1]);
    let db = (a[2] - a[1]) - (b[2] - b[1]);
    da.hypot(db)
}

/// Foreground mask: a pixel is background iff its chroma distance to
/// `key` is below `tolerance`.
pub fn chroma_key(image: &RgbImage, key: &Rgb, tolerance: f64) -> Mask {
    Mask {
        width: image.width(),
        height: image.height(),
        data: image
            .pixels()
            .iter()
            .map(|px| chroma_distance(px, key) >= tolerance)
            .collect(),
    }
}

/// Foreground where the mask is set, elsewhere a random crop of `background`
/// of the foreground's size.
pub fn composite<R: Rng>(foreground: &RgbImage, mask: &Mask, background: &RgbImage, rng: &mut R) -> Result<RgbImage> {
    mask.check_size(foreground)?;
    let (fw, fh) = foreground.size();
    let (bw, bh) = background.size();
    if bw < fw || bh < fh {
        return Err(Error::BackgroundTooSmall {
            fg_width: fw,
            fg_height: fh,
            bg_width: bw,
            bg_height: bh,
        });
    }
    let x0 = rng.random_range(0..=bw - fw);
    let y0 = rng.random_range(0..=bh - fh);
    let mut out = foreground.clone();
    for y in 0..fh {
        for x in 0..fw {
            if !mask.get(x, y) {
                out.set(x, y, background.get(x0 + x, y0 + y));
            }
        }
    }
    Ok(out)
}

/// RGB in [0, 1] to (hue in degrees [0, 360), saturation, value).
pub fn rgb_to_hsv(c: &Rgb) -> [f64; 3] {
    let max = c[0].max(c[1]).max(c[2]);
    let min = c[0].min(c[1]).min(c[2]);
    let delta = max - min;
    let hue = if delta == 0.0 {
        0.0
    } else if max == c[0] {
        60.0 * ((c[1] - c[2]) / delta).rem_euclid(6.0)
    } else if max == c[1] {
        60.0 * ((c[2] - c[0]) / delta + 2.0)
    } else {
        60.0 * ((c[0] - c[1]) / delta + 4.0)
    };
    let saturation = if max == 0.0 { 0.0 } else { delta / max };
    [hue, saturation, max]
}

pub fn hsv_to_rgb(hsv: &[f64; 3]) -> Rgb {
    let [h, s, v] = *hsv;
    let c = v * s;
    let h6 = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (h6.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Rotates hue by `hue_shift_deg` and scales value by `gain` inside the
/// region, clamping to [0, 1]; pixels outside the region are copied.
pub fn recolor(image: &RgbImage, region: &Mask, hue_shift_deg: f64, gain: f64) -> Result<RgbImage> {
    region.check_size(image)?;
    if !(gain > 0.0) || !hue_shift_deg.is_finite() {
        return Err(Error::invalid(
            "recolor",
            "gain must be positive and the hue shift finite",
        ));
    }
    let mut out = image.clone();
    for y in 0..image.height() {
        for x in 0..image.width() {
            if region.get(x, y) {
                let [h, s, v] = rgb_to_hsv(&image.get(x, y));
                let rgb = hsv_to_rgb(&[h + hue_shift_deg, s, (v * gain).clamp(0.0, 1.0)]);
                out.set(x, y, rgb.map(|c| c.clamp(0.0, 1.0)));
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorJitter {
    /// Hue shifts are drawn uniformly from `[−hue_shift_deg, hue_shift_deg]`.
    pub hue_shift_deg: f64,
    /// Value gains are drawn uniformly from this range.
    pub gain_range: [f64; 2],
}

impl Default for ColorJitter {
    fn default() -> Self {
        ColorJitter {
            hue_shift_deg: 30.0,
            gain_range: [0.7, 1.3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub key_color: Rgb,
    pub chroma_tolerance: f64,
    /// Directory of PNG backgrounds, used in file-name order.
    pub background_source: PathBuf,
    #[serde(default)]
    pub color_jitter: ColorJitter,
    #[serde(default)]
    pub rng_seed: u64,
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.chroma_tolerance > 0.0) {
            return Err(Error::invalid("augment spec", "chroma tolerance must be positive"));
        }
        let [lo, hi] = self.color_jitter.gain_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::invalid(
                "augment spec",
                "gain range must be positive and ordered",
            ));
        }
        if !(0.0..=180.0).contains(&self.color_jitter.hue_shift_deg) {
            return Err(Error::invalid("augment spec", "hue shift must lie in [0, 180] degrees"));
        }
        Ok(())
    }
}

/// Loads every PNG in `dir`, sorted by file name.
pub fn load_backgrounds(dir: &Path) -> Result<Vec<RgbImage>> {
    let entries = std::fs::read_dir(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::invalid(
            "backgrounds",
            format!("no PNG files in {}", dir.display()),
        ));
    }
    paths.iter().map(|p| RgbImage::load_png(p)).collect()
}

/// Keys out the green screen, composites a random background and jitters the
/// foreground colors, drawing from random stream `stream`.
pub fn augment_image(
    image: &RgbImage,
    backgrounds: &[RgbImage],
    spec: &AugmentSpec,
    stream: usize,
) -> Result<RgbImage> {
    spec.validate()?;
    if backgrounds.is_empty() {
        return Err(Error::invalid("backgrounds", "at least one background is required"));
    }
    let mut rng = frame_rng(spec.rng_seed, stream);
    let mask = chroma_key(image, &spec.key_color, spec.chroma_tolerance);
    let background = &backgrounds[rng.random_range(0..backgrounds.len())];
    let composed = composite(image, &mask, background, &mut rng)?;
    let jitter = &spec.color_jitter;
    let hue = rng.random_range(-jitter.hue_shift_deg..=jitter.hue_shift_deg);
    let gain = rng.random_range(jitter.gain_range[0]..=jitter.gain_range[1]);
    recolor(&composed, &mask, hue, gain)
}

/// One green-screen image and the ground-truth pose it was captured with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchFrame {
    pub frame: usize,
    pub camera: CameraLabel,
    pub image: PathBuf,
    /// Pose file (JSONL) holding a record for `frame`.
    pub gt_pose: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchManifest {
    pub calibration: PathBuf,
    /// Skeleton file; the default humanoid at `height` when absent.
    #[serde(default)]
    pub skeleton: Option<PathBuf>,
    #[serde(default = "default_height")]
    pub height: f64,
    pub frames: Vec<BatchFrame>,
    pub augment: AugmentSpec,
}

fn default_height() -> f64 {
    1.75
}

/// Augments every manifest entry (entry `i` draws from stream `i`) and
/// annotates it with its reprojected ground-truth joints. Relative paths are
/// resolved against `base`.
pub fn augment_batch(manifest: &BatchManifest, base: &Path) -> Result<Vec<AnnotatedFrame>> {
    manifest.augment.validate()?;
    let rig = Rig::load(&base.join(&manifest.calibration))?;
    let skeleton = match &manifest.skeleton {
        Some(p) => Skeleton::load(&base.join(p))?,
        None => Skeleton::default_humanoid(manifest.height),
    };
    let backgrounds = load_backgrounds(&base.join(&manifest.augment.background_source))?;
    let mut pose_files: BTreeMap<&Path, BTreeMap<usize, PoseVector>> = BTreeMap::new();
    for entry in &manifest.frames {
        if !pose_files.contains_key(entry.gt_pose.as_path()) {
            let poses = load_poses(&base.join(&entry.gt_pose))?.into_iter().collect();
            pose_files.insert(&entry.gt_pose, poses);
        }
    }
    manifest
        .frames
        .par_iter()
        .enumerate()
        .map(|(i, entry)| {
            let pose = pose_files[entry.gt_pose.as_path()].get(&entry.frame).ok_or_else(|| {
                Error::invalid(
                    "batch",
                    format!("{} has no pose for frame {}", entry.gt_pose.display(), entry.frame),
                )
            })?;
            let camera = rig
                .camera(entry.camera)
                .ok_or_else(|| Error::invalid("batch", format!("rig has no {} camera", entry.camera)))?;
            let image = RgbImage::load_png(&base.join(&entry.image))?;
            if image.size() != camera.intrinsics.image_size() {
                return Err(Error::invalid(
                    "batch",
                    format!("{} size differs from calibration", entry.image.display()),
                ));
            }
            let joints = named_joint_positions(&skeleton, pose)?;
            let mut annotations = project_annotations(&joints, &rig)?;
            Ok(AnnotatedFrame {
                frame_index: entry.frame,
                camera: entry.camera,
                image: augment_image(&image, &backgrounds, &manifest.augment, i)?,
                annotations: annotations.remove(&entry.camera).unwrap_or_default(),
            })
        })
        .collect()
}

/// Writes `images/NNNNN_<frame>_<camera>.png` per entry and the visible
/// annotations as `annotations.jsonl` in detection format.
pub fn write_annotated(frames: &[AnnotatedFrame], dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::with_capacity(frames.len());
    let mut records: Vec<(usize, Vec<Detection2D>)> = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let rel = PathBuf::from(format!("images/{i:05}_{}_{}.png", f.frame_index, f.camera));
        f.image.save_png(&dir.join(&rel))?;
        paths.push(rel);
        let dets = f
            .annotations
            .iter()
            .filter(|a| a.visible)
            .map(|a| Detection2D {
                camera: f.camera,
                joint_label: a.label.clone(),
                pixel: a.pixel,
                confidence: 1.0,
            })
            .collect();
        records.push((f.frame_index, dets));
    }
    let out = dir.join("annotations.jsonl");
    create_parent(&out)?;
    save_detections(&out, records.iter().map(|(t, d)| (*t, d.as_slice())))?;
    Ok(paths)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PckResult {
    /// Hit flag for every visible ground-truth joint.
    pub per_joint: BTreeMap<String, bool>,
    /// Percentage of visible joints hit, in [0, 100].
    pub pck: f64,
}

/// Percentage of correct keypoints: a visible joint is correct iff its
/// prediction lies within `threshold_px`. Invisible joints are ignored.
pub fn pck(predicted: &BTreeMap<String, Vector2<f64>>, gt: &[JointAnnotation], threshold_px: f64) -> Result<PckResult> {
    let gt_labels: BTreeSet<&str> = gt.iter().map(|a| a.label.as_str()).collect();
    let pred_labels: BTreeSet<&str> = predicted.keys().map(String::as_str).collect();
    if gt_labels.len() != gt.len() || gt_labels != pred_labels {
        return Err(Error::LabelMismatch(
            "predicted and ground-truth joints must carry the same distinct labels".into(),
        ));
    }
    let per_joint: BTreeMap<String, bool> = gt
        .iter()
        .filter(|a| a.visible)
        .map(|a| (a.label.clone(), (predicted[&a.label] - a.pixel).norm() <= threshold_px))
        .collect();
    if per_joint.is_empty() {
        return Err(Error::invalid("pck", "no visible ground-truth joints"));
    }
    let hits = per_joint.values().filter(|&&h| h).count();
    Ok(PckResult {
        pck: 100.0 * hits as f64 / per_joint.len() as f64,
        per_joint,
    })
}

/// PCK pooled over many frames and views.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PckAccumulator {
    counts: BTreeMap<String, (usize, usize)>,
}

impl PckAccumulator {
    pub fn add(&mut self, result: &PckResult) {
        for (label, &hit) in &result.per_joint {
            let entry = self.counts.entry(label.clone()).or_default();
            entry.0 += usize::from(hit);
            entry.1 += 1;
        }
    }

    /// Overall percentage; `None` before any visible joint was seen.
    pub fn pck(&self) -> Option<f64> {
        let (hits, total) = self.counts.values().fold((0, 0), |(h, t), &(a, b)| (h + a, t + b));
        (total > 0).then(|| 100.0 * hits as f64 / total as f64)
    }

    pub fn per_joint(&self) -> BTreeMap<String, f64> {
        self.counts
            .iter()
            .map(|(label, &(hits, total))| (label.clone(), 100.0 * hits as f64 / total as f64))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointError {
    /// Mean Euclidean distance over all joints and frames, meters.
    pub mean: f64,
    /// Population standard deviation of the same distances.
    pub std: f64,
    /// Mean distance of each frame.
    pub per_frame: Vec<f64>,
}

/// Euclidean 3D error over the 18 named joints of every frame.
pub fn joint_error_3d(predicted: &[PoseVector], gt: &[PoseVector], skeleton: &Skeleton) -> Result<JointError> {
    if predicted.len() != gt.len() {
        return Err(Error::LengthMismatch(predicted.len(), gt.len()));
    }
    if gt.is_empty() {
        return Err(Error::invalid("joint error", "sequences are empty"));
    }
    let mut distances = Vec::with_capacity(gt.len() * JOINT_LABELS.len());
    let mut per_frame = Vec::with_capacity(gt.len());
    for (p, g) in predicted.iter().zip(gt) {
        let a = named_joint_positions(skeleton, p)?;
        let b = named_joint_positions(skeleton, g)?;
        let frame: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x - y).norm()).collect();
        per_frame.push(frame.iter().sum::<f64>() / frame.len() as f64);
        distances.extend(frame);
    }
    let n = distances.len() as f64;
    let mean = distances.iter().sum::<f64>() / n;
    let var = distances.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
    Ok(JointError {
        mean,
        std: var.sqrt(),
        per_frame,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pck: f64,
    pub per_joint: BTreeMap<String, f64>,
    pub error3d_mean_m: f64,
    pub error3d_std_m: f64,
}

/// 3D joint error plus PCK of the predicted joints' projections against the
/// ground-truth projections in every view. A prediction outside a view counts
/// as a miss.
pub fn evaluate_sequence(
    predicted: &[PoseVector],
    gt: &[PoseVector],
    skeleton: &Skeleton,
    rig: &Rig,
    threshold_px: f64,
) -> Result<MetricsReport> {
    let error = joint_error_3d(predicted, gt, skeleton)?;
    let mut acc = PckAccumulator::default();
    for (p, g) in predicted.iter().zip(gt) {
        let pred = project_annotations(&named_joint_positions(skeleton, p)?, rig)?;
        let truth = project_annotations(&named_joint_positions(skeleton, g)?, rig)?;
        for (label, annotations) in &truth {
            if annotations.iter().all(|a| !a.visible) {
                continue;
            }
            let guesses = pred[label]
                .iter()
                .map(|a| {
                    let px = if a.visible { a.pixel } else { Vector2::repeat(f64::NAN) };
                    (a.label.clone(), px)
                })
                .collect();
            acc.add(&pck(&guesses, annotations, threshold_px)?);
        }
    }
    Ok(MetricsReport {
        pck: acc.pck().unwrap_or(0.0),
        per_joint: acc.per_joint(),
        error3d_mean_m: error.mean,
        error3d_std_m: error.std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::initial_pose;

    fn labels_at(pixels: &[Vector2<f64>]) -> Vec<JointAnnotation> {
        pixels
            .iter()
            .enumerate()
            .map(|(i, p)| JointAnnotation {
                label: JOINT_LABELS[i].to_string(),
                pixel: *p,
                visible: true,
            })
            .collect()
    }

    #[test]
    fn annotation_on_optical_axis_hits_principal_point() {
        let rig = Rig::head_mounted(128, 96);
        let left = rig.camera(CameraLabel::Left).unwrap();
        let mut joints = vec![Vector3::new(0.0, -0.5, 0.3); 18];
        joints[0] = left.unproject(&left.intrinsics.principal_point()).unwrap().at(0.7);
        joints[1] = Vector3::new(0.0, 0.5, 0.3);
        let ann = project_annotations(&joints, &rig).unwrap();
        let head = &ann[&CameraLabel::Left][0];
        assert!(head.visible);
        assert!((head.pixel - left.intrinsics.principal_point()).norm() < 1e-9);
        assert!(!ann[&CameraLabel::Left][1].visible && !ann[&CameraLabel::Right][1].visible);
        for (label, list) in &ann {
            let cam = rig.camera(*label).unwrap();
            for (a, j) in list.iter().zip(&joints) {
                if a.visible {
                    assert_eq!(a.pixel, cam.project(j).unwrap());
                }
            }
        }
    }

    #[test]
    fn chroma_key_splits_half_green_image() {
        let green = [0.1, 0.8, 0.2];
        let mut image = RgbImage::filled(10, 4, green);
        for y in 0..4 {
            for x in 5..10 {
                image.set(x, y, [0.9, 0.1, 0.1]);
            }
        }
        let mask = chroma_key(&image, &green, 0.3);
        for y in 0..4 {
            for x in 0..10 {
                assert_eq!(mask.get(x, y), x >= 5);
            }
        }
        assert_eq!(
            chroma_key(&RgbImage::filled(3, 3, green), &green, 0.1).count_foreground(),
            0
        );
        // Luminance changes along the gray axis do not move the chroma.
        assert!(chroma_distance(&[0.2, 0.9, 0.3], &[0.1, 0.8, 0.2]) < 1e-12);
    }

    #[test]
    fn composite_extremes_and_errors() {
        let fg = RgbImage::filled(4, 3, [1.0, 0.0, 0.0]);
        let bg = RgbImage::from_pixels(6, 5, (0..30).map(|i| [i as f64 / 30.0, 0.0, 1.0]).collect()).unwrap();
        let mut rng = frame_rng(1, 0);
        assert_eq!(composite(&fg, &Mask::filled(4, 3, true), &bg, &mut rng).unwrap(), fg);
        let out = composite(&fg, &Mask::filled(4, 3, false), &bg, &mut frame_rng(1, 0)).unwrap();
        let mut rng = frame_rng(1, 0);
        let (x0, y0) = (rng.random_range(0..=2u32), rng.random_range(0..=2u32));
        for y in 0..3 {
            for x in 0..4 {
                assert_eq!(out.get(x, y), bg.get(x0 + x, y0 + y));
            }
        }
        assert!(matches!(
            composite(&bg, &Mask::filled(6, 5, true), &fg, &mut rng),
            Err(Error::BackgroundTooSmall { .. })
        ));
    }

    #[test]
    fn hsv_round_trip() {
        for c in [
            [0.2, 0.4, 0.9],
            [1.0, 0.0, 0.0],
            [0.5, 0.5, 0.5],
            [0.0, 0.0, 0.0],
            [0.3, 0.9, 0.1],
        ] {
            let back = hsv_to_rgb(&rgb_to_hsv(&c));
            for k in 0..3 {
                assert!((back[k] - c[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn recolor_cases() {
        let image = RgbImage::from_pixels(2, 1, vec![[0.2, 0.5, 0.7], [0.6, 0.6, 0.6]]).unwrap();
        let all = Mask::filled(2, 1, true);
        let same = recolor(&image, &all, 0.0, 1.0).unwrap();
        for (a, b) in same.pixels().iter().zip(image.pixels()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
        let dim = recolor(&image, &all, 0.0, 0.5).unwrap();
        assert_eq!(dim.get(1, 0), [0.3, 0.3, 0.3]);
        let full_turn = recolor(&image, &all, 360.0, 1.0).unwrap();
        assert_eq!(full_turn.quantized(), image.quantized());
        let mut left_only = Mask::filled(2, 1, false);
        left_only.set(0, 0, true);
        assert_eq!(
            recolor(&image, &left_only, 90.0, 2.0).unwrap().get(1, 0),
            image.get(1, 0)
        );
        assert!(recolor(&image, &all, 0.0, 0.0).is_err());
    }

    #[test]
    fn pck_fixtures() {
        let gt: Vec<Vector2<f64>> = (0..18).map(|i| Vector2::new(10.0 * i as f64, 5.0)).collect();
        let ann = labels_at(&gt);
        let mut pred: BTreeMap<String, Vector2<f64>> = ann.iter().map(|a| (a.label.clone(), a.pixel)).collect();
        assert_eq!(pck(&pred, &ann, 5.0).unwrap().pck, 100.0);
        for a in ann.iter().take(6) {
            pred.insert(a.label.clone(), a.pixel + Vector2::new(3.0, 4.01));
        }
        let r = pck(&pred, &ann, 5.0).unwrap();
        assert!((r.pck - 66.67).abs() < 0.01);
        pred.remove("head");
        assert!(matches!(pck(&pred, &ann, 5.0), Err(Error::LabelMismatch(_))));
    }

    #[test]
    fn joint_error_offsets() {
        let sk = Skeleton::default_humanoid(1.75);
        let rig = Rig::head_mounted(64, 64);
        let gt = vec![initial_pose(&sk, &rig, 1.75); 3];
        let zero = joint_error_3d(&gt, &gt, &sk).unwrap();
        assert_eq!((zero.mean, zero.std), (0.0, 0.0));
        let shifted: Vec<PoseVector> = gt
            .iter()
            .map(|p| {
                let mut q = p.clone();
                q.root_translation.x += 0.01;
                q
            })
            .collect();
        let e = joint_error_3d(&shifted, &gt, &sk).unwrap();
        assert!((e.mean - 0.01).abs() < 1e-12 && e.std < 1e-12);
        assert!(matches!(
            joint_error_3d(&gt[..2], &gt, &sk),
            Err(Error::LengthMismatch(2, 3))
        ));
    }

    #[test]
    fn evaluate_identical_sequences() {
        let sk = Skeleton::default_humanoid(1.75);
        let rig = Rig::head_mounted(160, 128);
        let gt = vec![initial_pose(&sk, &rig, 1.75); 2];
        let report = evaluate_sequence(&gt, &gt, &sk, &rig, 2.0).unwrap();
        assert_eq!(report.pck, 100.0);
        assert_eq!(report.error3d_mean_m, 0.0);
        assert!(!report.per_joint.is_empty());
    }
}
