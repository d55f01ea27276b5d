//! Synthetic scenes with exact ground truth: analytic motion, rendered stereo
//! views and noisy 2D detections.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::body_model::{render_view, GaussianBodyModel};
use crate::camera::{CameraLabel, Rig};
use crate::datatools::frame_rng;
use crate::energy::{load_detections, save_detections, Detection2D, EnergyWeights, FrameObservation, Scene};
use crate::error::{Error, Result};
use crate::geometry::exp_so3;
use crate::io::{read_json, write_json};
use crate::raster::RgbImage;
use crate::skeleton::{load_poses, save_poses, PoseVector, Skeleton, JOINT_LABELS};
use crate::solver::initial_pose;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Motion {
    Rest,
    /// Sinusoidal gait; `amplitude` is the peak hip swing in radians and
    /// `period` the stride length in frames.
    Walk {
        amplitude: f64,
        period: f64,
    },
    /// Mean-reverting random walk on every joint angle, clamped to limits.
    RandomWalk {
        amplitude: f64,
    },
}

impl Default for Motion {
    fn default() -> Self {
        Motion::Walk {
            amplitude: 0.5,
            period: 40.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    /// Skeleton file; the default humanoid when absent.
    pub skeleton: Option<PathBuf>,
    /// Body model file; `default_body(height)` when absent.
    pub body_model: Option<PathBuf>,
    pub height: f64,
    /// Calibration file; the default head-mounted rig at `image_size` when absent.
    pub calibration: Option<PathBuf>,
    pub motion: Motion,
    pub frames: usize,
    pub detection_noise_sigma: f64,
    pub detection_dropout: f64,
    pub image_size: [u32; 2],
    pub rng_seed: u64,
    /// Skip rendering for detection-only bundles.
    pub render_images: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            skeleton: None,
            body_model: None,
            height: 1.75,
            calibration: None,
            motion: Motion::default(),
            frames: 20,
            detection_noise_sigma: 0.0,
            detection_dropout: 0.0,
            image_size: [480, 384],
            rng_seed: 0,
            render_images: true,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::invalid("synth spec", "frames must be at least 1"));
        }
        if !(self.detection_noise_sigma >= 0.0) {
            return Err(Error::invalid("synth spec", "detection noise must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.detection_dropout) {
            return Err(Error::invalid("synth spec", "dropout must lie in [0, 1)"));
        }
        if self.image_size.contains(&0) {
            return Err(Error::invalid("synth spec", "image size must be positive"));
        }
        Ok(())
    }

    /// Loads or builds the skeleton, body model and rig. Relative paths are
    /// resolved against `base`.
    pub fn resolve(&self, base: &Path) -> Result<SynthActors> {
        let skeleton = match &self.skeleton {
            Some(p) => Skeleton::load(&base.join(p))?,
            None => Skeleton::default_humanoid(self.height),
        };
        skeleton.validate_for_tracking()?;
        let body = match &self.body_model {
            Some(p) => GaussianBodyModel::load(&base.join(p))?,
            None => GaussianBodyModel::default_body(&skeleton, self.height)?,
        };
        body.check_skeleton(&skeleton)?;
        let rig = match &self.calibration {
            Some(p) => Rig::load(&base.join(p))?,
            None => Rig::head_mounted(self.image_size[0], self.image_size[1]),
        };
        Ok(SynthActors { skeleton, body, rig })
    }
}

#[derive(Clone, Debug)]
pub struct SynthActors {
    pub skeleton: Skeleton,
    pub body: GaussianBodyModel,
    pub rig: Rig,
}

impl SynthActors {
    pub fn scene(&self, weights: EnergyWeights) -> Result<Scene> {
        Scene::new(self.rig.clone(), self.skeleton.clone(), self.body.clone(), weights)
    }
}

#[derive(Clone, Debug)]
pub struct SynthBundle {
    pub actors: SynthActors,
    pub gt_poses: Vec<PoseVector>,
    /// Per frame: unquantized renders (empty if rendering is off) and noisy detections.
    pub observations: Vec<FrameObservation>,
}

/// Pose generator for the analytic motions.
pub struct MotionGenerator<'a> {
    skeleton: &'a Skeleton,
    base: PoseVector,
    motion: Motion,
    rng: ChaCha8Rng,
    state: Vec<f64>,
}

impl<'a> MotionGenerator<'a> {
    pub fn new(skeleton: &'a Skeleton, base: PoseVector, motion: Motion, seed: u64) -> Self {
        let state = base.joint_angles.clone();
        MotionGenerator {
            skeleton,
            base,
            motion,
            // Stream u64::MAX keeps motion noise apart from per-frame streams.
            rng: frame_rng(seed, usize::MAX),
            state,
        }
    }

    fn set(&self, pose: &mut PoseVector, bone_name: &str, dof: usize, value: f64) {
        if let Some(b) = self.skeleton.bones().iter().position(|b| b.name == bone_name) {
            let range = self.skeleton.dof_range(b);
            if dof < range.len() {
                pose.joint_angles[range.start + dof] += value;
            }
        }
    }

    /// Pose at frame `t`. Frames must be requested in order for the random walk.
    pub fn pose(&mut self, t: usize) -> PoseVector {
        let mut pose = self.base.clone();
        match self.motion.clone() {
            Motion::Rest => {}
            Motion::Walk { amplitude: a, period } => {
                let phase = 2.0 * std::f64::consts::PI * t as f64 / period;
                let (s, c) = phase.sin_cos();
                self.set(&mut pose, "lthigh", 0, -a * s);
                self.set(&mut pose, "rthigh", 0, a * s);
                self.set(&mut pose, "lshin", 0, 0.6 * a * (1.0 - c));
                self.set(&mut pose, "rshin", 0, 0.6 * a * (1.0 + c));
                self.set(&mut pose, "lfoot", 0, 0.3 * a * s);
                self.set(&mut pose, "rfoot", 0, -0.3 * a * s);
                self.set(&mut pose, "lupperarm", 0, 0.6 * a * s);
                self.set(&mut pose, "rupperarm", 0, -0.6 * a * s);
                self.set(&mut pose, "lupperarm", 1, 0.15);
                self.set(&mut pose, "rupperarm", 1, -0.15);
                self.set(&mut pose, "lforearm", 0, -0.1 - 0.3 * a * (1.0 + s));
                self.set(&mut pose, "rforearm", 0, -0.1 - 0.3 * a * (1.0 - s));
                self.set(&mut pose, "spine", 2, 0.15 * a * s);
                self.set(&mut pose, "spine", 0, 0.1 * a);
                pose.root_translation.y += 0.01 * (1.0 - (2.0 * phase).cos());
                pose.root_rotation = exp_so3(&Vector3::new(0.0, 0.05 * a * s, 0.0)) * pose.root_rotation;
                self.skeleton.clamp_to_limits(&mut pose);
            }
            Motion::RandomWalk { amplitude } => {
                let normal = Normal::new(0.0, 0.1 * amplitude.max(0.0)).expect("finite std");
                if t > 0 {
                    for v in self.state.iter_mut() {
                        *v = 0.95 * *v + normal.sample(&mut self.rng);
                    }
                }
                pose.joint_angles.clone_from(&self.state);
                self.skeleton.clamp_to_limits(&mut pose);
                self.state.clone_from(&pose.joint_angles);
            }
        }
        pose
    }
}

/// Noisy detections of the 18 joints in every camera. Joints outside the field
/// of view, or pushed off the image by noise, are left out; the rest are
/// dropped independently with probability `dropout`.
pub fn synth_detections(
    rig: &Rig,
    skeleton: &Skeleton,
    pose: &PoseVector,
    noise_sigma: f64,
    dropout: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Detection2D>> {
    let posed = skeleton.forward_kinematics(pose)?;
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::invalid("noise", e.to_string()))?;
    let mut out = Vec::new();
    for cam in rig.cameras() {
        for label in JOINT_LABELS {
            let joint = posed.positions[skeleton.joint_bone(label)?];
            // Draw noise and dropout unconditionally so the stream stays aligned.
            let jitter = Vector2::new(noise.sample(rng), noise.sample(rng));
            let dropped = rng.random::<f64>() < dropout;
            let Ok(pixel) = cam.project(&joint) else {
                continue;
            };
            let pixel = pixel + jitter;
            if dropped || !cam.in_bounds(&pixel) {
                continue;
            }
            out.push(Detection2D {
                camera: cam.label,
                joint_label: label.to_string(),
                pixel,
                confidence: 1.0,
            });
        }
    }
    Ok(out)
}

/// Builds a bundle from already resolved actors.
pub fn synth_with(actors: SynthActors, spec: &SynthSpec) -> Result<SynthBundle> {
    spec.validate()?;
    let base = initial_pose(&actors.skeleton, &actors.rig, spec.height);
    let mut motion = MotionGenerator::new(&actors.skeleton, base, spec.motion.clone(), spec.rng_seed);
    let gt_poses: Vec<PoseVector> = (0..spec.frames).map(|t| motion.pose(t)).collect();
    let observations = gt_poses
        .par_iter()
        .enumerate()
        .map(|(t, pose)| {
            let mut rng = frame_rng(spec.rng_seed, t);
            let detections = synth_detections(
                &actors.rig,
                &actors.skeleton,
                pose,
                spec.detection_noise_sigma,
                spec.detection_dropout,
                &mut rng,
            )?;
            let images = if spec.render_images {
                render_frame(&actors, pose)?
            } else {
                BTreeMap::new()
            };
            Ok(FrameObservation {
                frame_index: t,
                images,
                detections,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthBundle {
        actors,
        gt_poses,
        observations,
    })
}

/// Renders both views of a pose at full resolution.
pub fn render_frame(actors: &SynthActors, pose: &PoseVector) -> Result<BTreeMap<CameraLabel, RgbImage>> {
    let blobs = actors.body.pose_blobs(&actors.skeleton, pose)?;
    Ok(actors
        .rig
        .cameras()
        .iter()
        .map(|cam| (cam.label, render_view(cam, &blobs, actors.body.background_color())))
        .collect())
}

/// Resolves `spec` against `base` and generates the bundle.
pub fn synth_sequence(spec: &SynthSpec, base: &Path) -> Result<SynthBundle> {
    spec.validate()?;
    let actors = spec.resolve(base)?;
    synth_with(actors, spec)
}

/// Index of a bundle directory; every path is relative to the directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub calibration: PathBuf,
    pub skeleton: PathBuf,
    pub body_model: PathBuf,
    pub gt_poses: PathBuf,
    pub detections: PathBuf,
    pub frames: Vec<ManifestFrame>,
    pub spec: SynthSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFrame {
    pub frame: usize,
    #[serde(default)]
    pub images: BTreeMap<CameraLabel, PathBuf>,
}

impl SynthBundle {
    /// Writes PNG views, JSONL poses and detections, the actors and `manifest.json`.
    pub fn write(&self, dir: &Path, spec: &SynthSpec) -> Result<BundleManifest> {
        let mut frames = Vec::with_capacity(self.observations.len());
        for obs in &self.observations {
            let mut images = BTreeMap::new();
            for (label, img) in &obs.images {
                let rel = PathBuf::from(format!("images/frame_{:05}_{label}.png", obs.frame_index));
                img.save_png(&dir.join(&rel))?;
                images.insert(*label, rel);
            }
            frames.push(ManifestFrame {
                frame: obs.frame_index,
                images,
            });
        }
        let manifest = BundleManifest {
            calibration: "calibration.json".into(),
            skeleton: "skeleton.json".into(),
            body_model: "body.json".into(),
            gt_poses: "gt_poses.jsonl".into(),
            detections: "detections.jsonl".into(),
            frames,
            spec: SynthSpec {
                skeleton: None,
                body_model: None,
                calibration: None,
                ..spec.clone()
            },
        };
        self.actors.rig.save(&dir.join(&manifest.calibration))?;
        self.actors.skeleton.save(&dir.join(&manifest.skeleton))?;
        self.actors.body.save(&dir.join(&manifest.body_model))?;
        save_poses(&dir.join(&manifest.gt_poses), self.gt_poses.iter().enumerate())?;
        save_detections(
            &dir.join(&manifest.detections),
            self.observations
                .iter()
                .map(|o| (o.frame_index, o.detections.as_slice())),
        )?;
        write_json(&dir.join("manifest.json"), &manifest)?;
        Ok(manifest)
    }

    /// Reads a bundle written by [`write`](Self::write). Images come back
    /// 8-bit quantized.
    pub fn read(dir: &Path) -> Result<(Self, BundleManifest)> {
        let manifest: BundleManifest = read_json(&dir.join("manifest.json"))?;
        let actors = SynthActors {
            skeleton: Skeleton::load(&dir.join(&manifest.skeleton))?,
            body: GaussianBodyModel::load(&dir.join(&manifest.body_model))?,
            rig: Rig::load(&dir.join(&manifest.calibration))?,
        };
        let gt_poses = load_poses(&dir.join(&manifest.gt_poses))?
            .into_iter()
            .map(|(_, p)| p)
            .collect();
        let mut detections = load_detections(&dir.join(&manifest.detections))?;
        let observations = manifest
            .frames
            .iter()
            .map(|f| {
                let images = f
                    .images
                    .iter()
                    .map(|(label, rel)| Ok((*label, RgbImage::load_png(&dir.join(rel))?)))
                    .collect::<Result<_>>()?;
                Ok(FrameObservation {
                    frame_index: f.frame,
                    images,
                    detections: detections.remove(&f.frame).unwrap_or_default(),
                })
            })
            .collect::<Result<_>>()?;
        Ok((
            SynthBundle {
                actors,
                gt_poses,
                observations,
            },
            manifest,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            frames: 3,
            image_size: [96, 80],
            ..Default::default()
        }
    }

    #[test]
    fn rest_motion_without_noise() {
        let spec = SynthSpec {
            motion: Motion::Rest,
            ..small_spec()
        };
        let bundle = synth_sequence(&spec, Path::new(".")).unwrap();
        assert!(bundle.gt_poses.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(bundle.observations[0].images, bundle.observations[2].images);
        let fk = bundle.actors.skeleton.forward_kinematics(&bundle.gt_poses[0]).unwrap();
        for det in &bundle.observations[0].detections {
            let cam = bundle.actors.rig.camera(det.camera).unwrap();
            let b = bundle.actors.skeleton.joint_bone(&det.joint_label).unwrap();
            assert_eq!(cam.project(&fk.positions[b]).unwrap(), det.pixel);
        }
        assert_eq!(bundle.observations[0].detections.len(), 36);
    }

    #[test]
    fn seeded_bundles_are_identical() {
        let spec = SynthSpec {
            detection_noise_sigma: 2.0,
            detection_dropout: 0.2,
            motion: Motion::RandomWalk { amplitude: 0.3 },
            rng_seed: 11,
            ..small_spec()
        };
        let a = synth_sequence(&spec, Path::new(".")).unwrap();
        let b = synth_sequence(&spec, Path::new(".")).unwrap();
        assert_eq!(a.gt_poses, b.gt_poses);
        assert_eq!(a.observations, b.observations);
        let c = synth_sequence(&SynthSpec { rng_seed: 12, ..spec }, Path::new(".")).unwrap();
        assert_ne!(a.observations[1].detections, c.observations[1].detections);
    }

    #[test]
    fn walk_stays_inside_limits() {
        let sk = Skeleton::default_humanoid(1.75);
        let rig = Rig::head_mounted(64, 64);
        let mut gen = MotionGenerator::new(&sk, initial_pose(&sk, &rig, 1.75), Motion::default(), 0);
        for t in 0..80 {
            let p = gen.pose(t);
            assert!(sk.clamp_report(&p).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn spec_validation() {
        assert!(SynthSpec {
            frames: 0,
            ..small_spec()
        }
        .validate()
        .is_err());
        assert!(SynthSpec {
            detection_dropout: 1.0,
            ..small_spec()
        }
        .validate()
        .is_err());
        assert!(SynthSpec {
            detection_noise_sigma: -1.0,
            ..small_spec()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            frames: 2,
            detection_noise_sigma: 1.0,
            ..small_spec()
        };
        let bundle = synth_sequence(&spec, Path::new(".")).unwrap();
        let manifest = bundle.write(dir.path(), &spec).unwrap();
        let (back, manifest_back) = SynthBundle::read(dir.path()).unwrap();
        assert_eq!(manifest, manifest_back);
        assert_eq!(back.gt_poses, bundle.gt_poses);
        assert_eq!(back.actors.rig, bundle.actors.rig);
        assert_eq!(back.actors.skeleton, bundle.actors.skeleton);
        for (a, b) in back.observations.iter().zip(&bundle.observations) {
            assert_eq!(a.detections, b.detections);
            for (label, img) in &b.images {
                assert_eq!(a.images[label], img.quantized());
            }
        }
    }
}
