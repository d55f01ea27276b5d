use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use serde::{Deserialize, Serialize};

use egomocap::camera::{CameraLabel, Rig};
use egomocap::datatools::{augment_batch, evaluate_sequence, write_annotated, BatchManifest};
use egomocap::energy::{EnergyBreakdown, EnergyWeights, Scene};
use egomocap::io::{read_json, write_json, write_jsonl};
use egomocap::overlay::render_overlay;
use egomocap::raster::RgbImage;
use egomocap::skeleton::{load_poses, save_poses, PoseVector, Skeleton};
use egomocap::solver::{initial_pose, track_sequence, SolverConfig, Termination, TrackResult};
use egomocap::synth::{synth_sequence, SynthBundle, SynthSpec};

use crate::Flags;

fn load_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<(T, PathBuf)> {
    let config = read_json(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((config, base))
}

fn load_skeleton(base: &Path, path: &Option<PathBuf>, height: f64) -> Result<Skeleton> {
    Ok(match path {
        Some(p) => Skeleton::load(&base.join(p))?,
        None => Skeleton::default_humanoid(height),
    })
}

fn default_height() -> f64 {
    1.75
}

#[derive(Debug, Deserialize)]
struct SynthConfig {
    #[serde(flatten)]
    spec: SynthSpec,
    /// Bundle directory.
    output: PathBuf,
}

pub fn synth(config: &Path, flags: &Flags) -> Result<()> {
    let (mut cfg, base): (SynthConfig, _) = load_config(config)?;
    if let Some(seed) = flags.seed {
        cfg.spec.rng_seed = seed;
    }
    let bundle = synth_sequence(&cfg.spec, &base)?;
    let out = base.join(&cfg.output);
    bundle.write(&out, &cfg.spec)?;
    info!("wrote {} frames to {}", cfg.spec.frames, out.display());
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrackConfig {
    /// Bundle directory holding `manifest.json`.
    input: PathBuf,
    /// Output pose file (JSONL).
    output: PathBuf,
    /// Per-frame solver summary (JSON); next to `output` by default.
    #[serde(default)]
    summary: Option<PathBuf>,
    /// Trace file used with `--trace`; next to `output` by default.
    #[serde(default)]
    trace_output: Option<PathBuf>,
    /// Pose file whose first record initializes frame 0; the rest pose
    /// below the rig otherwise.
    #[serde(default)]
    initial_pose: Option<PathBuf>,
    /// Subject height for the default initialization; the bundle's value if absent.
    #[serde(default)]
    height: Option<f64>,
    #[serde(default)]
    solver: SolverConfig,
    #[serde(default)]
    weights: EnergyWeights,
}

#[derive(Debug, Serialize)]
struct FrameSummary {
    frame: usize,
    iterations: usize,
    evaluations: usize,
    converged: bool,
    termination: Termination,
    energy: EnergyBreakdown,
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn write_track_outputs(result: &TrackResult, cfg: &TrackConfig, base: &Path, trace: bool) -> Result<()> {
    let output = base.join(&cfg.output);
    save_poses(&output, result.poses())?;
    let summary: Vec<FrameSummary> = result
        .frames
        .iter()
        .map(|f| FrameSummary {
            frame: f.frame_index,
            iterations: f.iterations,
            evaluations: f.evaluations,
            converged: f.converged,
            termination: f.termination,
            energy: f.energy.clone(),
        })
        .collect();
    let summary_path = cfg
        .summary
        .as_ref()
        .map_or_else(|| sibling(&output, "_summary.json"), |p| base.join(p));
    write_json(&summary_path, &summary)?;
    if trace {
        let trace_path = cfg
            .trace_output
            .as_ref()
            .map_or_else(|| sibling(&output, "_trace.jsonl"), |p| base.join(p));
        write_jsonl(&trace_path, result.frames.iter().flat_map(|f| f.trace.iter()))?;
    }
    Ok(())
}

pub fn track(config: &Path, flags: &Flags) -> Result<()> {
    let (cfg, base): (TrackConfig, _) = load_config(config)?;
    let mut solver = cfg.solver.clone();
    solver.trace = flags.trace;
    let (bundle, manifest) = SynthBundle::read(&base.join(&cfg.input))?;
    let actors = bundle.actors;
    let height = cfg.height.unwrap_or(manifest.spec.height);
    let init = match &cfg.initial_pose {
        Some(p) => match load_poses(&base.join(p))?.into_iter().next() {
            Some((_, pose)) => pose,
            None => bail!("{} holds no pose", p.display()),
        },
        None => initial_pose(&actors.skeleton, &actors.rig, height),
    };
    let scene = Scene::new(actors.rig, actors.skeleton, actors.body, cfg.weights.clone())?;
    match track_sequence(&bundle.observations, &init, &scene, &solver) {
        Ok(result) => {
            write_track_outputs(&result, &cfg, &base, flags.trace)?;
            let converged = result.frames.iter().filter(|f| f.converged).count();
            info!("tracked {} frames, {converged} converged", result.frames.len());
            Ok(())
        }
        Err(aborted) => {
            write_track_outputs(&aborted.completed, &cfg, &base, flags.trace)?;
            Err(anyhow::Error::new(aborted))
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvaluateConfig {
    predicted: PathBuf,
    ground_truth: PathBuf,
    calibration: PathBuf,
    #[serde(default)]
    skeleton: Option<PathBuf>,
    #[serde(default = "default_height")]
    height: f64,
    /// PCK radius in pixels; 20 px scaled from a 1280-pixel-wide image by default.
    #[serde(default)]
    threshold_px: Option<f64>,
    /// Report file (JSON).
    output: PathBuf,
}

fn by_frame(path: &Path) -> Result<BTreeMap<usize, PoseVector>> {
    let mut out = BTreeMap::new();
    for (frame, pose) in load_poses(path)? {
        if out.insert(frame, pose).is_some() {
            bail!("{} lists frame {frame} twice", path.display());
        }
    }
    Ok(out)
}

pub fn evaluate(config: &Path, _flags: &Flags) -> Result<()> {
    let (cfg, base): (EvaluateConfig, _) = load_config(config)?;
    let rig = Rig::load(&base.join(&cfg.calibration))?;
    let skeleton = load_skeleton(&base, &cfg.skeleton, cfg.height)?;
    let predicted = by_frame(&base.join(&cfg.predicted))?;
    let gt = by_frame(&base.join(&cfg.ground_truth))?;
    if predicted.len() != gt.len() {
        return Err(egomocap::Error::LengthMismatch(predicted.len(), gt.len()).into());
    }
    if predicted.keys().ne(gt.keys()) {
        bail!("predicted and ground-truth files cover different frames");
    }
    let threshold = match cfg.threshold_px {
        Some(t) => t,
        None => {
            let width = rig.cameras()[0].intrinsics.image_size().0;
            20.0 * width as f64 / 1280.0
        }
    };
    let pred: Vec<PoseVector> = predicted.into_values().collect();
    let truth: Vec<PoseVector> = gt.into_values().collect();
    let report = evaluate_sequence(&pred, &truth, &skeleton, &rig, threshold)?;
    write_json(&base.join(&cfg.output), &report)?;
    info!(
        "PCK {:.2}, 3D error {:.4} ± {:.4} m",
        report.pck, report.error3d_mean_m, report.error3d_std_m
    );
    Ok(())
}

#[derive(Debug, Deserialize)]
struct AugmentConfig {
    #[serde(flatten)]
    manifest: BatchManifest,
    /// Output directory for images and `annotations.jsonl`.
    output: PathBuf,
}

pub fn augment(config: &Path, flags: &Flags) -> Result<()> {
    let (mut cfg, base): (AugmentConfig, _) = load_config(config)?;
    if let Some(seed) = flags.seed {
        cfg.manifest.augment.rng_seed = seed;
    }
    let frames = augment_batch(&cfg.manifest, &base)?;
    let out = base.join(&cfg.output);
    write_annotated(&frames, &out).with_context(|| format!("writing {}", out.display()))?;
    info!("augmented {} images into {}", frames.len(), out.display());
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct OverlayItem {
    frame: usize,
    camera: CameraLabel,
    /// Image to draw on; a black image when absent.
    #[serde(default)]
    image: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct OverlayConfig {
    calibration: PathBuf,
    #[serde(default)]
    skeleton: Option<PathBuf>,
    #[serde(default = "default_height")]
    height: f64,
    /// Pose file (JSONL).
    poses: PathBuf,
    items: Vec<OverlayItem>,
    /// Output directory; files are named `overlay_<frame>_<camera>.png`.
    output: PathBuf,
}

pub fn overlay(config: &Path, _flags: &Flags) -> Result<()> {
    let (cfg, base): (OverlayConfig, _) = load_config(config)?;
    let rig = Rig::load(&base.join(&cfg.calibration))?;
    let skeleton = load_skeleton(&base, &cfg.skeleton, cfg.height)?;
    let poses = by_frame(&base.join(&cfg.poses))?;
    let out = base.join(&cfg.output);
    for item in &cfg.items {
        let Some(pose) = poses.get(&item.frame) else {
            bail!("no pose for frame {}", item.frame);
        };
        let image = match &item.image {
            Some(p) => RgbImage::load_png(&base.join(p))?,
            None => {
                let cam = rig
                    .camera(item.camera)
                    .with_context(|| format!("rig has no {} camera", item.camera))?;
                let (w, h) = cam.intrinsics.image_size();
                RgbImage::filled(w, h, [0.0; 3])
            }
        };
        let drawn = render_overlay(&image, pose, &skeleton, &rig, item.camera)?;
        drawn.save_png(&out.join(format!("overlay_{:05}_{}.png", item.frame, item.camera)))?;
    }
    Ok(())
}
