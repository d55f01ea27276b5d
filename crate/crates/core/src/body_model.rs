//! Volumetric appearance model: colored isotropic Gaussians rigidly attached
//! to bones, rendered by depth-sorted transmittance along rays.
//!
//! For blob `i` with density `a`, std `σ` and perpendicular distance `d` from
//! the ray, the integrated density along the full line is
//! `ρ = a·σ·√(2π)·exp(−d²/(2σ²))`. Blobs in front of the origin are ordered by
//! their closest-approach depth `t` (ties broken by index) and contribute
//! visibility `v_i = (1 − e^{−ρ_i})·∏_{j before i} e^{−ρ_j}`. The ray color is
//! `Σ v_i·c_i + (1 − Σ v_i)·background`.

use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{FisheyeCamera, Ray};
use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::raster::{Rgb, RgbImage};
use crate::skeleton::{PoseVector, PosedSkeleton, Skeleton};

/// Blobs whose integrated density falls below this are skipped.
pub const DENSITY_CUTOFF: f64 = 1e-8;

const SQRT_TAU: f64 = 2.506_628_274_631_000_7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianBlob {
    pub bone: usize,
    #[serde(rename = "offset")]
    pub local_offset: Vector3<f64>,
    pub sigma: f64,
    pub density: f64,
    pub color: Rgb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianBodyModel {
    blobs: Vec<GaussianBlob>,
    background_color: Rgb,
}

impl GaussianBodyModel {
    pub fn new(blobs: Vec<GaussianBlob>, background_color: Rgb) -> Result<Self> {
        let model = GaussianBodyModel {
            blobs,
            background_color,
        };
        model.validate()?;
        Ok(model)
    }

    /// A model with no blobs renders pure background everywhere. Only useful
    /// as a degenerate baseline; [`new`](Self::new) requires at least one blob.
    pub fn empty(background_color: Rgb) -> Self {
        GaussianBodyModel {
            blobs: Vec::new(),
            background_color,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.blobs.is_empty() {
            return Err(Error::invalid("body model", "no blobs"));
        }
        let unit = |c: &Rgb| c.iter().all(|v| (0.0..=1.0).contains(v));
        for (i, b) in self.blobs.iter().enumerate() {
            if !(b.sigma > 0.0) || !(b.density >= 0.0) || !unit(&b.color) {
                return Err(Error::invalid(
                    "body model",
                    format!("blob {i} needs sigma > 0, density >= 0, color in [0,1]"),
                ));
            }
        }
        if !unit(&self.background_color) {
            return Err(Error::invalid("body model", "background color outside [0,1]"));
        }
        Ok(())
    }

    pub fn blobs(&self) -> &[GaussianBlob] {
        &self.blobs
    }

    pub fn background_color(&self) -> Rgb {
        self.background_color
    }

    /// Checks every blob's bone index against the skeleton.
    pub fn check_skeleton(&self, skeleton: &Skeleton) -> Result<()> {
        let n = skeleton.bones().len();
        match self.blobs.iter().find(|b| b.bone >= n) {
            Some(b) => Err(Error::invalid(
                "body model",
                format!("blob refers to bone {} but the skeleton has {n}", b.bone),
            )),
            None => Ok(()),
        }
    }

    /// Places the blobs in the world for a given pose.
    pub fn pose_blobs(&self, skeleton: &Skeleton, pose: &PoseVector) -> Result<Vec<WorldBlob>> {
        self.check_skeleton(skeleton)?;
        let posed = skeleton.forward_kinematics(pose)?;
        Ok(self.place(&posed))
    }

    /// Like [`pose_blobs`](Self::pose_blobs) for an already posed skeleton.
    pub fn place(&self, posed: &PosedSkeleton) -> Vec<WorldBlob> {
        self.blobs
            .iter()
            .map(|b| {
                WorldBlob::new(
                    posed.transform_point(b.bone, &b.local_offset),
                    b.sigma,
                    b.density,
                    Vector3::from(b.color),
                )
            })
            .collect()
    }

    /// Deterministic default actor: blobs spaced along every bone segment
    /// (bone origin to each child origin) with radius proportional to segment
    /// length, one blob on each leaf bone, one color per limb.
    pub fn default_body(skeleton: &Skeleton, height: f64) -> Result<Self> {
        if !(1.2..=2.2).contains(&height) {
            return Err(Error::HeightOutOfRange(height));
        }
        let scale = height / 1.75;
        let bones = skeleton.bones();
        let children = |b: usize| (0..bones.len()).filter(move |&c| bones[c].parent == Some(b));
        let limbs: Vec<usize> = (0..bones.len())
            .map(|mut b| {
                while let Some(p) = bones[b].parent {
                    if children(p).count() > 1 {
                        break;
                    }
                    b = p;
                }
                b
            })
            .collect();
        let mut palette_order: Vec<usize> = Vec::new();
        let mut blobs = Vec::new();
        for (b, &limb) in limbs.iter().enumerate() {
            let slot = match palette_order.iter().position(|&l| l == limb) {
                Some(i) => i,
                None => {
                    palette_order.push(limb);
                    palette_order.len() - 1
                }
            };
            let color = PALETTE[slot % PALETTE.len()];
            let mut push = |offset: Vector3<f64>, sigma: f64| {
                blobs.push(GaussianBlob {
                    bone: b,
                    local_offset: offset,
                    sigma,
                    density: 2.5 / (sigma * SQRT_TAU),
                    color,
                });
            };
            let mut any_child = false;
            for c in children(b) {
                any_child = true;
                let segment = bones[c].offset;
                let length = segment.norm();
                if length < 1e-9 {
                    continue;
                }
                let sigma = (0.25 * length).clamp(0.035 * scale, 0.07 * scale);
                let count = (length / (1.5 * sigma)).ceil().max(1.0) as usize;
                for i in 0..count {
                    push(segment * ((i as f64 + 0.5) / count as f64), sigma);
                }
            }
            if !any_child {
                push(Vector3::zeros(), 0.05 * scale);
            }
        }
        GaussianBodyModel::new(blobs, [0.2, 0.2, 0.2])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let model: GaussianBodyModel = read_json(path)?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

const PALETTE: [Rgb; 8] = [
    [0.85, 0.25, 0.2],
    [0.2, 0.55, 0.85],
    [0.95, 0.8, 0.3],
    [0.3, 0.8, 0.35],
    [0.75, 0.35, 0.8],
    [0.95, 0.55, 0.15],
    [0.25, 0.8, 0.8],
    [0.9, 0.6, 0.7],
];

/// A blob placed in the rig frame.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldBlob {
    pub center: Vector3<f64>,
    pub color: Vector3<f64>,
    sigma: f64,
    density: f64,
    /// Squared [`reach`](Self::reach), padded; negative if the blob never
    /// reaches the cutoff.
    reach2: f64,
}

impl WorldBlob {
    pub fn new(center: Vector3<f64>, sigma: f64, density: f64, color: Vector3<f64>) -> Self {
        let peak = density * sigma * SQRT_TAU;
        let reach2 = if peak >= DENSITY_CUTOFF {
            2.0 * sigma * sigma * (peak / DENSITY_CUTOFF).ln() * (1.0 + 1e-9)
        } else {
            -1.0
        };
        WorldBlob {
            center,
            color,
            sigma,
            density,
            reach2,
        }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn density(&self) -> f64 {
        self.density
    }

    /// Distance from the center beyond which a ray's integrated density falls
    /// below [`DENSITY_CUTOFF`]; `None` if the blob never reaches the cutoff.
    pub fn reach(&self) -> Option<f64> {
        (self.reach2 >= 0.0).then(|| self.reach2.sqrt())
    }

    /// Closest-approach depth along the ray and integrated density, or `None`
    /// if the blob is behind the origin or below the density cutoff.
    fn intersect(&self, ray: &Ray) -> Option<(f64, f64, Vector3<f64>)> {
        let w = self.center - ray.origin;
        let t = w.dot(&ray.direction);
        if t <= 0.0 {
            return None;
        }
        let perp = w - ray.direction * t;
        let d2 = perp.norm_squared();
        if d2 > self.reach2 {
            return None;
        }
        let rho = self.density * self.sigma * SQRT_TAU * (-d2 / (2.0 * self.sigma * self.sigma)).exp();
        (rho >= DENSITY_CUTOFF).then_some((t, rho, perp))
    }
}

/// Contribution of one blob to a ray.
#[derive(Clone, Debug, PartialEq)]
pub struct BlobHit {
    pub blob: usize,
    pub visibility: f64,
    /// `∂color/∂center`: row = color channel, column = coordinate.
    pub color_gradient: Matrix3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RaySample {
    pub color: Vector3<f64>,
    /// Blobs with non-zero visibility, front to back.
    pub hits: Vec<BlobHit>,
}

impl RaySample {
    pub fn visibility(&self, blob: usize) -> f64 {
        self.hits.iter().find(|h| h.blob == blob).map_or(0.0, |h| h.visibility)
    }

    pub fn total_visibility(&self) -> f64 {
        self.hits.iter().map(|h| h.visibility).sum()
    }
}

/// Reusable buffer for the per-ray sort.
#[derive(Default)]
pub struct MarchScratch {
    active: Vec<(f64, usize, f64, Vector3<f64>)>,
    front: Vec<(f64, f64)>,
}

fn collect_active(blobs: &[WorldBlob], candidates: Option<&[usize]>, ray: &Ray, scratch: &mut MarchScratch) {
    scratch.active.clear();
    let mut push = |i: usize| {
        if let Some((t, rho, perp)) = blobs[i].intersect(ray) {
            scratch.active.push((t, i, rho, perp));
        }
    };
    match candidates {
        Some(list) => list.iter().for_each(|&i| push(i)),
        None => (0..blobs.len()).for_each(push),
    }
    scratch.active.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
    });
}

/// Cone of ray directions from a common origin.
#[derive(Clone, Debug, PartialEq)]
pub struct RayCone {
    pub origin: Vector3<f64>,
    pub axis: Vector3<f64>,
    pub half_angle: f64,
}

impl RayCone {
    /// Smallest cone around the mean direction containing all `rays`, which
    /// must share one origin.
    pub fn bounding(rays: &[Ray]) -> Option<Self> {
        let first = rays.first()?;
        let axis = rays
            .iter()
            .fold(Vector3::zeros(), |acc, r| acc + r.direction)
            .try_normalize(1e-12)?;
        let half_angle = rays
            .iter()
            .map(|r| r.direction.dot(&axis).clamp(-1.0, 1.0).acos())
            .fold(0.0, f64::max);
        Some(RayCone {
            origin: first.origin,
            axis,
            half_angle,
        })
    }

    /// Indices of blobs that may reach the cutoff density on some ray of the
    /// cone. Conservative: a blob left out contributes to none of the rays.
    pub fn candidates(&self, blobs: &[WorldBlob]) -> Vec<usize> {
        let mut out = Vec::new();
        self.candidates_into(blobs, &mut out);
        out
    }

    pub fn candidates_into(&self, blobs: &[WorldBlob], out: &mut Vec<usize>) {
        // Slack on the cosine comparison, far above its rounding error.
        const COS_SLACK: f64 = 1e-9;
        out.clear();
        if self.half_angle >= std::f64::consts::FRAC_PI_2 {
            out.extend(0..blobs.len());
            return;
        }
        let (sin_b, cos_b) = self.half_angle.sin_cos();
        for (i, blob) in blobs.iter().enumerate() {
            let Some(reach) = blob.reach() else { continue };
            let w = blob.center - self.origin;
            let dist = w.norm();
            if dist <= reach {
                out.push(i);
                continue;
            }
            // Keep iff the off-axis angle is at most half_angle + asin(reach / dist).
            let sin_r = reach / dist;
            let cos_r = (1.0 - sin_r * sin_r).sqrt();
            let cos_limit = cos_b * cos_r - sin_b * sin_r;
            if w.dot(&self.axis) / dist >= cos_limit - COS_SLACK {
                out.push(i);
            }
        }
    }
}

/// Expected color only; the fast path used for rendering.
pub fn ray_color(
    blobs: &[WorldBlob],
    background: &Vector3<f64>,
    ray: &Ray,
    scratch: &mut MarchScratch,
) -> Vector3<f64> {
    ray_color_among(blobs, None, background, ray, scratch)
}

/// [`ray_color`] restricted to `candidates` (all blobs if `None`). The result
/// is unchanged as long as every blob reaching the ray is a candidate.
pub fn ray_color_among(
    blobs: &[WorldBlob],
    candidates: Option<&[usize]>,
    background: &Vector3<f64>,
    ray: &Ray,
    scratch: &mut MarchScratch,
) -> Vector3<f64> {
    collect_active(blobs, candidates, ray, scratch);
    // Same accumulation order as `ray_march_with`, so both paths agree bitwise.
    let mut transmittance = 1.0;
    let mut color = *background;
    for &(_, i, rho, _) in &scratch.active {
        let absorb = (-rho).exp();
        color += (blobs[i].color - background) * ((1.0 - absorb) * transmittance);
        transmittance *= absorb;
    }
    color
}

/// Expected color, per-blob visibilities and closed-form color gradients with
/// respect to blob centers (depth order held fixed).
pub fn ray_march(blobs: &[WorldBlob], background: &Vector3<f64>, ray: &Ray) -> RaySample {
    let mut scratch = MarchScratch::default();
    ray_march_with(blobs, background, ray, &mut scratch)
}

pub fn ray_march_with(
    blobs: &[WorldBlob],
    background: &Vector3<f64>,
    ray: &Ray,
    scratch: &mut MarchScratch,
) -> RaySample {
    ray_march_among(blobs, None, background, ray, scratch)
}

/// [`ray_march_with`] restricted to `candidates`, as for [`ray_color_among`].
pub fn ray_march_among(
    blobs: &[WorldBlob],
    candidates: Option<&[usize]>,
    background: &Vector3<f64>,
    ray: &Ray,
    scratch: &mut MarchScratch,
) -> RaySample {
    collect_active(blobs, candidates, ray, scratch);
    let active = &scratch.active;
    let mut hits = Vec::with_capacity(active.len());
    let mut front = Vec::with_capacity(active.len());
    let mut transmittance = 1.0;
    let mut color = *background;
    let mut total = 0.0;
    // First pass: visibilities and color. Capping by the remaining budget keeps
    // the rounded running sum of visibilities at or below one.
    for &(_, i, rho, _) in active {
        let absorb = (-rho).exp();
        let v = ((1.0 - absorb) * transmittance).min(1.0 - total);
        total += v;
        color += (blobs[i].color - background) * v;
        hits.push(BlobHit {
            blob: i,
            visibility: v,
            color_gradient: Matrix3::zeros(),
        });
        front.push(transmittance);
        transmittance *= absorb;
    }
    // Second pass, back to front: dC/dρ_i = e^{−ρ_i}·T_i·(c_i − bg) − Σ_{k>i} v_k·(c_k − bg).
    let mut behind = Vector3::zeros();
    for (k, &(_, i, rho, perp)) in active.iter().enumerate().rev() {
        let blob = &blobs[i];
        let shade = blob.color - background;
        let v = hits[k].visibility;
        let absorb = (-rho).exp();
        let d_color_d_rho = shade * (absorb * front[k]) - behind;
        // ∂ρ/∂center = −ρ·perp/σ²
        let d_rho_d_center = perp * (-rho / (blob.sigma * blob.sigma));
        hits[k].color_gradient = d_color_d_rho * d_rho_d_center.transpose();
        behind += shade * v;
    }
    hits.retain(|h| h.visibility > 0.0);
    RaySample { color, hits }
}

/// Squared distance between the expected color of `ray` and `target`. With
/// `grads`, also adds the gradient of that squared distance with respect to
/// every blob center (depth order held fixed). Agrees with [`ray_march_among`]
/// but never materializes the per-blob color Jacobians.
pub fn ray_residual(
    blobs: &[WorldBlob],
    candidates: Option<&[usize]>,
    background: &Vector3<f64>,
    ray: &Ray,
    target: &Vector3<f64>,
    scratch: &mut MarchScratch,
    grads: Option<&mut [Vector3<f64>]>,
) -> f64 {
    collect_active(blobs, candidates, ray, scratch);
    let MarchScratch { active, front } = scratch;
    front.clear();
    let mut transmittance = 1.0;
    let mut color = *background;
    for &(_, i, rho, _) in active.iter() {
        let absorb = (-rho).exp();
        color += (blobs[i].color - background) * ((1.0 - absorb) * transmittance);
        front.push((transmittance, absorb));
        transmittance *= absorb;
    }
    let residual = color - target;
    if let Some(grads) = grads {
        let twice = residual * 2.0;
        let mut behind = 0.0;
        for (k, &(_, i, rho, perp)) in active.iter().enumerate().rev() {
            let blob = &blobs[i];
            let shade = (blob.color - background).dot(&twice);
            let (t_front, absorb) = front[k];
            let d_rho = shade * absorb * t_front - behind;
            grads[i] += perp * (-d_rho * rho / (blob.sigma * blob.sigma));
            behind += shade * (1.0 - absorb) * t_front;
        }
    }
    residual.norm_squared()
}

/// Renders one camera view at full resolution. Pixels whose rays fall outside
/// the field of view are black.
pub fn render_view(camera: &FisheyeCamera, blobs: &[WorldBlob], background: Rgb) -> RgbImage {
    const TILE: u32 = 16;
    let (width, height) = camera.intrinsics.image_size();
    let background = Vector3::from(background);
    let origins: Vec<(u32, u32)> = (0..height)
        .step_by(TILE as usize)
        .flat_map(|y| (0..width).step_by(TILE as usize).map(move |x| (x, y)))
        .collect();
    let tiles: Vec<Vec<(u32, u32, Rgb)>> = origins
        .into_par_iter()
        .map_init(MarchScratch::default, |scratch, (x0, y0)| {
            let mut rays = Vec::new();
            let mut pixels = Vec::new();
            for y in y0..(y0 + TILE).min(height) {
                for x in x0..(x0 + TILE).min(width) {
                    match camera.unproject(&Vector2::new(x as f64, y as f64)) {
                        Ok(ray) => rays.push((x, y, ray)),
                        Err(_) => pixels.push((x, y, [0.0; 3])),
                    }
                }
            }
            let bundle: Vec<Ray> = rays.iter().map(|r| r.2).collect();
            if let Some(cone) = RayCone::bounding(&bundle) {
                let candidates = cone.candidates(blobs);
                for (x, y, ray) in &rays {
                    let c = ray_color_among(blobs, Some(&candidates), &background, ray, scratch);
                    pixels.push((*x, *y, c.into()));
                }
            }
            pixels
        })
        .collect();
    let mut image = RgbImage::filled(width, height, [0.0; 3]);
    for (x, y, c) in tiles.into_iter().flatten() {
        image.set(x, y, c);
    }
    image
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob_at(center: Vector3<f64>, sigma: f64, density: f64, color: [f64; 3]) -> WorldBlob {
        WorldBlob::new(center, sigma, density, Vector3::from(color))
    }

    fn z_ray() -> Ray {
        Ray {
            origin: Vector3::zeros(),
            direction: Vector3::z(),
        }
    }

    #[test]
    fn empty_scene_is_background() {
        let bg = Vector3::new(0.1, 0.2, 0.3);
        let s = ray_march(&[], &bg, &z_ray());
        assert_eq!(s.color, bg);
        assert!(s.hits.is_empty());
    }

    #[test]
    fn single_centered_blob() {
        let blobs = [blob_at(Vector3::new(0.0, 0.0, 2.0), 0.1, 1.0, [1.0, 0.0, 0.0])];
        let s = ray_march(&blobs, &Vector3::zeros(), &z_ray());
        // ρ = 0.1·√(2π) = 0.250663; v = 1 − e^{−ρ}
        assert!((s.visibility(0) - 0.221_715_256_4).abs() < 1e-9, "{}", s.visibility(0));
        assert!((s.color.x - s.visibility(0)).abs() < 1e-15);
    }

    #[test]
    fn nearer_blob_occludes() {
        let a = blob_at(Vector3::new(0.0, 0.0, 1.0), 0.1, 1.0, [1.0, 0.0, 0.0]);
        let b = blob_at(Vector3::new(0.0, 0.0, 2.0), 0.1, 1.0, [0.0, 1.0, 0.0]);
        let s = ray_march(&[b, a], &Vector3::zeros(), &z_ray());
        let rho = 0.1 * SQRT_TAU;
        let near = 1.0 - (-rho).exp();
        assert!((s.visibility(1) - near).abs() < 1e-15);
        assert!((s.visibility(0) - near * (-rho).exp()).abs() < 1e-15);
        assert!(s.total_visibility() <= 1.0);
        assert_eq!(s.hits[0].blob, 1);
    }

    #[test]
    fn blobs_behind_origin_are_ignored() {
        let blobs = [blob_at(Vector3::new(0.0, 0.0, -1.0), 0.5, 10.0, [1.0; 3])];
        assert!(ray_march(&blobs, &Vector3::zeros(), &z_ray()).hits.is_empty());
    }

    #[test]
    fn far_blob_vanishes() {
        let blobs = [blob_at(Vector3::new(5.0, 0.0, 2.0), 0.1, 1.0, [1.0; 3])];
        assert_eq!(ray_march(&blobs, &Vector3::zeros(), &z_ray()).visibility(0), 0.0);
    }

    #[test]
    fn default_body_is_deterministic_and_bounded() {
        let sk = Skeleton::default_humanoid(1.75);
        let a = GaussianBodyModel::default_body(&sk, 1.75).unwrap();
        let b = GaussianBodyModel::default_body(&sk, 1.75).unwrap();
        assert_eq!(a, b);
        assert!(a.blobs().len() >= sk.bones().len());
        let world = a.pose_blobs(&sk, &sk.rest_pose()).unwrap();
        for blob in &world {
            assert!(blob.center.x.hypot(blob.center.z) <= 0.6);
        }
    }

    #[test]
    fn height_range_enforced() {
        let sk = Skeleton::default_humanoid(1.75);
        assert!(matches!(
            GaussianBodyModel::default_body(&sk, 2.5),
            Err(Error::HeightOutOfRange(_))
        ));
        assert!(GaussianBodyModel::default_body(&sk, 1.2).is_ok());
    }

    #[test]
    fn root_blob_follows_root() {
        let sk = Skeleton::default_humanoid(1.75);
        let model = GaussianBodyModel::new(
            vec![GaussianBlob {
                bone: 0,
                local_offset: Vector3::zeros(),
                sigma: 0.1,
                density: 1.0,
                color: [0.5; 3],
            }],
            [0.0; 3],
        )
        .unwrap();
        let mut pose = sk.rest_pose();
        assert_eq!(model.pose_blobs(&sk, &pose).unwrap()[0].center, Vector3::zeros());
        pose.root_translation = Vector3::new(0.3, -1.0, 2.0);
        assert_eq!(model.pose_blobs(&sk, &pose).unwrap()[0].center, pose.root_translation);
    }

    #[test]
    fn rejects_bad_blobs() {
        let good = GaussianBlob {
            bone: 0,
            local_offset: Vector3::zeros(),
            sigma: 0.1,
            density: 1.0,
            color: [0.5; 3],
        };
        assert!(GaussianBodyModel::new(vec![], [0.0; 3]).is_err());
        let mut bad = good.clone();
        bad.sigma = 0.0;
        assert!(GaussianBodyModel::new(vec![bad], [0.0; 3]).is_err());
        let mut bad = good.clone();
        bad.color = [1.5, 0.0, 0.0];
        assert!(GaussianBodyModel::new(vec![bad], [0.0; 3]).is_err());
        let mut bad = good;
        bad.bone = 99;
        let model = GaussianBodyModel::new(vec![bad], [0.0; 3]).unwrap();
        assert!(model.check_skeleton(&Skeleton::default_humanoid(1.7)).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("body.json");
        let sk = Skeleton::default_humanoid(1.6);
        let model = GaussianBodyModel::default_body(&sk, 1.6).unwrap();
        model.save(&path).unwrap();
        assert_eq!(GaussianBodyModel::load(&path).unwrap(), model);
    }

    #[test]
    fn culled_render_matches_exhaustive_march() {
        let sk = Skeleton::default_humanoid(1.75);
        let body = GaussianBodyModel::default_body(&sk, 1.75).unwrap();
        let rig = crate::camera::Rig::head_mounted(96, 80);
        let mut pose = crate::solver::initial_pose(&sk, &rig, 1.75);
        pose.joint_angles[7] = 0.4;
        let blobs = body.pose_blobs(&sk, &pose).unwrap();
        let bg = Vector3::from(body.background_color());
        for cam in rig.cameras() {
            let image = render_view(cam, &blobs, body.background_color());
            let mut scratch = MarchScratch::default();
            for y in 0..80 {
                for x in 0..96 {
                    let expected = match cam.unproject(&Vector2::new(x as f64, y as f64)) {
                        Ok(ray) => ray_color(&blobs, &bg, &ray, &mut scratch).into(),
                        Err(_) => [0.0; 3],
                    };
                    assert_eq!(image.get(x, y), expected);
                }
            }
        }
    }

    #[test]
    fn cone_keeps_every_reaching_blob() {
        let blob = blob_at(Vector3::new(0.8, 0.0, 1.0), 0.05, 1.0, [1.0; 3]);
        let reach = blob.reach().unwrap();
        let toward = |x: f64| Ray {
            origin: Vector3::zeros(),
            direction: Vector3::new(x, 0.0, 1.0).normalize(),
        };
        let cone = RayCone::bounding(&[toward(-0.1), toward(0.1)]).unwrap();
        assert!(cone.candidates(std::slice::from_ref(&blob)).is_empty());
        // A ray grazing the reach radius still keeps the blob.
        let near = RayCone::bounding(&[toward(0.8 - reach * 0.9)]).unwrap();
        assert_eq!(near.candidates(std::slice::from_ref(&blob)), vec![0]);
        assert!(blob_at(Vector3::z(), 0.01, 1e-9, [0.0; 3]).reach().is_none());
    }

    #[test]
    fn fused_residual_matches_ray_march() {
        let blobs = vec![
            blob_at(Vector3::new(0.01, 0.0, 1.0), 0.05, 8.0, [0.9, 0.1, 0.1]),
            blob_at(Vector3::new(-0.02, 0.01, 1.04), 0.04, 12.0, [0.1, 0.8, 0.3]),
            blob_at(Vector3::new(0.0, -0.03, 1.2), 0.08, 3.0, [0.2, 0.3, 0.9]),
        ];
        let bg = Vector3::new(0.2, 0.2, 0.2);
        let target = Vector3::new(0.5, 0.4, 0.1);
        let ray = Ray {
            origin: Vector3::zeros(),
            direction: Vector3::new(0.01, -0.02, 1.0).normalize(),
        };
        let sample = ray_march(&blobs, &bg, &ray);
        let r = sample.color - target;
        let mut grads = vec![Vector3::zeros(); 3];
        let mut scratch = MarchScratch::default();
        let value = ray_residual(&blobs, None, &bg, &ray, &target, &mut scratch, Some(&mut grads));
        assert_eq!(value, r.norm_squared());
        for hit in &sample.hits {
            let expected = hit.color_gradient.transpose() * (2.0 * r);
            assert!((grads[hit.blob] - expected).norm() < 1e-12 * (1.0 + expected.norm()));
        }
    }
}
