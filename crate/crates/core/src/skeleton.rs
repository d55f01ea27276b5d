//! Kinematic skeleton, pose parameterization and forward kinematics.
//!
//! A pose has `6 + n` parameters in tangent coordinates: root translation (3),
//! a left axis-angle increment of the root rotation (3), then the `n` joint
//! angles in bone order. Each bone's frame is its parent frame translated by the
//! bone offset and rotated about the bone's DoF axes in order.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Rotation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{exp_so3, log_so3};
use crate::io::{read_json, read_jsonl, write_json, write_jsonl};

/// Joint labels available from the 2D detector, in canonical order.
pub const JOINT_LABELS: [&str; 18] = [
    "head",
    "neck",
    "lshoulder",
    "rshoulder",
    "lelbow",
    "relbow",
    "lwrist",
    "rwrist",
    "lhand",
    "rhand",
    "lhip",
    "rhip",
    "lknee",
    "rknee",
    "lankle",
    "rankle",
    "lfoot",
    "rfoot",
];

/// Number of root parameters in the tangent parameterization.
pub const ROOT_DOF: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoneSpec {
    pub name: String,
    pub parent: Option<usize>,
    pub offset: Vector3<f64>,
    #[serde(default)]
    pub dof_axes: Vec<Vector3<f64>>,
    #[serde(default)]
    pub limits: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    bones: Vec<BoneSpec>,
    named_joints: BTreeMap<String, usize>,
    dof_start: Vec<usize>,
    dof_count: usize,
    /// `ancestors[b]` lists `b` and every bone above it, root last.
    ancestors: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct SkeletonFile {
    bones: Vec<BoneSpec>,
    named_joints: BTreeMap<String, usize>,
}

impl Skeleton {
    pub fn new(bones: Vec<BoneSpec>, named_joints: BTreeMap<String, usize>) -> Result<Self> {
        let roots = bones.iter().filter(|b| b.parent.is_none()).count();
        if roots != 1 || bones.first().is_none_or(|b| b.parent.is_some()) {
            return Err(Error::invalid("skeleton", "need exactly one root bone, listed first"));
        }
        let mut dof_start = Vec::with_capacity(bones.len());
        let mut dof_count = 0;
        let mut ancestors: Vec<Vec<usize>> = Vec::with_capacity(bones.len());
        for (i, bone) in bones.iter().enumerate() {
            if let Some(p) = bone.parent {
                if p >= i {
                    return Err(Error::invalid(
                        "skeleton",
                        format!("bone `{}` has parent {p} not before it", bone.name),
                    ));
                }
            }
            if bone.dof_axes.len() > 3 || bone.dof_axes.len() != bone.limits.len() {
                return Err(Error::invalid(
                    "skeleton",
                    format!("bone `{}` needs 0-3 axes with one limit pair each", bone.name),
                ));
            }
            if bone.dof_axes.iter().any(|a| (a.norm() - 1.0).abs() > 1e-9) {
                return Err(Error::invalid(
                    "skeleton",
                    format!("bone `{}` has a non-unit axis", bone.name),
                ));
            }
            if bone.limits.iter().any(|[lo, hi]| !(lo <= hi)) {
                return Err(Error::invalid(
                    "skeleton",
                    format!("bone `{}` has min > max", bone.name),
                ));
            }
            dof_start.push(dof_count);
            dof_count += bone.dof_axes.len();
            let mut chain = vec![i];
            if let Some(p) = bone.parent {
                chain.extend_from_slice(&ancestors[p]);
            }
            ancestors.push(chain);
        }
        if let Some((label, &b)) = named_joints.iter().find(|(_, &b)| b >= bones.len()) {
            return Err(Error::invalid(
                "skeleton",
                format!("joint `{label}` refers to missing bone {b}"),
            ));
        }
        Ok(Skeleton {
            bones,
            named_joints,
            dof_start,
            dof_count,
            ancestors,
        })
    }

    /// Humanoid skeleton scaled to `height` meters: 17 articulated bones with
    /// 30 joint DoFs plus four zero-DoF end effectors (hand and toe tips), y up,
    /// facing +z, subject's left on +x.
    pub fn default_humanoid(height: f64) -> Self {
        let s = height / 1.75;
        let x = Vector3::x();
        let y = Vector3::y();
        let z = Vector3::z();
        let mut bones: Vec<BoneSpec> = Vec::new();
        let mut add = |name: &str, parent: Option<usize>, offset: [f64; 3], dofs: &[(Vector3<f64>, f64, f64)]| {
            bones.push(BoneSpec {
                name: name.into(),
                parent,
                offset: Vector3::from(offset) * s,
                dof_axes: dofs.iter().map(|d| d.0).collect(),
                limits: dofs.iter().map(|d| [d.1, d.2]).collect(),
            });
            bones.len() - 1
        };
        let pelvis = add("pelvis", None, [0.0; 3], &[]);
        let spine = add(
            "spine",
            Some(pelvis),
            [0.0, 0.12, 0.0],
            &[(x, -0.4, 0.9), (z, -0.5, 0.5), (y, -0.6, 0.6)],
        );
        let thorax = add(
            "thorax",
            Some(spine),
            [0.0, 0.25, 0.0],
            &[(x, -0.3, 0.6), (z, -0.3, 0.3)],
        );
        let neck = add("neck", Some(thorax), [0.0, 0.2, 0.0], &[(x, -0.6, 0.8), (z, -0.5, 0.5)]);
        add("head", Some(neck), [0.0, 0.1, 0.0], &[(y, -1.0, 1.0)]);
        for (side, sign) in [("l", 1.0), ("r", -1.0)] {
            let (abd_lo, abd_hi) = if sign > 0.0 { (-0.4, 2.6) } else { (-2.6, 0.4) };
            let upper = add(
                &format!("{side}upperarm"),
                Some(thorax),
                [0.18 * sign, 0.17, 0.0],
                &[(x, -2.8, 0.8), (z, abd_lo, abd_hi), (y, -1.2, 1.2)],
            );
            let fore = add(
                &format!("{side}forearm"),
                Some(upper),
                [0.0, -0.28, 0.0],
                &[(x, -2.5, 0.05)],
            );
            let hand = add(
                &format!("{side}hand"),
                Some(fore),
                [0.0, -0.25, 0.0],
                &[(x, -1.2, 1.2), (z, -0.5, 0.5)],
            );
            add(&format!("{side}handtip"), Some(hand), [0.0, -0.09, 0.0], &[]);
        }
        for (side, sign) in [("l", 1.0), ("r", -1.0)] {
            let (abd_lo, abd_hi) = if sign > 0.0 { (-0.5, 1.0) } else { (-1.0, 0.5) };
            let thigh = add(
                &format!("{side}thigh"),
                Some(pelvis),
                [0.09 * sign, -0.06, 0.0],
                &[(x, -2.2, 0.6), (z, abd_lo, abd_hi), (y, -0.8, 0.8)],
            );
            let shin = add(
                &format!("{side}shin"),
                Some(thigh),
                [0.0, -0.43, 0.0],
                &[(x, -0.05, 2.5)],
            );
            let foot = add(&format!("{side}foot"), Some(shin), [0.0, -0.42, 0.0], &[(x, -0.8, 0.6)]);
            add(&format!("{side}toe"), Some(foot), [0.0, -0.06, 0.14], &[]);
        }
        let bone_for = |label: &str| -> &str {
            match label {
                "head" => "head",
                "neck" => "neck",
                "lshoulder" => "lupperarm",
                "rshoulder" => "rupperarm",
                "lelbow" => "lforearm",
                "relbow" => "rforearm",
                "lwrist" => "lhand",
                "rwrist" => "rhand",
                "lhand" => "lhandtip",
                "rhand" => "rhandtip",
                "lhip" => "lthigh",
                "rhip" => "rthigh",
                "lknee" => "lshin",
                "rknee" => "rshin",
                "lankle" => "lfoot",
                "rankle" => "rfoot",
                "lfoot" => "ltoe",
                "rfoot" => "rtoe",
                _ => unreachable!(),
            }
        };
        let named = JOINT_LABELS
            .iter()
            .map(|&l| {
                let idx = bones.iter().position(|b| b.name == bone_for(l)).expect("bone exists");
                (l.to_string(), idx)
            })
            .collect();
        Skeleton::new(bones, named).expect("default skeleton is valid")
    }

    pub fn bones(&self) -> &[BoneSpec] {
        &self.bones
    }

    pub fn named_joints(&self) -> &BTreeMap<String, usize> {
        &self.named_joints
    }

    pub fn joint_bone(&self, label: &str) -> Result<usize> {
        self.named_joints
            .get(label)
            .copied()
            .ok_or_else(|| Error::UnknownJointLabel(label.to_string()))
    }

    /// Bone indices of the 18 detection joints, in [`JOINT_LABELS`] order.
    pub fn detection_bones(&self) -> Result<Vec<usize>> {
        JOINT_LABELS.iter().map(|l| self.joint_bone(l)).collect()
    }

    /// Rejects skeletons that lack any of the 18 detection labels.
    pub fn validate_for_tracking(&self) -> Result<()> {
        match JOINT_LABELS.iter().find(|l| !self.named_joints.contains_key(**l)) {
            Some(missing) => Err(Error::invalid(
                "skeleton",
                format!("missing detection joint `{missing}`"),
            )),
            None => Ok(()),
        }
    }

    /// Number of joint-angle DoFs (excluding the root).
    pub fn dof_count(&self) -> usize {
        self.dof_count
    }

    /// Total pose parameters in tangent coordinates.
    pub fn param_count(&self) -> usize {
        ROOT_DOF + self.dof_count
    }

    pub fn dof_range(&self, bone: usize) -> std::ops::Range<usize> {
        let start = self.dof_start[bone];
        start..start + self.bones[bone].dof_axes.len()
    }

    /// Limit pairs for every DoF in pose order.
    pub fn limits(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        self.bones.iter().flat_map(|b| b.limits.iter().copied())
    }

    /// True if `bone` is `ancestor` or lies below it.
    pub fn is_descendant(&self, bone: usize, ancestor: usize) -> bool {
        self.ancestors[bone].contains(&ancestor)
    }

    pub fn rest_pose(&self) -> PoseVector {
        PoseVector::rest(self.dof_count)
    }

    fn check_pose(&self, pose: &PoseVector) -> Result<()> {
        if pose.joint_angles.len() != self.dof_count {
            return Err(Error::DimensionMismatch {
                expected: self.dof_count,
                actual: pose.joint_angles.len(),
            });
        }
        Ok(())
    }

    /// Joint positions and frame orientations of every bone.
    pub fn forward_kinematics(&self, pose: &PoseVector) -> Result<PosedSkeleton> {
        self.check_pose(pose)?;
        let n = self.bones.len();
        let mut positions = Vec::with_capacity(n);
        let mut orientations: Vec<Rotation3<f64>> = Vec::with_capacity(n);
        let mut dof_axes = Vec::with_capacity(self.dof_count);
        let root_rotation = pose.root_rotation.to_rotation_matrix();
        for (i, bone) in self.bones.iter().enumerate() {
            let (parent_rot, parent_pos) = match bone.parent {
                Some(p) => (orientations[p], positions[p]),
                None => (root_rotation, pose.root_translation),
            };
            let position = parent_pos + parent_rot * bone.offset;
            let mut rot = parent_rot;
            for (k, axis) in bone.dof_axes.iter().enumerate() {
                let world_axis = rot * axis;
                dof_axes.push(world_axis);
                let angle = pose.joint_angles[self.dof_start[i] + k];
                rot *= Rotation3::from_axis_angle(&Unit::new_unchecked(*axis), angle);
            }
            positions.push(position);
            orientations.push(rot);
        }
        Ok(PosedSkeleton {
            positions,
            orientations,
            dof_axes,
            root_translation: pose.root_translation,
        })
    }

    /// Jacobian of all joint positions (3 rows per bone, bone order) with
    /// respect to the tangent pose parameters.
    pub fn fk_jacobian(&self, pose: &PoseVector) -> Result<DMatrix<f64>> {
        let posed = self.forward_kinematics(pose)?;
        let mut jac = DMatrix::zeros(3 * self.bones.len(), self.param_count());
        for (b, p) in posed.positions.iter().enumerate() {
            for axis in 0..3 {
                let mut g = Vector3::zeros();
                g[axis] = 1.0;
                let row = self.point_gradient(&posed, b, p, &g);
                jac.row_mut(3 * b + axis).copy_from(&row.transpose());
            }
        }
        Ok(jac)
    }

    /// `Jᵀ·g` for a point rigidly attached to `bone` at world position `point`,
    /// where `J = ∂point/∂params`.
    pub fn point_gradient(
        &self,
        posed: &PosedSkeleton,
        bone: usize,
        point: &Vector3<f64>,
        g: &Vector3<f64>,
    ) -> DVector<f64> {
        let mut out = DVector::zeros(self.param_count());
        self.accumulate_point_gradient(posed, bone, point, g, out.as_mut_slice());
        out
    }

    /// Adds `Jᵀ·g` into `grad` (length [`param_count`](Self::param_count)).
    pub fn accumulate_point_gradient(
        &self,
        posed: &PosedSkeleton,
        bone: usize,
        point: &Vector3<f64>,
        g: &Vector3<f64>,
        grad: &mut [f64],
    ) {
        for k in 0..3 {
            grad[k] += g[k];
        }
        let about_root = (point - posed.root_translation).cross(g);
        for k in 0..3 {
            grad[3 + k] += about_root[k];
        }
        for &a in &self.ancestors[bone] {
            let pivot = posed.positions[a];
            let lever = (point - pivot).cross(g);
            for dof in self.dof_range(a) {
                grad[ROOT_DOF + dof] += posed.dof_axes[dof].dot(&lever);
            }
        }
    }

    /// Signed per-DoF limit violation: negative below `min`, positive above `max`.
    pub fn clamp_report(&self, pose: &PoseVector) -> Vec<f64> {
        self.limits()
            .zip(&pose.joint_angles)
            .map(|([lo, hi], &theta)| {
                if theta < lo {
                    theta - lo
                } else if theta > hi {
                    theta - hi
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Clamps every joint angle into its limits.
    pub fn clamp_to_limits(&self, pose: &mut PoseVector) {
        for (theta, [lo, hi]) in pose.joint_angles.iter_mut().zip(self.limits()) {
            *theta = theta.clamp(lo, hi);
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: SkeletonFile = read_json(path)?;
        Skeleton::new(file.bones, file.named_joints)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(
            path,
            &SkeletonFile {
                bones: self.bones.clone(),
                named_joints: self.named_joints.clone(),
            },
        )
    }
}

/// Result of forward kinematics.
#[derive(Clone, Debug)]
pub struct PosedSkeleton {
    pub positions: Vec<Vector3<f64>>,
    pub orientations: Vec<Rotation3<f64>>,
    /// World-frame rotation axis of every DoF, in pose order.
    pub dof_axes: Vec<Vector3<f64>>,
    pub root_translation: Vector3<f64>,
}

impl PosedSkeleton {
    /// World position of a point given in a bone's local frame.
    pub fn transform_point(&self, bone: usize, local: &Vector3<f64>) -> Vector3<f64> {
        self.positions[bone] + self.orientations[bone] * local
    }
}

/// The optimization variable: root rigid transform plus joint angles.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseVector {
    pub root_translation: Vector3<f64>,
    pub root_rotation: UnitQuaternion<f64>,
    pub joint_angles: Vec<f64>,
}

impl PoseVector {
    pub fn rest(dof_count: usize) -> Self {
        PoseVector {
            root_translation: Vector3::zeros(),
            root_rotation: UnitQuaternion::identity(),
            joint_angles: vec![0.0; dof_count],
        }
    }

    pub fn param_count(&self) -> usize {
        ROOT_DOF + self.joint_angles.len()
    }

    /// Applies a tangent increment: translation and angles add, the root
    /// rotation is left-multiplied by `exp(δω)` and re-normalized.
    pub fn retract(&self, delta: &[f64]) -> PoseVector {
        debug_assert_eq!(delta.len(), self.param_count());
        let omega = Vector3::new(delta[3], delta[4], delta[5]);
        let mut rotation = exp_so3(&omega) * self.root_rotation;
        rotation.renormalize();
        PoseVector {
            root_translation: self.root_translation + Vector3::new(delta[0], delta[1], delta[2]),
            root_rotation: rotation,
            joint_angles: self
                .joint_angles
                .iter()
                .zip(&delta[ROOT_DOF..])
                .map(|(a, d)| a + d)
                .collect(),
        }
    }

    /// Tangent difference `self ⊖ other`, the rotation part being
    /// `log(q_self · q_other⁻¹)`.
    pub fn difference(&self, other: &PoseVector) -> DVector<f64> {
        let mut out = DVector::zeros(self.param_count());
        let dt = self.root_translation - other.root_translation;
        let dr = log_so3(&(self.root_rotation * other.root_rotation.inverse()));
        for k in 0..3 {
            out[k] = dt[k];
            out[3 + k] = dr[k];
        }
        for (i, (a, b)) in self.joint_angles.iter().zip(&other.joint_angles).enumerate() {
            out[ROOT_DOF + i] = a - b;
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.root_translation.iter().all(|v| v.is_finite())
            && self.root_rotation.coords.iter().all(|v| v.is_finite())
            && self.joint_angles.iter().all(|v| v.is_finite())
    }

    pub fn to_record(&self, frame: usize) -> PoseRecord {
        let q = self.root_rotation.quaternion();
        PoseRecord {
            frame,
            root_t: self.root_translation.into(),
            root_q_xyzw: [q.i, q.j, q.k, q.w],
            angles: self.joint_angles.clone(),
        }
    }
}

/// One line of a pose JSONL file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub frame: usize,
    pub root_t: [f64; 3],
    pub root_q_xyzw: [f64; 4],
    pub angles: Vec<f64>,
}

impl PoseRecord {
    pub fn to_pose(&self) -> Result<PoseVector> {
        let [x, y, z, w] = self.root_q_xyzw;
        let q = nalgebra::Quaternion::new(w, x, y, z);
        if (q.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(
                "pose",
                format!("frame {}: root quaternion norm {} is not 1", self.frame, q.norm()),
            ));
        }
        Ok(PoseVector {
            root_translation: Vector3::from(self.root_t),
            root_rotation: UnitQuaternion::new_unchecked(q),
            joint_angles: self.angles.clone(),
        })
    }
}

/// Loads a pose sequence, returning `(frame index, pose)` pairs in file order.
pub fn load_poses(path: &Path) -> Result<Vec<(usize, PoseVector)>> {
    read_jsonl::<PoseRecord>(path)?
        .iter()
        .map(|r| Ok((r.frame, r.to_pose()?)))
        .collect()
}

pub fn save_poses<'a>(path: &Path, poses: impl IntoIterator<Item = (usize, &'a PoseVector)>) -> Result<()> {
    let records: Vec<PoseRecord> = poses.into_iter().map(|(t, p)| p.to_record(t)).collect();
    write_jsonl(path, &records)
}
