//! Small rotation-group helpers shared by the kinematics, energy and solver code.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Exponential map: axis-angle vector to rotation.
pub fn exp_so3(omega: &Vector3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_scaled_axis(*omega)
}

/// Logarithm map: rotation to the axis-angle vector with angle in [0, π].
pub fn log_so3(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    // nalgebra picks the shortest rotation, so the angle never exceeds π.
    q.scaled_axis()
}

/// Inverse of the left Jacobian of SO(3) at `phi`.
///
/// For a left perturbation `exp(δ)·R`, `log(exp(δ)·R) ≈ log(R) + J_l⁻¹(log R)·δ`.
pub fn left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    let coeff = if theta < 1e-5 {
        // Series of 1/θ² − (1 + cos θ)/(2θ sin θ).
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() - 0.5 * k + coeff * k * k
}

/// Rotation `R` such that rows are the camera axes expressed in the parent frame,
/// with the optical axis along `forward` and the image "down" axis as close as
/// possible to `down_hint`.
pub fn look_rotation(forward: &Vector3<f64>, down_hint: &Vector3<f64>) -> UnitQuaternion<f64> {
    let z = forward.normalize();
    let mut y = down_hint - z * down_hint.dot(&z);
    if y.norm() < 1e-9 {
        y = z.cross(&Vector3::x()).cross(&z);
    }
    let y = y.normalize();
    let x = y.cross(&z);
    let m = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    UnitQuaternion::from_matrix(&m)
}
