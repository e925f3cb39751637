//! Coordinates on SO(3) and its Lie algebra.
//!
//! Tangent vectors are stored in body coordinates: `a ∈ ℝ³` stands for the
//! left-invariant field `R·hat(a)`. All maps here work on raw `nalgebra`
//! types; the checked [`Point`](super::Point) wrappers live one level up.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Skew tolerance accepted by [`vee`].
pub const SKEW_TOL: f64 = 1e-10;
/// Orthogonality error below which a matrix is accepted untouched.
pub const ORTHO_TOL: f64 = 1e-10;
/// Orthogonality error below which a matrix is repaired by polar projection.
pub const REPAIR_TOL: f64 = 1e-6;

pub fn hat(a: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0)
}

/// Inverse of [`hat`]. Rejects matrices whose symmetric part exceeds
/// [`SKEW_TOL`] in Frobenius norm.
pub fn vee(m: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let asymmetry = (m + m.transpose()).norm();
    if asymmetry > SKEW_TOL {
        return Err(Error::NotSkew { asymmetry });
    }
    Ok(vee_unchecked(m))
}

/// Reads the skew entries of `m` without checking symmetry. For an exactly
/// skew matrix this is the inverse of [`hat`].
pub fn vee_unchecked(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// `vee` of the skew part `(m - mᵀ)/2`.
pub fn skew_vee(m: &Matrix3<f64>) -> Vector3<f64> {
    0.5 * Vector3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    )
}

/// Matrix exponential of `hat(a)` (Rodrigues).
pub fn exp(a: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = a.norm_squared();
    let k = hat(a);
    let (s, c) = if theta2 < 1e-8 {
        // sin(θ)/θ and (1-cos θ)/θ² to O(θ⁶)
        (
            1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0,
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
        )
    } else {
        let theta = theta2.sqrt();
        // explicit sin_cos: optimized builds fuse separate calls into sincos,
        // which rounds differently
        let (sin, cos) = theta.sin_cos();
        (sin / theta, (1.0 - cos) / theta2)
    };
    Matrix3::identity() + k * s + k * k * c
}

/// Principal logarithm, returned in body coordinates. For rotations by π
/// the axis sign is chosen from the largest diagonal entry.
pub fn log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos_theta = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    let w = skew_vee(r);
    if theta < 1e-6 {
        // θ/sin θ ≈ 1 + θ²/6
        return w * (1.0 + theta * theta / 6.0);
    }
    if std::f64::consts::PI - theta < 1e-6 {
        let b = (r + Matrix3::identity()) * 0.5;
        let (mut k, mut best) = (0, b[(0, 0)]);
        for i in 1..3 {
            if b[(i, i)] > best {
                best = b[(i, i)];
                k = i;
            }
        }
        let mut axis = Vector3::new(b[(0, k)], b[(1, k)], b[(2, k)]);
        axis /= axis.norm();
        if axis.dot(&w) < 0.0 {
            axis = -axis;
        }
        return axis * theta;
    }
    w * (theta / theta.sin())
}

/// Right Jacobian of the exponential: `exp(hat(a + t b)) = exp(hat a)·exp(hat(t Jr(a) b)) + O(t²)`.
pub fn right_jacobian(a: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = a.norm_squared();
    let k = hat(a);
    let (c1, c2) = if theta2 < 1e-8 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        let (sin, cos) = theta.sin_cos();
        ((1.0 - cos) / theta2, (theta - sin) / (theta2 * theta))
    };
    Matrix3::identity() - k * c1 + k * k * c2
}

/// `‖RᵀR − I‖_F`.
pub fn orthogonality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).norm()
}

/// Nearest rotation in Frobenius norm (polar factor via SVD).
pub fn polar_project(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut out = u * v_t;
    if out.determinant() < 0.0 {
        let mut d = Matrix3::identity();
        d[(2, 2)] = -1.0;
        out = u * d * v_t;
    }
    out
}

/// Validates a candidate rotation: accepted as-is when orthogonal to
/// [`ORTHO_TOL`], re-projected when within [`REPAIR_TOL`], rejected otherwise.
pub fn checked_rotation(r: Matrix3<f64>) -> Result<Matrix3<f64>> {
    if !r.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("rotation matrix"));
    }
    let error = orthogonality_error(&r);
    if error <= ORTHO_TOL && r.determinant() > 0.0 {
        return Ok(r);
    }
    if error <= REPAIR_TOL && r.determinant() > 0.0 {
        return Ok(polar_project(&r));
    }
    Err(Error::NotARotation { error })
}

/// Same as [`checked_rotation`] for matrices produced internally by products
/// of rotations; drift is repaired, never rejected.
pub(crate) fn repaired(r: Matrix3<f64>) -> Matrix3<f64> {
    if orthogonality_error(&r) <= 1e-12 {
        r
    } else {
        polar_project(&r)
    }
}

/// Rotation by `angle` about the unit axis `axis`.
pub fn axis_angle(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    exp(&(axis.normalize() * angle))
}
