//! Rotations, camera poses and the projection kernels shared by every solver.
//!
//! All image measurements handled by this crate are normalized coordinates
//! (`K^-1` already applied). The stacked vector convention for a single
//! measurement is `v = [X; t]` where `X` is the point and `t` the camera
//! translation.

use nalgebra::{Matrix2x6, Matrix3, Rotation3, SVector, UnitQuaternion, Vector2, Vector3};
use thiserror::Error;

/// Tolerance on `R^T R = I` and `det R = 1` when constructing a [`Rotation`].
pub const ROTATION_TOL: f64 = 1e-9;

/// Points with depth at or below this value are considered behind the camera.
pub const DEPTH_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("matrix is not orthonormal (|R^T R - I|_F = {0:e})")]
    NotOrthonormal(f64),
    #[error("matrix has determinant {0}, expected +1")]
    BadDeterminant(f64),
    #[error("point has non-positive depth {0:e}")]
    NonPositiveDepth(f64),
    #[error("intrinsics are not upper triangular with k[2][2] = 1 and invertible")]
    BadIntrinsics,
    #[error("non-finite value")]
    NonFinite,
}

/// An element of SO(3), stored as a 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Validates orthonormality and orientation.
    pub fn new(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let dev = (m.transpose() * m - Matrix3::identity()).norm();
        if dev > ROTATION_TOL {
            return Err(GeometryError::NotOrthonormal(dev));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(GeometryError::BadDeterminant(det));
        }
        Ok(Self(m))
    }

    /// Nearest rotation in the Frobenius sense (orthogonal polar factor with
    /// a determinant correction).
    pub fn project(m: &Matrix3<f64>) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.unwrap();
        let v_t = svd.v_t.unwrap();
        let mut d = Matrix3::identity();
        if (u * v_t).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Self(u * d * v_t)
    }

    /// Exponential map from a rotation vector (axis times angle in radians).
    pub fn exp(omega: &Vector3<f64>) -> Self {
        Self(*Rotation3::from_scaled_axis(*omega).matrix())
    }

    /// Logarithm map; the returned vector has norm in `[0, pi]`.
    pub fn log(&self) -> Vector3<f64> {
        let m = &self.0;
        let cos = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        let w = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
        let angle = (0.5 * w.norm()).atan2(cos);
        if angle < 1e-6 {
            // first-order series of angle / (2 sin angle)
            return w * (0.5 + angle * angle / 12.0);
        }
        if std::f64::consts::PI - angle > 1e-6 {
            return w * (angle / (2.0 * angle.sin()));
        }
        // near pi: axis from the symmetric part, sign from the skew part
        let b = (m + m.transpose()) * 0.5 - Matrix3::identity() * cos;
        let mut col = 0;
        for c in 1..3 {
            if b[(c, c)] > b[(col, col)] {
                col = c;
            }
        }
        let mut axis = b.column(col).into_owned();
        axis /= axis.norm();
        if axis.dot(&w) < 0.0 {
            axis = -axis;
        }
        axis * angle
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        Self::exp(&(axis.normalize() * angle))
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>) -> Self {
        Self(*q.to_rotation_matrix().matrix())
    }

    pub fn to_quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.0))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    /// Geodesic distance in radians.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        (self.transpose() * *other).angle()
    }

    pub fn angle(&self) -> f64 {
        let m = &self.0;
        let w = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
        (0.5 * w.norm()).atan2(0.5 * (m.trace() - 1.0))
    }

    /// Re-projects onto SO(3) to wash out accumulated round-off.
    pub fn renormalized(&self) -> Self {
        Self::project(&self.0)
    }

    pub fn row(&self, i: usize) -> Vector3<f64> {
        self.0.row(i).transpose()
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl std::ops::Mul<Vector3<f64>> for Rotation {
    type Output = Vector3<f64>;
    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

impl std::ops::Mul<&Vector3<f64>> for Rotation {
    type Output = Vector3<f64>;
    fn mul(self, rhs: &Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

impl std::ops::Mul<Vector3<f64>> for &Rotation {
    type Output = Vector3<f64>;
    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

impl std::ops::Mul<&Vector3<f64>> for &Rotation {
    type Output = Vector3<f64>;
    fn mul(self, rhs: &Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

/// Skew-symmetric cross-product matrix.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Camera calibration matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    k: Matrix3<f64>,
    identity: bool,
}

impl CameraIntrinsics {
    pub fn identity() -> Self {
        Self { k: Matrix3::identity(), identity: true }
    }

    pub fn new(k: Matrix3<f64>) -> Result<Self, GeometryError> {
        let lower_zero = k[(1, 0)] == 0.0 && k[(2, 0)] == 0.0 && k[(2, 1)] == 0.0;
        if !lower_zero || k[(2, 2)] != 1.0 || k[(0, 0)] * k[(1, 1)] == 0.0 {
            return Err(GeometryError::BadIntrinsics);
        }
        Ok(Self { k, identity: k == Matrix3::identity() })
    }

    /// Pinhole with focal length `f` and principal point `(cx, cy)` in pixels.
    pub fn pinhole(f: f64, cx: f64, cy: f64) -> Self {
        Self::new(Matrix3::new(f, 0.0, cx, 0.0, f, cy, 0.0, 0.0, 1.0)).expect("valid pinhole")
    }

    pub fn k(&self) -> &Matrix3<f64> {
        &self.k
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }

    pub fn k_inv(&self) -> Matrix3<f64> {
        self.k.try_inverse().expect("intrinsics are invertible by construction")
    }

    /// Pixel to normalized image coordinates.
    pub fn normalize(&self, px: &Vector2<f64>) -> Vector2<f64> {
        let h = self.k_inv() * Vector3::new(px.x, px.y, 1.0);
        Vector2::new(h.x / h.z, h.y / h.z)
    }

    /// Normalized image coordinates to pixels.
    pub fn denormalize(&self, u: &Vector2<f64>) -> Vector2<f64> {
        let h = self.k * Vector3::new(u.x, u.y, 1.0);
        Vector2::new(h.x / h.z, h.y / h.z)
    }
}

/// Camera extrinsics: a world point `X` maps to `R X + t` in camera coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyframePose {
    pub r: Rotation,
    pub t: Vector3<f64>,
}

impl Default for KeyframePose {
    fn default() -> Self {
        Self { r: Rotation::identity(), t: Vector3::zeros() }
    }
}

impl KeyframePose {
    pub fn new(r: Rotation, t: Vector3<f64>) -> Self {
        Self { r, t }
    }

    /// Pose whose camera centre is `c`.
    pub fn from_centre(r: Rotation, c: &Vector3<f64>) -> Self {
        Self { r, t: -(r * *c) }
    }

    /// Camera centre `-R^T t`.
    pub fn centre(&self) -> Vector3<f64> {
        -(self.r.transpose() * self.t)
    }

    pub fn transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.r * *x + self.t
    }

    pub fn depth(&self, x: &Vector3<f64>) -> f64 {
        self.r.row(2).dot(x) + self.t.z
    }
}

/// Pinhole projection of `x` in a calibrated camera.
pub fn project(x: &Vector3<f64>, pose: &KeyframePose) -> Result<Vector2<f64>, GeometryError> {
    let p = pose.transform(x);
    if p.z <= DEPTH_EPS {
        return Err(GeometryError::NonPositiveDepth(p.z));
    }
    Ok(Vector2::new(p.x / p.z, p.y / p.z))
}

/// Reprojection error `|u - project(x, pose)|`.
pub fn residual_ratio(x: &Vector3<f64>, pose: &KeyframePose, u: &Vector2<f64>) -> Result<f64, GeometryError> {
    Ok((u - project(x, pose)?).norm())
}

/// Cone data for one measurement in the `[X; t]` ordering:
/// `A = [S  I  -u]` with `S = R(1:2) - u R(3)` and `b = [R(3) 0 0 1]`.
///
/// For `v = [X; t]`, `|A v| / b^T v` equals the reprojection error and
/// `b^T v` is the depth.
pub fn build_a_b(r: &Rotation, u: &Vector2<f64>) -> (Matrix2x6<f64>, SVector<f64, 6>) {
    let s = structure_block(r, u);
    let mut a = Matrix2x6::zeros();
    a.fixed_view_mut::<2, 3>(0, 0).copy_from(&s);
    a[(0, 3)] = 1.0;
    a[(1, 4)] = 1.0;
    a[(0, 5)] = -u.x;
    a[(1, 5)] = -u.y;
    let r3 = r.row(2);
    let b = SVector::<f64, 6>::from_column_slice(&[r3.x, r3.y, r3.z, 0.0, 0.0, 1.0]);
    (a, b)
}

/// The 2x3 block `S = R(1:2) - u R(3)`.
pub fn structure_block(r: &Rotation, u: &Vector2<f64>) -> nalgebra::Matrix2x3<f64> {
    let m = r.matrix();
    let r3 = m.row(2);
    let mut s = m.fixed_view::<2, 3>(0, 0).into_owned();
    for c in 0..3 {
        s[(0, c)] -= u.x * r3[c];
        s[(1, c)] -= u.y * r3[c];
    }
    s
}

/// Bearing (unit ray) for a normalized image point.
pub fn bearing(u: &Vector2<f64>) -> Vector3<f64> {
    Vector3::new(u.x, u.y, 1.0).normalize()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Matrix3x4;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn project_on_axis_and_direct_division() {
        let pose = KeyframePose::default();
        let p = project(&Vector3::new(0.0, 0.0, 1.0), &pose).unwrap();
        assert_eq!(p, Vector2::zeros());
        let p = project(&Vector3::new(1.0, 2.0, 4.0), &pose).unwrap();
        assert_eq!(p, Vector2::new(0.25, 0.5));
    }

    #[test]
    fn project_matches_explicit_projection_matrix() {
        let r = Rotation::from_axis_angle(&Vector3::y(), FRAC_PI_2);
        let x = Vector3::new(0.0, 0.0, 1.0);
        // R x = (1, 0, 0); choose t so the depth is 1 and the point is off-axis
        let t = Vector3::new(0.3, -0.2, 1.0);
        let pose = KeyframePose::new(r, t);
        let mut p = Matrix3x4::zeros();
        p.fixed_view_mut::<3, 3>(0, 0).copy_from(r.matrix());
        p.set_column(3, &t);
        let h = p * nalgebra::Vector4::new(x.x, x.y, x.z, 1.0);
        let expected = Vector2::new(h.x / h.z, h.y / h.z);
        assert_relative_eq!(h.z, 1.0, epsilon = 1e-15);
        assert_relative_eq!(project(&x, &pose).unwrap(), expected, epsilon = 1e-15);
    }

    #[test]
    fn project_rejects_points_behind() {
        let pose = KeyframePose::default();
        assert!(matches!(
            project(&Vector3::new(0.0, 0.0, -1.0), &pose),
            Err(GeometryError::NonPositiveDepth(_))
        ));
        assert!(project(&Vector3::new(1.0, 0.0, 0.0), &pose).is_err());
    }

    #[test]
    fn residual_three_four_five() {
        let pose = KeyframePose::default();
        let x = Vector3::new(0.0, 0.0, 1.0);
        assert_eq!(residual_ratio(&x, &pose, &Vector2::zeros()).unwrap(), 0.0);
        assert_relative_eq!(residual_ratio(&x, &pose, &Vector2::new(0.3, 0.4)).unwrap(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn a_b_identity_rotation() {
        let (a, b) = build_a_b(&Rotation::identity(), &Vector2::zeros());
        assert_eq!(b.as_slice(), &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        assert_eq!(a.fixed_view::<2, 3>(0, 0).into_owned(), nalgebra::Matrix2x3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0));
        let (a, _) = build_a_b(&Rotation::identity(), &Vector2::new(1.0, 1.0));
        assert_eq!(a.fixed_view::<2, 3>(0, 0).into_owned(), nalgebra::Matrix2x3::new(1.0, 0.0, -1.0, 0.0, 1.0, -1.0));
        assert_eq!(a.column(5).into_owned(), Vector2::new(-1.0, -1.0));
    }

    #[test]
    fn rotation_validation() {
        assert!(Rotation::new(Matrix3::identity() * 2.0).is_err());
        assert!(matches!(
            Rotation::new(Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0))),
            Err(GeometryError::BadDeterminant(_))
        ));
        assert!(Rotation::new(*Rotation::exp(&Vector3::new(0.1, 0.2, 0.3)).matrix()).is_ok());
    }

    #[test]
    fn log_exp_round_trip_including_pi() {
        for w in [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1e-9, -2e-9, 0.0),
            Vector3::new(0.3, -1.2, 0.4),
            Vector3::new(std::f64::consts::PI, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 1.0).normalize() * (std::f64::consts::PI - 1e-8),
        ] {
            let r = Rotation::exp(&w);
            let back = Rotation::exp(&r.log());
            assert!(r.angle_to(&back) < 1e-9, "{w:?}");
        }
    }

    #[test]
    fn intrinsics_round_trip() {
        let k = CameraIntrinsics::pinhole(500.0, 320.0, 240.0);
        let px = Vector2::new(400.0, 100.0);
        assert_relative_eq!(k.denormalize(&k.normalize(&px)), px, epsilon = 1e-12);
        assert!(CameraIntrinsics::new(Matrix3::zeros()).is_err());
    }

    #[test]
    fn centre_consistency() {
        let r = Rotation::exp(&Vector3::new(0.1, -0.4, 0.9));
        let c = Vector3::new(1.0, 2.0, -3.0);
        let pose = KeyframePose::from_centre(r, &c);
        assert_relative_eq!(pose.centre(), c, epsilon = 1e-12);
    }
}
