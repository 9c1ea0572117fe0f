//! Angles, rotations and rigid-body poses in 2D and 3D.
//!
//! 3D orientation is a Z-Y-X Euler triple stored as `[roll, pitch, yaw]` with
//! `R = Rz(yaw) * Ry(pitch) * Rx(roll)`. Rotations map body coordinates to the
//! enclosing frame, so a point `f` seen from pose `(t, R)` is `R^T (f - t)`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::state::Dim;

/// Pitch extraction refuses rotations with `|R[2][0]|` above this.
pub const GIMBAL_LIMIT: f64 = 1.0 - 1e-9;

/// An angle in radians wrapped into `(-pi, pi]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Default)]
pub struct Angle(f64);

impl Angle {
    pub fn radians(self) -> f64 {
        self.0
    }
}

impl From<Angle> for f64 {
    fn from(a: Angle) -> f64 {
        a.0
    }
}

pub fn wrap_angle(theta: f64) -> Result<Angle> {
    if !theta.is_finite() {
        return Err(Error::InvalidInput(format!("angle {theta} is not finite")));
    }
    Ok(Angle(wrap(theta)))
}

/// Wraps a finite angle into `(-pi, pi]`. Values already inside are returned
/// untouched so wrapping is exactly idempotent.
pub(crate) fn wrap(theta: f64) -> f64 {
    if theta > -PI && theta <= PI {
        return theta;
    }
    let a = theta.rem_euclid(2.0 * PI);
    if a > PI {
        a - 2.0 * PI
    } else {
        a
    }
}

pub fn rot2(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, -s, s, c)
}

pub(crate) fn rot2_deriv(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(-s, -c, c, -s)
}

/// `Rz(yaw) * Ry(pitch) * Rx(roll)` for `a = [roll, pitch, yaw]`.
pub fn rot3(a: &[f64; 3]) -> Matrix3<f64> {
    let [rx, ry, rz] = rot3_factors(a);
    rz * ry * rx
}

fn rot3_factors(a: &[f64; 3]) -> [Matrix3<f64>; 3] {
    let (sr, cr) = a[0].sin_cos();
    let (sp, cp) = a[1].sin_cos();
    let (sy, cy) = a[2].sin_cos();
    [
        Matrix3::new(1.0, 0.0, 0.0, 0.0, cr, -sr, 0.0, sr, cr),
        Matrix3::new(cp, 0.0, sp, 0.0, 1.0, 0.0, -sp, 0.0, cp),
        Matrix3::new(cy, -sy, 0.0, sy, cy, 0.0, 0.0, 0.0, 1.0),
    ]
}

/// Partial derivatives of [`rot3`] with respect to roll, pitch and yaw.
pub(crate) fn rot3_partials(a: &[f64; 3]) -> [Matrix3<f64>; 3] {
    let [rx, ry, rz] = rot3_factors(a);
    let (sr, cr) = a[0].sin_cos();
    let (sp, cp) = a[1].sin_cos();
    let (sy, cy) = a[2].sin_cos();
    let drx = Matrix3::new(0.0, 0.0, 0.0, 0.0, -sr, -cr, 0.0, cr, -sr);
    let dry = Matrix3::new(-sp, 0.0, cp, 0.0, 0.0, 0.0, -cp, 0.0, -sp);
    let drz = Matrix3::new(-sy, -cy, 0.0, cy, -sy, 0.0, 0.0, 0.0, 0.0);
    [rz * ry * drx, rz * dry * rx, drz * ry * rx]
}

/// Z-Y-X Euler angles `[roll, pitch, yaw]` of a rotation matrix.
pub fn euler_from_rot3(r: &Matrix3<f64>) -> Result<[f64; 3]> {
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("rotation matrix is not finite".into()));
    }
    if r[(2, 0)].abs() >= GIMBAL_LIMIT {
        return Err(Error::DegenerateRotation);
    }
    Ok(euler_unchecked(r))
}

pub(crate) fn euler_unchecked(r: &Matrix3<f64>) -> [f64; 3] {
    let pitch = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
    let roll = r[(2, 1)].atan2(r[(2, 2)]);
    let yaw = r[(1, 0)].atan2(r[(0, 0)]);
    [wrap(roll), wrap(pitch), wrap(yaw)]
}

/// First-order change of the Euler angles of `r` when `r` moves along `dr`.
pub(crate) fn euler_differential(r: &Matrix3<f64>, dr: &Matrix3<f64>) -> Vector3<f64> {
    let (r21, r22) = (r[(2, 1)], r[(2, 2)]);
    let (r10, r00) = (r[(1, 0)], r[(0, 0)]);
    let r20 = r[(2, 0)];
    let droll = (r22 * dr[(2, 1)] - r21 * dr[(2, 2)]) / (r21 * r21 + r22 * r22);
    let dpitch = -dr[(2, 0)] / (1.0 - r20 * r20).sqrt();
    let dyaw = (r00 * dr[(1, 0)] - r10 * dr[(0, 0)]) / (r00 * r00 + r10 * r10);
    Vector3::new(droll, dpitch, dyaw)
}

/// Rotation matrix from a 1-angle (2D) or 3-angle (3D) block.
pub fn rot_from_angles(r: &[f64]) -> Result<DMatrix<f64>> {
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("angle block is not finite".into()));
    }
    match r.len() {
        1 => Ok(DMatrix::from_column_slice(2, 2, rot2(r[0]).as_slice())),
        3 => {
            let m = rot3(&[r[0], r[1], r[2]]);
            Ok(DMatrix::from_column_slice(3, 3, m.as_slice()))
        }
        n => Err(Error::InvalidInput(format!("angle block of length {n}"))),
    }
}

/// Inverse of [`rot_from_angles`]; angles come back wrapped.
pub fn angles_from_rot(r: &DMatrix<f64>) -> Result<Vec<f64>> {
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("rotation matrix is not finite".into()));
    }
    match (r.nrows(), r.ncols()) {
        (2, 2) => Ok(vec![r[(1, 0)].atan2(r[(0, 0)])]),
        (3, 3) => {
            let m = Matrix3::from_iterator(r.iter().copied());
            Ok(euler_from_rot3(&m)?.to_vec())
        }
        (a, b) => Err(Error::InvalidInput(format!("{a}x{b} rotation matrix"))),
    }
}

/// A planar pose.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose2 {
    pub t: Vector2<f64>,
    pub r: Angle,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Result<Pose2> {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::InvalidInput("translation is not finite".into()));
        }
        Ok(Pose2 {
            t: Vector2::new(x, y),
            r: wrap_angle(theta)?,
        })
    }

    pub fn identity() -> Pose2 {
        Pose2 {
            t: Vector2::zeros(),
            r: Angle(0.0),
        }
    }

    pub fn from_block(b: &[f64]) -> Result<Pose2> {
        match b {
            [x, y, th] => Pose2::new(*x, *y, *th),
            _ => Err(Error::InvalidInput(format!("pose block of length {}", b.len()))),
        }
    }

    pub fn to_block(&self) -> [f64; 3] {
        [self.t.x, self.t.y, self.r.0]
    }

    pub fn rotation(&self) -> Matrix2<f64> {
        rot2(self.r.0)
    }

    /// `self * other`: `other` is expressed in `self`'s frame.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        Pose2 {
            t: self.t + self.rotation() * other.t,
            r: Angle(wrap(self.r.0 + other.r.0)),
        }
    }

    pub fn inverse(&self) -> Pose2 {
        let rt = self.rotation().transpose();
        Pose2 {
            t: -(rt * self.t),
            r: Angle(wrap(-self.r.0)),
        }
    }

    /// `other` expressed in `self`'s frame.
    pub fn between(&self, other: &Pose2) -> Pose2 {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, p: &Vector2<f64>) -> Vector2<f64> {
        self.t + self.rotation() * p
    }

    /// Point given in the enclosing frame, expressed in this pose's frame.
    pub fn localize_point(&self, p: &Vector2<f64>) -> Vector2<f64> {
        self.rotation().transpose() * (p - self.t)
    }
}

/// A pose in space with Z-Y-X Euler orientation `[roll, pitch, yaw]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose3 {
    pub t: Vector3<f64>,
    pub r: [Angle; 3],
}

impl Pose3 {
    pub fn new(t: Vector3<f64>, angles: [f64; 3]) -> Result<Pose3> {
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("translation is not finite".into()));
        }
        Ok(Pose3 {
            t,
            r: [
                wrap_angle(angles[0])?,
                wrap_angle(angles[1])?,
                wrap_angle(angles[2])?,
            ],
        })
    }

    pub fn identity() -> Pose3 {
        Pose3 {
            t: Vector3::zeros(),
            r: [Angle(0.0); 3],
        }
    }

    pub fn from_rotation(t: Vector3<f64>, r: &Matrix3<f64>) -> Result<Pose3> {
        Pose3::new(t, euler_from_rot3(r)?)
    }

    pub fn from_block(b: &[f64]) -> Result<Pose3> {
        if b.len() != 6 {
            return Err(Error::InvalidInput(format!("pose block of length {}", b.len())));
        }
        Pose3::new(Vector3::new(b[0], b[1], b[2]), [b[3], b[4], b[5]])
    }

    pub fn to_block(&self) -> [f64; 6] {
        [
            self.t.x, self.t.y, self.t.z, self.r[0].0, self.r[1].0, self.r[2].0,
        ]
    }

    pub fn angles(&self) -> [f64; 3] {
        [self.r[0].0, self.r[1].0, self.r[2].0]
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rot3(&self.angles())
    }

    pub fn compose(&self, other: &Pose3) -> Result<Pose3> {
        let r = self.rotation();
        Pose3::from_rotation(self.t + r * other.t, &(r * other.rotation()))
    }

    pub fn inverse(&self) -> Result<Pose3> {
        let rt = self.rotation().transpose();
        Pose3::from_rotation(-(rt * self.t), &rt)
    }

    pub fn between(&self, other: &Pose3) -> Result<Pose3> {
        let rt = self.rotation().transpose();
        Pose3::from_rotation(rt * (other.t - self.t), &(rt * other.rotation()))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.t + self.rotation() * p
    }

    pub fn localize_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation().transpose() * (p - self.t)
    }
}

/// Value and Jacobians of a point expressed in the frame of a pose.
pub(crate) struct Relative {
    pub value: DVector<f64>,
    /// Derivative with respect to the frame pose block.
    pub d_frame: DMatrix<f64>,
    /// Derivative with respect to the expressed entity's own block.
    pub d_own: DMatrix<f64>,
}

/// `R_a^T (p - t_a)` for a pose block `a` and a point `p`.
pub(crate) fn relative_point(dim: Dim, a: &[f64], p: &[f64]) -> Relative {
    match dim {
        Dim::D2 => {
            let r = rot2(a[2]);
            let d = Vector2::new(p[0] - a[0], p[1] - a[1]);
            let v = r.transpose() * d;
            let dth = rot2_deriv(a[2]).transpose() * d;
            let mut d_frame = DMatrix::zeros(2, 3);
            d_frame.view_mut((0, 0), (2, 2)).copy_from(&(-r.transpose()));
            d_frame.view_mut((0, 2), (2, 1)).copy_from(&dth);
            Relative {
                value: DVector::from_column_slice(v.as_slice()),
                d_frame,
                d_own: DMatrix::from_column_slice(2, 2, r.transpose().as_slice()),
            }
        }
        Dim::D3 => {
            let ang = [a[3], a[4], a[5]];
            let r = rot3(&ang);
            let d = Vector3::new(p[0] - a[0], p[1] - a[1], p[2] - a[2]);
            let v = r.transpose() * d;
            let parts = rot3_partials(&ang);
            let mut d_frame = DMatrix::zeros(3, 6);
            d_frame.view_mut((0, 0), (3, 3)).copy_from(&(-r.transpose()));
            for (k, dr) in parts.iter().enumerate() {
                d_frame.view_mut((0, 3 + k), (3, 1)).copy_from(&(dr.transpose() * d));
            }
            Relative {
                value: DVector::from_column_slice(v.as_slice()),
                d_frame,
                d_own: DMatrix::from_column_slice(3, 3, r.transpose().as_slice()),
            }
        }
    }
}

/// Pose `b` expressed in the frame of pose `a`, with Jacobians.
/// The angle part is not wrapped in 2D (`theta_b - theta_a`).
pub(crate) fn relative_pose(dim: Dim, a: &[f64], b: &[f64]) -> Result<Relative> {
    let tdim = dim.trans_dim();
    let pd = dim.pose_dim();
    let pt = relative_point(dim, a, &b[..tdim]);
    let mut value = DVector::zeros(pd);
    let mut d_frame = DMatrix::zeros(pd, pd);
    let mut d_own = DMatrix::zeros(pd, pd);
    value.rows_mut(0, tdim).copy_from(&pt.value);
    d_frame.view_mut((0, 0), (tdim, pd)).copy_from(&pt.d_frame);
    d_own.view_mut((0, 0), (tdim, tdim)).copy_from(&pt.d_own);
    match dim {
        Dim::D2 => {
            value[2] = b[2] - a[2];
            d_frame[(2, 2)] = -1.0;
            d_own[(2, 2)] = 1.0;
        }
        Dim::D3 => {
            let aa = [a[3], a[4], a[5]];
            let ba = [b[3], b[4], b[5]];
            let ra = rot3(&aa);
            let rb = rot3(&ba);
            let rel = ra.transpose() * rb;
            let e = euler_from_rot3(&rel)?;
            value.rows_mut(3, 3).copy_from_slice(&e);
            let pa = rot3_partials(&aa);
            let pb = rot3_partials(&ba);
            for k in 0..3 {
                let da = euler_differential(&rel, &(pa[k].transpose() * rb));
                let db = euler_differential(&rel, &(ra.transpose() * pb[k]));
                d_frame.view_mut((3, 3 + k), (3, 1)).copy_from(&da);
                d_own.view_mut((3, 3 + k), (3, 1)).copy_from(&db);
            }
        }
    }
    Ok(Relative {
        value,
        d_frame,
        d_own,
    })
}
