//! SE(3) algebra, pinhole projection, and perspective-crop camera
//! construction.
//!
//! Everything downstream (rasterization, feature lifting, the LM solver)
//! routes its pose transforms and Jacobians through this module, so the
//! conventions are fixed here once: rotations are 3x3 orthonormal matrices,
//! `transform_point` computes `R*x + t`, twists are ordered `(v, omega)`, and
//! pose updates are applied by left-multiplication.

use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3, Vector6};
use thiserror::Error;

pub type Mat3 = Matrix3<f64>;
pub type Vec3 = Vector3<f64>;
pub type Vec2 = Vector2<f64>;

/// Below this rotation magnitude exp/log switch to their Taylor expansions.
const SMALL_ANGLE: f64 = 1e-8;
/// Rotations closer than this to pi are rejected by [`log_se3`].
const ANGLE_NEAR_PI_TOL: f64 = 1e-6;
/// Points with camera-frame depth at or below this are "behind" the camera.
pub const MIN_DEPTH: f64 = 1e-9;
/// Extra margin around the 2D box when building a crop camera.
pub const CROP_MARGIN: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("rotation angle within {ANGLE_NEAR_PI_TOL:e} of pi; logarithm is ill-conditioned")]
    AngleNearPi,
    #[error("point behind camera (z = {z:.6e})")]
    BehindCamera { z: f64 },
    #[error("bounding box has zero area")]
    DegenerateBox,
    #[error("bounding box does not intersect the image")]
    BoxOutsideImage,
}

/// Rigid transform mapping points as `rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation,
        }
    }

    /// `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rot_inv = self.rotation.transpose();
        RigidTransform {
            rotation: rot_inv,
            translation: -(rot_inv * self.translation),
        }
    }

    pub fn transform_point(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    /// Max elementwise deviation of `R^T R` from identity plus |det - 1|.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.rotation.transpose() * self.rotation;
        let mut err: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                err = err.max((gram[(i, j)] - target).abs());
            }
        }
        err.max((self.rotation.determinant() - 1.0).abs())
    }

    /// Nearest rotation in Frobenius norm (SVD projection), det fixed to +1.
    pub fn orthonormalized(&self) -> RigidTransform {
        let svd = self.rotation.svd(true, true);
        let u = svd.u.expect("svd of 3x3 always has u");
        let vt = svd.v_t.expect("svd of 3x3 always has v_t");
        let mut rot = u * vt;
        if rot.determinant() < 0.0 {
            let mut u_fix = u;
            u_fix.column_mut(2).scale_mut(-1.0);
            rot = u_fix * vt;
        }
        RigidTransform {
            rotation: rot,
            translation: self.translation,
        }
    }

    /// Row-major 12-number (R|t) representation, rows of the 3x4 matrix.
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t[0],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t[1],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t[2],
        ]
    }

    pub fn from_row_major(m: &[f64; 12]) -> Self {
        Self {
            rotation: Mat3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]),
            translation: Vec3::new(m[3], m[7], m[11]),
        }
    }
}

/// se(3) increment: translational part `v`, rotational part `omega` (radians).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub v: Vec3,
    pub omega: Vec3,
}

impl Twist {
    pub fn zero() -> Self {
        Self {
            v: Vec3::zeros(),
            omega: Vec3::zeros(),
        }
    }

    /// Stacked 6-vector in `(v, omega)` block order.
    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.v[0],
            self.v[1],
            self.v[2],
            self.omega[0],
            self.omega[1],
            self.omega[2],
        )
    }

    pub fn from_vector(xi: &Vector6<f64>) -> Self {
        Self {
            v: Vec3::new(xi[0], xi[1], xi[2]),
            omega: Vec3::new(xi[3], xi[4], xi[5]),
        }
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }
}

pub fn skew(w: &Vec3) -> Mat3 {
    Mat3::new(0.0, -w[2], w[1], w[2], 0.0, -w[0], -w[1], w[0], 0.0)
}

/// Exponential map se(3) -> SE(3): Rodrigues rotation plus V-matrix
/// integrated translation. Total function; switches to the Taylor series
/// below [`SMALL_ANGLE`].
pub fn exp_se3(xi: &Twist) -> RigidTransform {
    let theta_sq = xi.omega.norm_squared();
    let w = skew(&xi.omega);
    let w_sq = w * w;
    // a = sin(t)/t, b = (1-cos(t))/t^2, c = (t-sin(t))/t^3
    let (a, b, c) = if theta_sq < SMALL_ANGLE * SMALL_ANGLE {
        (
            1.0 - theta_sq / 6.0,
            0.5 - theta_sq / 24.0,
            1.0 / 6.0 - theta_sq / 120.0,
        )
    } else {
        let theta = theta_sq.sqrt();
        (
            theta.sin() / theta,
            (1.0 - theta.cos()) / theta_sq,
            (theta - theta.sin()) / (theta * theta_sq),
        )
    };
    let rotation = Mat3::identity() + w * a + w_sq * b;
    let v_mat = Mat3::identity() + w * b + w_sq * c;
    RigidTransform {
        rotation,
        translation: v_mat * xi.v,
    }
}

/// Logarithm SE(3) -> se(3), inverse of [`exp_se3`].
///
/// Fails with [`GeometryError::AngleNearPi`] when the rotation angle is
/// within 1e-6 of pi, where the axis is not recoverable from `R - R^T`.
pub fn log_se3(t: &RigidTransform) -> Result<Twist, GeometryError> {
    let r = &t.rotation;
    // s_vec = sin(theta) * axis, cos_t = cos(theta)
    let s_vec = Vec3::new(
        (r[(2, 1)] - r[(1, 2)]) * 0.5,
        (r[(0, 2)] - r[(2, 0)]) * 0.5,
        (r[(1, 0)] - r[(0, 1)]) * 0.5,
    );
    let cos_t = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let sin_t = s_vec.norm();
    let theta = sin_t.atan2(cos_t);
    if theta >= std::f64::consts::PI - ANGLE_NEAR_PI_TOL {
        return Err(GeometryError::AngleNearPi);
    }
    let omega = if theta < SMALL_ANGLE {
        // theta/sin(theta) ~ 1 + theta^2/6
        s_vec * (1.0 + theta * theta / 6.0)
    } else {
        s_vec * (theta / sin_t)
    };
    let w = skew(&omega);
    let w_sq = w * w;
    let theta_sq = theta * theta;
    let d = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta_sq / 720.0
    } else {
        (1.0 - theta * sin_t / (2.0 * (1.0 - cos_t))) / theta_sq
    };
    let v_inv = Mat3::identity() - w * 0.5 + w_sq * d;
    Ok(Twist {
        v: v_inv * t.translation,
        omega,
    })
}

/// Rotation angle of `r` in radians, in [0, pi].
pub fn rotation_angle(r: &Mat3) -> f64 {
    (((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0)).acos()
}

/// Geodesic angle between two rotations in radians.
pub fn rotation_distance(a: &Mat3, b: &Mat3) -> f64 {
    rotation_angle(&(a.transpose() * b))
}

/// Pinhole camera with pixel-unit focal lengths and principal point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl PinholeCamera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        debug_assert!(fx > 0.0 && fy > 0.0 && width >= 1 && height >= 1);
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        }
    }

    /// Project a camera-frame point to pixel coordinates.
    pub fn project(&self, x_cam: &Vec3) -> Result<Vec2, GeometryError> {
        let z = x_cam[2];
        if z <= MIN_DEPTH {
            return Err(GeometryError::BehindCamera { z });
        }
        Ok(Vec2::new(
            self.fx * x_cam[0] / z + self.cx,
            self.fy * x_cam[1] / z + self.cy,
        ))
    }

    /// d(u,v)/d(x,y,z) of [`Self::project`] at `x_cam`.
    pub fn project_jacobian(&self, x_cam: &Vec3) -> Result<Matrix2x3<f64>, GeometryError> {
        let z = x_cam[2];
        if z <= MIN_DEPTH {
            return Err(GeometryError::BehindCamera { z });
        }
        let z_inv = 1.0 / z;
        let z_inv_sq = z_inv * z_inv;
        Ok(Matrix2x3::new(
            self.fx * z_inv,
            0.0,
            -self.fx * x_cam[0] * z_inv_sq,
            0.0,
            self.fy * z_inv,
            -self.fy * x_cam[1] * z_inv_sq,
        ))
    }

    /// Camera-frame point on the ray through pixel `uv` at depth `z`.
    pub fn unproject(&self, uv: &Vec2, z: f64) -> Vec3 {
        Vec3::new(
            (uv[0] - self.cx) / self.fx * z,
            (uv[1] - self.cy) / self.fy * z,
            z,
        )
    }

    /// Unit-depth direction of the ray through pixel `uv`.
    pub fn ray_dir(&self, uv: &Vec2) -> Vec3 {
        Vec3::new((uv[0] - self.cx) / self.fx, (uv[1] - self.cy) / self.fy, 1.0)
    }

    pub fn contains(&self, uv: &Vec2) -> bool {
        uv[0] >= 0.0 && uv[1] >= 0.0 && uv[0] < self.width as f64 && uv[1] < self.height as f64
    }
}

/// Axis-aligned 2D box in pixel coordinates, `[x_min, y_min, x_max, y_max]`.
pub type Bbox2 = [f64; 4];

/// Build a virtual crop camera for a 2D detection box.
///
/// The crop camera shares the optical center of `cam`; its optical axis is
/// rotated (rotation only, no translation) to pass through the box center,
/// and its focal length is chosen so the box plus a [`CROP_MARGIN`] margin
/// fills a `crop_size` x `crop_size` image. Returns the crop camera and the
/// world-to-crop-camera transform `T_C'W = R_C'C * T_CW`.
pub fn make_crop_camera(
    cam: &PinholeCamera,
    t_cw: &RigidTransform,
    bbox: &Bbox2,
    crop_size: u32,
) -> Result<(PinholeCamera, RigidTransform), GeometryError> {
    let [x0, y0, x1, y1] = *bbox;
    if !(x1 > x0 && y1 > y0) {
        return Err(GeometryError::DegenerateBox);
    }
    if x1 <= 0.0 || y1 <= 0.0 || x0 >= cam.width as f64 || y0 >= cam.height as f64 {
        return Err(GeometryError::BoxOutsideImage);
    }

    let center = Vec2::new((x0 + x1) * 0.5, (y0 + y1) * 0.5);
    let z_axis = cam.ray_dir(&center).normalize();
    // Keep the crop image upright-ish: derive x from the original camera x.
    let hint = if z_axis[0].abs() < 0.999 {
        Vec3::new(1.0, 0.0, 0.0)
    } else {
        Vec3::new(0.0, 1.0, 0.0)
    };
    let x_axis = (hint - z_axis * hint.dot(&z_axis)).normalize();
    let y_axis = z_axis.cross(&x_axis);
    // Rows of R_C'C are the crop-camera axes expressed in the original frame.
    let r_crop_cam = Mat3::from_rows(&[x_axis.transpose(), y_axis.transpose(), z_axis.transpose()]);

    // Angular half-extent of the box as seen by the rotated camera. The box
    // maps to a convex quad in tangent space, so corners are extremal.
    let mut half_extent: f64 = 0.0;
    for corner in [
        Vec2::new(x0, y0),
        Vec2::new(x1, y0),
        Vec2::new(x0, y1),
        Vec2::new(x1, y1),
    ] {
        let q = r_crop_cam * cam.ray_dir(&corner);
        if q[2] <= MIN_DEPTH {
            return Err(GeometryError::DegenerateBox);
        }
        half_extent = half_extent
            .max((q[0] / q[2]).abs())
            .max((q[1] / q[2]).abs());
    }
    if half_extent <= 0.0 {
        return Err(GeometryError::DegenerateBox);
    }

    let half_size = crop_size as f64 * 0.5;
    let focal = half_size / ((1.0 + CROP_MARGIN) * half_extent);
    let crop_cam = PinholeCamera::new(focal, focal, half_size, half_size, crop_size, crop_size);
    let t_crop_w = RigidTransform::new(r_crop_cam, Vec3::zeros()).compose(t_cw);
    Ok((crop_cam, t_crop_w))
}
