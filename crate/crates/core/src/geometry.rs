//! Rigid-body geometry for the streaming detector: poses as 4x4 homogeneous
//! matrices, frame-to-frame query alignment, constant-velocity motion
//! compensation, and pinhole projection for the synthetic cameras.
//!
//! Convention: an ego pose maps ego-frame coordinates at its timestamp to
//! global coordinates. All of this is plain f64 arithmetic; none of it is
//! recorded on an autodiff tape, so stored box centers act as constants when
//! they re-enter the network.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn zero() -> Self {
        Vec3 { x: 0.0, y: 0.0, z: 0.0 }
    }

    pub fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn scale(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn norm(self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn dist(self, o: Vec3) -> f64 {
        self.sub(o).norm()
    }

    /// Planar (x, y) distance, the metric used for detection matching.
    pub fn dist_xy(self, o: Vec3) -> f64 {
        let dx = self.x - o.x;
        let dy = self.y - o.y;
        (dx * dx + dy * dy).sqrt()
    }
}

/// Planar velocity in the global frame, meters per second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Velocity2 {
    pub x: f64,
    pub y: f64,
}

impl Velocity2 {
    pub fn new(x: f64, y: f64) -> Self {
        Velocity2 { x, y }
    }

    pub fn zero() -> Self {
        Velocity2 { x: 0.0, y: 0.0 }
    }

    pub fn speed(self) -> f64 {
        (self.x * self.x + self.y * self.y).sqrt()
    }
}

/// Rigid transform as a 4x4 homogeneous matrix, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    mat: [[f64; 4]; 4],
}

impl Pose {
    pub fn identity() -> Self {
        let mut mat = [[0.0; 4]; 4];
        for i in 0..4 {
            mat[i][i] = 1.0;
        }
        Pose { mat }
    }

    pub fn from_parts(r: [[f64; 3]; 3], t: Vec3) -> Self {
        let mut mat = [[0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                mat[i][j] = r[i][j];
            }
        }
        mat[0][3] = t.x;
        mat[1][3] = t.y;
        mat[2][3] = t.z;
        mat[3][3] = 1.0;
        Pose { mat }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Pose::from_parts([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], t)
    }

    /// Rotation about +z by `yaw`, then translation.
    pub fn from_yaw(yaw: f64, t: Vec3) -> Self {
        let (s, c) = yaw.sin_cos();
        Pose::from_parts([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]], t)
    }

    /// Rodrigues rotation about a (non-zero) axis, plus translation.
    pub fn from_axis_angle(axis: Vec3, angle: f64, t: Vec3) -> Self {
        let n = axis.norm();
        assert!(n > 0.0, "rotation axis must be non-zero");
        let (ux, uy, uz) = (axis.x / n, axis.y / n, axis.z / n);
        let (s, c) = angle.sin_cos();
        let ic = 1.0 - c;
        let r = [
            [c + ux * ux * ic, ux * uy * ic - uz * s, ux * uz * ic + uy * s],
            [uy * ux * ic + uz * s, c + uy * uy * ic, uy * uz * ic - ux * s],
            [uz * ux * ic - uy * s, uz * uy * ic + ux * s, c + uz * uz * ic],
        ];
        Pose::from_parts(r, t)
    }

    /// Parse a row-major 16-element matrix, validating rigidity: unit bottom
    /// row, orthonormal rotation, determinant +1.
    pub fn try_from_flat(v: &[f64]) -> std::result::Result<Pose, String> {
        if v.len() != 16 {
            return Err(format!("pose needs 16 values, got {}", v.len()));
        }
        let mut mat = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                mat[i][j] = v[i * 4 + j];
            }
        }
        let p = Pose { mat };
        let tol = 1e-6;
        let bottom = [0.0, 0.0, 0.0, 1.0];
        for j in 0..4 {
            if (mat[3][j] - bottom[j]).abs() > tol {
                return Err(format!("bottom row {:?} is not [0, 0, 0, 1]", mat[3]));
            }
        }
        // R^T R == I.
        for a in 0..3 {
            for b in 0..3 {
                let dot: f64 = (0..3).map(|k| mat[k][a] * mat[k][b]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                if (dot - want).abs() > tol {
                    return Err(format!("rotation block is not orthonormal (R^T R [{a}][{b}] = {dot})"));
                }
            }
        }
        let det = mat[0][0] * (mat[1][1] * mat[2][2] - mat[1][2] * mat[2][1])
            - mat[0][1] * (mat[1][0] * mat[2][2] - mat[1][2] * mat[2][0])
            + mat[0][2] * (mat[1][0] * mat[2][1] - mat[1][1] * mat[2][0]);
        if (det - 1.0).abs() > tol {
            return Err(format!("rotation determinant {det} is not +1"));
        }
        Ok(p)
    }

    pub fn to_flat(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for i in 0..4 {
            for j in 0..4 {
                out[i * 4 + j] = self.mat[i][j];
            }
        }
        out
    }

    pub fn translation(&self) -> Vec3 {
        Vec3::new(self.mat[0][3], self.mat[1][3], self.mat[2][3])
    }

    /// Rotation block, row-major, 9 values.
    pub fn rotation_flat(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                out[i * 3 + j] = self.mat[i][j];
            }
        }
        out
    }

    /// Heading of the rotated +x axis in the xy plane.
    pub fn yaw(&self) -> f64 {
        self.mat[1][0].atan2(self.mat[0][0])
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        let mut mat = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += self.mat[i][k] * other.mat[k][j];
                }
                mat[i][j] = acc;
            }
        }
        Pose { mat }
    }

    /// Analytic rigid inverse: `[R | t]^-1 = [R^T | -R^T t]`.
    pub fn inverse(&self) -> Pose {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = self.mat[j][i];
            }
        }
        let t = self.translation();
        let nt = Vec3::new(
            -(r[0][0] * t.x + r[0][1] * t.y + r[0][2] * t.z),
            -(r[1][0] * t.x + r[1][1] * t.y + r[1][2] * t.z),
            -(r[2][0] * t.x + r[2][1] * t.y + r[2][2] * t.z),
        );
        Pose::from_parts(r, nt)
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        Vec3::new(
            self.mat[0][0] * p.x + self.mat[0][1] * p.y + self.mat[0][2] * p.z + self.mat[0][3],
            self.mat[1][0] * p.x + self.mat[1][1] * p.y + self.mat[1][2] * p.z + self.mat[1][3],
            self.mat[2][0] * p.x + self.mat[2][1] * p.y + self.mat[2][2] * p.z + self.mat[2][3],
        )
    }

    /// Largest absolute entry-wise difference between two poses.
    pub fn max_abs_diff(&self, other: &Pose) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                m = m.max((self.mat[i][j] - other.mat[i][j]).abs());
            }
        }
        m
    }

    /// Random rigid pose: rotation axis uniform on the sphere, angle in
    /// [0, pi), translation uniform in a cube of half-width `max_trans`.
    pub fn random<R: Rng>(rng: &mut R, max_trans: f64) -> Pose {
        let z: f64 = rng.gen::<f64>() * 2.0 - 1.0;
        let phi = rng.gen::<f64>() * std::f64::consts::TAU;
        let r = (1.0 - z * z).max(0.0).sqrt();
        let axis = Vec3::new(r * phi.cos(), r * phi.sin(), z);
        let angle = rng.gen::<f64>() * std::f64::consts::PI;
        let t = Vec3::new(
            (rng.gen::<f64>() * 2.0 - 1.0) * max_trans,
            (rng.gen::<f64>() * 2.0 - 1.0) * max_trans,
            (rng.gen::<f64>() * 2.0 - 1.0) * max_trans,
        );
        // A zero axis can only happen at z = +-1 with r exactly 0; nudge.
        if axis.norm() == 0.0 {
            return Pose::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), angle, t);
        }
        Pose::from_axis_angle(axis, angle, t)
    }
}

/// Transform taking coordinates in the earlier ego frame to the current one:
/// `E_cur^-1 . E_prev`.
pub fn relative_ego_pose(e_prev: &Pose, e_cur: &Pose) -> Pose {
    e_cur.inverse().compose(e_prev)
}

/// Re-express a stored center (earlier ego frame) in the current ego frame,
/// assuming the object did not move in the global frame.
pub fn align_center(rel: &Pose, center_prev: Vec3) -> Vec3 {
    rel.apply(center_prev)
}

/// Constant-velocity compensation: move the stored center through the global
/// frame by `v * dt`, then express it in the current ego frame.
pub fn linear_motion_compensate(
    center_prev: Vec3,
    v: Velocity2,
    e_prev: &Pose,
    e_cur: &Pose,
    dt: f64,
) -> Vec3 {
    let global = e_prev.apply(center_prev);
    let moved = Vec3::new(global.x + v.x * dt, global.y + v.y * dt, global.z);
    e_cur.inverse().apply(moved)
}

/// Axis-aligned world extent used to normalize coordinates into [0, 1] for
/// the network. Normalization is affine and unclamped: out-of-bounds points
/// map outside [0, 1] rather than erroring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldBounds {
    pub min: Vec3,
    pub max: Vec3,
}

impl WorldBounds {
    pub fn validate(&self) -> crate::error::Result<()> {
        if self.max.x > self.min.x && self.max.y > self.min.y && self.max.z > self.min.z {
            Ok(())
        } else {
            Err(crate::error::Error::Config(format!(
                "world bounds must have positive extent on every axis: min {:?}, max {:?}",
                self.min, self.max
            )))
        }
    }

    pub fn extent(&self) -> Vec3 {
        self.max.sub(self.min)
    }

    pub fn normalize(&self, p: Vec3) -> [f64; 3] {
        let e = self.extent();
        [(p.x - self.min.x) / e.x, (p.y - self.min.y) / e.y, (p.z - self.min.z) / e.z]
    }

    pub fn denormalize(&self, n: [f64; 3]) -> Vec3 {
        let e = self.extent();
        Vec3::new(self.min.x + n[0] * e.x, self.min.y + n[1] * e.y, self.min.z + n[2] * e.z)
    }

    /// Planar velocity in box-widths per second, so regression targets share
    /// the scale of normalized centers.
    pub fn normalize_velocity(&self, v: Velocity2) -> [f64; 2] {
        let e = self.extent();
        [v.x / e.x, v.y / e.y]
    }

    pub fn denormalize_velocity(&self, n: [f64; 2]) -> Velocity2 {
        let e = self.extent();
        Velocity2::new(n[0] * e.x, n[1] * e.y)
    }

    pub fn contains(&self, p: Vec3) -> bool {
        p.x >= self.min.x
            && p.x <= self.max.x
            && p.y >= self.min.y
            && p.y <= self.max.y
            && p.z >= self.min.z
            && p.z <= self.max.z
    }
}

/// Pinhole camera: `pose` maps ego-frame points into the camera frame
/// (x right, y down, z forward).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraConfig {
    pub pose: Pose,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl CameraConfig {
    /// Camera on the ego body looking along `yaw` (0 = +x forward), with a
    /// given horizontal field of view.
    pub fn on_ego(yaw: f64, hfov_rad: f64, width: f64, height: f64) -> Self {
        // Camera axes in ego coordinates: z_cam = forward, x_cam = right
        // (-90 deg from forward around +z), y_cam = down.
        let (s, c) = yaw.sin_cos();
        let fwd = [c, s, 0.0];
        let right = [s, -c, 0.0];
        let down = [0.0, 0.0, -1.0];
        // Rows of R map ego coords onto camera axes.
        let r = [
            [right[0], right[1], right[2]],
            [down[0], down[1], down[2]],
            [fwd[0], fwd[1], fwd[2]],
        ];
        let fx = width / 2.0 / (hfov_rad / 2.0).tan();
        CameraConfig {
            pose: Pose::from_parts(r, Vec3::zero()),
            fx,
            fy: fx,
            cx: width / 2.0,
            cy: height / 2.0,
            width,
            height,
        }
    }

    /// Project an ego-frame point. `None` when at or behind the image plane
    /// or outside the frame bounds.
    pub fn project_point(&self, p_ego: Vec3) -> Option<(f64, f64, f64)> {
        let p = self.pose.apply(p_ego);
        if p.z <= 0.0 {
            return None;
        }
        let u = self.fx * p.x / p.z + self.cx;
        let v = self.fy * p.y / p.z + self.cy;
        if u < 0.0 || u >= self.width || v < 0.0 || v >= self.height {
            return None;
        }
        Some((u, v, p.z))
    }
}
