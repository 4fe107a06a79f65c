//! SE(3) poses, pinhole cameras, and ray generation.
//!
//! Conventions: right-handed world frame, poses are camera-to-world, the
//! camera looks down -z with y up, pixel v grows downward. Twists are
//! rotation-first: `(wx, wy, wz, vx, vy, vz)`.

use serde::{Deserialize, Serialize};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];
pub type Twist = [f64; 6];

pub const IDENTITY_MAT3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Default ray segment; modules clip it against their own bounds.
pub const DEFAULT_NEAR: f64 = 1e-4;
pub const DEFAULT_FAR: f64 = 8.0;

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    scale(a, 1.0 / n)
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    c
}

pub fn mat_vec(a: &Mat3, v: Vec3) -> Vec3 {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

pub fn transpose(a: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = a[j][i];
        }
    }
    t
}

fn skew(w: Vec3) -> Mat3 {
    [
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ]
}

fn mat_add(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = a[i][j] + b[i][j];
        }
    }
    c
}

fn mat_scale(a: &Mat3, s: f64) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = a[i][j] * s;
        }
    }
    c
}

/// Rigid transform: rotation matrix plus translation, camera-to-world.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub r: Mat3,
    pub t: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            r: IDENTITY_MAT3,
            t: [0.0; 3],
        }
    }

    /// self * other (apply `other` first).
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            r: mat_mul(&self.r, &other.r),
            t: add(mat_vec(&self.r, other.t), self.t),
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = transpose(&self.r);
        Pose {
            r: rt,
            t: scale(mat_vec(&rt, self.t), -1.0),
        }
    }

    /// R p + t.
    pub fn apply(&self, p: Vec3) -> Vec3 {
        add(mat_vec(&self.r, p), self.t)
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        mat_vec(&self.r, v)
    }

    /// Largest absolute entry of R^T R - I.
    pub fn orthonormality_error(&self) -> f64 {
        let g = mat_mul(&transpose(&self.r), &self.r);
        let mut e: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                e = e.max((g[i][j] - target).abs());
            }
        }
        e
    }

    /// Row-major rotation followed by translation, as stored on disk.
    pub fn to_flat(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for i in 0..3 {
            for j in 0..3 {
                out[3 * i + j] = self.r[i][j];
            }
        }
        out[9..].copy_from_slice(&self.t);
        out
    }

    pub fn from_flat(v: &[f64; 12]) -> Pose {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = v[3 * i + j];
            }
        }
        Pose {
            r,
            t: [v[9], v[10], v[11]],
        }
    }
}

/// Closed-form SE(3) exponential (Rodrigues plus the V matrix).
pub fn se3_exp(xi: &Twist) -> Pose {
    let w = [xi[0], xi[1], xi[2]];
    let v = [xi[3], xi[4], xi[5]];
    let theta2 = dot(w, w);
    let theta = theta2.sqrt();
    let wx = skew(w);
    let wx2 = mat_mul(&wx, &wx);
    // a = sin(t)/t, b = (1-cos(t))/t^2, c = (t-sin(t))/t^3, Taylor below 1e-5.
    let (a, b, c) = if theta < 1e-5 {
        (
            1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0,
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
            1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0,
        )
    } else {
        (
            theta.sin() / theta,
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    let r = mat_add(&IDENTITY_MAT3, &mat_add(&mat_scale(&wx, a), &mat_scale(&wx2, b)));
    let vmat = mat_add(&IDENTITY_MAT3, &mat_add(&mat_scale(&wx, b), &mat_scale(&wx2, c)));
    Pose {
        r,
        t: mat_vec(&vmat, v),
    }
}

/// Unit quaternion (w, x, y, z) from a rotation matrix; Shepperd's method
/// picks the numerically stable branch for every angle range.
fn rot_to_quat(r: &Mat3) -> [f64; 4] {
    let tr = r[0][0] + r[1][1] + r[2][2];
    if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (r[2][1] - r[1][2]) / s,
            (r[0][2] - r[2][0]) / s,
            (r[1][0] - r[0][1]) / s,
        ]
    } else if r[0][0] > r[1][1] && r[0][0] > r[2][2] {
        let s = (1.0 + r[0][0] - r[1][1] - r[2][2]).sqrt() * 2.0;
        [
            (r[2][1] - r[1][2]) / s,
            0.25 * s,
            (r[0][1] + r[1][0]) / s,
            (r[0][2] + r[2][0]) / s,
        ]
    } else if r[1][1] > r[2][2] {
        let s = (1.0 + r[1][1] - r[0][0] - r[2][2]).sqrt() * 2.0;
        [
            (r[0][2] - r[2][0]) / s,
            (r[0][1] + r[1][0]) / s,
            0.25 * s,
            (r[1][2] + r[2][1]) / s,
        ]
    } else {
        let s = (1.0 + r[2][2] - r[0][0] - r[1][1]).sqrt() * 2.0;
        [
            (r[1][0] - r[0][1]) / s,
            (r[0][2] + r[2][0]) / s,
            (r[1][2] + r[2][1]) / s,
            0.25 * s,
        ]
    }
}

/// SE(3) logarithm, inverse of [`se3_exp`]; stable near 0 and pi.
pub fn se3_log(pose: &Pose) -> Twist {
    let q = rot_to_quat(&pose.r);
    // Canonical sign keeps theta in [0, pi].
    let sgn = if q[0] < 0.0 { -1.0 } else { 1.0 };
    let v = [sgn * q[1], sgn * q[2], sgn * q[3]];
    let vn = norm(v);
    let theta = 2.0 * vn.atan2(sgn * q[0]);
    // w = axis * theta = v * theta / sin(theta/2), with sin(theta/2) = |v|.
    let w = if vn < 1e-300 {
        [0.0; 3]
    } else {
        scale(v, theta / vn)
    };
    let theta2 = dot(w, w);
    let wx = skew(w);
    let wx2 = mat_mul(&wx, &wx);
    // V^-1 = I - wx/2 + d wx^2 with d = (1 - t sin t / (2 (1-cos t))) / t^2.
    let d = if theta < 1e-2 {
        // Closed form cancels catastrophically in 1-cos below ~1e-2.
        1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
    } else {
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / theta2
    };
    let vinv = mat_add(
        &IDENTITY_MAT3,
        &mat_add(&mat_scale(&wx, -0.5), &mat_scale(&wx2, d)),
    );
    let v = mat_vec(&vinv, pose.t);
    [w[0], w[1], w[2], v[0], v[1], v[2]]
}

/// Translation distance and rotation geodesic angle between two poses.
#[derive(Clone, Copy, Debug)]
pub struct PoseError {
    pub trans: f64,
    pub rot_rad: f64,
}

impl PoseError {
    pub fn rot_deg(&self) -> f64 {
        self.rot_rad.to_degrees()
    }
}

pub fn pose_error(est: &Pose, gt: &Pose) -> PoseError {
    let dr = mat_mul(&transpose(&gt.r), &est.r);
    let cos_theta = ((dr[0][0] + dr[1][1] + dr[2][2] - 1.0) / 2.0).clamp(-1.0, 1.0);
    PoseError {
        trans: norm(sub(est.t, gt.t)),
        rot_rad: cos_theta.acos(),
    }
}

/// Camera-to-world pose with eye at `eye`, looking at `target`.
pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Pose {
    let z = normalize(sub(eye, target));
    let x = normalize(cross(up, z));
    let y = cross(z, x);
    Pose {
        r: [
            [x[0], y[0], z[0]],
            [x[1], y[1], z[1]],
            [x[2], y[2], z[2]],
        ],
        t: eye,
    }
}

/// Pinhole camera; intrinsics act on continuous pixel coordinates where the
/// center of integer pixel (u, v) is (u + 0.5, v + 0.5).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub pose: Pose,
}

impl Camera {
    /// Square camera with the given vertical field of view in degrees.
    pub fn with_fov(width: u32, height: u32, fov_deg: f64, pose: Pose) -> Camera {
        let f = 0.5 * height as f64 / (0.5 * fov_deg.to_radians()).tan();
        Camera {
            fx: f,
            fy: f,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            pose,
        }
    }

    /// Continuous pixel coordinates of a world point, None behind the camera.
    pub fn project(&self, p_world: Vec3) -> Option<[f64; 2]> {
        let pc = self.pose.inverse().apply(p_world);
        if pc[2] >= -1e-12 {
            return None;
        }
        let depth = -pc[2];
        Some([
            self.cx + self.fx * pc[0] / depth,
            self.cy - self.fy * pc[1] / depth,
        ])
    }

    /// World point at `depth` along the viewing axis through `pixel`.
    pub fn unproject(&self, pixel: [f64; 2], depth: f64) -> Vec3 {
        let xc = (pixel[0] - self.cx) * depth / self.fx;
        let yc = (self.cy - pixel[1]) * depth / self.fy;
        self.pose.apply([xc, yc, -depth])
    }

    /// Unit direction in camera frame through continuous pixel coordinates.
    pub fn dir_cam(&self, u: f64, v: f64) -> Vec3 {
        normalize([(u - self.cx) / self.fx, (self.cy - v) / self.fy, -1.0])
    }
}

/// One camera ray through a pixel center.
#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub near: f64,
    pub far: f64,
    pub pixel: (u32, u32),
}

/// Rays through the centers of the given integer pixels.
pub fn generate_rays(camera: &Camera, pixels: &[(u32, u32)]) -> Vec<Ray> {
    pixels
        .iter()
        .map(|&(u, v)| {
            let d = camera.dir_cam(u as f64 + 0.5, v as f64 + 0.5);
            Ray {
                origin: camera.pose.t,
                dir: camera.pose.rotate(d),
                near: DEFAULT_NEAR,
                far: DEFAULT_FAR,
                pixel: (u, v),
            }
        })
        .collect()
}

/// Entry/exit distances of a ray against an axis-aligned box, if it hits.
pub fn ray_box(origin: Vec3, dir: Vec3, lo: Vec3, hi: Vec3) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for i in 0..3 {
        if dir[i].abs() < 1e-12 {
            if origin[i] < lo[i] || origin[i] > hi[i] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[i];
        let (mut a, mut b) = ((lo[i] - origin[i]) * inv, (hi[i] - origin[i]) * inv);
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        t0 = t0.max(a);
        t1 = t1.min(b);
    }
    if t0 <= t1 && t1 > 0.0 {
        Some((t0.max(0.0), t1))
    } else {
        None
    }
}
