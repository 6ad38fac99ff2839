//! Geometric primitives shared by every stage: quaternions, 3D covariances,
//! pinhole cameras and the EWA projection of a Gaussian onto the image plane.
//!
//! Conventions:
//! - quaternions are stored `(w, x, y, z)` and normalized before every
//!   conversion to a rotation matrix;
//! - a camera maps world points with `p_cam = R p_world + t`; the camera looks
//!   down `+z`, image `u` grows along `+x` and `v` along `+y` (down);
//! - pixel `(i, j)` has its center at `(i + 0.5, j + 0.5)`.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::error::{invalid, Result};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat2 = Matrix2<f64>;
pub type Mat3 = Matrix3<f64>;

/// Near-plane distance below which a Gaussian is culled.
pub const Z_NEAR: f64 = 0.01;
/// Low-pass floor added to the diagonal of every projected covariance (px²).
pub const LOW_PASS: f64 = 0.3;
const DET_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Rotation of `angle` radians about `axis`.
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let a = axis.normalize() * (0.5 * angle).sin();
        Self::new((0.5 * angle).cos(), a.x, a.y, a.z)
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(self) -> Result<Self> {
        let n = self.norm();
        if !(n > 1e-12) || !n.is_finite() {
            return invalid("zero-norm quaternion");
        }
        Ok(Self::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }
}

/// Rotation matrix of a (renormalized) quaternion.
pub fn quat_to_rotmat(q: Quaternion) -> Result<Mat3> {
    Ok(unit_quat_to_rotmat(q.normalized()?))
}

fn unit_quat_to_rotmat(q: Quaternion) -> Mat3 {
    let Quaternion { w, x, y, z } = q;
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls `dL/dR` back to the raw (possibly unnormalized) quaternion `q`,
/// including the normalization step performed by [`quat_to_rotmat`].
pub fn rotmat_backward(q: Quaternion, d_r: &Mat3) -> [f64; 4] {
    let n = q.norm();
    let u = Quaternion::new(q.w / n, q.x / n, q.y / n, q.z / n);
    let Quaternion { w, x, y, z } = u;
    let g = |i: usize, j: usize| d_r[(i, j)];
    let dw = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2)
        + z * g(2, 0)
        + w * g(2, 1)
        - 2.0 * x * g(2, 2));
    let dy = 2.0 * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
        - w * g(2, 0)
        + z * g(2, 1)
        - 2.0 * y * g(2, 2));
    let dz = 2.0 * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
        + y * g(1, 2)
        + x * g(2, 0)
        + y * g(2, 1));
    let gu = [dw, dx, dy, dz];
    let ua = u.to_array();
    let dot: f64 = gu.iter().zip(ua.iter()).map(|(a, b)| a * b).sum();
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = (gu[i] - ua[i] * dot) / n;
    }
    out
}

/// Symmetric positive semi-definite 3×3 covariance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Covariance3(pub Mat3);

impl Covariance3 {
    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }
}

/// `R diag(s)² Rᵀ`.
pub fn build_covariance(scale: Vec3, q: Quaternion) -> Result<Covariance3> {
    if !(scale.x > 0.0 && scale.y > 0.0 && scale.z > 0.0) {
        return invalid(format!("non-positive scale {scale:?}"));
    }
    let r = quat_to_rotmat(q)?;
    Ok(Covariance3(covariance_from(&r, &scale)))
}

pub(crate) fn covariance_from(r: &Mat3, scale: &Vec3) -> Mat3 {
    let s2 = Mat3::from_diagonal(&scale.component_mul(scale));
    r * s2 * r.transpose()
}

/// Pinhole camera with a world-to-camera rigid pose.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation.
    pub rotation: Mat3,
    /// World-to-camera translation.
    pub translation: Vec3,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let err = (r.transpose() * r - Mat3::identity()).abs().max();
        if err > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
            return invalid("camera rotation is not orthonormal");
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return invalid("focal lengths must be positive");
        }
        if self.width < 8 || self.height < 8 {
            return invalid("image must be at least 8x8");
        }
        Ok(())
    }

    /// Look-at camera: `+z` toward `target`, image up aligned with `up`.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, intr: Intrinsics) -> Result<Self> {
        let fwd = target - eye;
        if fwd.norm() < 1e-12 {
            return invalid("eye and target coincide");
        }
        let z = fwd.normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-9 {
            return invalid("view direction parallel to up vector");
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * eye);
        Ok(Self {
            fx: intr.fx,
            fy: intr.fy,
            cx: intr.cx,
            cy: intr.cy,
            width: intr.width,
            height: intr.height,
            rotation,
            translation,
        })
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics { fx: self.fx, fy: self.fy, cx: self.cx, cy: self.cy, width: self.width, height: self.height }
    }

    /// Camera center in world coordinates.
    pub fn position(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn world_to_cam(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn cam_to_world(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }

    pub fn k(&self) -> Mat3 {
        Mat3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn k_inv(&self) -> Mat3 {
        Mat3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Camera-frame ray with unit `z` through continuous pixel position `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Ray through the center of pixel `(i, j)`.
    pub fn pixel_ray(&self, i: usize, j: usize) -> Vec3 {
        self.ray(i as f64 + 0.5, j as f64 + 0.5)
    }

    pub fn project_cam(&self, p: &Vec3) -> Vec2 {
        Vec2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Square pixels, principal point at the image center, horizontal field of view in degrees.
    pub fn from_fov(width: usize, height: usize, fov_x_deg: f64) -> Self {
        let f = 0.5 * width as f64 / (0.5 * fov_x_deg.to_radians()).tan();
        Self { fx: f, fy: f, cx: 0.5 * width as f64, cy: 0.5 * height as f64, width, height }
    }
}

/// Which covariance a splat is rasterized with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    Render,
    Geometry,
}

/// One renderable primitive carrying both the rendering covariance and the
/// geometry covariance used by the reconstruction pass.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSplat {
    pub center: Vec3,
    pub scale: Vec3,
    pub rotation: Quaternion,
    pub opacity: f64,
    pub color: Vec3,
    pub geo_scale: Vec3,
    pub geo_rotation: Quaternion,
}

impl GaussianSplat {
    /// Splat whose geometry covariance equals its rendering covariance.
    pub fn new(center: Vec3, scale: Vec3, rotation: Quaternion, opacity: f64, color: Vec3) -> Self {
        Self { center, scale, rotation, opacity, color, geo_scale: scale, geo_rotation: rotation }
    }

    pub fn scale_rot(&self, branch: Branch) -> (Vec3, Quaternion) {
        match branch {
            Branch::Render => (self.scale, self.rotation),
            Branch::Geometry => (self.geo_scale, self.geo_rotation),
        }
    }

    pub fn covariance(&self, branch: Branch) -> Result<Covariance3> {
        let (s, q) = self.scale_rot(branch);
        build_covariance(s, q)
    }
}

/// Result of projecting a 3D Gaussian, with the intermediates the backward
/// pass needs.
#[derive(Clone, Debug)]
pub struct Projection {
    pub mean: Vec2,
    /// Screen covariance including the low-pass floor.
    pub cov: Mat2,
    /// Camera-space `z` of the center.
    pub depth: f64,
    pub cam_point: Vec3,
    pub jacobian: Matrix2x3<f64>,
    /// `W Σ Wᵀ`.
    pub cov_cam: Mat3,
}

/// EWA projection; `None` means culled (behind the near plane or degenerate).
pub fn project_gaussian(g: &GaussianSplat, cam: &Camera, branch: Branch) -> Option<Projection> {
    let (s, q) = g.scale_rot(branch);
    let r = quat_to_rotmat(q).ok()?;
    project_covariance(&g.center, &covariance_from(&r, &s), cam)
}

pub fn project_covariance(center: &Vec3, cov: &Mat3, cam: &Camera) -> Option<Projection> {
    let t = cam.world_to_cam(center);
    if t.z <= Z_NEAR {
        return None;
    }
    let iz = 1.0 / t.z;
    let jacobian = Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * t.x * iz * iz,
        0.0,
        cam.fy * iz,
        -cam.fy * t.y * iz * iz,
    );
    let cov_cam = cam.rotation * cov * cam.rotation.transpose();
    let mut cov2 = jacobian * cov_cam * jacobian.transpose();
    cov2[(0, 0)] += LOW_PASS;
    cov2[(1, 1)] += LOW_PASS;
    // enforce exact symmetry
    let off = 0.5 * (cov2[(0, 1)] + cov2[(1, 0)]);
    cov2[(0, 1)] = off;
    cov2[(1, 0)] = off;
    if cov2.determinant() <= DET_EPS {
        return None;
    }
    Some(Projection {
        mean: cam.project_cam(&t),
        cov: cov2,
        depth: t.z,
        cam_point: t,
        jacobian,
        cov_cam,
    })
}

/// Unit normal of a splat: the rotation column of its smallest scale axis,
/// oriented toward `cam_pos`. Ties resolve to the lowest axis index.
pub fn splat_normal(g: &GaussianSplat, cam_pos: &Vec3, branch: Branch) -> Vec3 {
    let (s, q) = g.scale_rot(branch);
    let r = quat_to_rotmat(q).unwrap_or_else(|_| Mat3::identity());
    let (n, _, _) = normal_axis(&r, &s, &g.center, cam_pos);
    n
}

/// Returns `(normal, axis, sign)` where `normal = sign * R[:, axis]`.
pub(crate) fn normal_axis(r: &Mat3, s: &Vec3, center: &Vec3, cam_pos: &Vec3) -> (Vec3, usize, f64) {
    let mut axis = 0;
    for k in 1..3 {
        if s[k] < s[axis] {
            axis = k;
        }
    }
    let col: Vec3 = r.column(axis).into();
    let sign = if col.dot(&(cam_pos - center)) < 0.0 { -1.0 } else { 1.0 };
    (col * sign, axis, sign)
}

/// `exp(-½ dᵀ Σ⁻¹ d)`; `None` when the covariance is singular.
pub fn eval_gaussian2d(mean: &Vec2, cov: &Mat2, pixel: &Vec2) -> Option<f64> {
    if cov.determinant().abs() <= DET_EPS {
        return None;
    }
    let inv = cov.try_inverse()?;
    let d = pixel - mean;
    Some((-0.5 * d.dot(&(inv * d))).exp())
}
