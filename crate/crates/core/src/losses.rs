//! Training objectives with exact gradients: photometric L1 + D-SSIM, the
//! depth/normal plane consistency term and the cross-view forward-backward
//! homography term.

use crate::error::{invalid, Result};
use crate::geom::{Camera, Mat3, Vec2, Vec3};
use crate::image::FloatMap;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
/// Pixels count as covered when the rendered alpha exceeds this.
pub const ALPHA_VALID: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the cross-view term.
    pub cross: f64,
    /// Weight of the plane term.
    pub plane: f64,
    /// D-SSIM share inside the photometric term.
    pub ssim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cross: 0.01, plane: 0.2, ssim: 0.2 }
    }
}

/// `L = L_c + w.cross·L_cross + w.plane·L_plane`.
pub fn total_loss(l_c: f64, l_plane: f64, l_cross: f64, w: &LossWeights) -> f64 {
    l_c + w.cross * l_cross + w.plane * l_plane
}

fn window() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut w = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable Gaussian blur of a single-channel plane with zero padding.
/// The kernel is symmetric, so this operator is its own adjoint.
fn blur(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = window();
    let r = SSIM_RADIUS as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let xx = x as isize + t as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * src[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let yy = y as isize + t as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn channel(m: &FloatMap, c: usize) -> Vec<f64> {
    (0..m.width * m.height).map(|i| m.data[i * m.channels + c]).collect()
}

/// Mean SSIM over pixels and channels, and optionally `dSSIM/dimg`.
fn ssim_impl(img: &FloatMap, gt: &FloatMap, want_grad: bool) -> (f64, Option<FloatMap>) {
    let (w, h) = (img.width, img.height);
    let n = (w * h * img.channels) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| img.zeros_like());
    for c in 0..img.channels {
        let x = channel(img, c);
        let y = channel(gt, c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let mx = blur(&x, w, h);
        let my = blur(&y, w, h);
        let ex2 = blur(&xx, w, h);
        let ey2 = blur(&yy, w, h);
        let exy = blur(&xy, w, h);
        let mut d_mu = vec![0.0; w * h];
        let mut d_ex2 = vec![0.0; w * h];
        let mut d_exy = vec![0.0; w * h];
        for i in 0..w * h {
            let a1 = 2.0 * mx[i] * my[i] + SSIM_C1;
            let a2 = 2.0 * (exy[i] - mx[i] * my[i]) + SSIM_C2;
            let b1 = mx[i] * mx[i] + my[i] * my[i] + SSIM_C1;
            let b2 = (ex2[i] - mx[i] * mx[i]) + (ey2[i] - my[i] * my[i]) + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                d_mu[i] = s * (2.0 * my[i] / a1 - 2.0 * my[i] / a2 - 2.0 * mx[i] / b1 + 2.0 * mx[i] / b2) / n;
                d_ex2[i] = -s / b2 / n;
                d_exy[i] = 2.0 * s / a2 / n;
            }
        }
        if let Some(g) = grad.as_mut() {
            let bm = blur(&d_mu, w, h);
            let be = blur(&d_ex2, w, h);
            let bxy = blur(&d_exy, w, h);
            for i in 0..w * h {
                g.data[i * g.channels + c] = bm[i] + 2.0 * x[i] * be[i] + y[i] * bxy[i];
            }
        }
    }
    (total / n, grad)
}

/// Per-pixel SSIM map (11×11 Gaussian window, σ = 1.5, zero padding).
pub fn ssim_map(img: &FloatMap, gt: &FloatMap) -> Result<FloatMap> {
    if !img.same_shape(gt) {
        return invalid("ssim: image sizes differ");
    }
    let (w, h) = (img.width, img.height);
    let mut out = img.zeros_like();
    for c in 0..img.channels {
        let x = channel(img, c);
        let y = channel(gt, c);
        let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<f64>>();
        let mx = blur(&x, w, h);
        let my = blur(&y, w, h);
        let ex2 = blur(&sq(&x, &x), w, h);
        let ey2 = blur(&sq(&y, &y), w, h);
        let exy = blur(&sq(&x, &y), w, h);
        for i in 0..w * h {
            let a1 = 2.0 * mx[i] * my[i] + SSIM_C1;
            let a2 = 2.0 * (exy[i] - mx[i] * my[i]) + SSIM_C2;
            let b1 = mx[i] * mx[i] + my[i] * my[i] + SSIM_C1;
            let b2 = (ex2[i] - mx[i] * mx[i]) + (ey2[i] - my[i] * my[i]) + SSIM_C2;
            out.data[i * img.channels + c] = a1 * a2 / (b1 * b2);
        }
    }
    Ok(out)
}

/// Mean SSIM (11×11 Gaussian window, σ = 1.5, zero padding).
pub fn ssim(img: &FloatMap, gt: &FloatMap) -> Result<f64> {
    if !img.same_shape(gt) {
        return invalid("ssim: image sizes differ");
    }
    Ok(ssim_impl(img, gt, false).0)
}

/// `L_c = (1−λ)·L1 + λ·(1−SSIM)/2` and its gradient with respect to `img`.
pub fn loss_rgb(img: &FloatMap, gt: &FloatMap, lambda_ssim: f64) -> Result<(f64, FloatMap)> {
    if !img.same_shape(gt) {
        return invalid("loss_rgb: image sizes differ");
    }
    let n = img.data.len() as f64;
    let mut grad = img.zeros_like();
    let mut l1 = 0.0;
    for (i, (a, b)) in img.data.iter().zip(&gt.data).enumerate() {
        let d = a - b;
        l1 += d.abs();
        grad.data[i] = (1.0 - lambda_ssim) * sign(d) / n;
    }
    l1 /= n;
    let mut loss = (1.0 - lambda_ssim) * l1;
    if lambda_ssim > 0.0 {
        let (s, gs) = ssim_impl(img, gt, true);
        loss += lambda_ssim * (1.0 - s) / 2.0;
        for (g, v) in grad.data.iter_mut().zip(&gs.unwrap().data) {
            *g -= 0.5 * lambda_ssim * v;
        }
    }
    Ok((loss, grad))
}

/// Subgradient of `|x|` (zero at the kink).
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Camera-space point of pixel `(x, y)` at depth `d`.
fn backproject(cam: &Camera, x: usize, y: usize, d: f64) -> Vec3 {
    cam.pixel_ray(x, y) * d
}

struct DepthNormal {
    n: Vec3,
    c: Vec3,
    a: Vec3,
    b: Vec3,
    sign: f64,
}

fn depth_normal_at(depth: &FloatMap, cam: &Camera, x: usize, y: usize) -> Option<DepthNormal> {
    if x + 1 >= depth.width || y + 1 >= depth.height {
        return None;
    }
    let d0 = depth.get(x, y, 0);
    let dx = depth.get(x + 1, y, 0);
    let dy = depth.get(x, y + 1, 0);
    if !(d0 > 0.0 && dx > 0.0 && dy > 0.0) {
        return None;
    }
    let p = backproject(cam, x, y, d0);
    let a = backproject(cam, x + 1, y, dx) - p;
    let b = backproject(cam, x, y + 1, dy) - p;
    let c = a.cross(&b);
    let len = c.norm();
    if !(len > 0.0) {
        return None;
    }
    let sign = if c.dot(&p) > 0.0 { -1.0 } else { 1.0 };
    Some(DepthNormal { n: c * (sign / len), c, a, b, sign })
}

/// Camera-frame normals from forward differences of the back-projected
/// depth map, oriented toward the camera; zero where a neighbor is invalid.
pub fn normal_from_depth(depth: &FloatMap, cam: &Camera) -> FloatMap {
    let mut out = FloatMap::new(depth.width, depth.height, 3);
    for y in 0..depth.height {
        for x in 0..depth.width {
            if let Some(dn) = depth_normal_at(depth, cam, x, y) {
                for c in 0..3 {
                    out.set(x, y, c, dn.n[c]);
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct PlaneLoss {
    pub value: f64,
    pub valid: usize,
    pub grad_depth: FloatMap,
    pub grad_normal: FloatMap,
}

/// Mean L1 distance between depth-derived and rendered normals over pixels
/// with a valid depth normal and `alpha > 0.5`.
pub fn loss_plane(depth: &FloatMap, normal: &FloatMap, alpha: &FloatMap, cam: &Camera) -> Result<PlaneLoss> {
    if depth.channels != 1 || normal.channels != 3 || alpha.channels != 1 {
        return invalid("loss_plane: expected depth(1), normal(3), alpha(1) maps");
    }
    if depth.width != normal.width || depth.height != normal.height || depth.width != alpha.width || depth.height != alpha.height {
        return invalid("loss_plane: map sizes differ");
    }
    let (w, h) = (depth.width, depth.height);
    let mut terms = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if alpha.get(x, y, 0) <= ALPHA_VALID {
                continue;
            }
            if let Some(dn) = depth_normal_at(depth, cam, x, y) {
                terms.push((x, y, dn));
            }
        }
    }
    let mut out = PlaneLoss { value: 0.0, valid: terms.len(), grad_depth: depth.zeros_like(), grad_normal: normal.zeros_like() };
    if terms.is_empty() {
        return Ok(out);
    }
    let inv = 1.0 / terms.len() as f64;
    let mut sum = 0.0;
    for (x, y, dn) in terms {
        let mut g_nd = Vec3::zeros();
        for c in 0..3 {
            let diff = dn.n[c] - normal.get(x, y, c);
            sum += diff.abs();
            let s = sign(diff);
            g_nd[c] = s * inv;
            let gi = out.grad_normal.idx(x, y) + c;
            out.grad_normal.data[gi] -= s * inv;
        }
        // n = sign·c/|c|
        let len = dn.c.norm();
        let u = dn.c / len;
        let g_c = (g_nd - u * u.dot(&g_nd)) * (dn.sign / len);
        let g_a = dn.b.cross(&g_c);
        let g_b = g_c.cross(&dn.a);
        let r0 = cam.pixel_ray(x, y);
        let rx = cam.pixel_ray(x + 1, y);
        let ry = cam.pixel_ray(x, y + 1);
        let gd = &mut out.grad_depth;
        let i0 = gd.idx(x, y);
        let ix = gd.idx(x + 1, y);
        let iy = gd.idx(x, y + 1);
        gd.data[ix] += rx.dot(&g_a);
        gd.data[iy] += ry.dot(&g_b);
        gd.data[i0] -= r0.dot(&(g_a + g_b));
    }
    out.value = sum * inv;
    Ok(out)
}

/// Relative pose taking reference-camera coordinates to neighbor-camera
/// coordinates: `X_n = R·X_r + t`.
pub fn relative_pose(reference: &Camera, neighbor: &Camera) -> (Mat3, Vec3) {
    let r = neighbor.rotation * reference.rotation.transpose();
    let t = neighbor.translation - r * reference.translation;
    (r, t)
}

/// Plane-induced homography `K_n (R − t nᵀ/d) K_r⁻¹` for the plane
/// `nᵀX + d = 0` in the reference camera frame. `None` when `d ≤ 0`.
pub fn plane_homography(n: &Vec3, d: f64, r: &Mat3, t: &Vec3, k_ref_inv: &Mat3, k_nbr: &Mat3) -> Option<Mat3> {
    if !(d > 0.0) {
        return None;
    }
    Some(k_nbr * (r - t * n.transpose() / d) * k_ref_inv)
}

/// Plane offset `d = −D·(n·r)` of pixel `(x, y)` with `r` the `z = 1` ray, so
/// that `nᵀX + d = 0` for the back-projected point `X = D·r`.
pub fn plane_offset(cam: &Camera, x: usize, y: usize, depth: f64, n: &Vec3) -> f64 {
    -depth * n.dot(&cam.pixel_ray(x, y))
}

/// One view's rendered geometry for the cross-view term.
#[derive(Clone, Copy, Debug)]
pub struct GeometryMaps<'a> {
    pub cam: &'a Camera,
    pub depth: &'a FloatMap,
    pub normal: &'a FloatMap,
    pub alpha: &'a FloatMap,
}

#[derive(Clone, Debug)]
pub struct CrossLoss {
    pub value: f64,
    /// Zero means no pixel passed the masks (`value` is then 0).
    pub valid: usize,
    pub grad_ref_depth: FloatMap,
    pub grad_ref_normal: FloatMap,
    pub grad_nbr_depth: FloatMap,
    pub grad_nbr_normal: FloatMap,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossConfig {
    /// Pixels whose forward-backward error exceeds this (in pixels) are
    /// treated as occluded and masked out.
    pub max_error_px: f64,
}

impl Default for CrossConfig {
    fn default() -> Self {
        Self { max_error_px: 1.0 }
    }
}

fn pixel_plane(g: &GeometryMaps, x: usize, y: usize) -> Option<(Vec3, f64, f64)> {
    if g.alpha.get(x, y, 0) <= ALPHA_VALID {
        return None;
    }
    let dep = g.depth.get(x, y, 0);
    let n = Vec3::new(g.normal.get(x, y, 0), g.normal.get(x, y, 1), g.normal.get(x, y, 2));
    if !(dep > 0.0) || n.norm_squared() < 0.5 {
        return None;
    }
    let d = plane_offset(g.cam, x, y, dep, &n);
    (d > 0.0).then_some((n, d, dep))
}

fn dehomog(v: &Vec3) -> Option<Vec2> {
    (v.z.abs() > 1e-12).then(|| Vec2::new(v.x / v.z, v.y / v.z))
}

/// Backward of `π(v) = (v.x/v.z, v.y/v.z)`.
fn dehomog_backward(v: &Vec3, g: &Vec2) -> Vec3 {
    let iz = 1.0 / v.z;
    Vec3::new(g.x * iz, g.y * iz, -(g.x * v.x + g.y * v.y) * iz * iz)
}

struct CrossPixel {
    err: f64,
    e: Vec2,
    xr: Vec3,
    u: Vec3,
    xn: Vec3,
    v: Vec3,
    h_nr: Mat3,
    ref_px: (usize, usize),
    nbr_px: (usize, usize),
    nr: Vec3,
    dr: f64,
    nn: Vec3,
    dn: f64,
}

fn cross_pixel(
    r: &GeometryMaps,
    n: &GeometryMaps,
    pose: &(Mat3, Vec3),
    inv_pose: &(Mat3, Vec3),
    x: usize,
    y: usize,
) -> Option<CrossPixel> {
    let (nr, dr, _) = pixel_plane(r, x, y)?;
    let h_rn = plane_homography(&nr, dr, &pose.0, &pose.1, &r.cam.k_inv(), &n.cam.k())?;
    let xr = Vec3::new(x as f64 + 0.5, y as f64 + 0.5, 1.0);
    let u = h_rn * xr;
    let p = dehomog(&u)?;
    if u.z <= 0.0 || p.x < 0.0 || p.y < 0.0 || p.x >= n.cam.width as f64 || p.y >= n.cam.height as f64 {
        return None;
    }
    let (nx, ny) = (p.x.floor() as usize, p.y.floor() as usize);
    let (nn, dn, _) = pixel_plane(n, nx, ny)?;
    let h_nr = plane_homography(&nn, dn, &inv_pose.0, &inv_pose.1, &n.cam.k_inv(), &r.cam.k())?;
    let xn = Vec3::new(p.x, p.y, 1.0);
    let v = h_nr * xn;
    let back = dehomog(&v)?;
    let e = back - xr.xy();
    Some(CrossPixel { err: e.norm(), e, xr, u, xn, v, h_nr, ref_px: (x, y), nbr_px: (nx, ny), nr, dr, nn, dn })
}

/// Gradient of `H = K_n (R − t nᵀ/d) K_r⁻¹` with respect to `(n, d)`.
fn homography_backward(g_h: &Mat3, t: &Vec3, n: &Vec3, d: f64, k_ref_inv: &Mat3, k_nbr: &Mat3) -> (Vec3, f64) {
    let g_m = k_nbr.transpose() * g_h * k_ref_inv.transpose();
    let g_n = -(g_m.transpose() * t) / d;
    let g_d = t.dot(&(g_m * n)) / (d * d);
    (g_n, g_d)
}

/// Routes `(g_n, g_d)` of a pixel plane back to that pixel's depth and normal.
fn plane_backward(g: &GeometryMaps, x: usize, y: usize, g_n: &Vec3, g_d: f64, gd: &mut FloatMap, gn: &mut FloatMap) {
    let ray = g.cam.pixel_ray(x, y);
    let dep = g.depth.get(x, y, 0);
    let n = Vec3::new(g.normal.get(x, y, 0), g.normal.get(x, y, 1), g.normal.get(x, y, 2));
    let i = gd.idx(x, y);
    gd.data[i] += -n.dot(&ray) * g_d;
    let gi = gn.idx(x, y);
    for c in 0..3 {
        gn.data[gi + c] += g_n[c] - dep * ray[c] * g_d;
    }
}

/// Mean forward-backward reprojection error (pixels) through the two views'
/// per-pixel plane homographies.
pub fn loss_cross(reference: &GeometryMaps, neighbor: &GeometryMaps, cfg: &CrossConfig) -> Result<CrossLoss> {
    for g in [reference, neighbor] {
        if g.depth.width != g.cam.width || g.depth.height != g.cam.height || !g.normal.width.eq(&g.cam.width) || g.alpha.width != g.cam.width {
            return invalid("loss_cross: map sizes do not match the camera");
        }
    }
    let pose = relative_pose(reference.cam, neighbor.cam);
    let inv_pose = relative_pose(neighbor.cam, reference.cam);
    let (w, h) = (reference.cam.width, reference.cam.height);
    let mut pixels = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if let Some(p) = cross_pixel(reference, neighbor, &pose, &inv_pose, x, y) {
                if p.err <= cfg.max_error_px {
                    pixels.push(p);
                }
            }
        }
    }
    let mut out = CrossLoss {
        value: 0.0,
        valid: pixels.len(),
        grad_ref_depth: reference.depth.zeros_like(),
        grad_ref_normal: reference.normal.zeros_like(),
        grad_nbr_depth: neighbor.depth.zeros_like(),
        grad_nbr_normal: neighbor.normal.zeros_like(),
    };
    if pixels.is_empty() {
        return Ok(out);
    }
    let inv = 1.0 / pixels.len() as f64;
    let (kr_inv, kn, kn_inv, kr) = (reference.cam.k_inv(), neighbor.cam.k(), neighbor.cam.k_inv(), reference.cam.k());
    let mut sum = 0.0;
    for p in &pixels {
        sum += p.err;
        if p.err == 0.0 {
            continue;
        }
        let g_back = p.e * (inv / p.err);
        let g_v = dehomog_backward(&p.v, &g_back);
        let g_hnr = g_v * p.xn.transpose();
        let g_xn = p.h_nr.transpose() * g_v;
        let g_u = dehomog_backward(&p.u, &g_xn.xy());
        let g_hrn = g_u * p.xr.transpose();
        let (g_nr, g_dr) = homography_backward(&g_hrn, &pose.1, &p.nr, p.dr, &kr_inv, &kn);
        let (g_nn, g_dn) = homography_backward(&g_hnr, &inv_pose.1, &p.nn, p.dn, &kn_inv, &kr);
        plane_backward(reference, p.ref_px.0, p.ref_px.1, &g_nr, g_dr, &mut out.grad_ref_depth, &mut out.grad_ref_normal);
        plane_backward(neighbor, p.nbr_px.0, p.nbr_px.1, &g_nn, g_dn, &mut out.grad_nbr_depth, &mut out.grad_nbr_normal);
    }
    out.value = sum * inv;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Intrinsics;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_map(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> FloatMap {
        let mut m = FloatMap::new(w, h, c);
        m.data.iter_mut().for_each(|v| *v = rng.random());
        m
    }

    #[test]
    fn rgb_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_map(&mut rng, 12, 10, 3);
        assert_eq!(loss_rgb(&a, &a, 0.2).unwrap().0, 0.0);
        let z = FloatMap::filled(8, 8, 3, 0.0);
        let half = FloatMap::filled(8, 8, 3, 0.5);
        assert!((loss_rgb(&half, &z, 0.0).unwrap().0 - 0.5).abs() < 1e-15);
        assert!(loss_rgb(&half, &FloatMap::new(8, 9, 3), 0.2).is_err());
    }

    #[test]
    fn ssim_identical_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_map(&mut rng, 16, 16, 3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = rand_map(&mut rng, 16, 16, 3);
        let s = ssim(&a, &b).unwrap();
        assert!((-1.0..1.0).contains(&s));
    }

    /// Constant images: away from the zero-padded border the SSIM map is
    /// `(2ab + C1)/(a² + b² + C1)` since all variances vanish.
    #[test]
    fn ssim_constant_images_closed_form() {
        let a = FloatMap::filled(32, 32, 1, 0.2);
        let b = FloatMap::filled(32, 32, 1, 0.6);
        let m = ssim_map(&a, &b).unwrap();
        let expect = (2.0 * 0.2 * 0.6 + SSIM_C1) / (0.04 + 0.36 + SSIM_C1);
        assert!((m.get(16, 16, 0) - expect).abs() < 1e-9);
        let mean = m.data.iter().sum::<f64>() / m.data.len() as f64;
        assert!((ssim(&a, &b).unwrap() - mean).abs() < 1e-12);
    }

    #[test]
    fn rgb_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..3 {
            let img = rand_map(&mut rng, 9, 7, 3);
            let gt = rand_map(&mut rng, 9, 7, 3);
            let (_, g) = loss_rgb(&img, &gt, 0.2).unwrap();
            let h = 1e-6;
            for i in (0..img.data.len()).step_by(5) {
                let mut p = img.clone();
                p.data[i] += h;
                let mut m = img.clone();
                m.data[i] -= h;
                let fd = (loss_rgb(&p, &gt, 0.2).unwrap().0 - loss_rgb(&m, &gt, 0.2).unwrap().0) / (2.0 * h);
                let err = (fd - g.data[i]).abs() / fd.abs().max(g.data[i].abs()).max(1e-6);
                assert!(err < 1e-5, "i={i} fd={fd} an={}", g.data[i]);
            }
        }
    }

    fn cam(w: usize, h: usize) -> Camera {
        Camera {
            fx: 50.0,
            fy: 50.0,
            cx: w as f64 / 2.0,
            cy: h as f64 / 2.0,
            width: w,
            height: h,
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Depth map of the camera-frame plane `nᵀX + d = 0`.
    fn plane_depth(c: &Camera, n: &Vec3, d: f64) -> FloatMap {
        let mut m = FloatMap::new(c.width, c.height, 1);
        for y in 0..c.height {
            for x in 0..c.width {
                let r = c.pixel_ray(x, y);
                m.set(x, y, 0, -d / n.dot(&r));
            }
        }
        m
    }

    #[test]
    fn fronto_parallel_normal() {
        let c = cam(16, 16);
        let d = FloatMap::filled(16, 16, 1, 5.0);
        let n = normal_from_depth(&d, &c);
        for y in 0..15 {
            for x in 0..15 {
                assert!((n.get(x, y, 2) + 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(n.pixel(15, 3), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn slanted_plane_normal() {
        // z = 5 + 0.5·X  ⇔  0.5·X − z + 5 = 0
        let c = cam(16, 16);
        let raw = Vec3::new(0.5, 0.0, -1.0);
        let nrm = raw.normalize();
        let d = plane_depth(&c, &nrm, 5.0 / raw.norm());
        let n = normal_from_depth(&d, &c);
        let expect = if nrm.z < 0.0 { nrm } else { -nrm };
        for y in 0..15 {
            for x in 0..15 {
                let got = Vec3::new(n.get(x, y, 0), n.get(x, y, 1), n.get(x, y, 2));
                assert!((got - expect).norm() < 1e-3);
            }
        }
    }

    #[test]
    fn hole_neighbor_gives_zero_normal() {
        let c = cam(8, 8);
        let mut d = FloatMap::filled(8, 8, 1, 3.0);
        d.set(4, 3, 0, 0.0);
        let n = normal_from_depth(&d, &c);
        assert_eq!(n.pixel(3, 3), &[0.0; 3]);
        assert_eq!(n.pixel(4, 2), &[0.0; 3]);
        assert_eq!(n.pixel(4, 3), &[0.0; 3]);
        assert!(n.get(2, 2, 2) < 0.0);
    }

    #[test]
    fn plane_loss_examples() {
        let c = cam(8, 8);
        let d = FloatMap::filled(8, 8, 1, 4.0);
        let a = FloatMap::filled(8, 8, 1, 1.0);
        let mut nm = FloatMap::new(8, 8, 3);
        for y in 0..8 {
            for x in 0..8 {
                nm.set(x, y, 2, -1.0);
            }
        }
        assert!(loss_plane(&d, &nm, &a, &c).unwrap().value < 1e-12);
        for v in nm.data.iter_mut() {
            *v = -*v;
        }
        assert!((loss_plane(&d, &nm, &a, &c).unwrap().value - 2.0).abs() < 1e-12);
    }

    #[test]
    fn plane_loss_equals_per_pixel_mean_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = cam(8, 8);
        let mut d = rand_map(&mut rng, 8, 8, 1);
        d.data.iter_mut().for_each(|v| *v = 3.0 + 0.3 * *v);
        let mut nm = rand_map(&mut rng, 8, 8, 3);
        nm.data.iter_mut().for_each(|v| *v = 2.0 * *v - 1.0);
        let mut a = rand_map(&mut rng, 8, 8, 1);
        a.data.iter_mut().for_each(|v| *v = if *v > 0.2 { 0.9 } else { 0.1 });
        let pl = loss_plane(&d, &nm, &a, &c).unwrap();
        let nd = normal_from_depth(&d, &c);
        let mut sum = 0.0;
        let mut cnt = 0;
        for y in 0..7 {
            for x in 0..7 {
                if a.get(x, y, 0) > 0.5 {
                    sum += (0..3).map(|k| (nd.get(x, y, k) - nm.get(x, y, k)).abs()).sum::<f64>();
                    cnt += 1;
                }
            }
        }
        assert_eq!(pl.valid, cnt);
        assert!((pl.value - sum / cnt as f64).abs() < 1e-12);
        let h = 1e-7;
        let f = |d: &FloatMap, n: &FloatMap| loss_plane(d, n, &a, &c).unwrap().value;
        for i in 0..d.data.len() {
            let mut p = d.clone();
            p.data[i] += h;
            let mut m = d.clone();
            m.data[i] -= h;
            let fd = (f(&p, &nm) - f(&m, &nm)) / (2.0 * h);
            let an = pl.grad_depth.data[i];
            assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1e-4) < 1e-4, "depth {i}: {fd} vs {an}");
        }
        for i in (0..nm.data.len()).step_by(3) {
            let mut p = nm.clone();
            p.data[i] += h;
            let mut m = nm.clone();
            m.data[i] -= h;
            let fd = (f(&d, &p) - f(&d, &m)) / (2.0 * h);
            let an = pl.grad_normal.data[i];
            assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1e-4) < 1e-4);
        }
    }

    #[test]
    fn plane_loss_rigid_invariance() {
        // the plane term only sees camera-frame maps, so moving scene and
        // cameras together cannot change it; check with two poses of the same
        // relative geometry rendered analytically
        let c = cam(12, 12);
        let n = Vec3::new(0.2, -0.3, -1.0).normalize();
        let d = plane_depth(&c, &n, 4.0);
        let mut nm = FloatMap::new(12, 12, 3);
        for y in 0..12 {
            for x in 0..12 {
                for k in 0..3 {
                    nm.set(x, y, k, n[k] + 0.05 * ((x * 3 + y + k) % 5) as f64);
                }
            }
        }
        let a = FloatMap::filled(12, 12, 1, 1.0);
        let c2 = Camera { rotation: Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0), translation: Vec3::new(1.0, 2.0, 3.0), ..c.clone() };
        let l1 = loss_plane(&d, &nm, &a, &c).unwrap().value;
        let l2 = loss_plane(&d, &nm, &a, &c2).unwrap().value;
        assert!((l1 - l2).abs() < 1e-12);
    }

    fn stereo_pair() -> (Camera, Camera) {
        let intr = Intrinsics::from_fov(32, 32, 50.0);
        let a = Camera::look_at(Vec3::new(-0.4, 0.1, -4.0), Vec3::zeros(), -Vec3::y(), intr).unwrap();
        let b = Camera::look_at(Vec3::new(0.5, -0.2, -3.8), Vec3::new(0.05, 0.0, 0.0), -Vec3::y(), intr).unwrap();
        (a, b)
    }

    #[test]
    fn identity_pose_homography() {
        let c = cam(8, 8);
        let h = plane_homography(&Vec3::new(0.0, 0.0, -1.0), 3.0, &Mat3::identity(), &Vec3::zeros(), &c.k_inv(), &c.k()).unwrap();
        assert!((h - Mat3::identity()).abs().max() < 1e-12);
        assert!(plane_homography(&Vec3::z(), 0.0, &Mat3::identity(), &Vec3::zeros(), &c.k_inv(), &c.k()).is_none());
    }

    #[test]
    fn homography_matches_direct_projection_and_inverts() {
        let (a, b) = stereo_pair();
        // world plane through (0,0,0.2) with normal (0.1, 0.2, −1)
        let nw = Vec3::new(0.1, 0.2, -1.0).normalize();
        let p0 = Vec3::new(0.0, 0.0, 0.2);
        let to_cam_plane = |c: &Camera| {
            let n = c.rotation * nw;
            let d = -n.dot(&c.world_to_cam(&p0));
            (n, d)
        };
        let (na, da) = to_cam_plane(&a);
        let (nb, db) = to_cam_plane(&b);
        let (r, t) = relative_pose(&a, &b);
        let (ri, ti) = relative_pose(&b, &a);
        let h_ab = plane_homography(&na, da, &r, &t, &a.k_inv(), &b.k()).unwrap();
        let h_ba = plane_homography(&nb, db, &ri, &ti, &b.k_inv(), &a.k()).unwrap();
        assert!((h_ba * h_ab / (h_ba * h_ab)[(2, 2)] - Mat3::identity()).abs().max() < 1e-6);
        for (u, v) in [(3.5, 4.5), (16.0, 16.0), (28.2, 7.9)] {
            let ray = a.ray(u, v);
            let depth = -da / na.dot(&ray);
            let pw = a.cam_to_world(&(ray * depth));
            let direct = b.project_cam(&b.world_to_cam(&pw));
            let via = dehomog(&(h_ab * Vec3::new(u, v, 1.0))).unwrap();
            assert!((direct - via).norm() < 1e-6);
        }
    }

    /// Analytic maps of a world plane seen by a camera.
    fn plane_maps(c: &Camera, nw: &Vec3, p0: &Vec3, offset_scale: f64) -> (FloatMap, FloatMap, FloatMap) {
        let n = c.rotation * nw;
        let n = if n.dot(&c.world_to_cam(p0)) > 0.0 { -n } else { n };
        let d = -n.dot(&c.world_to_cam(p0)) * offset_scale;
        let mut dep = FloatMap::new(c.width, c.height, 1);
        let mut nm = FloatMap::new(c.width, c.height, 3);
        for y in 0..c.height {
            for x in 0..c.width {
                dep.set(x, y, 0, -d / n.dot(&c.pixel_ray(x, y)));
                for k in 0..3 {
                    nm.set(x, y, k, n[k]);
                }
            }
        }
        (dep, nm, FloatMap::filled(c.width, c.height, 1, 1.0))
    }

    #[test]
    fn cross_loss_zero_on_consistent_plane_and_monotone() {
        let (a, b) = stereo_pair();
        let nw = Vec3::new(0.1, 0.2, -1.0).normalize();
        let p0 = Vec3::new(0.0, 0.0, 0.2);
        let (db, nb, ab) = plane_maps(&b, &nw, &p0, 1.0);
        let (da, na, aa) = plane_maps(&a, &nw, &p0, 1.0);
        let cfg = CrossConfig { max_error_px: f64::INFINITY };
        let ga = GeometryMaps { cam: &a, depth: &da, normal: &na, alpha: &aa };
        let gb = GeometryMaps { cam: &b, depth: &db, normal: &nb, alpha: &ab };
        let l = loss_cross(&ga, &gb, &cfg).unwrap();
        assert!(l.valid > 100);
        assert!(l.value < 1e-6, "{}", l.value);
        let mut prev = 0.0;
        for pct in [1.01, 1.02, 1.04] {
            let (dp, _, _) = plane_maps(&a, &nw, &p0, pct);
            let gp = GeometryMaps { cam: &a, depth: &dp, normal: &na, alpha: &aa };
            let v = loss_cross(&gp, &gb, &cfg).unwrap().value;
            assert!(v > prev, "{pct}: {v} <= {prev}");
            prev = v;
        }
    }

    #[test]
    fn cross_loss_single_pixel_hand_trace() {
        let (a, b) = stereo_pair();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut da, mut na, _) = plane_maps(&a, &Vec3::new(0.0, 0.1, -1.0).normalize(), &Vec3::zeros(), 1.0);
        let (db, nb, ab) = plane_maps(&b, &Vec3::new(0.05, 0.0, -1.0).normalize(), &Vec3::new(0.0, 0.0, 0.1), 1.0);
        da.data.iter_mut().for_each(|v| *v *= 1.0 + 0.01 * rng.random::<f64>());
        na.data.iter_mut().for_each(|v| *v += 0.01 * rng.random::<f64>());
        // only pixel (10, 12) is covered in the reference view
        let mut aa = FloatMap::new(32, 32, 1);
        aa.set(10, 12, 0, 1.0);
        let ga = GeometryMaps { cam: &a, depth: &da, normal: &na, alpha: &aa };
        let gb = GeometryMaps { cam: &b, depth: &db, normal: &nb, alpha: &ab };
        let l = loss_cross(&ga, &gb, &CrossConfig { max_error_px: f64::INFINITY }).unwrap();
        assert_eq!(l.valid, 1);
        let nr = Vec3::new(na.get(10, 12, 0), na.get(10, 12, 1), na.get(10, 12, 2));
        let dr = -da.get(10, 12, 0) * nr.dot(&a.ray(10.5, 12.5));
        let (r, t) = relative_pose(&a, &b);
        let h_rn = b.k() * (r - t * nr.transpose() / dr) * a.k_inv();
        let u = h_rn * Vec3::new(10.5, 12.5, 1.0);
        let (xn, yn) = (u.x / u.z, u.y / u.z);
        let (px, py) = (xn.floor() as usize, yn.floor() as usize);
        let nn = Vec3::new(nb.get(px, py, 0), nb.get(px, py, 1), nb.get(px, py, 2));
        let dn = -db.get(px, py, 0) * nn.dot(&b.ray(px as f64 + 0.5, py as f64 + 0.5));
        let (ri, ti) = relative_pose(&b, &a);
        let h_nr = a.k() * (ri - ti * nn.transpose() / dn) * b.k_inv();
        let v = h_nr * Vec3::new(xn, yn, 1.0);
        let err = ((v.x / v.z - 10.5).powi(2) + (v.y / v.z - 12.5).powi(2)).sqrt();
        assert!((l.value - err).abs() < 1e-12);
        assert!(err > 0.0);
    }

    #[test]
    fn cross_loss_gradients_match_finite_differences() {
        let (a, b) = stereo_pair();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let nw = Vec3::new(0.1, 0.2, -1.0).normalize();
        let (mut da, mut na, aa) = plane_maps(&a, &nw, &Vec3::zeros(), 1.0);
        let (mut db, mut nb, ab) = plane_maps(&b, &nw, &Vec3::zeros(), 1.0);
        for m in [&mut da, &mut db] {
            m.data.iter_mut().for_each(|v| *v *= 1.0 + 0.02 * rng.random::<f64>());
        }
        for m in [&mut na, &mut nb] {
            m.data.iter_mut().for_each(|v| *v += 0.03 * (rng.random::<f64>() - 0.5));
        }
        let cfg = CrossConfig { max_error_px: f64::INFINITY };
        let eval = |da: &FloatMap, na: &FloatMap, db: &FloatMap, nb: &FloatMap| {
            loss_cross(
                &GeometryMaps { cam: &a, depth: da, normal: na, alpha: &aa },
                &GeometryMaps { cam: &b, depth: db, normal: nb, alpha: &ab },
                &cfg,
            )
            .unwrap()
        };
        let base = eval(&da, &na, &db, &nb);
        assert!(base.valid > 50);
        let h = 1e-7;
        let mut worst: f64 = 0.0;
        let mut check = |fd: f64, an: f64| {
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-4));
        };
        for i in (0..da.data.len()).step_by(13) {
            let (mut p, mut m) = (da.clone(), da.clone());
            p.data[i] += h;
            m.data[i] -= h;
            check((eval(&p, &na, &db, &nb).value - eval(&m, &na, &db, &nb).value) / (2.0 * h), base.grad_ref_depth.data[i]);
        }
        for i in (0..na.data.len()).step_by(17) {
            let (mut p, mut m) = (na.clone(), na.clone());
            p.data[i] += h;
            m.data[i] -= h;
            check((eval(&da, &p, &db, &nb).value - eval(&da, &m, &db, &nb).value) / (2.0 * h), base.grad_ref_normal.data[i]);
        }
        for i in (0..db.data.len()).step_by(11) {
            let (mut p, mut m) = (db.clone(), db.clone());
            p.data[i] += h;
            m.data[i] -= h;
            check((eval(&da, &na, &p, &nb).value - eval(&da, &na, &m, &nb).value) / (2.0 * h), base.grad_nbr_depth.data[i]);
        }
        for i in (0..nb.data.len()).step_by(19) {
            let (mut p, mut m) = (nb.clone(), nb.clone());
            p.data[i] += h;
            m.data[i] -= h;
            check((eval(&da, &na, &db, &p).value - eval(&da, &na, &db, &m).value) / (2.0 * h), base.grad_nbr_normal.data[i]);
        }
        assert!(worst < 1e-4, "worst {worst}");
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert!((total_loss(1.0, 1.0, 1.0, &w) - 1.21).abs() < 1e-15);
        let z = LossWeights { cross: 0.0, plane: 0.0, ssim: 0.2 };
        assert_eq!(total_loss(0.7, 3.0, 9.0, &z), 0.7);
        assert!((total_loss(2.0, 4.0, 6.0, &w) - 2.0 * total_loss(1.0, 2.0, 3.0, &w)).abs() < 1e-15);
    }
}
