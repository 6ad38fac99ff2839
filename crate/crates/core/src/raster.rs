//! Tile-based front-to-back alpha compositing of projected Gaussians and its
//! exact reverse pass.
//!
//! Every pixel blends the splats of its tile in global depth order. A splat
//! only affects pixels inside its 3σ ellipse, so the per-pixel hit sequence,
//! and with it every output, is the same for any tile size.

use crate::error::{invalid, Result};
use crate::geom::{
    normal_axis, project_covariance, quat_to_rotmat, rotmat_backward, Branch, Camera, GaussianSplat, Mat2, Mat3,
    Projection, Vec2, Vec3,
};
use crate::image::FloatMap;
use crate::par;

/// Per-hit opacity is clamped to this value.
pub const SIGMA_MAX: f64 = 0.99;
/// Hits with `σ` below this are skipped.
pub const SIGMA_MIN: f64 = 1.0 / 255.0;
/// Accumulated alpha below which depth and normal are reported as zero.
pub const ALPHA_EPS: f64 = 1e-4;
/// Squared Mahalanobis radius of the splat footprint (3σ).
const FOOTPRINT_Q: f64 = 9.0;

#[derive(Clone, Debug, PartialEq)]
pub struct RasterConfig {
    pub tile_size: usize,
    pub stop_transmittance: f64,
    pub background: [f64; 3],
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self { tile_size: 8, stop_transmittance: 1e-4, background: [0.0; 3] }
    }
}

/// A splat after projection into one view.
#[derive(Clone, Debug)]
pub struct ScreenSplat {
    /// Index into the splat slice that was projected.
    pub id: usize,
    pub mean: Vec2,
    pub cov: Mat2,
    /// Upper triangle `(a, b, c)` of the inverse screen covariance.
    pub conic: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub color: [f64; 3],
    /// Camera-frame unit normal.
    pub normal: [f64; 3],
    /// `[xmin, ymin, xmax, ymax]` of the 3σ ellipse.
    pub bbox: [f64; 4],
    proj: Projection,
    rot: Mat3,
    scale: Vec3,
    quat: crate::geom::Quaternion,
    n_axis: usize,
    n_sign: f64,
}

/// Projects every splat; culled ones are left out.
pub fn project_splats(splats: &[GaussianSplat], cam: &Camera, branch: Branch) -> Vec<ScreenSplat> {
    let cam_pos = cam.position();
    splats.iter().enumerate().filter_map(|(id, g)| screen_splat(id, g, cam, &cam_pos, branch)).collect()
}

fn screen_splat(id: usize, g: &GaussianSplat, cam: &Camera, cam_pos: &Vec3, branch: Branch) -> Option<ScreenSplat> {
    let (scale, quat) = g.scale_rot(branch);
    let rot = quat_to_rotmat(quat).ok()?;
    let cov3 = crate::geom::covariance_from(&rot, &scale);
    let proj = project_covariance(&g.center, &cov3, cam)?;
    let inv = proj.cov.try_inverse()?;
    let (n_world, n_axis, n_sign) = normal_axis(&rot, &scale, &g.center, cam_pos);
    let n_cam = cam.rotation * n_world;
    let rx = FOOTPRINT_Q.sqrt() * proj.cov[(0, 0)].sqrt();
    let ry = FOOTPRINT_Q.sqrt() * proj.cov[(1, 1)].sqrt();
    Some(ScreenSplat {
        id,
        mean: proj.mean,
        cov: proj.cov,
        conic: [inv[(0, 0)], 0.5 * (inv[(0, 1)] + inv[(1, 0)]), inv[(1, 1)]],
        depth: proj.depth,
        opacity: g.opacity,
        color: [g.color.x, g.color.y, g.color.z],
        normal: [n_cam.x, n_cam.y, n_cam.z],
        bbox: [proj.mean.x - rx, proj.mean.y - ry, proj.mean.x + rx, proj.mean.y + ry],
        proj,
        rot,
        scale,
        quat,
        n_axis,
        n_sign,
    })
}

/// Per-tile lists of indices into `screen`, each sorted by ascending depth
/// with ties broken by splat id.
#[derive(Clone, Debug, PartialEq)]
pub struct TileBins {
    pub tile_size: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub lists: Vec<Vec<u32>>,
}

impl TileBins {
    /// Pixel rectangle `[x0, x1) × [y0, y1)` covered by tile `t`.
    pub fn tile_rect(&self, t: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let tx = t % self.tiles_x;
        let ty = t / self.tiles_x;
        let x0 = tx * self.tile_size;
        let y0 = ty * self.tile_size;
        (x0, y0, (x0 + self.tile_size).min(width), (y0 + self.tile_size).min(height))
    }
}

pub fn bin_and_sort(screen: &[ScreenSplat], width: usize, height: usize, tile_size: usize) -> TileBins {
    let tile_size = tile_size.max(1);
    let tiles_x = width.div_ceil(tile_size);
    let tiles_y = height.div_ceil(tile_size);
    let mut order: Vec<u32> = (0..screen.len() as u32).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (&screen[a as usize], &screen[b as usize]);
        sa.depth.total_cmp(&sb.depth).then(sa.id.cmp(&sb.id))
    });
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    let ts = tile_size as f64;
    for &i in &order {
        let b = &screen[i as usize].bbox;
        if b[2] < 0.0 || b[3] < 0.0 || b[0] > width as f64 || b[1] > height as f64 {
            continue;
        }
        let tx0 = ((b[0] / ts).floor().max(0.0)) as usize;
        let ty0 = ((b[1] / ts).floor().max(0.0)) as usize;
        let tx1 = ((b[2] / ts).floor() as usize).min(tiles_x - 1);
        let ty1 = ((b[3] / ts).floor() as usize).min(tiles_y - 1);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                lists[ty * tiles_x + tx].push(i);
            }
        }
    }
    TileBins { tile_size, tiles_x, tiles_y, lists }
}

/// Rendered maps plus per-splat contribution statistics.
#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub color: FloatMap,
    pub depth: FloatMap,
    pub normal: FloatMap,
    pub alpha: FloatMap,
    /// `Σ_pixels w_i` per input splat.
    pub contribution: Vec<f64>,
    /// Number of pixels each input splat was blended into.
    pub touched: Vec<u32>,
    /// Transmittance left after the last blended hit of every pixel.
    pub final_transmittance: FloatMap,
}

#[derive(Clone, Copy, Debug)]
pub struct Hit {
    /// Position in the tile list.
    pub local: u32,
    pub g: f64,
    pub sigma: f64,
    pub t_before: f64,
    pub clamped: bool,
}

#[derive(Clone, Debug)]
struct TileTape {
    offsets: Vec<u32>,
    hits: Vec<Hit>,
}

/// Everything the reverse pass needs to replay the blending exactly.
#[derive(Clone, Debug)]
pub struct RasterTape {
    pub branch: Branch,
    pub width: usize,
    pub height: usize,
    num_splats: usize,
    background: [f64; 3],
    screen: Vec<ScreenSplat>,
    bins: TileBins,
    tiles: Vec<TileTape>,
}

impl RasterTape {
    pub fn screen(&self) -> &[ScreenSplat] {
        &self.screen
    }

    /// Ordered hits of pixel `(x, y)` as `(splat id, hit)`.
    pub fn pixel_hits(&self, x: usize, y: usize) -> Vec<(usize, Hit)> {
        let ts = self.bins.tile_size;
        let t = (y / ts) * self.bins.tiles_x + x / ts;
        let (x0, y0, x1, _) = self.bins.tile_rect(t, self.width, self.height);
        let p = (y - y0) * (x1 - x0) + (x - x0);
        let tile = &self.tiles[t];
        let list = &self.bins.lists[t];
        tile.hits[tile.offsets[p] as usize..tile.offsets[p + 1] as usize]
            .iter()
            .map(|h| (self.screen[list[h.local as usize] as usize].id, *h))
            .collect()
    }
}

struct TileForward {
    color: Vec<[f64; 3]>,
    depth: Vec<f64>,
    normal: Vec<[f64; 3]>,
    alpha: Vec<f64>,
    final_t: Vec<f64>,
    contrib: Vec<f64>,
    touched: Vec<u32>,
    tape: TileTape,
}

pub fn rasterize_forward(
    splats: &[GaussianSplat],
    cam: &Camera,
    branch: Branch,
    cfg: &RasterConfig,
) -> (RenderOutput, RasterTape) {
    let (out, screen, bins, tiles) = forward_impl(splats, cam, branch, cfg, true);
    let tape = RasterTape {
        branch,
        width: cam.width,
        height: cam.height,
        num_splats: splats.len(),
        background: cfg.background,
        screen,
        bins,
        tiles,
    };
    (out, tape)
}

/// Same maps as [`rasterize_forward`] without recording a tape.
pub fn render_forward(splats: &[GaussianSplat], cam: &Camera, branch: Branch, cfg: &RasterConfig) -> RenderOutput {
    forward_impl(splats, cam, branch, cfg, false).0
}

fn forward_impl(
    splats: &[GaussianSplat],
    cam: &Camera,
    branch: Branch,
    cfg: &RasterConfig,
    record: bool,
) -> (RenderOutput, Vec<ScreenSplat>, TileBins, Vec<TileTape>) {
    let screen = project_splats(splats, cam, branch);
    let (w, h) = (cam.width, cam.height);
    let bins = bin_and_sort(&screen, w, h, cfg.tile_size);
    let n_tiles = bins.lists.len();
    let tiles = par::map_range(n_tiles, |t| forward_tile(t, &screen, &bins, w, h, cfg, record));

    let mut out = RenderOutput {
        color: FloatMap::new(w, h, 3),
        depth: FloatMap::new(w, h, 1),
        normal: FloatMap::new(w, h, 3),
        alpha: FloatMap::new(w, h, 1),
        contribution: vec![0.0; splats.len()],
        touched: vec![0; splats.len()],
        final_transmittance: FloatMap::new(w, h, 1),
    };
    let mut tapes = Vec::with_capacity(n_tiles);
    for (t, tf) in tiles.into_iter().enumerate() {
        let (x0, y0, x1, y1) = bins.tile_rect(t, w, h);
        let tw = x1 - x0;
        for y in y0..y1 {
            for x in x0..x1 {
                let p = (y - y0) * tw + (x - x0);
                for c in 0..3 {
                    out.color.set(x, y, c, tf.color[p][c]);
                    out.normal.set(x, y, c, tf.normal[p][c]);
                }
                out.depth.set(x, y, 0, tf.depth[p]);
                out.alpha.set(x, y, 0, tf.alpha[p]);
                out.final_transmittance.set(x, y, 0, tf.final_t[p]);
            }
        }
        for (li, &si) in bins.lists[t].iter().enumerate() {
            let id = screen[si as usize].id;
            out.contribution[id] += tf.contrib[li];
            out.touched[id] += tf.touched[li];
        }
        tapes.push(tf.tape);
    }
    (out, screen, bins, tapes)
}

/// The fields of a screen splat the blending loop reads, packed per tile.
#[derive(Clone, Copy)]
struct Hot {
    bbox: [f64; 4],
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    /// Beyond this Mahalanobis value the splat cannot reach `SIGMA_MIN`.
    q_cut: f64,
    depth: f64,
    color: [f64; 3],
    normal: [f64; 3],
}

fn forward_tile(
    t: usize,
    screen: &[ScreenSplat],
    bins: &TileBins,
    width: usize,
    height: usize,
    cfg: &RasterConfig,
    record: bool,
) -> TileForward {
    let (x0, y0, x1, y1) = bins.tile_rect(t, width, height);
    let list = &bins.lists[t];
    let hot: Vec<Hot> = list
        .iter()
        .map(|&si| {
            let s = &screen[si as usize];
            // small margin so the early-out never rejects a splat the exact
            // test below would keep
            let q_cut = (2.0 * (s.opacity / SIGMA_MIN).ln() + 1e-6).min(FOOTPRINT_Q);
            Hot { bbox: s.bbox, mean: [s.mean.x, s.mean.y], conic: s.conic, opacity: s.opacity, q_cut, depth: s.depth, color: s.color, normal: s.normal }
        })
        .collect();
    let npix = (x1 - x0) * (y1 - y0);
    let mut tf = TileForward {
        color: vec![[0.0; 3]; npix],
        depth: vec![0.0; npix],
        normal: vec![[0.0; 3]; npix],
        alpha: vec![0.0; npix],
        final_t: vec![1.0; npix],
        contrib: vec![0.0; list.len()],
        touched: vec![0; list.len()],
        tape: TileTape { offsets: Vec::with_capacity(if record { npix + 1 } else { 0 }), hits: Vec::new() },
    };
    if record {
        tf.tape.offsets.push(0);
    }
    let mut p = 0;
    for y in y0..y1 {
        for x in x0..x1 {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            let mut t_acc = 1.0;
            let mut col = [0.0; 3];
            let mut nrm = [0.0; 3];
            let mut zs = 0.0;
            let mut a = 0.0;
            for (li, s) in hot.iter().enumerate() {
                if px < s.bbox[0] || px > s.bbox[2] || py < s.bbox[1] || py > s.bbox[3] {
                    continue;
                }
                let dx = px - s.mean[0];
                let dy = py - s.mean[1];
                let q = s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy;
                if q > s.q_cut {
                    continue;
                }
                let g = (-0.5 * q).exp();
                let raw = s.opacity * g;
                if raw < SIGMA_MIN {
                    continue;
                }
                let clamped = raw > SIGMA_MAX;
                let sigma = if clamped { SIGMA_MAX } else { raw };
                let w = t_acc * sigma;
                for c in 0..3 {
                    col[c] += s.color[c] * w;
                    nrm[c] += s.normal[c] * w;
                }
                zs += s.depth * w;
                a += w;
                tf.contrib[li] += w;
                tf.touched[li] += 1;
                if record {
                    tf.tape.hits.push(Hit { local: li as u32, g, sigma, t_before: t_acc, clamped });
                }
                t_acc *= 1.0 - sigma;
                if t_acc < cfg.stop_transmittance {
                    break;
                }
            }
            for c in 0..3 {
                col[c] += cfg.background[c] * t_acc;
            }
            tf.color[p] = col;
            tf.alpha[p] = a;
            tf.final_t[p] = t_acc;
            if a > ALPHA_EPS {
                tf.depth[p] = zs / a;
                let n = (nrm[0] * nrm[0] + nrm[1] * nrm[1] + nrm[2] * nrm[2]).sqrt();
                if n > 0.0 {
                    tf.normal[p] = [nrm[0] / n, nrm[1] / n, nrm[2] / n];
                }
            }
            if record {
                tf.tape.offsets.push(tf.tape.hits.len() as u32);
            }
            p += 1;
        }
    }
    tf
}

/// Upstream gradients of a scalar loss with respect to the rendered maps.
#[derive(Clone, Debug, Default)]
pub struct MapGrads {
    pub color: Option<FloatMap>,
    pub depth: Option<FloatMap>,
    pub normal: Option<FloatMap>,
    pub alpha: Option<FloatMap>,
}

/// Gradient with respect to one splat. `scale`/`rotation` refer to the
/// covariance of the branch that was rasterized; `rotation` is with respect to
/// the stored quaternion components.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplatGrad {
    pub center: Vec3,
    pub scale: Vec3,
    pub rotation: [f64; 4],
    pub opacity: f64,
    pub color: Vec3,
    /// `dL/d(mean2d)` in pixels, used for densification statistics.
    pub mean2d: Vec2,
}

#[derive(Clone, Copy, Default)]
struct Acc {
    mean: [f64; 2],
    conic: [f64; 3],
    z: f64,
    normal: [f64; 3],
    color: [f64; 3],
    opacity: f64,
}

impl Acc {
    fn add(&mut self, o: &Acc) {
        for i in 0..2 {
            self.mean[i] += o.mean[i];
        }
        for i in 0..3 {
            self.conic[i] += o.conic[i];
            self.normal[i] += o.normal[i];
            self.color[i] += o.color[i];
        }
        self.z += o.z;
        self.opacity += o.opacity;
    }
}

pub fn rasterize_backward(
    tape: &RasterTape,
    splats: &[GaussianSplat],
    cam: &Camera,
    grads: &MapGrads,
) -> Result<Vec<SplatGrad>> {
    if splats.len() != tape.num_splats || cam.width != tape.width || cam.height != tape.height {
        return invalid("raster tape does not match the splats or camera");
    }
    for m in [&grads.color, &grads.depth, &grads.normal, &grads.alpha].into_iter().flatten() {
        if m.width != tape.width || m.height != tape.height {
            return invalid("gradient map size does not match the render");
        }
    }
    let n_tiles = tape.bins.lists.len();
    let partials = par::map_range(n_tiles, |t| backward_tile(t, tape, grads));
    let mut acc = vec![Acc::default(); tape.screen.len()];
    for (t, part) in partials.into_iter().enumerate() {
        for (li, a) in part.iter().enumerate() {
            acc[tape.bins.lists[t][li] as usize].add(a);
        }
    }
    let mut out = vec![SplatGrad::default(); splats.len()];
    for (s, a) in tape.screen.iter().zip(&acc) {
        out[s.id] = finalize(s, a, cam);
    }
    Ok(out)
}

fn backward_tile(t: usize, tape: &RasterTape, grads: &MapGrads) -> Vec<Acc> {
    let bins = &tape.bins;
    let (x0, y0, x1, y1) = bins.tile_rect(t, tape.width, tape.height);
    let list = &bins.lists[t];
    let tile = &tape.tiles[t];
    let mut acc = vec![Acc::default(); list.len()];
    let mut p = 0;
    for y in y0..y1 {
        for x in x0..x1 {
            let hits = &tile.hits[tile.offsets[p] as usize..tile.offsets[p + 1] as usize];
            p += 1;
            let gc = grads.color.as_ref().map_or([0.0; 3], |m| [m.get(x, y, 0), m.get(x, y, 1), m.get(x, y, 2)]);
            let gd = grads.depth.as_ref().map_or(0.0, |m| m.get(x, y, 0));
            let gn = grads.normal.as_ref().map_or([0.0; 3], |m| [m.get(x, y, 0), m.get(x, y, 1), m.get(x, y, 2)]);
            let ga = grads.alpha.as_ref().map_or(0.0, |m| m.get(x, y, 0));
            let bg_term = gc[0] * tape.background[0] + gc[1] * tape.background[1] + gc[2] * tape.background[2];
            if hits.is_empty() {
                continue;
            }
            let mut a = 0.0;
            let mut zs = 0.0;
            let mut ns = [0.0; 3];
            let mut t_final = 1.0;
            for h in hits {
                let s = &tape.screen[list[h.local as usize] as usize];
                let w = h.sigma * h.t_before;
                a += w;
                zs += s.depth * w;
                for c in 0..3 {
                    ns[c] += s.normal[c] * w;
                }
                t_final = h.t_before * (1.0 - h.sigma);
            }
            let mut g_zs = 0.0;
            let mut g_a = ga;
            let mut g_ns = [0.0; 3];
            if a > ALPHA_EPS {
                g_zs = gd / a;
                g_a -= gd * zs / (a * a);
                let nn = (ns[0] * ns[0] + ns[1] * ns[1] + ns[2] * ns[2]).sqrt();
                if nn > 0.0 {
                    let n = [ns[0] / nn, ns[1] / nn, ns[2] / nn];
                    let dot = n[0] * gn[0] + n[1] * gn[1] + n[2] * gn[2];
                    for c in 0..3 {
                        g_ns[c] = (gn[c] - n[c] * dot) / nn;
                    }
                }
            }
            let mut tail = bg_term * t_final;
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            for h in hits.iter().rev() {
                let s = &tape.screen[list[h.local as usize] as usize];
                let gf = gc[0] * s.color[0]
                    + gc[1] * s.color[1]
                    + gc[2] * s.color[2]
                    + g_zs * s.depth
                    + g_ns[0] * s.normal[0]
                    + g_ns[1] * s.normal[1]
                    + g_ns[2] * s.normal[2]
                    + g_a;
                let w = h.sigma * h.t_before;
                let g_sigma = h.t_before * gf - tail / (1.0 - h.sigma);
                tail += gf * w;
                let ac = &mut acc[h.local as usize];
                for c in 0..3 {
                    ac.color[c] += gc[c] * w;
                    ac.normal[c] += g_ns[c] * w;
                }
                ac.z += g_zs * w;
                if !h.clamped {
                    ac.opacity += g_sigma * h.g;
                    let g_g = g_sigma * s.opacity;
                    let dx = px - s.mean.x;
                    let dy = py - s.mean.y;
                    let k = g_g * h.g;
                    ac.mean[0] += k * (s.conic[0] * dx + s.conic[1] * dy);
                    ac.mean[1] += k * (s.conic[1] * dx + s.conic[2] * dy);
                    ac.conic[0] -= 0.5 * k * dx * dx;
                    ac.conic[1] -= 0.5 * k * dx * dy;
                    ac.conic[2] -= 0.5 * k * dy * dy;
                }
            }
        }
    }
    acc
}

fn finalize(s: &ScreenSplat, a: &Acc, cam: &Camera) -> SplatGrad {
    let q = Mat2::new(s.conic[0], s.conic[1], s.conic[1], s.conic[2]);
    let g_q = Mat2::new(a.conic[0], a.conic[1], a.conic[1], a.conic[2]);
    let g_cov2 = -(q * g_q * q);
    let jac = &s.proj.jacobian;
    let tp = &s.proj.cam_point;
    let g_mean = Vec2::new(a.mean[0], a.mean[1]);
    let mut g_t: Vec3 = jac.transpose() * g_mean;
    g_t.z += a.z;
    let g_j = 2.0 * g_cov2 * jac * s.proj.cov_cam;
    let iz = 1.0 / tp.z;
    let iz2 = iz * iz;
    g_t.x += g_j[(0, 2)] * (-cam.fx * iz2);
    g_t.y += g_j[(1, 2)] * (-cam.fy * iz2);
    g_t.z += g_j[(0, 0)] * (-cam.fx * iz2)
        + g_j[(0, 2)] * (2.0 * cam.fx * tp.x * iz2 * iz)
        + g_j[(1, 1)] * (-cam.fy * iz2)
        + g_j[(1, 2)] * (2.0 * cam.fy * tp.y * iz2 * iz);
    let g_m = jac.transpose() * g_cov2 * jac;
    let w = &cam.rotation;
    let g_sigma = w.transpose() * g_m * w;
    let s2 = Mat3::from_diagonal(&s.scale.component_mul(&s.scale));
    let mut g_r = 2.0 * g_sigma * s.rot * s2;
    let rgr = s.rot.transpose() * g_sigma * s.rot;
    let g_scale = Vec3::new(
        2.0 * s.scale.x * rgr[(0, 0)],
        2.0 * s.scale.y * rgr[(1, 1)],
        2.0 * s.scale.z * rgr[(2, 2)],
    );
    let g_ncol = w.transpose() * Vec3::new(a.normal[0], a.normal[1], a.normal[2]) * s.n_sign;
    for r in 0..3 {
        g_r[(r, s.n_axis)] += g_ncol[r];
    }
    SplatGrad {
        center: w.transpose() * g_t,
        scale: g_scale,
        rotation: rotmat_backward(s.quat, &g_r),
        opacity: a.opacity,
        color: Vec3::new(a.color[0], a.color[1], a.color[2]),
        mean2d: g_mean,
    }
}

/// Per-anchor running mean of `‖dL/d(mean2d)‖` since the last reset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensifyStats {
    pub grad_sum: Vec<f64>,
    pub count: Vec<u64>,
}

impl DensifyStats {
    pub fn new(n_anchors: usize) -> Self {
        Self { grad_sum: vec![0.0; n_anchors], count: vec![0; n_anchors] }
    }

    pub fn resize(&mut self, n: usize) {
        self.grad_sum.resize(n, 0.0);
        self.count.resize(n, 0);
    }

    pub fn reset(&mut self) {
        self.grad_sum.iter_mut().for_each(|v| *v = 0.0);
        self.count.iter_mut().for_each(|v| *v = 0);
    }

    /// `∇_g` of anchor `a` (zero when never observed).
    pub fn mean(&self, a: usize) -> f64 {
        if self.count[a] == 0 {
            0.0
        } else {
            self.grad_sum[a] / self.count[a] as f64
        }
    }
}

/// Adds one view's samples: `mean2d_grads[i]` belongs to anchor `owner[i]`;
/// `None` entries (culled splats) are ignored.
pub fn accumulate_densify_stats(mean2d_grads: &[Option<Vec2>], owner: &[usize], stats: &mut DensifyStats) -> Result<()> {
    if mean2d_grads.len() != owner.len() {
        return invalid("gradient and owner lists differ in length");
    }
    for (g, &a) in mean2d_grads.iter().zip(owner) {
        if a >= stats.count.len() {
            return invalid(format!("anchor index {a} out of range"));
        }
        if let Some(g) = g {
            stats.grad_sum[a] += g.norm();
            stats.count[a] += 1;
        }
    }
    Ok(())
}
