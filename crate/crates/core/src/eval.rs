//! Image and surface metrics.

use rand::Rng;
use serde::Serialize;

use crate::error::{invalid, Result};
use crate::geom::{quat_to_rotmat, Mat3, Quaternion, Vec3};
use crate::image::FloatMap;
use crate::par;
use crate::scene::{scene_sdf, AnalyticScene, Shape};
use crate::surface::TriangleMesh;

pub const PSNR_CAP: f64 = 100.0;

/// `10·log10(1/MSE)`, capped at 100 dB when `MSE < 1e-10`.
pub fn psnr(img: &FloatMap, gt: &FloatMap) -> Result<f64> {
    if !img.same_shape(gt) {
        return invalid("psnr: image sizes differ");
    }
    let mse = img.data.iter().zip(&gt.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / img.data.len().max(1) as f64;
    Ok(if mse < 1e-10 { PSNR_CAP } else { (10.0 * (1.0 / mse).log10()).min(PSNR_CAP) })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct SurfaceMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Symmetric Chamfer distance in world units.
    pub chamfer: f64,
    pub pred_samples: usize,
    pub gt_samples: usize,
    /// Set when the prediction had no samples (all other fields are 0).
    pub empty: bool,
}

pub fn f1_score(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Nearest-neighbor distances against a fixed point set. Small sets are
/// scanned directly; above [`PointIndex::GRID_MIN`] points a uniform grid is
/// searched in rings of growing Chebyshev radius.
pub struct PointIndex {
    points: Vec<Vec3>,
    grid: Option<Grid>,
}

struct Grid {
    origin: Vec3,
    cell: f64,
    dims: [usize; 3],
    /// Point indices sorted by cell, with `starts[c]..starts[c + 1]` per cell.
    order: Vec<u32>,
    starts: Vec<u32>,
}

impl Grid {
    fn cell_of(&self, p: &Vec3) -> [usize; 3] {
        [0, 1, 2].map(|i| (((p[i] - self.origin[i]) / self.cell).floor().max(0.0) as usize).min(self.dims[i] - 1))
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        c[0] + self.dims[0] * (c[1] + self.dims[1] * c[2])
    }
}

impl PointIndex {
    pub const GRID_MIN: usize = 1000;

    pub fn new(points: Vec<Vec3>) -> Self {
        let grid = (points.len() > Self::GRID_MIN).then(|| Self::build_grid(&points));
        Self { points, grid }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build_grid(points: &[Vec3]) -> Grid {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let ext = (hi - lo).max().max(1e-9);
        let per_axis = ((2.0 * (points.len() as f64).cbrt()).ceil() as usize).clamp(1, 256);
        let cell = ext / per_axis as f64 * (1.0 + 1e-9);
        let dims = [0, 1, 2].map(|i| (((hi[i] - lo[i]) / cell).floor() as usize + 1).max(1));
        let mut g = Grid { origin: lo, cell, dims, order: Vec::new(), starts: Vec::new() };
        let ncells = dims[0] * dims[1] * dims[2];
        let keys: Vec<usize> = points.iter().map(|p| g.flat(g.cell_of(p))).collect();
        let mut counts = vec![0u32; ncells + 1];
        for &k in &keys {
            counts[k + 1] += 1;
        }
        for i in 0..ncells {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut order = vec![0u32; points.len()];
        for (i, &k) in keys.iter().enumerate() {
            order[fill[k] as usize] = i as u32;
            fill[k] += 1;
        }
        g.order = order;
        g.starts = counts;
        g
    }

    /// Distance to the nearest indexed point (`∞` when empty).
    pub fn nearest(&self, q: &Vec3) -> f64 {
        match &self.grid {
            None => self.points.iter().map(|p| (p - q).norm_squared()).fold(f64::INFINITY, f64::min).sqrt(),
            Some(g) => {
                let c = g.cell_of(q);
                let max_r = g.dims.iter().copied().max().unwrap_or(1);
                let mut best = f64::INFINITY;
                for r in 0..=max_r {
                    let lo = [0, 1, 2].map(|i| c[i] as i64 - r as i64);
                    let hi = [0, 1, 2].map(|i| c[i] as i64 + r as i64);
                    for z in lo[2].max(0)..=hi[2].min(g.dims[2] as i64 - 1) {
                        for y in lo[1].max(0)..=hi[1].min(g.dims[1] as i64 - 1) {
                            let on_shell_yz = z == lo[2] || z == hi[2] || y == lo[1] || y == hi[1];
                            let mut x = lo[0].max(0);
                            while x <= hi[0].min(g.dims[0] as i64 - 1) {
                                let cell = g.flat([x as usize, y as usize, z as usize]);
                                for &i in &g.order[g.starts[cell] as usize..g.starts[cell + 1] as usize] {
                                    best = best.min((self.points[i as usize] - q).norm_squared());
                                }
                                // interior rows only need the two end cells
                                if on_shell_yz || x == hi[0] {
                                    x += 1;
                                } else {
                                    x = hi[0];
                                }
                            }
                        }
                    }
                    // anything in ring r+1 is at least r cells away
                    if best.sqrt() <= r as f64 * g.cell {
                        break;
                    }
                }
                best.sqrt()
            }
        }
    }
}

/// Prediction side of a surface comparison.
pub enum PredSurface<'a> {
    Mesh(&'a TriangleMesh),
    Points(&'a [Vec3]),
}

/// Ground-truth side; analytic scenes also crop the prediction to their
/// evaluation region.
pub enum GtSurface<'a> {
    Analytic(&'a AnalyticScene),
    Mesh(&'a TriangleMesh),
    Points(&'a [Vec3]),
}

/// Precision / recall / F1 at `tau` and the symmetric Chamfer distance.
/// Meshes are sampled uniformly by area with `n_samples` points, point sets
/// are used as given; precision against an analytic scene uses `|scene_sdf|`
/// directly.
pub fn chamfer_f1<R: Rng>(pred: &PredSurface, gt: &GtSurface, tau: f64, n_samples: usize, rng: &mut R) -> Result<SurfaceMetrics> {
    if !(tau > 0.0) || n_samples == 0 {
        return invalid("chamfer_f1 needs tau > 0 and n_samples >= 1");
    }
    let mut pred_pts = match pred {
        PredSurface::Mesh(m) => m.sample_points(n_samples, rng),
        PredSurface::Points(p) => p.to_vec(),
    };
    if let GtSurface::Analytic(scene) = gt {
        pred_pts.retain(|p| scene.in_crop(p));
    }
    let gt_pts = match gt {
        GtSurface::Analytic(scene) => sample_scene_surface(scene, n_samples, rng)?,
        GtSurface::Mesh(m) => m.sample_points(n_samples, rng),
        GtSurface::Points(p) => p.to_vec(),
    };
    if pred_pts.is_empty() {
        return Ok(SurfaceMetrics { gt_samples: gt_pts.len(), empty: true, ..Default::default() });
    }
    if gt_pts.is_empty() {
        return invalid("ground-truth surface has no area");
    }
    let d_pred: Vec<f64> = match gt {
        GtSurface::Analytic(scene) => par::map_ordered(pred_pts.clone(), |p| scene_sdf(scene, &p).abs()),
        GtSurface::Mesh(_) | GtSurface::Points(_) => {
            let idx = PointIndex::new(gt_pts.clone());
            par::map_ordered(pred_pts.clone(), |p| idx.nearest(&p))
        }
    };
    let pred_idx = PointIndex::new(pred_pts.clone());
    let d_gt: Vec<f64> = par::map_ordered(gt_pts.clone(), |p| pred_idx.nearest(&p));
    Ok(metrics_from_distances(&d_pred, &d_gt, tau))
}

pub fn metrics_from_distances(d_pred: &[f64], d_gt: &[f64], tau: f64) -> SurfaceMetrics {
    let frac = |d: &[f64]| d.iter().filter(|&&x| x < tau).count() as f64 / d.len() as f64;
    let mean = |d: &[f64]| d.iter().sum::<f64>() / d.len() as f64;
    let (precision, recall) = (frac(d_pred), frac(d_gt));
    SurfaceMetrics {
        precision,
        recall,
        f1: f1_score(precision, recall),
        chamfer: 0.5 * (mean(d_pred) + mean(d_gt)),
        pred_samples: d_pred.len(),
        gt_samples: d_gt.len(),
        empty: false,
    }
}

fn unit_sphere_sample<R: Rng>(rng: &mut R) -> Vec3 {
    let z: f64 = rng.random_range(-1.0..1.0);
    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).max(0.0).sqrt();
    Vec3::new(r * phi.cos(), r * phi.sin(), z)
}

fn plane_basis(n: &Vec3) -> (Vec3, Vec3) {
    let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u = n.cross(&helper).normalize();
    (u, n.cross(&u))
}

/// Nominal sampling area of a primitive. Planes use a square patch of side
/// equal to the scene diagonal centered on the box center's projection.
fn nominal_area(shape: &Shape, diag: f64) -> f64 {
    match shape {
        Shape::Sphere { radius, .. } => 4.0 * std::f64::consts::PI * radius * radius,
        Shape::Box { half_extents: h, .. } => 8.0 * (h[0] * h[1] + h[1] * h[2] + h[0] * h[2]),
        Shape::Plane { .. } => diag * diag,
    }
}

fn sample_on_shape<R: Rng>(shape: &Shape, center: &Vec3, diag: f64, rng: &mut R) -> Vec3 {
    match shape {
        Shape::Sphere { center, radius } => Vec3::from(*center) + unit_sphere_sample(rng) * *radius,
        Shape::Box { center, half_extents: h, rotation } => {
            let r: Mat3 = quat_to_rotmat(Quaternion::from_array(*rotation)).unwrap_or_else(|_| Mat3::identity());
            let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
            let pick = rng.random::<f64>() * (areas[0] + areas[1] + areas[2]);
            let axis = if pick < areas[0] {
                0
            } else if pick < areas[0] + areas[1] {
                1
            } else {
                2
            };
            let mut local = Vec3::zeros();
            for i in 0..3 {
                local[i] = if i == axis {
                    if rng.random::<bool>() {
                        h[i]
                    } else {
                        -h[i]
                    }
                } else {
                    rng.random_range(-h[i]..h[i])
                };
            }
            Vec3::from(*center) + r * local
        }
        Shape::Plane { normal, offset } => {
            let n = Vec3::from(*normal).normalize();
            let foot = center - n * (n.dot(center) + offset);
            let (u, v) = plane_basis(&n);
            foot + u * rng.random_range(-0.5..0.5) * diag + v * rng.random_range(-0.5..0.5) * diag
        }
    }
}

/// Points uniform by area on the scene surface inside its evaluation crop.
/// Candidates are drawn per primitive in proportion to nominal area and
/// rejected when they fall inside another primitive or outside the crop.
pub fn sample_scene_surface<R: Rng>(scene: &AnalyticScene, n: usize, rng: &mut R) -> Result<Vec<Vec3>> {
    if scene.primitives.is_empty() {
        return invalid("scene has no primitives");
    }
    let (lo, hi) = scene.bbox();
    let diag = (hi - lo).norm();
    let center = (lo + hi) * 0.5;
    let areas: Vec<f64> = scene.primitives.iter().map(|p| nominal_area(&p.shape, diag)).collect();
    let total: f64 = areas.iter().sum();
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        if attempts > 200 * n + 10_000 {
            return invalid("scene surface inside the bounding box is too small to sample");
        }
        let mut pick = rng.random::<f64>() * total;
        let mut idx = areas.len() - 1;
        for (i, a) in areas.iter().enumerate() {
            if pick < *a {
                idx = i;
                break;
            }
            pick -= a;
        }
        let p = sample_on_shape(&scene.primitives[idx].shape, &center, diag, rng);
        if scene.in_crop(&p) && scene_sdf(scene, &p) > -1e-9 {
            out.push(p);
        }
    }
    Ok(out)
}
