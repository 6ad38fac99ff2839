//! Analytic signed-distance scenes and a sphere-tracing reference renderer.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geom::{quat_to_rotmat, Camera, Intrinsics, Mat3, Quaternion, Vec3};
use crate::image::FloatMap;
use crate::par;

const TRACE_EPS: f64 = 1e-5;
const TRACE_MAX_STEPS: usize = 2000;
const NORMAL_H: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Material {
    Solid { color: [f64; 3] },
    /// 3D checkerboard: parity of `floor(p/cell + 0.5)` summed over axes.
    Checker { a: [f64; 3], b: [f64; 3], cell: f64 },
}

impl Material {
    pub fn albedo(&self, p: &Vec3) -> Vec3 {
        match self {
            Material::Solid { color } => Vec3::from(*color),
            Material::Checker { a, b, cell } => {
                let s: i64 = (0..3).map(|i| (p[i] / cell + 0.5).floor() as i64).sum();
                if s.rem_euclid(2) == 0 {
                    Vec3::from(*a)
                } else {
                    Vec3::from(*b)
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    /// Oriented box; `rotation` is a `(w, x, y, z)` quaternion taking box
    /// coordinates to world coordinates.
    Box { center: [f64; 3], half_extents: [f64; 3], rotation: [f64; 4] },
    /// Half-space `n·x + offset ≥ 0` is free space.
    Plane { normal: [f64; 3], offset: f64 },
}

impl Shape {
    pub fn sdf(&self, p: &Vec3) -> f64 {
        match self {
            Shape::Sphere { center, radius } => (p - Vec3::from(*center)).norm() - radius,
            Shape::Box { center, half_extents, rotation } => {
                let r = quat_to_rotmat(Quaternion::from_array(*rotation)).unwrap_or_else(|_| Mat3::identity());
                let local = r.transpose() * (p - Vec3::from(*center));
                let q = local.abs() - Vec3::from(*half_extents);
                q.sup(&Vec3::zeros()).norm() + q.max().min(0.0)
            }
            Shape::Plane { normal, offset } => Vec3::from(*normal).normalize().dot(p) + offset,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    #[serde(flatten)]
    pub shape: Shape,
    pub material: Material,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub name: String,
    pub primitives: Vec<Primitive>,
    /// Contains every bounded primitive; sets the fusion volume.
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
    /// Region the camera rig actually observes; surface metrics only count
    /// points inside it.
    pub crop_min: [f64; 3],
    pub crop_max: [f64; 3],
}

impl AnalyticScene {
    pub fn bbox(&self) -> (Vec3, Vec3) {
        (Vec3::from(self.bbox_min), Vec3::from(self.bbox_max))
    }

    pub fn in_bbox(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.bbox_min[i] && p[i] <= self.bbox_max[i])
    }

    pub fn in_crop(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.crop_min[i] && p[i] <= self.crop_max[i])
    }

    /// Index of the primitive closest to `p` (the one defining the union SDF).
    pub fn closest(&self, p: &Vec3) -> Option<(usize, f64)> {
        self.primitives
            .iter()
            .enumerate()
            .map(|(i, pr)| (i, pr.shape.sdf(p)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    /// Normalized central-difference gradient of the union SDF.
    pub fn normal(&self, p: &Vec3) -> Vec3 {
        let mut g = Vec3::zeros();
        for i in 0..3 {
            let mut e = Vec3::zeros();
            e[i] = NORMAL_H;
            g[i] = scene_sdf(self, &(p + e)) - scene_sdf(self, &(p - e));
        }
        let n = g.norm();
        if n > 0.0 {
            g / n
        } else {
            g
        }
    }
}

/// Union SDF: minimum over primitives (infinite for an empty scene).
pub fn scene_sdf(scene: &AnalyticScene, p: &Vec3) -> f64 {
    scene.primitives.iter().map(|pr| pr.shape.sdf(p)).fold(f64::INFINITY, f64::min)
}

/// Ground-truth maps of one view. Normals are in the camera frame.
#[derive(Clone, Debug, PartialEq)]
pub struct GtView {
    pub color: FloatMap,
    pub depth: FloatMap,
    pub normal: FloatMap,
}

/// First surface hit along `origin + t·dir` as `t` (in units of `|dir|`).
pub fn trace_ray(scene: &AnalyticScene, origin: &Vec3, dir: &Vec3, t_max: f64) -> Option<f64> {
    let len = dir.norm();
    let mut t = 0.0;
    for _ in 0..TRACE_MAX_STEPS {
        let p = origin + dir * t;
        let d = scene_sdf(scene, &p);
        if d.abs() < TRACE_EPS {
            return Some(refine_hit(scene, origin, dir, t));
        }
        t += d / len;
        if t > t_max || t < 0.0 {
            return None;
        }
    }
    None
}

/// Newton polish of a converged hit along the ray.
fn refine_hit(scene: &AnalyticScene, origin: &Vec3, dir: &Vec3, mut t: f64) -> f64 {
    let f = |t: f64| scene_sdf(scene, &(origin + dir * t));
    for _ in 0..4 {
        let h = 1e-7;
        let slope = (f(t + h) - f(t - h)) / (2.0 * h);
        if slope.abs() < 1e-3 {
            break;
        }
        let step = f(t) / slope;
        if step.abs() > 1e-4 {
            break;
        }
        t -= step;
    }
    t
}

/// Sphere-traced color, depth (camera z) and normal maps. Lighting is a
/// headlight: `albedo·(0.3 + 0.7·max(0, n·l))` with `l` toward the camera.
pub fn raytrace_view(scene: &AnalyticScene, cam: &Camera) -> GtView {
    let (w, h) = (cam.width, cam.height);
    let origin = cam.position();
    let rt = cam.rotation.transpose();
    let rows = par::map_range(h, |y| {
        let mut row = Vec::with_capacity(w);
        for x in 0..w {
            let ray_cam = cam.pixel_ray(x, y);
            let dir = rt * ray_cam;
            // ray_cam has unit z, so t equals camera-space depth
            row.push(trace_ray(scene, &origin, &dir, 100.0).map(|t| {
                let p = origin + dir * t;
                let n = scene.normal(&p);
                let l = (origin - p).normalize();
                let (idx, _) = scene.closest(&p).expect("hit implies a primitive");
                let albedo = scene.primitives[idx].material.albedo(&p);
                let color = albedo * (0.3 + 0.7 * n.dot(&l).max(0.0));
                (color, t, cam.rotation * n)
            }));
        }
        row
    });
    let mut out = GtView { color: FloatMap::new(w, h, 3), depth: FloatMap::new(w, h, 1), normal: FloatMap::new(w, h, 3) };
    for (y, row) in rows.into_iter().enumerate() {
        for (x, hit) in row.into_iter().enumerate() {
            if let Some((c, d, n)) = hit {
                for k in 0..3 {
                    out.color.set(x, y, k, c[k]);
                    out.normal.set(x, y, k, n[k]);
                }
                out.depth.set(x, y, 0, d);
            }
        }
    }
    out
}

pub fn raytrace_views(scene: &AnalyticScene, cams: &[Camera]) -> Vec<GtView> {
    cams.iter().map(|c| raytrace_view(scene, c)).collect()
}

/// `n` look-at cameras on circles around `target`. With several elevations
/// (degrees) the views are split evenly across rings, and each ring's
/// azimuths are staggered by half a step relative to the previous ring.
pub fn make_camera_rig(n: usize, radius: f64, elevations_deg: &[f64], target: Vec3, intr: Intrinsics) -> Result<Vec<Camera>> {
    if n < 2 || !(radius > 0.0) || elevations_deg.is_empty() {
        return invalid("camera rig needs n >= 2, radius > 0 and at least one elevation");
    }
    let rings = elevations_deg.len();
    let mut cams = Vec::with_capacity(n);
    for (r, el) in elevations_deg.iter().enumerate() {
        let count = n / rings + usize::from(r < n % rings);
        let el = el.to_radians();
        let stagger = if r % 2 == 1 { 0.5 } else { 0.0 };
        for i in 0..count {
            let az = 2.0 * std::f64::consts::PI * (i as f64 + stagger) / count as f64;
            let eye = target + Vec3::new(el.cos() * az.cos(), el.sin(), el.cos() * az.sin()) * radius;
            cams.push(Camera::look_at(eye, target, Vec3::y(), intr)?);
        }
    }
    Ok(cams)
}

/// Surface samples: uniform candidates in the bounding box projected onto
/// the zero level set, kept when `|sdf| < 1e-3`, then jittered by
/// `N(0, σ_p²)` per axis.
pub fn sample_init_points<R: Rng>(scene: &AnalyticScene, count: usize, sigma: f64, rng: &mut R) -> Result<Vec<Vec3>> {
    if count == 0 {
        return invalid("point count must be at least 1");
    }
    let (lo, hi) = scene.bbox();
    let noise = Normal::new(0.0, sigma.max(0.0)).map_err(|e| crate::Error::InvalidInput(e.to_string()))?;
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > 1000 * count + 10_000 {
            return invalid("could not find surface points inside the bounding box");
        }
        let mut p = Vec3::new(rng.random_range(lo.x..hi.x), rng.random_range(lo.y..hi.y), rng.random_range(lo.z..hi.z));
        for _ in 0..8 {
            let d = scene_sdf(scene, &p);
            if d.abs() < 1e-9 {
                break;
            }
            p -= scene.normal(&p) * d;
        }
        if scene_sdf(scene, &p).abs() >= 1e-3 || !scene.in_bbox(&p) {
            continue;
        }
        if sigma > 0.0 {
            p += Vec3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng));
        }
        out.push(p);
    }
    Ok(out)
}

/// Camera rig shipped with each canonical scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigSpec {
    pub radius: f64,
    pub elevations_deg: Vec<f64>,
    pub target: [f64; 3],
    pub fov_x_deg: f64,
}

fn ground_slab(half: f64) -> Primitive {
    Primitive {
        shape: Shape::Box { center: [0.0, -0.05, 0.0], half_extents: [half, 0.05, half], rotation: [1.0, 0.0, 0.0, 0.0] },
        material: Material::Checker { a: [0.55, 0.55, 0.6], b: [0.25, 0.35, 0.55], cell: 0.3 },
    }
}

fn yaw(deg: f64) -> [f64; 4] {
    Quaternion::from_axis_angle(Vec3::y(), deg.to_radians()).to_array()
}

pub const SCENE_NAMES: [&str; 3] = ["sphere", "blocks", "room"];

/// One of the canonical scenes with its default rig.
pub fn canonical_scene(name: &str) -> Result<(AnalyticScene, RigSpec)> {
    match name {
        "sphere" => Ok((
            AnalyticScene {
                name: name.into(),
                primitives: vec![
                    ground_slab(1.2),
                    Primitive {
                        shape: Shape::Sphere { center: [0.0, 0.45, 0.0], radius: 0.5 },
                        material: Material::Checker { a: [0.9, 0.3, 0.2], b: [0.95, 0.85, 0.3], cell: 0.25 },
                    },
                ],
                bbox_min: [-1.25, -0.15, -1.25],
                bbox_max: [1.25, 1.05, 1.25],
                crop_min: [-1.25, -0.05, -1.25],
                crop_max: [1.25, 1.05, 1.25],
            },
            RigSpec { radius: 3.2, elevations_deg: vec![25.0, 50.0], target: [0.0, 0.25, 0.0], fov_x_deg: 50.0 },
        )),
        "blocks" => Ok((
            AnalyticScene {
                name: name.into(),
                primitives: vec![
                    ground_slab(1.2),
                    Primitive {
                        shape: Shape::Box { center: [-0.45, 0.25, 0.1], half_extents: [0.3, 0.3, 0.3], rotation: yaw(30.0) },
                        material: Material::Checker { a: [0.85, 0.25, 0.25], b: [0.95, 0.9, 0.85], cell: 0.2 },
                    },
                    Primitive {
                        shape: Shape::Box { center: [0.45, 0.18, -0.3], half_extents: [0.25, 0.2, 0.35], rotation: yaw(-20.0) },
                        material: Material::Checker { a: [0.2, 0.7, 0.3], b: [0.9, 0.9, 0.4], cell: 0.15 },
                    },
                    Primitive {
                        shape: Shape::Sphere { center: [0.3, 0.28, 0.45], radius: 0.3 },
                        material: Material::Checker { a: [0.3, 0.4, 0.9], b: [0.9, 0.6, 0.2], cell: 0.12 },
                    },
                ],
                bbox_min: [-1.25, -0.15, -1.25],
                bbox_max: [1.25, 0.9, 1.25],
                crop_min: [-1.25, -0.05, -1.25],
                crop_max: [1.25, 0.9, 1.25],
            },
            RigSpec { radius: 3.2, elevations_deg: vec![25.0, 50.0], target: [0.0, 0.2, 0.0], fov_x_deg: 50.0 },
        )),
        "room" => {
            let wall = |normal: [f64; 3], offset: f64, a: [f64; 3], b: [f64; 3]| Primitive {
                shape: Shape::Plane { normal, offset },
                material: Material::Checker { a, b, cell: 0.5 },
            };
            Ok((
                AnalyticScene {
                    name: name.into(),
                    primitives: vec![
                        wall([0.0, 1.0, 0.0], 0.0, [0.6, 0.5, 0.4], [0.35, 0.3, 0.25]),
                        wall([0.0, -1.0, 0.0], 2.4, [0.9, 0.9, 0.9], [0.7, 0.7, 0.75]),
                        wall([1.0, 0.0, 0.0], 2.0, [0.8, 0.4, 0.3], [0.9, 0.8, 0.6]),
                        wall([-1.0, 0.0, 0.0], 2.0, [0.3, 0.5, 0.8], [0.8, 0.85, 0.9]),
                        wall([0.0, 0.0, 1.0], 2.0, [0.4, 0.7, 0.4], [0.85, 0.9, 0.7]),
                        wall([0.0, 0.0, -1.0], 2.0, [0.7, 0.6, 0.8], [0.95, 0.9, 0.6]),
                        Primitive {
                            shape: Shape::Box { center: [0.0, 0.28, 0.0], half_extents: [0.35, 0.3, 0.35], rotation: yaw(15.0) },
                            material: Material::Checker { a: [0.9, 0.3, 0.2], b: [0.95, 0.85, 0.3], cell: 0.2 },
                        },
                    ],
                    bbox_min: [-2.0, 0.0, -2.0],
                    bbox_max: [2.0, 2.4, 2.0],
                    // padded so fused walls just outside the box still count
                    crop_min: [-2.1, -0.1, -2.1],
                    crop_max: [2.1, 2.5, 2.1],
                },
                RigSpec { radius: 1.4, elevations_deg: vec![-25.0, 30.0], target: [0.0, 1.2, 0.0], fov_x_deg: 75.0 },
            ))
        }
        other => invalid(format!("unknown scene `{other}` (expected one of {})", SCENE_NAMES.join(", "))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_sphere() -> AnalyticScene {
        AnalyticScene {
            name: "unit".into(),
            primitives: vec![Primitive {
                shape: Shape::Sphere { center: [0.0; 3], radius: 1.0 },
                material: Material::Solid { color: [1.0, 1.0, 1.0] },
            }],
            bbox_min: [-1.0; 3],
            bbox_max: [1.0; 3],
            crop_min: [-1.0; 3],
            crop_max: [1.0; 3],
        }
    }

    #[test]
    fn sphere_sdf_examples() {
        let s = unit_sphere();
        assert_eq!(scene_sdf(&s, &Vec3::zeros()), -1.0);
        assert!((scene_sdf(&s, &Vec3::new(0.0, 2.0, 0.0)) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn union_is_pointwise_min() {
        let a = Shape::Sphere { center: [0.0; 3], radius: 0.5 };
        let b = Shape::Sphere { center: [0.7, 0.1, 0.0], radius: 0.4 };
        let scene = AnalyticScene {
            name: "two".into(),
            primitives: vec![
                Primitive { shape: a.clone(), material: Material::Solid { color: [1.0; 3] } },
                Primitive { shape: b.clone(), material: Material::Solid { color: [1.0; 3] } },
            ],
            bbox_min: [-1.0; 3],
            bbox_max: [1.5; 3],
            crop_min: [-1.0; 3],
            crop_max: [1.5; 3],
        };
        for i in 0..10 {
            for j in 0..10 {
                let p = Vec3::new(-1.0 + 0.25 * i as f64, -1.0 + 0.2 * j as f64, 0.3);
                assert_eq!(scene_sdf(&scene, &p), a.sdf(&p).min(b.sdf(&p)));
            }
        }
    }

    #[test]
    fn box_and_plane_sdf() {
        let b = Shape::Box { center: [1.0, 0.0, 0.0], half_extents: [0.5, 0.5, 0.5], rotation: [1.0, 0.0, 0.0, 0.0] };
        assert!((b.sdf(&Vec3::new(2.0, 0.0, 0.0)) - 0.5).abs() < 1e-15);
        assert!((b.sdf(&Vec3::new(1.0, 0.0, 0.0)) + 0.5).abs() < 1e-15);
        assert!((b.sdf(&Vec3::new(2.0, 1.0, 0.0)) - 0.5f64.hypot(0.5)).abs() < 1e-15);
        let rotated = Shape::Box { center: [0.0; 3], half_extents: [1.0, 0.1, 0.1], rotation: yaw(90.0) };
        assert!(rotated.sdf(&Vec3::new(0.0, 0.0, 0.9)) < 0.0);
        let p = Shape::Plane { normal: [0.0, 2.0, 0.0], offset: 1.0 };
        assert!((p.sdf(&Vec3::new(3.0, 0.5, 1.0)) - 1.5).abs() < 1e-15);
    }

    fn axial_cam(w: usize) -> Camera {
        Camera::look_at(Vec3::new(0.0, 0.0, -3.0), Vec3::zeros(), Vec3::y(), Intrinsics::from_fov(w, w, 40.0)).unwrap()
    }

    #[test]
    fn axial_hit_and_miss() {
        let s = unit_sphere();
        let cam = Camera { cx: 16.5, cy: 16.5, ..axial_cam(32) };
        let gt = raytrace_view(&s, &cam);
        // pixel (16, 16) has its center exactly on the optical axis
        assert!((gt.depth.get(16, 16, 0) - 2.0).abs() < 1e-9);
        let n = gt.normal.pixel(16, 16);
        assert!((n[2] + 1.0).abs() < 1e-6);
        assert_eq!(gt.depth.get(0, 0, 0), 0.0);
        assert_eq!(gt.color.pixel(0, 0), &[0.0; 3]);
        assert!((gt.color.get(16, 16, 0) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn silhouette_radius_matches_formula() {
        let s = unit_sphere();
        let cam = axial_cam(128);
        let gt = raytrace_view(&s, &cam);
        let d: f64 = 3.0;
        let expect = cam.fx * 1.0 / (d * d - 1.0).sqrt();
        let row = 64;
        let hits: Vec<usize> = (0..128).filter(|&x| gt.depth.get(x, row, 0) > 0.0).collect();
        let measured = (hits.len() as f64) / 2.0;
        assert!((measured - expect).abs() <= 1.0, "{measured} vs {expect}");
    }

    #[test]
    fn rig_examples() {
        let intr = Intrinsics::from_fov(16, 16, 50.0);
        let cams = make_camera_rig(4, 3.0, &[0.0], Vec3::zeros(), intr).unwrap();
        let expected = [Vec3::new(3.0, 0.0, 0.0), Vec3::new(0.0, 0.0, 3.0), Vec3::new(-3.0, 0.0, 0.0), Vec3::new(0.0, 0.0, -3.0)];
        for (c, e) in cams.iter().zip(expected) {
            assert!((c.position() - e).norm() < 1e-9);
            // the optical axis passes through the target
            let t = c.world_to_cam(&Vec3::zeros());
            assert!(t.x.abs() < 1e-9 && t.y.abs() < 1e-9 && t.z > 0.0);
        }
        let two = make_camera_rig(2, 1.0, &[10.0], Vec3::zeros(), intr).unwrap();
        let (a, b) = (two[0].position(), two[1].position());
        assert!((a.x + b.x).abs() < 1e-9 && (a.z + b.z).abs() < 1e-9 && (a.y - b.y).abs() < 1e-12);
        let many = make_camera_rig(24, 2.5, &[20.0, 55.0], Vec3::new(0.1, 0.2, 0.0), intr).unwrap();
        assert_eq!(many.len(), 24);
        for c in &many {
            assert!((c.rotation.transpose() * c.rotation - Mat3::identity()).abs().max() < 1e-9);
            c.validate().unwrap();
        }
        assert!(make_camera_rig(1, 1.0, &[0.0], Vec3::zeros(), intr).is_err());
    }

    #[test]
    fn init_points_contracts() {
        let (scene, _) = canonical_scene("blocks").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = sample_init_points(&scene, 1000, 0.0, &mut rng).unwrap();
        assert_eq!(pts.len(), 1000);
        assert!(pts.iter().all(|p| scene_sdf(&scene, p).abs() < 1e-3));
        let noisy = sample_init_points(&scene, 1000, 0.05, &mut rng).unwrap();
        let within = noisy.iter().filter(|p| scene_sdf(&scene, p).abs() < 0.2).count();
        assert!(within >= 990);
    }

    #[test]
    fn sdf_gradient_is_unit_away_from_creases() {
        for name in SCENE_NAMES {
            let (scene, _) = canonical_scene(name).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let (lo, hi) = scene.bbox();
            let mut checked = 0;
            for _ in 0..400 {
                let p = Vec3::new(rng.random_range(lo.x..hi.x), rng.random_range(lo.y..hi.y), rng.random_range(lo.z..hi.z));
                // skip points where two primitives nearly tie or a box's
                // closest feature is an edge/corner
                let mut d: Vec<f64> = scene.primitives.iter().map(|pr| pr.shape.sdf(&p)).collect();
                d.sort_by(f64::total_cmp);
                if d.len() > 1 && d[1] - d[0] < 1e-2 {
                    continue;
                }
                let h = 1e-5;
                let mut g = Vec3::zeros();
                for i in 0..3 {
                    let mut e = Vec3::zeros();
                    e[i] = h;
                    g[i] = (scene_sdf(&scene, &(p + e)) - scene_sdf(&scene, &(p - e))) / (2.0 * h);
                }
                if scene_sdf(&scene, &p) < 0.0 {
                    continue;
                }
                if (g.norm() - 1.0).abs() < 1e-3 {
                    checked += 1;
                } else {
                    // only box edge/corner regions may deviate: the gradient
                    // is then still bounded by one
                    assert!(g.norm() <= 1.0 + 1e-3);
                }
            }
            assert!(checked > 50, "{name}: {checked}");
        }
    }

    #[test]
    fn unknown_scene_rejected() {
        assert!(canonical_scene("teapot").is_err());
    }
}
