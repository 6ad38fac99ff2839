//! Posed multi-view datasets and their directory layout.
//!
//! ```text
//! <dir>/scene.json          cameras, splits, optional analytic scene
//! <dir>/points.ply          initial point cloud (vertices only)
//! <dir>/images/NNN.png      8-bit RGB
//! <dir>/depth/NNN.ssfm      1-channel flat map, camera z, 0 = background
//! <dir>/normal/NNN.ssfm     3-channel flat map, camera-frame unit normals
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geom::{Camera, Intrinsics, Mat3, Vec3};
use crate::image::FloatMap;
use crate::scene::{canonical_scene, make_camera_rig, raytrace_views, sample_init_points, AnalyticScene, RigSpec};
use crate::surface::{MeshFormat, TriangleMesh};

pub const DATASET_VERSION: u32 = 1;

/// Every `TEST_STRIDE`-th view (starting at 0) is held out.
pub const TEST_STRIDE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub name: String,
    pub camera: Camera,
    pub split: Split,
    pub color: FloatMap,
    pub depth: Option<FloatMap>,
    pub normal: Option<FloatMap>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub scene: Option<AnalyticScene>,
    pub rig: Option<RigSpec>,
    pub views: Vec<View>,
    pub init_points: Vec<Vec3>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraRecord {
    name: String,
    split: Split,
    width: usize,
    height: usize,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    /// World-to-camera rotation, row-major.
    rotation: [f64; 9],
    translation: [f64; 3],
    has_depth: bool,
    has_normal: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    version: u32,
    #[serde(default)]
    scene: Option<AnalyticScene>,
    #[serde(default)]
    rig: Option<RigSpec>,
    views: Vec<CameraRecord>,
}

/// Parameters for rendering a canonical scene into a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub scene: String,
    pub views: usize,
    pub resolution: usize,
    pub init_points: usize,
    pub point_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { scene: "sphere".into(), views: 24, resolution: 128, init_points: 4000, point_noise: 0.01, seed: 0 }
    }
}

fn quantize_u8(m: &mut FloatMap) {
    m.data.iter_mut().for_each(|v| *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
}

fn quantize_f32(m: &mut FloatMap) {
    m.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
}

/// Ray-traces a canonical scene. Stored precisions are applied in memory too
/// (8-bit color, f32 depth/normals), so a written and re-read dataset equals
/// the returned one.
pub fn synthesize(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.resolution < 8 || cfg.views < 2 || cfg.init_points == 0 {
        return invalid("synth needs resolution >= 8, at least 2 views and at least 1 point");
    }
    let (scene, rig) = canonical_scene(&cfg.scene)?;
    let intr = Intrinsics::from_fov(cfg.resolution, cfg.resolution, rig.fov_x_deg);
    let cams = make_camera_rig(cfg.views, rig.radius, &rig.elevations_deg, Vec3::from(rig.target), intr)?;
    let gts = raytrace_views(&scene, &cams);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init_points = sample_init_points(&scene, cfg.init_points, cfg.point_noise, &mut rng)?.into_iter().map(|p| p.map(|c| c as f32 as f64)).collect();
    let views = cams
        .into_iter()
        .zip(gts)
        .enumerate()
        .map(|(i, (camera, mut gt))| {
            quantize_u8(&mut gt.color);
            quantize_f32(&mut gt.depth);
            quantize_f32(&mut gt.normal);
            View {
                name: format!("{i:03}"),
                camera,
                split: if i % TEST_STRIDE == 0 { Split::Test } else { Split::Train },
                color: gt.color,
                depth: Some(gt.depth),
                normal: Some(gt.normal),
            }
        })
        .collect();
    Ok(Dataset { scene: Some(scene), rig: Some(rig), views, init_points })
}

impl Dataset {
    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.views.len()).filter(|&i| self.views[i].split == Split::Train).collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        (0..self.views.len()).filter(|&i| self.views[i].split == Split::Test).collect()
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.views.first().map(|v| (v.camera.width, v.camera.height)).unwrap_or((0, 0))
    }

    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return invalid("dataset has no views");
        }
        if self.train_indices().is_empty() {
            return invalid("dataset has no training views");
        }
        for v in &self.views {
            v.camera.validate()?;
            let (w, h) = (v.camera.width, v.camera.height);
            if v.color.width != w || v.color.height != h || v.color.channels != 3 {
                return invalid(format!("view {}: color map does not match the camera", v.name));
            }
            if v.depth.as_ref().is_some_and(|d| d.width != w || d.height != h || d.channels != 1) {
                return invalid(format!("view {}: depth map does not match the camera", v.name));
            }
            if v.normal.as_ref().is_some_and(|n| n.width != w || n.height != h || n.channels != 3) {
                return invalid(format!("view {}: normal map does not match the camera", v.name));
            }
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        for sub in ["images", "depth", "normal"] {
            std::fs::create_dir_all(dir.join(sub))?;
        }
        let mut records = Vec::with_capacity(self.views.len());
        for v in &self.views {
            v.color.write_png(&dir.join("images").join(format!("{}.png", v.name)))?;
            if let Some(d) = &v.depth {
                d.write_flat(&dir.join("depth").join(format!("{}.ssfm", v.name)))?;
            }
            if let Some(n) = &v.normal {
                n.write_flat(&dir.join("normal").join(format!("{}.ssfm", v.name)))?;
            }
            let c = &v.camera;
            let mut rotation = [0.0; 9];
            for r in 0..3 {
                for k in 0..3 {
                    rotation[3 * r + k] = c.rotation[(r, k)];
                }
            }
            records.push(CameraRecord {
                name: v.name.clone(),
                split: v.split,
                width: c.width,
                height: c.height,
                fx: c.fx,
                fy: c.fy,
                cx: c.cx,
                cy: c.cy,
                rotation,
                translation: [c.translation.x, c.translation.y, c.translation.z],
                has_depth: v.depth.is_some(),
                has_normal: v.normal.is_some(),
            });
        }
        let file = SceneFile { version: DATASET_VERSION, scene: self.scene.clone(), rig: self.rig.clone(), views: records };
        let json = serde_json::to_string_pretty(&file).map_err(|e| Error::InvalidInput(e.to_string()))?;
        std::fs::write(dir.join("scene.json"), json)?;
        let cloud = TriangleMesh { positions: self.init_points.clone(), faces: Vec::new(), normals: None };
        cloud.write(&dir.join("points.ply"), MeshFormat::Ply)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("scene.json"))?;
        let file: SceneFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            offset: byte_offset(&text, e.line(), e.column()),
            msg: format!("scene.json: {e}"),
        })?;
        if file.version != DATASET_VERSION {
            return invalid(format!("dataset version {} is not supported (expected {DATASET_VERSION})", file.version));
        }
        let mut views = Vec::with_capacity(file.views.len());
        for r in file.views {
            let rotation = Mat3::from_row_slice(&r.rotation);
            let camera = Camera { fx: r.fx, fy: r.fy, cx: r.cx, cy: r.cy, width: r.width, height: r.height, rotation, translation: Vec3::from(r.translation) };
            let color = FloatMap::read_png(&dir.join("images").join(format!("{}.png", r.name)))?;
            let depth = if r.has_depth { Some(FloatMap::read_flat(&dir.join("depth").join(format!("{}.ssfm", r.name)))?) } else { None };
            let normal = if r.has_normal { Some(FloatMap::read_flat(&dir.join("normal").join(format!("{}.ssfm", r.name)))?) } else { None };
            views.push(View { name: r.name, camera, split: r.split, color, depth, normal });
        }
        let points_path = dir.join("points.ply");
        let init_points = if points_path.exists() { TriangleMesh::read(&points_path, MeshFormat::Ply)?.positions } else { Vec::new() };
        let ds = Dataset { scene: file.scene, rig: file.rig, views, init_points };
        ds.validate()?;
        Ok(ds)
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum::<usize>() + column.saturating_sub(1)
}
