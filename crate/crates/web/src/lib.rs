//! Browser demo: ray-trace a canonical scene, train a small model on it
//! step by step, look at any view through either branch and pull out the
//! fused mesh.

use splatsurf::dataset::{synthesize, Dataset, SynthConfig};
use splatsurf::geom::Branch;
use splatsurf::image::FloatMap;
use splatsurf::study::{scene_box, train_cameras};
use splatsurf::surface::TsdfVolume;
use splatsurf::trainer::{TrainConfig, TrainData, Trainer};
use splatsurf::{Error, Result};
use wasm_bindgen::prelude::*;

/// What [`Demo::render`] shows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Truth,
    Render,
    Depth,
    Normal,
}

impl Layer {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "truth" => Ok(Layer::Truth),
            "render" => Ok(Layer::Render),
            "depth" => Ok(Layer::Depth),
            "normal" => Ok(Layer::Normal),
            _ => Err(Error::InvalidInput(format!("unknown layer `{s}` (truth, render, depth, normal)"))),
        }
    }
}

/// RGBA bytes of a 3-channel map in [0, 1].
pub fn rgb_to_rgba(m: &FloatMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(m.width * m.height * 4);
    for px in m.data.chunks_exact(3) {
        out.extend(px.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out.push(255);
    }
    out
}

/// Near is bright; pixels with `alpha < 0.5` are black.
pub fn depth_to_rgba(depth: &FloatMap, alpha: &FloatMap) -> Vec<u8> {
    let valid = |i: usize| alpha.data[i] >= 0.5 && depth.data[i] > 0.0;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (i, &d) in depth.data.iter().enumerate() {
        if valid(i) {
            lo = lo.min(d);
            hi = hi.max(d);
        }
    }
    let span = (hi - lo).max(1e-9);
    let mut out = Vec::with_capacity(depth.data.len() * 4);
    for (i, &d) in depth.data.iter().enumerate() {
        let g = if valid(i) { (255.0 * (1.0 - 0.8 * (d - lo) / span)).round() as u8 } else { 0 };
        out.extend([g, g, g, 255]);
    }
    out
}

/// Unit normals mapped to `(n + 1) / 2`.
pub fn normal_to_rgba(normal: &FloatMap, alpha: &FloatMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(alpha.data.len() * 4);
    for (i, n) in normal.data.chunks_exact(3).enumerate() {
        if alpha.data[i] < 0.5 {
            out.extend([0, 0, 0, 255]);
        } else {
            out.extend(n.iter().map(|c| ((c + 1.0) * 127.5).clamp(0.0, 255.0).round() as u8));
            out.push(255);
        }
    }
    out
}

#[wasm_bindgen]
pub struct Demo {
    ds: Dataset,
    data: TrainData,
    trainer: Trainer,
    last_loss: f64,
}

impl Demo {
    pub fn create(scene: &str, resolution: usize, views: usize, iterations: usize, seed: u64) -> Result<Self> {
        let ds = synthesize(&SynthConfig { scene: scene.into(), views, resolution, init_points: 2000, point_noise: 0.01, seed })?;
        let data = TrainData::from_dataset(&ds, 60.0)?;
        let mut config = TrainConfig::default().rescaled(iterations);
        config.seed = seed;
        let trainer = Trainer::new(config, &ds, data.views.len())?;
        Ok(Self { ds, data, trainer, last_loss: f64::NAN })
    }

    /// Runs up to `n` more iterations.
    pub fn advance(&mut self, n: usize) -> Result<usize> {
        let until = self.trainer.iteration + n;
        let mut last = self.last_loss;
        self.trainer.run(&self.data, until, |r| last = r.total)?;
        self.last_loss = last;
        Ok(self.trainer.iteration)
    }

    pub fn image(&self, view: usize, layer: Layer) -> Result<Vec<u8>> {
        let Some(v) = self.ds.views.get(view) else {
            return Err(Error::InvalidInput(format!("view {view} out of range")));
        };
        Ok(match layer {
            Layer::Truth => rgb_to_rgba(&v.color),
            Layer::Render => rgb_to_rgba(&self.trainer.model.render(&v.camera, Branch::Render, None)?.color),
            Layer::Depth => {
                let r = self.trainer.model.render(&v.camera, Branch::Geometry, None)?;
                depth_to_rgba(&r.depth, &r.alpha)
            }
            Layer::Normal => {
                let r = self.trainer.model.render(&v.camera, Branch::Geometry, None)?;
                normal_to_rgba(&r.normal, &r.alpha)
            }
        })
    }

    /// Geometry-branch depth of the training views fused at `resolution`
    /// cells along the scene box, as OBJ text.
    pub fn mesh_obj(&self, resolution: usize) -> Result<String> {
        let (lo, hi) = scene_box(&self.ds)?;
        let mut vol = TsdfVolume::for_bbox(lo, hi, resolution, 0.1)?;
        Ok(self.trainer.model.fuse_mesh(&train_cameras(&self.ds), &mut vol, None)?.to_obj_string())
    }
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(scene: &str, resolution: usize, views: usize, iterations: usize, seed: u64) -> std::result::Result<Demo, JsError> {
        Self::create(scene, resolution, views, iterations, seed).map_err(js)
    }

    /// Trains `n` more iterations; returns the iteration count.
    pub fn step(&mut self, n: usize) -> std::result::Result<usize, JsError> {
        self.advance(n).map_err(js)
    }

    /// RGBA pixels of `view`; `layer` is truth, render, depth or normal.
    pub fn render(&self, view: usize, layer: &str) -> std::result::Result<Vec<u8>, JsError> {
        Layer::parse(layer).and_then(|l| self.image(view, l)).map_err(js)
    }

    pub fn mesh(&self, resolution: usize) -> std::result::Result<String, JsError> {
        self.mesh_obj(resolution).map_err(js)
    }

    pub fn size(&self) -> usize {
        self.ds.resolution().0
    }

    pub fn views(&self) -> usize {
        self.ds.views.len()
    }

    pub fn iteration(&self) -> usize {
        self.trainer.iteration
    }

    pub fn iterations(&self) -> usize {
        self.trainer.config.iterations
    }

    pub fn anchors(&self) -> usize {
        self.trainer.model.anchors.active_count()
    }

    /// Total loss of the latest iteration (NaN before the first).
    pub fn loss(&self) -> f64 {
        self.last_loss
    }
}
