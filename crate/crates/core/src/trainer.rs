//! Optimization loop: render pass with the photometric loss, a geometry pass
//! with the plane and cross-view losses once warm-up ends, periodic anchor
//! growth and pruning, and resumable state.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchor::{
    attach_independent_geo, attach_lite_geo, backprop_field, decode_field, init_anchors, FieldGrads, FieldHeads, GateConfig, GeoHead,
};
use crate::dataset::Dataset;
use crate::densify::{gather_geo_clues, grow_anchors, growth_score, prune_anchors, DensifyConfig, GeoView, OpacityStats};
use crate::error::{invalid, Result};
use crate::geom::{Branch, Camera, Vec2, Vec3};
use crate::image::FloatMap;
use crate::losses::{loss_cross, loss_plane, loss_rgb, total_loss, CrossConfig, GeometryMaps, LossWeights};
use crate::mlp::{adam_step, clip_global_norm, AdamState, StepOutcome};
use crate::model::{Model, CULL_MARGIN};
use crate::raster::{accumulate_densify_stats, rasterize_backward, rasterize_forward, DensifyStats, MapGrads, RasterConfig};

/// How the geometry pass obtains its covariance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeoMode {
    /// No geometry losses: a plain anchor-splatting renderer.
    Off,
    /// Geometry losses on the rendering covariance.
    Shared,
    /// Separately initialized geometry head.
    Independent,
    /// Residual head cloned from the rendering head at the end of warm-up.
    Residual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Render-only iterations before the geometry pass starts.
    pub warmup: usize,
    pub lr_features: f64,
    /// Offset rate, decayed exponentially to `lr_offsets_final`.
    pub lr_offsets: f64,
    pub lr_offsets_final: f64,
    /// Rate of the per-anchor `log γ`.
    pub lr_scaling: f64,
    pub lr_mlp: f64,
    /// Residual head initialization scale.
    pub lambda: f64,
    pub seed: u64,
    pub views_per_iteration: usize,
    /// Neural Gaussians per anchor.
    pub k: usize,
    /// Anchor voxel size; 0 picks `largest init-cloud edge / anchor_divisions`.
    pub anchor_voxel: f64,
    pub anchor_divisions: usize,
    pub geo_mode: GeoMode,
    pub gates: GateConfig,
    pub losses: LossWeights,
    pub densify: DensifyConfig,
    pub clip_norm: f64,
    /// Largest angle between optical axes for a cross-view neighbor.
    pub neighbor_max_angle_deg: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            warmup: 1000,
            lr_features: 2.5e-3,
            lr_offsets: 1e-3,
            lr_offsets_final: 1e-4,
            lr_scaling: 5e-3,
            lr_mlp: 2e-3,
            lambda: 0.1,
            seed: 0,
            views_per_iteration: 1,
            k: 10,
            anchor_voxel: 0.0,
            anchor_divisions: 48,
            geo_mode: GeoMode::Residual,
            gates: GateConfig::default(),
            losses: LossWeights::default(),
            densify: DensifyConfig::default(),
            clip_norm: 10.0,
            neighbor_max_angle_deg: 60.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.lr_features, self.lr_offsets, self.lr_offsets_final, self.lr_scaling, self.lr_mlp, self.clip_norm];
        if rates.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return invalid("learning rates and clip_norm must be positive and finite");
        }
        if !self.lambda.is_finite() || self.views_per_iteration == 0 || self.k == 0 || self.anchor_divisions == 0 {
            return invalid("lambda must be finite; views_per_iteration, k and anchor_divisions must be at least 1");
        }
        if !(self.anchor_voxel >= 0.0) {
            return invalid("anchor_voxel must be >= 0");
        }
        self.densify.validate(self.iterations)?;
        if self.iterations > 0 && self.warmup >= self.densify.stop.max(1) {
            return invalid("warm-up must end before densification stops");
        }
        Ok(())
    }

    /// Same config over `n` iterations, with warm-up and the densification
    /// window scaled by `n / iterations`.
    pub fn rescaled(&self, n: usize) -> Self {
        let total = self.iterations.max(1) as f64;
        let f = |v: usize| ((v as f64) * n as f64 / total).round() as usize;
        let mut c = self.clone();
        c.iterations = n;
        c.densify.start = f(self.densify.start);
        c.densify.stop = f(self.densify.stop).min(n);
        c.densify.interval = f(self.densify.interval).max(1);
        c.warmup = f(self.warmup).min(c.densify.stop.saturating_sub(1));
        c
    }
}

/// One training view with its GT color and cross-view neighbor.
#[derive(Clone, Debug)]
pub struct TrainView {
    pub camera: Camera,
    pub color: FloatMap,
    /// Index into [`TrainData::views`].
    pub neighbor: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainData {
    pub views: Vec<TrainView>,
}

fn optical_axis(c: &Camera) -> Vec3 {
    c.rotation.row(2).transpose()
}

impl TrainData {
    /// Training split of `ds`; each view's neighbor is the closest camera
    /// whose optical axis is within `max_angle_deg`.
    pub fn from_dataset(ds: &Dataset, max_angle_deg: f64) -> Result<Self> {
        let idx = ds.train_indices();
        if idx.is_empty() {
            return invalid("dataset has no training views");
        }
        let cams: Vec<&Camera> = idx.iter().map(|&i| &ds.views[i].camera).collect();
        let cos_max = max_angle_deg.to_radians().cos();
        let views = idx
            .iter()
            .enumerate()
            .map(|(r, &i)| {
                let c = cams[r];
                let neighbor = (0..cams.len())
                    .filter(|&n| n != r && optical_axis(c).dot(&optical_axis(cams[n])) > cos_max)
                    .min_by(|&a, &b| {
                        let da = (cams[a].position() - c.position()).norm();
                        let db = (cams[b].position() - c.position()).norm();
                        da.total_cmp(&db)
                    });
                TrainView { camera: c.clone(), color: ds.views[i].color.clone(), neighbor }
            })
            .collect();
        Ok(Self { views })
    }
}

/// Losses and bookkeeping of one completed iteration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepReport {
    /// 1-based index of the finished iteration.
    pub iteration: usize,
    pub l_c: f64,
    pub l_plane: f64,
    pub l_cross: f64,
    pub total: f64,
    pub anchors: usize,
    pub splats: usize,
    /// The update was skipped because of a non-finite loss or gradient.
    pub skipped: bool,
    pub grown: usize,
    pub pruned: usize,
}

impl StepReport {
    pub const CSV_HEADER: &'static str = "iteration,l_c,l_plane,l_cross,anchors,splats";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{},{}", self.iteration, self.l_c, self.l_plane, self.l_cross, self.anchors, self.splats)
    }
}

/// Adam moments of the seven parameter groups, in [`FieldGrads::groups_mut`]
/// order.
pub type Optimizers = [AdamState; 7];

#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub opt: Optimizers,
    pub rng: ChaCha8Rng,
    /// Completed iterations.
    pub iteration: usize,
    pub anchor_voxel: f64,
    /// Current epoch's view order and position in it.
    pub order: Vec<usize>,
    pub cursor: usize,
    pub grad_stats: DensifyStats,
    pub opacity_stats: OpacityStats,
    /// Iterations whose update was skipped.
    pub skipped: usize,
}

struct ViewPass {
    l_c: f64,
    l_plane: f64,
    l_cross: f64,
    splats: usize,
    grads: FieldGrads,
}

fn auto_voxel(points: &[Vec3], divisions: usize) -> f64 {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (hi - lo).max() / divisions as f64
}

fn add_scaled(dst: &mut FloatMap, src: &FloatMap, s: f64) {
    dst.data.iter_mut().zip(&src.data).for_each(|(a, b)| *a += s * b);
}

impl Trainer {
    pub fn new(config: TrainConfig, ds: &Dataset, n_train_views: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let anchor_voxel = if config.anchor_voxel > 0.0 { config.anchor_voxel } else { auto_voxel(&ds.init_points, config.anchor_divisions) };
        if !(anchor_voxel > 0.0) || !anchor_voxel.is_finite() {
            return invalid("could not derive an anchor voxel size from the initial points");
        }
        let anchors = init_anchors(&ds.init_points, anchor_voxel, config.k, &mut rng)?;
        let heads = FieldHeads::new(config.k, &mut rng);
        let model = Model { anchors, heads };
        let opt = Self::fresh_optimizers(&config, &model);
        let n = model.anchors.len();
        let mut t = Self {
            config,
            model,
            opt,
            rng,
            iteration: 0,
            anchor_voxel,
            order: (0..n_train_views).collect(),
            cursor: 0,
            grad_stats: DensifyStats::new(n),
            opacity_stats: OpacityStats::new(n),
            skipped: 0,
        };
        t.order.shuffle(&mut t.rng);
        Ok(t)
    }

    fn fresh_optimizers(c: &TrainConfig, m: &Model) -> Optimizers {
        let a = &m.anchors;
        let h = &m.heads;
        [
            AdamState::new(a.features.len(), c.lr_features),
            AdamState::new(a.offsets.len(), c.lr_offsets),
            AdamState::new(a.log_gamma.len(), c.lr_scaling),
            AdamState::new(h.opacity.len(), c.lr_mlp),
            AdamState::new(h.color.len(), c.lr_mlp),
            AdamState::new(h.cov.len(), c.lr_mlp),
            AdamState::new(h.geo_params().map_or(0, |p| p.len()), c.lr_mlp),
        ]
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.iterations
    }

    fn geometry_active(&self) -> bool {
        self.config.geo_mode != GeoMode::Off && self.iteration >= self.config.warmup
    }

    fn next_view(&mut self) -> usize {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    /// Attaches the geometry head once warm-up has finished.
    fn maybe_attach(&mut self) -> Result<()> {
        if !self.geometry_active() || self.model.heads.geo != GeoHead::Shared {
            return Ok(());
        }
        match self.config.geo_mode {
            GeoMode::Residual => attach_lite_geo(&mut self.model.heads, self.config.lambda)?,
            GeoMode::Independent => attach_independent_geo(&mut self.model.heads, &mut self.rng)?,
            GeoMode::Off | GeoMode::Shared => return Ok(()),
        }
        let len = self.model.heads.geo_params().map_or(0, |p| p.len());
        self.opt[6] = AdamState::new(len, self.config.lr_mlp);
        Ok(())
    }

    fn offsets_lr(&self) -> f64 {
        let c = &self.config;
        let t = self.iteration as f64 / c.iterations.max(1) as f64;
        c.lr_offsets * (c.lr_offsets_final / c.lr_offsets).powf(t)
    }

    /// Gradients of one view. `render` toggles the photometric pass,
    /// `geometry` the plane/cross pass.
    fn view_pass(&mut self, data: &TrainData, vi: usize, render: bool, geometry: bool, stats: bool) -> Result<ViewPass> {
        let m = &self.model;
        let w = self.config.losses;
        let tv = &data.views[vi];
        let cam = &tv.camera;
        let rcfg = RasterConfig::default();
        let field = decode_field(&m.anchors, &m.heads, cam, Some(CULL_MARGIN));
        let (r_out, r_tape) = rasterize_forward(&field.splats, cam, Branch::Render, &rcfg);
        let (l_c, g_color) = loss_rgb(&r_out.color, &tv.color, w.ssim)?;
        let render_grads = if render {
            Some(rasterize_backward(&r_tape, &field.splats, cam, &MapGrads { color: Some(g_color), ..Default::default() })?)
        } else {
            None
        };
        let (mut l_plane, mut l_cross) = (0.0, 0.0);
        let mut geo_grads = None;
        if geometry {
            let shared = m.heads.geo == GeoHead::Shared;
            let own;
            let (g_out, g_tape) = if shared {
                (&r_out, &r_tape)
            } else {
                own = rasterize_forward(&field.splats, cam, Branch::Geometry, &rcfg);
                (&own.0, &own.1)
            };
            let plane = loss_plane(&g_out.depth, &g_out.normal, &g_out.alpha, cam)?;
            l_plane = plane.value;
            let mut g_depth = plane.grad_depth.clone();
            let mut g_normal = plane.grad_normal.clone();
            g_depth.data.iter_mut().for_each(|v| *v *= w.plane);
            g_normal.data.iter_mut().for_each(|v| *v *= w.plane);
            if let Some(ni) = tv.neighbor {
                let ncam = &data.views[ni].camera;
                let nsplats = decode_field(&m.anchors, &m.heads, ncam, Some(CULL_MARGIN)).splats;
                let (n_out, _) = rasterize_forward(&nsplats, ncam, Branch::Geometry, &rcfg);
                let reference = GeometryMaps { cam, depth: &g_out.depth, normal: &g_out.normal, alpha: &g_out.alpha };
                let neighbor = GeometryMaps { cam: ncam, depth: &n_out.depth, normal: &n_out.normal, alpha: &n_out.alpha };
                let cross = loss_cross(&reference, &neighbor, &CrossConfig::default())?;
                l_cross = cross.value;
                // the neighbor render is treated as a constant target
                add_scaled(&mut g_depth, &cross.grad_ref_depth, w.cross);
                add_scaled(&mut g_normal, &cross.grad_ref_normal, w.cross);
            }
            let grads = MapGrads { depth: Some(g_depth), normal: Some(g_normal), ..Default::default() };
            geo_grads = Some(rasterize_backward(g_tape, &field.splats, cam, &grads)?);
        }
        let grads = backprop_field(&m.anchors, &m.heads, &field, render_grads.as_deref(), geo_grads.as_deref(), &self.config.gates)?;
        if stats {
            if let Some(rg) = &render_grads {
                let samples: Vec<Option<Vec2>> = rg.iter().zip(&r_out.touched).map(|(g, &t)| (t > 0).then_some(g.mean2d)).collect();
                accumulate_densify_stats(&samples, &field.owner_anchor(), &mut self.grad_stats)?;
            }
            self.opacity_stats.accumulate(&field);
        }
        Ok(ViewPass { l_c, l_plane, l_cross, splats: field.splats.len(), grads })
    }

    fn apply(&mut self, grads: &mut FieldGrads, only_nonzero: bool) -> Result<bool> {
        let mut groups = grads.groups_mut();
        clip_global_norm(&mut groups, self.config.clip_norm);
        self.opt[1].lr = self.offsets_lr();
        let m = &mut self.model;
        let geo: &mut [f64] = match &mut m.heads.geo {
            GeoHead::Residual(p) | GeoHead::Independent(p) => p.data_mut(),
            GeoHead::Shared => &mut [],
        };
        let params: [&mut [f64]; 7] = [
            &mut m.anchors.features,
            &mut m.anchors.offsets,
            &mut m.anchors.log_gamma,
            m.heads.opacity.data_mut(),
            m.heads.color.data_mut(),
            m.heads.cov.data_mut(),
            geo,
        ];
        let mut applied = true;
        for ((p, g), st) in params.into_iter().zip(groups.iter()).zip(self.opt.iter_mut()) {
            if only_nonzero && g.iter().all(|v| *v == 0.0) {
                continue;
            }
            if adam_step(p, g, st)? == StepOutcome::SkippedNonFinite {
                applied = false;
            }
        }
        Ok(applied)
    }

    /// One iteration: render pass, geometry pass after warm-up, one Adam
    /// step per group, then a densification round when scheduled.
    pub fn train_step(&mut self, data: &TrainData) -> Result<StepReport> {
        if data.views.len() != self.order.len() {
            return invalid("training data does not match the trainer's view count");
        }
        if self.is_done() {
            return Err(crate::Error::State("training already finished".into()));
        }
        self.maybe_attach()?;
        let geometry = self.geometry_active();
        let collect = self.iteration < self.config.densify.stop;
        let nv = self.config.views_per_iteration;
        let mut grads = FieldGrads::zeros(&self.model.anchors, &self.model.heads);
        let mut rep = StepReport::default();
        for _ in 0..nv {
            let vi = self.next_view();
            let mut p = self.view_pass(data, vi, true, geometry, collect)?;
            rep.l_c += p.l_c / nv as f64;
            rep.l_plane += p.l_plane / nv as f64;
            rep.l_cross += p.l_cross / nv as f64;
            rep.splats += p.splats;
            for (dst, src) in grads.groups_mut().into_iter().zip(p.grads.groups_mut()) {
                dst.iter_mut().zip(src.iter()).for_each(|(a, b)| *a += b / nv as f64);
            }
        }
        rep.total = total_loss(rep.l_c, rep.l_plane, rep.l_cross, &self.config.losses);
        rep.skipped = !(rep.total.is_finite() && self.apply(&mut grads, false)?);
        if rep.skipped {
            self.skipped += 1;
        }
        self.iteration += 1;
        rep.iteration = self.iteration;
        if self.config.densify.is_round(self.iteration) {
            let (g, p) = self.densify_round(data)?;
            rep.grown = g;
            rep.pruned = p;
        }
        rep.anchors = self.model.anchors.active_count();
        Ok(rep)
    }

    /// Geometry-pass-only update on the next view. Groups whose gradient is
    /// identically zero are left untouched (their moments included).
    pub fn geometry_step(&mut self, data: &TrainData) -> Result<StepReport> {
        if self.model.heads.geo == GeoHead::Shared && self.config.geo_mode != GeoMode::Shared {
            return Err(crate::Error::State("geometry head is not attached".into()));
        }
        let vi = self.next_view();
        let mut p = self.view_pass(data, vi, false, true, false)?;
        let total = total_loss(0.0, p.l_plane, p.l_cross, &self.config.losses);
        let applied = total.is_finite() && self.apply(&mut p.grads, true)?;
        Ok(StepReport {
            iteration: self.iteration,
            l_plane: p.l_plane,
            l_cross: p.l_cross,
            total,
            anchors: self.model.anchors.active_count(),
            splats: p.splats,
            skipped: !applied,
            ..Default::default()
        })
    }

    /// Attaches the geometry head now, regardless of the iteration count.
    pub fn force_attach(&mut self, lambda: f64) -> Result<()> {
        attach_lite_geo(&mut self.model.heads, lambda)?;
        self.opt[6] = AdamState::new(self.model.heads.geo_params().map_or(0, |p| p.len()), self.config.lr_mlp);
        Ok(())
    }

    fn densify_round(&mut self, data: &TrainData) -> Result<(usize, usize)> {
        let dc = self.config.densify.clone();
        let n = self.model.anchors.len();
        let clues = if dc.omega_g > 0.0 {
            let picks: Vec<usize> = (0..dc.clue_views).map(|_| self.rng.random_range(0..data.views.len())).collect();
            let renders: Vec<_> = picks
                .iter()
                .map(|&i| self.model.render(&data.views[i].camera, Branch::Geometry, None))
                .collect::<Result<_>>()?;
            let views: Vec<GeoView> = picks
                .iter()
                .zip(&renders)
                .map(|(&i, r)| GeoView { cam: &data.views[i].camera, depth: &r.depth, normal: &r.normal, alpha: &r.alpha })
                .collect();
            gather_geo_clues(&self.model.anchors, &views)
        } else {
            vec![None; n]
        };
        let v = self.anchor_voxel;
        let scores: Vec<f64> = (0..n)
            .map(|a| growth_score(self.grad_stats.mean(a), clues[a].as_ref(), dc.omega_g, dc.omega_n, dc.theta_sdf_voxels * v, dc.sigma_zeta_voxels * v))
            .collect();
        let grown = grow_anchors(&mut self.model.anchors, &scores, dc.grow_threshold, v, dc.max_anchors, &mut self.rng)?;
        let mut ostats = std::mem::take(&mut self.opacity_stats);
        ostats.resize(self.model.anchors.len());
        let pruned = prune_anchors(&mut self.model.anchors, &ostats, dc.prune_opacity)?;
        let len = self.model.anchors.len();
        let a = &self.model.anchors;
        self.opt[0].resize(a.features.len());
        self.opt[1].resize(a.offsets.len());
        self.opt[2].resize(a.log_gamma.len());
        self.grad_stats = DensifyStats::new(len);
        self.opacity_stats = OpacityStats::new(len);
        Ok((grown, pruned))
    }

    /// Runs until `until` iterations are complete (capped at the configured
    /// total), calling `on_step` after each one.
    pub fn run(&mut self, data: &TrainData, until: usize, mut on_step: impl FnMut(&StepReport)) -> Result<()> {
        let until = until.min(self.config.iterations);
        while self.iteration < until {
            let rep = self.train_step(data)?;
            on_step(&rep);
        }
        Ok(())
    }
}
