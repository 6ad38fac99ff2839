//! Anchor field: learned anchors decoded by small MLPs into neural Gaussians,
//! with an optional geometry covariance head.
//!
//! Each anchor owns a feature vector, `k` offsets and a log scaling factor.
//! For a view the heads see `[feature, log(1 + dist), unit camera→anchor]`
//! and emit `k` opacities, `k` colors and `k` raw 7-vectors
//! `(scale logits, quaternion residual)`. The geometry covariance uses
//! `y_geo = y_rgb + Δy` in that raw space.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::geom::{Camera, GaussianSplat, Quaternion, Vec3, Z_NEAR};
use crate::mlp::{scaled_clone, Activation, MlpParams, MlpTape};
use crate::par;
use crate::raster::SplatGrad;

pub const FEATURE_DIM: usize = 32;
pub const INPUT_DIM: usize = FEATURE_DIM + 4;
pub const HIDDEN: usize = 32;
/// Raw covariance outputs per neural Gaussian: 3 scale logits + 4 quaternion.
pub const COV_DIM: usize = 7;
/// Decoded Gaussians below this opacity are left out of the splat list.
pub const SKIP_OPACITY: f64 = 0.005;
/// Anchors processed together when reducing MLP gradients.
const GRAD_CHUNK: usize = 32;

/// Structure-of-arrays anchor storage. Indices are stable: pruning only
/// clears the `active` flag.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub k: usize,
    pub positions: Vec<Vec3>,
    /// `len × FEATURE_DIM`
    pub features: Vec<f64>,
    /// `len × k × 3`, in units of the anchor's γ.
    pub offsets: Vec<f64>,
    /// `log γ` per anchor.
    pub log_gamma: Vec<f64>,
    pub active: Vec<bool>,
}

impl AnchorSet {
    pub fn empty(k: usize) -> Self {
        Self { k, positions: Vec::new(), features: Vec::new(), offsets: Vec::new(), log_gamma: Vec::new(), active: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }

    pub fn gamma(&self, a: usize) -> f64 {
        self.log_gamma[a].exp()
    }

    pub fn feature(&self, a: usize) -> &[f64] {
        &self.features[a * FEATURE_DIM..(a + 1) * FEATURE_DIM]
    }

    pub fn offset(&self, a: usize, j: usize) -> Vec3 {
        let o = (a * self.k + j) * 3;
        Vec3::new(self.offsets[o], self.offsets[o + 1], self.offsets[o + 2])
    }

    pub fn set_offset(&mut self, a: usize, j: usize, v: Vec3) {
        let o = (a * self.k + j) * 3;
        self.offsets[o..o + 3].copy_from_slice(v.as_slice());
    }

    /// World center of neural Gaussian `j`: `x + o_j·γ`.
    pub fn center(&self, a: usize, j: usize) -> Vec3 {
        self.positions[a] + self.offset(a, j) * self.gamma(a)
    }

    pub fn push(&mut self, position: Vec3, feature: &[f64], offsets: &[f64], log_gamma: f64) -> Result<usize> {
        if feature.len() != FEATURE_DIM || offsets.len() != 3 * self.k {
            return invalid("anchor feature/offset length mismatch");
        }
        self.positions.push(position);
        self.features.extend_from_slice(feature);
        self.offsets.extend_from_slice(offsets);
        self.log_gamma.push(log_gamma);
        self.active.push(true);
        Ok(self.len() - 1)
    }
}

pub(crate) fn voxel_key(p: &Vec3, voxel: f64) -> [i64; 3] {
    [(p.x / voxel).floor() as i64, (p.y / voxel).floor() as i64, (p.z / voxel).floor() as i64]
}

pub(crate) fn random_offsets<R: Rng>(k: usize, rng: &mut R) -> Vec<f64> {
    (0..3 * k).map(|_| rng.random_range(-0.5..0.5)).collect()
}

/// One anchor per occupied voxel, placed at the mean of the voxel's points,
/// with `γ = voxel`, zero features and offsets uniform in `[−0.5, 0.5]`
/// (centers within `±0.5γ` of the anchor).
pub fn init_anchors<R: Rng>(points: &[Vec3], voxel: f64, k: usize, rng: &mut R) -> Result<AnchorSet> {
    if points.is_empty() {
        return invalid("cannot initialize anchors from an empty point set");
    }
    if !(voxel > 0.0) || k == 0 {
        return invalid("voxel size and k must be positive");
    }
    let mut slot: HashMap<[i64; 3], usize> = HashMap::new();
    let mut sums: Vec<(Vec3, usize)> = Vec::new();
    for p in points {
        let key = voxel_key(p, voxel);
        let i = *slot.entry(key).or_insert_with(|| {
            sums.push((Vec3::zeros(), 0));
            sums.len() - 1
        });
        sums[i].0 += p;
        sums[i].1 += 1;
    }
    let mut set = AnchorSet::empty(k);
    let zero = [0.0; FEATURE_DIM];
    for (sum, n) in sums {
        let offs = random_offsets(k, rng);
        set.push(sum / n as f64, &zero, &offs, voxel.ln())?;
    }
    Ok(set)
}

/// Source of the geometry covariance.
#[derive(Clone, Debug, PartialEq)]
pub enum GeoHead {
    /// Geometry pass reuses the rendering covariance.
    Shared,
    /// `y_geo = y_rgb + Δy(φ₂)`.
    Residual(MlpParams),
    /// `y_geo = Δy(φ₂)` from a separately initialized head.
    Independent(MlpParams),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldHeads {
    pub k: usize,
    pub opacity: MlpParams,
    pub color: MlpParams,
    /// Rendering covariance head φ₁.
    pub cov: MlpParams,
    pub geo: GeoHead,
}

impl FieldHeads {
    pub fn new<R: Rng>(k: usize, rng: &mut R) -> Self {
        Self {
            k,
            opacity: MlpParams::two_layer(INPUT_DIM, HIDDEN, k, Activation::Sigmoid, rng),
            color: MlpParams::two_layer(INPUT_DIM, HIDDEN, 3 * k, Activation::Sigmoid, rng),
            cov: MlpParams::two_layer(INPUT_DIM, HIDDEN, COV_DIM * k, Activation::None, rng),
            geo: GeoHead::Shared,
        }
    }

    pub fn geo_params(&self) -> Option<&MlpParams> {
        match &self.geo {
            GeoHead::Shared => None,
            GeoHead::Residual(p) | GeoHead::Independent(p) => Some(p),
        }
    }

    pub fn geo_params_mut(&mut self) -> Option<&mut MlpParams> {
        match &mut self.geo {
            GeoHead::Shared => None,
            GeoHead::Residual(p) | GeoHead::Independent(p) => Some(p),
        }
    }
}

/// Attaches the residual geometry head with `φ₂ = λ·φ₁`.
pub fn attach_lite_geo(heads: &mut FieldHeads, lambda: f64) -> Result<()> {
    if heads.geo != GeoHead::Shared {
        return Err(Error::State("geometry head already attached".into()));
    }
    if !lambda.is_finite() {
        return invalid("lambda must be finite");
    }
    heads.geo = GeoHead::Residual(scaled_clone(&heads.cov, lambda));
    Ok(())
}

/// Attaches a freshly initialized, non-residual geometry head.
pub fn attach_independent_geo<R: Rng>(heads: &mut FieldHeads, rng: &mut R) -> Result<()> {
    if heads.geo != GeoHead::Shared {
        return Err(Error::State("geometry head already attached".into()));
    }
    heads.geo = GeoHead::Independent(MlpParams::two_layer(INPUT_DIM, HIDDEN, COV_DIM * heads.k, Activation::None, rng));
    Ok(())
}

/// Which geometry-loss gradient paths stay connected.
///
/// `rgb_branch_grad_from_geometry = false` detaches every quantity the
/// rendering pass also uses (`y_rgb`, centers, γ, features) from geometry
/// losses; only the geometry head and, if enabled, the opacity head then
/// receive geometry gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    pub opacity_grad_from_geometry: bool,
    pub covariance_grad_from_geometry: bool,
    pub rgb_branch_grad_from_geometry: bool,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self { opacity_grad_from_geometry: false, covariance_grad_from_geometry: true, rgb_branch_grad_from_geometry: false }
    }
}

impl GateConfig {
    pub fn all_open() -> Self {
        Self { opacity_grad_from_geometry: true, covariance_grad_from_geometry: true, rgb_branch_grad_from_geometry: true }
    }
}

/// Saved state of one anchor decode.
#[derive(Clone, Debug)]
pub struct AnchorDecode {
    pub anchor: usize,
    op: MlpTape,
    col: MlpTape,
    cov: MlpTape,
    geo: Option<MlpTape>,
    /// Decoded opacity of all `k` neural Gaussians (including skipped ones).
    pub opacity: Vec<f64>,
    /// Index into the splat list per neural Gaussian, `None` when skipped.
    pub slots: Vec<Option<u32>>,
    /// Norms of the raw quaternions (render, geometry) per neural Gaussian.
    qnorm: Vec<(f64, f64)>,
}

/// Network input `[f, log(1 + |x − c|), (x − c)/|x − c|]`.
pub fn anchor_input(anchors: &AnchorSet, a: usize, cam_pos: &Vec3) -> Vec<f64> {
    let mut x = Vec::with_capacity(INPUT_DIM);
    x.extend_from_slice(anchors.feature(a));
    let d = anchors.positions[a] - cam_pos;
    let dist = d.norm();
    x.push(dist.ln_1p());
    let dir = if dist > 0.0 { d / dist } else { Vec3::zeros() };
    x.extend_from_slice(dir.as_slice());
    x
}

fn raw_quat(y: &[f64]) -> (Quaternion, f64) {
    let q = Quaternion::new(y[0] + 1.0, y[1], y[2], y[3]);
    let n = q.norm();
    match q.normalized() {
        Ok(u) => (u, n),
        Err(_) => (Quaternion::IDENTITY, 0.0),
    }
}

/// Decodes the `k` neural Gaussians of anchor `a` as seen from `cam_pos`.
/// Returned splats carry both covariances; with no geometry head attached the
/// geometry covariance is a copy of the rendering one.
pub fn decode_anchor(anchors: &AnchorSet, a: usize, cam_pos: &Vec3, heads: &FieldHeads) -> (Vec<GaussianSplat>, AnchorDecode) {
    let k = anchors.k;
    let input = anchor_input(anchors, a, cam_pos);
    let op = heads.opacity.forward_tape(&input);
    let col = heads.color.forward_tape(&input);
    let cov = heads.cov.forward_tape(&input);
    let geo = heads.geo_params().map(|p| p.forward_tape(&input));
    let gamma = anchors.gamma(a);
    let y_rgb = cov.output();
    let mut splats = Vec::with_capacity(k);
    let mut qnorm = Vec::with_capacity(k);
    let mut opacity = Vec::with_capacity(k);
    for j in 0..k {
        let yr = &y_rgb[COV_DIM * j..COV_DIM * (j + 1)];
        let scale = Vec3::new(yr[0].exp(), yr[1].exp(), yr[2].exp()) * gamma;
        let (rot, nr) = raw_quat(&yr[3..]);
        let (geo_scale, geo_rot, ng) = match (&heads.geo, &geo) {
            (GeoHead::Residual(_), Some(t)) => {
                let d = &t.output()[COV_DIM * j..COV_DIM * (j + 1)];
                let yg: Vec<f64> = yr.iter().zip(d).map(|(a, b)| a + b).collect();
                let (q, n) = raw_quat(&yg[3..]);
                (Vec3::new(yg[0].exp(), yg[1].exp(), yg[2].exp()) * gamma, q, n)
            }
            (GeoHead::Independent(_), Some(t)) => {
                let yg = &t.output()[COV_DIM * j..COV_DIM * (j + 1)];
                let (q, n) = raw_quat(&yg[3..]);
                (Vec3::new(yg[0].exp(), yg[1].exp(), yg[2].exp()) * gamma, q, n)
            }
            _ => (scale, rot, nr),
        };
        let c = &col.output()[3 * j..3 * j + 3];
        let alpha = op.output()[j];
        opacity.push(alpha);
        qnorm.push((nr, ng));
        splats.push(GaussianSplat {
            center: anchors.center(a, j),
            scale,
            rotation: rot,
            opacity: alpha,
            color: Vec3::new(c[0], c[1], c[2]),
            geo_scale,
            geo_rotation: geo_rot,
        });
    }
    let dec = AnchorDecode { anchor: a, op, col, cov, geo, opacity, slots: vec![None; k], qnorm };
    (splats, dec)
}

/// All splats of one view plus the tapes to route their gradients back.
#[derive(Clone, Debug)]
pub struct DecodedField {
    pub splats: Vec<GaussianSplat>,
    /// `(anchor, j)` per splat.
    pub owner: Vec<(u32, u32)>,
    pub anchors: Vec<AnchorDecode>,
}

impl DecodedField {
    pub fn owner_anchor(&self) -> Vec<usize> {
        self.owner.iter().map(|o| o.0 as usize).collect()
    }
}

/// Anchors whose position lies in front of the camera and projects inside the
/// image grown by `margin` (fraction of width/height) on every side.
pub fn anchor_visible(anchors: &AnchorSet, a: usize, cam: &Camera, margin: f64) -> bool {
    let p = cam.world_to_cam(&anchors.positions[a]);
    if p.z <= Z_NEAR {
        return false;
    }
    let uv = cam.project_cam(&p);
    let mx = margin * cam.width as f64;
    let my = margin * cam.height as f64;
    uv.x > -mx && uv.x < cam.width as f64 + mx && uv.y > -my && uv.y < cam.height as f64 + my
}

/// Decodes every active anchor (optionally only those passing
/// [`anchor_visible`] with the given margin) for one view.
pub fn decode_field(anchors: &AnchorSet, heads: &FieldHeads, cam: &Camera, cull_margin: Option<f64>) -> DecodedField {
    let cam_pos = cam.position();
    let ids: Vec<usize> = (0..anchors.len())
        .filter(|&a| anchors.active[a] && cull_margin.is_none_or(|m| anchor_visible(anchors, a, cam, m)))
        .collect();
    let decoded = par::map_ordered(ids, |a| decode_anchor(anchors, a, &cam_pos, heads));
    let mut out = DecodedField { splats: Vec::new(), owner: Vec::new(), anchors: Vec::with_capacity(decoded.len()) };
    for (splats, mut dec) in decoded {
        for (j, s) in splats.into_iter().enumerate() {
            if s.opacity >= SKIP_OPACITY {
                dec.slots[j] = Some(out.splats.len() as u32);
                out.owner.push((dec.anchor as u32, j as u32));
                out.splats.push(s);
            }
        }
        out.anchors.push(dec);
    }
    out
}

/// Gradients for every optimized quantity of the field.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldGrads {
    pub features: Vec<f64>,
    pub offsets: Vec<f64>,
    pub log_gamma: Vec<f64>,
    pub opacity: Vec<f64>,
    pub color: Vec<f64>,
    pub cov: Vec<f64>,
    /// Empty when no geometry head is attached.
    pub geo: Vec<f64>,
}

impl FieldGrads {
    pub fn zeros(anchors: &AnchorSet, heads: &FieldHeads) -> Self {
        Self {
            features: vec![0.0; anchors.features.len()],
            offsets: vec![0.0; anchors.offsets.len()],
            log_gamma: vec![0.0; anchors.len()],
            opacity: vec![0.0; heads.opacity.len()],
            color: vec![0.0; heads.color.len()],
            cov: vec![0.0; heads.cov.len()],
            geo: vec![0.0; heads.geo_params().map_or(0, MlpParams::len)],
        }
    }

    pub fn groups_mut(&mut self) -> [&mut [f64]; 7] {
        [
            &mut self.features,
            &mut self.offsets,
            &mut self.log_gamma,
            &mut self.opacity,
            &mut self.color,
            &mut self.cov,
            &mut self.geo,
        ]
    }
}

struct HeadGrads {
    opacity: Vec<f64>,
    color: Vec<f64>,
    cov: Vec<f64>,
    geo: Vec<f64>,
}

struct AnchorLocal {
    anchor: usize,
    feature: [f64; FEATURE_DIM],
    offsets: Vec<f64>,
    log_gamma: f64,
}

/// Pulls a gradient on `(scale, stored unit quaternion)` back to the raw
/// 7-vector. Returns the raw gradient and the `log γ` contribution.
fn cov_raw_grad(scale: &Vec3, g_scale: &Vec3, g_rot: &[f64; 4], qn: f64) -> ([f64; COV_DIM], f64) {
    let mut g = [0.0; COV_DIM];
    let mut g_lg = 0.0;
    for c in 0..3 {
        g[c] = g_scale[c] * scale[c];
        g_lg += g[c];
    }
    if qn > 0.0 {
        // the stored quaternion is already unit, so the raster gradient is
        // tangent to it and the normalization Jacobian reduces to 1/|q_raw|
        for c in 0..4 {
            g[3 + c] = g_rot[c] / qn;
        }
    }
    (g, g_lg)
}

/// Chain rule from per-splat gradients back to one anchor and the heads.
/// `render` and `geometry` hold the rasterizer gradients of the two passes
/// (indexed by splat), either may be absent.
#[allow(clippy::too_many_arguments)]
pub fn backprop_anchor(
    anchors: &AnchorSet,
    heads: &FieldHeads,
    field: &DecodedField,
    dec: &AnchorDecode,
    render: Option<&[SplatGrad]>,
    geometry: Option<&[SplatGrad]>,
    gates: &GateConfig,
    head_grads: &mut FieldGrads,
) -> FieldGrads {
    let mut local = FieldGrads {
        features: vec![0.0; FEATURE_DIM],
        offsets: vec![0.0; 3 * anchors.k],
        log_gamma: vec![0.0],
        opacity: Vec::new(),
        color: Vec::new(),
        cov: Vec::new(),
        geo: Vec::new(),
    };
    let mut hg = HeadGrads {
        opacity: std::mem::take(&mut head_grads.opacity),
        color: std::mem::take(&mut head_grads.color),
        cov: std::mem::take(&mut head_grads.cov),
        geo: std::mem::take(&mut head_grads.geo),
    };
    let l = backprop_one(anchors, heads, field, dec, render, geometry, gates, &mut hg);
    head_grads.opacity = hg.opacity;
    head_grads.color = hg.color;
    head_grads.cov = hg.cov;
    head_grads.geo = hg.geo;
    local.features.copy_from_slice(&l.feature);
    local.offsets = l.offsets;
    local.log_gamma[0] = l.log_gamma;
    local
}

#[allow(clippy::too_many_arguments)]
fn backprop_one(
    anchors: &AnchorSet,
    heads: &FieldHeads,
    field: &DecodedField,
    dec: &AnchorDecode,
    render: Option<&[SplatGrad]>,
    geometry: Option<&[SplatGrad]>,
    gates: &GateConfig,
    hg: &mut HeadGrads,
) -> AnchorLocal {
    let k = anchors.k;
    let a = dec.anchor;
    let gamma = anchors.gamma(a);
    let rgb_open = gates.rgb_branch_grad_from_geometry;
    let geo_cov = geometry.is_some() && gates.covariance_grad_from_geometry;
    let geo_op = geometry.is_some() && gates.opacity_grad_from_geometry;

    let mut g_op_r = vec![0.0; k];
    let mut g_op_g = vec![0.0; k];
    let mut g_col = vec![0.0; 3 * k];
    let mut g_y = vec![0.0; COV_DIM * k];
    let mut g_dy = vec![0.0; COV_DIM * k];
    let mut g_off = vec![0.0; 3 * k];
    let mut g_lg = 0.0;
    let mut any_r = false;
    let mut any_geo_head = false;

    for j in 0..k {
        let Some(slot) = dec.slots[j] else { continue };
        let s = &field.splats[slot as usize];
        let off = anchors.offset(a, j);
        let (qn_r, qn_g) = dec.qnorm[j];
        if let Some(rg) = render {
            let g = &rg[slot as usize];
            any_r = true;
            g_op_r[j] += g.opacity;
            for c in 0..3 {
                g_col[3 * j + c] += g.color[c];
                g_off[3 * j + c] += gamma * g.center[c];
            }
            g_lg += gamma * off.dot(&g.center);
            let (gy, lg) = cov_raw_grad(&s.scale, &g.scale, &g.rotation, qn_r);
            for c in 0..COV_DIM {
                g_y[COV_DIM * j + c] += gy[c];
            }
            g_lg += lg;
        }
        if let Some(gg) = geometry {
            let g = &gg[slot as usize];
            if geo_op {
                g_op_g[j] += g.opacity;
            }
            if rgb_open {
                for c in 0..3 {
                    g_off[3 * j + c] += gamma * g.center[c];
                }
                g_lg += gamma * off.dot(&g.center);
            }
            if geo_cov {
                let (gy, lg) = cov_raw_grad(&s.geo_scale, &g.scale, &g.rotation, qn_g);
                match heads.geo {
                    GeoHead::Shared => {
                        if rgb_open {
                            any_r = true;
                            for c in 0..COV_DIM {
                                g_y[COV_DIM * j + c] += gy[c];
                            }
                        }
                    }
                    GeoHead::Residual(_) => {
                        any_geo_head = true;
                        for c in 0..COV_DIM {
                            g_dy[COV_DIM * j + c] += gy[c];
                            if rgb_open {
                                g_y[COV_DIM * j + c] += gy[c];
                            }
                        }
                        any_r |= rgb_open;
                    }
                    GeoHead::Independent(_) => {
                        any_geo_head = true;
                        for c in 0..COV_DIM {
                            g_dy[COV_DIM * j + c] += gy[c];
                        }
                    }
                }
                if rgb_open {
                    g_lg += lg;
                }
            }
        }
    }

    let mut g_in = [0.0; INPUT_DIM];
    let mut add_in = |gx: &[f64]| {
        for (a, b) in g_in.iter_mut().zip(gx) {
            *a += b;
        }
    };
    let nonzero = |v: &[f64]| v.iter().any(|x| *x != 0.0);
    // opacity head: geometry contributions reach the features only when the
    // rgb branch is open
    if rgb_open || !nonzero(&g_op_g) {
        let total: Vec<f64> = g_op_r.iter().zip(&g_op_g).map(|(a, b)| a + b).collect();
        if any_r || nonzero(&total) {
            add_in(&heads.opacity.backward_into(&dec.op, &total, &mut hg.opacity));
        }
    } else {
        if any_r {
            add_in(&heads.opacity.backward_into(&dec.op, &g_op_r, &mut hg.opacity));
        }
        heads.opacity.backward_into(&dec.op, &g_op_g, &mut hg.opacity);
    }
    if any_r {
        add_in(&heads.color.backward_into(&dec.col, &g_col, &mut hg.color));
        add_in(&heads.cov.backward_into(&dec.cov, &g_y, &mut hg.cov));
    }
    if any_geo_head {
        if let (Some(p), Some(t)) = (heads.geo_params(), &dec.geo) {
            let gx = p.backward_into(t, &g_dy, &mut hg.geo);
            if rgb_open {
                add_in(&gx);
            }
        }
    }
    let mut feature = [0.0; FEATURE_DIM];
    feature.copy_from_slice(&g_in[..FEATURE_DIM]);
    AnchorLocal { anchor: a, feature, offsets: g_off, log_gamma: g_lg }
}

/// Gradients of all decoded anchors, reduced in a fixed chunk order so the
/// result does not depend on the thread count.
pub fn backprop_field(
    anchors: &AnchorSet,
    heads: &FieldHeads,
    field: &DecodedField,
    render: Option<&[SplatGrad]>,
    geometry: Option<&[SplatGrad]>,
    gates: &GateConfig,
) -> Result<FieldGrads> {
    for g in [render, geometry].into_iter().flatten() {
        if g.len() != field.splats.len() {
            return invalid("splat gradient count does not match the decoded field");
        }
    }
    let n_chunks = field.anchors.len().div_ceil(GRAD_CHUNK);
    let geo_len = heads.geo_params().map_or(0, MlpParams::len);
    let parts = par::map_range(n_chunks, |c| {
        let mut hg = HeadGrads {
            opacity: vec![0.0; heads.opacity.len()],
            color: vec![0.0; heads.color.len()],
            cov: vec![0.0; heads.cov.len()],
            geo: vec![0.0; geo_len],
        };
        let lo = c * GRAD_CHUNK;
        let hi = (lo + GRAD_CHUNK).min(field.anchors.len());
        let locals: Vec<AnchorLocal> = field.anchors[lo..hi]
            .iter()
            .map(|dec| backprop_one(anchors, heads, field, dec, render, geometry, gates, &mut hg))
            .collect();
        (locals, hg)
    });
    let mut out = FieldGrads::zeros(anchors, heads);
    let k = anchors.k;
    for (locals, hg) in parts {
        for l in locals {
            out.features[l.anchor * FEATURE_DIM..(l.anchor + 1) * FEATURE_DIM]
                .iter_mut()
                .zip(&l.feature)
                .for_each(|(a, b)| *a += b);
            out.offsets[l.anchor * 3 * k..(l.anchor + 1) * 3 * k]
                .iter_mut()
                .zip(&l.offsets)
                .for_each(|(a, b)| *a += b);
            out.log_gamma[l.anchor] += l.log_gamma;
        }
        for (dst, src) in [
            (&mut out.opacity, &hg.opacity),
            (&mut out.color, &hg.color),
            (&mut out.cov, &hg.cov),
            (&mut out.geo, &hg.geo),
        ] {
            dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{Branch, Intrinsics};
    use crate::image::FloatMap;
    use crate::raster::{rasterize_backward, rasterize_forward, MapGrads, RasterConfig, RenderOutput};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_single_voxel_collapse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Vec3> = (0..8).map(|i| Vec3::new(0.1 + 0.01 * i as f64, 0.2, 0.3)).collect();
        let set = init_anchors(&pts, 1.0, 10, &mut rng).unwrap();
        assert_eq!(set.len(), 1);
        let mean = pts.iter().sum::<Vec3>() / 8.0;
        assert!((set.positions[0] - mean).norm() < 1e-12);
        assert!(set.features.iter().all(|f| *f == 0.0));
        assert!(set.offsets.iter().all(|o| o.abs() <= 0.5));
        for j in 0..10 {
            assert!((set.center(0, j) - set.positions[0]).amax() <= 0.5 * set.gamma(0) + 1e-12);
        }
    }

    #[test]
    fn init_grid_one_anchor_per_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut pts = Vec::new();
        for i in 0..4 {
            for j in 0..3 {
                pts.push(Vec3::new(i as f64 * 0.2 + 0.05, j as f64 * 0.2 + 0.05, 0.05));
            }
        }
        let set = init_anchors(&pts, 0.1, 4, &mut rng).unwrap();
        assert_eq!(set.len(), pts.len());
        assert!(init_anchors(&[], 0.1, 4, &mut rng).is_err());
    }

    #[test]
    fn init_count_matches_distinct_voxels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec3> =
            (0..500).map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        let set = init_anchors(&pts, 0.3, 2, &mut rng).unwrap();
        let mut keys: Vec<(i64, i64, i64)> = pts
            .iter()
            .map(|p| ((p.x / 0.3).floor() as i64, (p.y / 0.3).floor() as i64, (p.z / 0.3).floor() as i64))
            .collect();
        keys.sort();
        keys.dedup();
        assert_eq!(set.len(), keys.len());
    }

    fn setup(k: usize, n: usize, seed: u64) -> (AnchorSet, FieldHeads, Camera) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Vec3> =
            (0..n).map(|i| Vec3::new(-0.6 + 1.2 * i as f64 / n.max(2) as f64, rng.random_range(-0.3..0.3), rng.random_range(-0.2..0.2))).collect();
        let mut set = init_anchors(&pts, 0.25, k, &mut rng).unwrap();
        for f in &mut set.features {
            *f = rng.random_range(-0.5..0.5);
        }
        let heads = FieldHeads::new(k, &mut rng);
        let cam = Camera::look_at(Vec3::new(0.2, -0.3, -3.0), Vec3::zeros(), -Vec3::y(), Intrinsics::from_fov(8, 8, 40.0)).unwrap();
        (set, heads, cam)
    }

    #[test]
    fn decode_offsets_and_gamma() {
        let (mut set, heads, cam) = setup(3, 1, 4);
        set.offsets.iter_mut().for_each(|o| *o = 0.0);
        let (s, _) = decode_anchor(&set, 0, &cam.position(), &heads);
        assert!(s.iter().all(|g| g.center == set.positions[0]));
        set.set_offset(0, 0, Vec3::new(1.0, 0.0, 0.0));
        set.log_gamma[0] = 0.5f64.ln();
        let (s, _) = decode_anchor(&set, 0, &cam.position(), &heads);
        assert!((s[0].center - (set.positions[0] + Vec3::new(0.5, 0.0, 0.0))).norm() < 1e-12);
        for g in &s {
            assert!(g.opacity > 0.0 && g.opacity < 1.0);
            assert!(g.scale.iter().all(|v| *v > 0.0));
            assert!((g.rotation.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_residual_is_identity() {
        let (set, mut heads, cam) = setup(4, 3, 5);
        attach_lite_geo(&mut heads, 0.0).unwrap();
        let (s, _) = decode_anchor(&set, 1, &cam.position(), &heads);
        for g in &s {
            assert_eq!(g.scale, g.geo_scale);
            assert_eq!(g.rotation, g.geo_rotation);
        }
        assert!(matches!(attach_lite_geo(&mut heads, 0.1), Err(Error::State(_))));
    }

    #[test]
    fn lite_geo_scaling_law() {
        let (set, mut heads, cam) = setup(2, 1, 6);
        let phi1 = heads.cov.clone();
        attach_lite_geo(&mut heads, 0.1).unwrap();
        let GeoHead::Residual(p2) = &heads.geo else { panic!() };
        for (a, b) in p2.data().iter().zip(phi1.data()) {
            assert_eq!(*a, 0.1 * b);
        }
        let (set2, mut h1, _) = (set.clone(), heads.clone(), ());
        h1.geo = GeoHead::Shared;
        attach_lite_geo(&mut h1, 1.0).unwrap();
        let (s, dec) = decode_anchor(&set2, 0, &cam.position(), &h1);
        // λ = 1: y_geo = 2·y_rgb, so geometry scale logits double
        let y = dec.cov.output();
        let g = set2.gamma(0);
        for j in 0..2 {
            for c in 0..3 {
                let expect = (2.0 * y[COV_DIM * j + c]).exp() * g;
                assert!((s[j].geo_scale[c] - expect).abs() < 1e-12 * expect.max(1.0));
            }
        }
    }

    #[test]
    fn render_gradients_never_touch_geo_head() {
        let (set, mut heads, cam) = setup(3, 4, 7);
        attach_lite_geo(&mut heads, 0.3).unwrap();
        let field = decode_field(&set, &heads, &cam, None);
        let (_, tape) = rasterize_forward(&field.splats, &cam, Branch::Render, &RasterConfig::default());
        let g = rasterize_backward(&tape, &field.splats, &cam, &MapGrads { color: Some(FloatMap::filled(8, 8, 3, 1.0)), ..Default::default() }).unwrap();
        let fg = backprop_field(&set, &heads, &field, Some(&g), None, &GateConfig::all_open()).unwrap();
        assert!(fg.geo.iter().all(|v| *v == 0.0));
        assert!(fg.cov.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn covariance_gate_off_zeroes_both_covariance_heads() {
        let (set, mut heads, cam) = setup(3, 4, 8);
        attach_lite_geo(&mut heads, 0.3).unwrap();
        let field = decode_field(&set, &heads, &cam, None);
        let (_, tape) = rasterize_forward(&field.splats, &cam, Branch::Geometry, &RasterConfig::default());
        let up = MapGrads { depth: Some(FloatMap::filled(8, 8, 1, 1.0)), alpha: Some(FloatMap::filled(8, 8, 1, 1.0)), ..Default::default() };
        let g = rasterize_backward(&tape, &field.splats, &cam, &up).unwrap();
        let gates = GateConfig { covariance_grad_from_geometry: false, ..GateConfig::all_open() };
        let fg = backprop_field(&set, &heads, &field, None, Some(&g), &gates).unwrap();
        assert!(fg.geo.iter().all(|v| *v == 0.0));
        assert!(fg.cov.iter().all(|v| *v == 0.0));
        assert!(fg.opacity.iter().any(|v| *v != 0.0));
        // default gates: only the geometry head moves
        let fg = backprop_field(&set, &heads, &field, None, Some(&g), &GateConfig::default()).unwrap();
        assert!(fg.geo.iter().any(|v| *v != 0.0));
        for grp in [&fg.cov, &fg.opacity, &fg.color, &fg.features, &fg.offsets, &fg.log_gamma] {
            assert!(grp.iter().all(|v| *v == 0.0));
        }
    }

    struct Probe {
        c: FloatMap,
        d: FloatMap,
        n: FloatMap,
        a: FloatMap,
        gd: FloatMap,
        gn: FloatMap,
        ga: FloatMap,
    }

    fn rand_map(rng: &mut ChaCha8Rng, c: usize) -> FloatMap {
        let mut m = FloatMap::new(8, 8, c);
        m.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        m
    }

    fn dot(a: &FloatMap, b: &FloatMap) -> f64 {
        a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
    }

    impl Probe {
        fn loss(&self, r: &RenderOutput, g: &RenderOutput) -> f64 {
            dot(&self.c, &r.color) + dot(&self.d, &r.depth) + dot(&self.n, &r.normal) + dot(&self.a, &r.alpha)
                + dot(&self.gd, &g.depth)
                + dot(&self.gn, &g.normal)
                + dot(&self.ga, &g.alpha)
        }
    }

    fn end_to_end(set: &AnchorSet, heads: &FieldHeads, cam: &Camera, p: &Probe) -> f64 {
        let field = decode_field(set, heads, cam, None);
        let cfg = RasterConfig::default();
        let r = rasterize_forward(&field.splats, cam, Branch::Render, &cfg).0;
        let g = rasterize_forward(&field.splats, cam, Branch::Geometry, &cfg).0;
        p.loss(&r, &g)
    }

    /// Relative error with a floor on the denominator.
    fn rel(fd: f64, an: f64) -> f64 {
        (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4)
    }

    pub(crate) fn check_field_gradients(seed: u64, residual: bool) -> f64 {
        let (set, mut heads, cam) = setup(3, 3, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        if residual {
            attach_lite_geo(&mut heads, 0.5).unwrap();
        }
        // perturb φ₂ away from an exact multiple of φ₁
        if let Some(p) = heads.geo_params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
        }
        let probe = Probe {
            c: rand_map(&mut rng, 3),
            d: rand_map(&mut rng, 1),
            n: rand_map(&mut rng, 3),
            a: rand_map(&mut rng, 1),
            gd: rand_map(&mut rng, 1),
            gn: rand_map(&mut rng, 3),
            ga: rand_map(&mut rng, 1),
        };
        let field = decode_field(&set, &heads, &cam, None);
        let cfg = RasterConfig::default();
        let (_, tr) = rasterize_forward(&field.splats, &cam, Branch::Render, &cfg);
        let (_, tg) = rasterize_forward(&field.splats, &cam, Branch::Geometry, &cfg);
        let gr = rasterize_backward(
            &tr,
            &field.splats,
            &cam,
            &MapGrads { color: Some(probe.c.clone()), depth: Some(probe.d.clone()), normal: Some(probe.n.clone()), alpha: Some(probe.a.clone()) },
        )
        .unwrap();
        let gg = rasterize_backward(
            &tg,
            &field.splats,
            &cam,
            &MapGrads { color: None, depth: Some(probe.gd.clone()), normal: Some(probe.gn.clone()), alpha: Some(probe.ga.clone()) },
        )
        .unwrap();
        let fg = backprop_field(&set, &heads, &field, Some(&gr), Some(&gg), &GateConfig::all_open()).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        let mut probe_set = |get: &dyn for<'a> Fn(&'a mut AnchorSet, &'a mut FieldHeads) -> &'a mut f64, an: f64| {
            let mut s = set.clone();
            let mut hd = heads.clone();
            *get(&mut s, &mut hd) += h;
            let fp = end_to_end(&s, &hd, &cam, &probe);
            let mut s = set.clone();
            let mut hd = heads.clone();
            *get(&mut s, &mut hd) -= h;
            let fm = end_to_end(&s, &hd, &cam, &probe);
            worst = worst.max(rel((fp - fm) / (2.0 * h), an));
        };
        for i in (0..set.features.len()).step_by(7) {
            probe_set(&|s, _| &mut s.features[i], fg.features[i]);
        }
        for i in 0..set.offsets.len() {
            probe_set(&|s, _| &mut s.offsets[i], fg.offsets[i]);
        }
        for i in 0..set.len() {
            probe_set(&|s, _| &mut s.log_gamma[i], fg.log_gamma[i]);
        }
        for i in (0..heads.opacity.len()).step_by(37) {
            probe_set(&|_, hd| &mut hd.opacity.data_mut()[i], fg.opacity[i]);
        }
        for i in (0..heads.color.len()).step_by(53) {
            probe_set(&|_, hd| &mut hd.color.data_mut()[i], fg.color[i]);
        }
        for i in (0..heads.cov.len()).step_by(29) {
            probe_set(&|_, hd| &mut hd.cov.data_mut()[i], fg.cov[i]);
        }
        for i in (0..fg.geo.len()).step_by(29) {
            probe_set(&|_, hd| &mut hd.geo_params_mut().unwrap().data_mut()[i], fg.geo[i]);
        }
        worst
    }

    #[test]
    fn decode_and_rasterize_match_finite_differences() {
        for (seed, residual) in [(10, true), (11, false), (12, true)] {
            let w = check_field_gradients(seed, residual);
            assert!(w < 1e-4, "seed {seed}: worst rel err {w}");
        }
    }
}
