//! Geometry-guided anchor growing and opacity-based pruning.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::anchor::{random_offsets, voxel_key, AnchorSet, DecodedField};
use crate::error::{invalid, Result};
use crate::geom::{Camera, Vec3, Z_NEAR};
use crate::image::FloatMap;
use crate::losses::{normal_from_depth, ALPHA_VALID};
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensifyConfig {
    /// Geometry-guidance weight `ω_g`.
    pub omega_g: f64,
    /// Normal-clue weight `ω_n`.
    pub omega_n: f64,
    /// Near-surface range `θ_sdf`, in anchor voxel sizes.
    pub theta_sdf_voxels: f64,
    /// Width of `ζ`, in anchor voxel sizes.
    pub sigma_zeta_voxels: f64,
    /// Grow threshold `ε*` on the growth score.
    pub grow_threshold: f64,
    pub start: usize,
    pub stop: usize,
    pub interval: usize,
    pub prune_opacity: f64,
    pub max_anchors: usize,
    /// Views rendered per clue-gathering round.
    pub clue_views: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            omega_g: 0.5 * 2e-4,
            omega_n: 1.0,
            theta_sdf_voxels: 4.0,
            sigma_zeta_voxels: 2.0,
            grow_threshold: 2e-4,
            start: 500,
            stop: 2500,
            interval: 100,
            prune_opacity: 0.005,
            max_anchors: 50_000,
            clue_views: 8,
        }
    }
}

impl DensifyConfig {
    pub fn validate(&self, total_iterations: usize) -> Result<()> {
        let positive = [self.omega_n, self.theta_sdf_voxels, self.sigma_zeta_voxels, self.grow_threshold, self.prune_opacity];
        if positive.iter().any(|v| !(*v > 0.0)) || !(self.omega_g >= 0.0) {
            return invalid("densify weights and thresholds must be positive (omega_g may be 0)");
        }
        if self.interval == 0 || self.clue_views == 0 || self.max_anchors == 0 {
            return invalid("densify interval, clue_views and max_anchors must be at least 1");
        }
        if self.start > self.stop || self.stop > total_iterations {
            return invalid("densify window must satisfy start <= stop <= total iterations");
        }
        Ok(())
    }

    /// Whether growth/pruning runs after iteration `it` (1-based).
    pub fn is_round(&self, it: usize) -> bool {
        it >= self.start && it < self.stop && it > 0 && it % self.interval == 0
    }
}

/// Per-anchor SDF and normal clues.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeoClue {
    /// Mean `D(x) − Z(x)` over views.
    pub s: f64,
    /// Mean `|D(x) − Z(x)|`.
    pub mean_abs_s: f64,
    /// Mean L1 norm of `N_d(x) − N(x)` over views with a valid depth normal.
    pub n: f64,
    pub views: usize,
}

/// Geometry-pass maps of one view.
#[derive(Clone, Copy, Debug)]
pub struct GeoView<'a> {
    pub cam: &'a Camera,
    pub depth: &'a FloatMap,
    pub normal: &'a FloatMap,
    pub alpha: &'a FloatMap,
}

/// Clues for every anchor; `None` when no view sees the anchor in front of
/// the camera, in bounds and over a pixel with `alpha > 0.5`.
pub fn gather_geo_clues(anchors: &AnchorSet, views: &[GeoView]) -> Vec<Option<GeoClue>> {
    let nd: Vec<FloatMap> = views.iter().map(|v| normal_from_depth(v.depth, v.cam)).collect();
    par::map_range(anchors.len(), |a| {
        if !anchors.active[a] {
            return None;
        }
        let (mut s, mut abs_s, mut n, mut n_views, mut count) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for (v, nd) in views.iter().zip(&nd) {
            let pc = v.cam.world_to_cam(&anchors.positions[a]);
            if pc.z <= Z_NEAR {
                continue;
            }
            let uv = v.cam.project_cam(&pc);
            if !(uv.x >= 0.0 && uv.y >= 0.0 && uv.x < v.cam.width as f64 && uv.y < v.cam.height as f64) {
                continue;
            }
            let (x, y) = (uv.x as usize, uv.y as usize);
            if v.alpha.get(x, y, 0) <= ALPHA_VALID {
                continue;
            }
            let d = v.depth.get(x, y, 0) - pc.z;
            s += d;
            abs_s += d.abs();
            count += 1;
            let ndp = nd.pixel(x, y);
            if ndp.iter().any(|c| *c != 0.0) {
                n += (0..3).map(|c| (ndp[c] - v.normal.get(x, y, c)).abs()).sum::<f64>();
                n_views += 1;
            }
        }
        (count > 0).then(|| GeoClue {
            s: s / count as f64,
            mean_abs_s: abs_s / count as f64,
            n: if n_views > 0 { n / n_views as f64 } else { 0.0 },
            views: count,
        })
    })
}

/// `ζ(s) = exp(−s²/(2σ²))`.
pub fn zeta(s: f64, sigma: f64) -> f64 {
    (-s * s / (2.0 * sigma * sigma)).exp()
}

/// Growth score: near the surface (`mean|s| < θ`) the guidance term is
/// `ω_g·ζ(s)·ω_n·n`, farther away `ω_g·ζ(s)`. Undefined clues give `∇_g`.
pub fn growth_score(grad: f64, clue: Option<&GeoClue>, omega_g: f64, omega_n: f64, theta_sdf: f64, sigma_zeta: f64) -> f64 {
    let Some(c) = clue else { return grad };
    let z = zeta(c.s, sigma_zeta);
    if c.mean_abs_s < theta_sdf {
        grad + omega_g * z * omega_n * c.n
    } else {
        grad + omega_g * z
    }
}

/// Adds one anchor per unoccupied voxel containing a neural-Gaussian center
/// of an anchor whose score exceeds `threshold`. Parents are visited in index
/// order; children copy the parent's feature and γ and get fresh offsets.
/// Returns the number of anchors added.
pub fn grow_anchors<R: Rng>(anchors: &mut AnchorSet, scores: &[f64], threshold: f64, voxel: f64, max_anchors: usize, rng: &mut R) -> Result<usize> {
    if scores.len() != anchors.len() {
        return invalid("one score per anchor required");
    }
    if !(voxel > 0.0) {
        return invalid("voxel size must be positive");
    }
    let mut occupied: HashSet<[i64; 3]> = (0..anchors.len()).filter(|&a| anchors.active[a]).map(|a| voxel_key(&anchors.positions[a], voxel)).collect();
    let parents: Vec<usize> = (0..anchors.len()).filter(|&a| anchors.active[a] && scores[a] > threshold).collect();
    let mut added = 0;
    for a in parents {
        for j in 0..anchors.k {
            if anchors.len() >= max_anchors {
                return Ok(added);
            }
            let key = voxel_key(&anchors.center(a, j), voxel);
            if !occupied.insert(key) {
                continue;
            }
            let pos = Vec3::new(key[0] as f64 + 0.5, key[1] as f64 + 0.5, key[2] as f64 + 0.5) * voxel;
            let feature = anchors.feature(a).to_vec();
            let offsets = random_offsets(anchors.k, rng);
            let lg = anchors.log_gamma[a];
            anchors.push(pos, &feature, &offsets, lg)?;
            added += 1;
        }
    }
    Ok(added)
}

/// Running mean of each anchor's decoded opacity (averaged over its `k`
/// neural Gaussians) across the views it was decoded for.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OpacityStats {
    pub sum: Vec<f64>,
    pub count: Vec<u64>,
}

impl OpacityStats {
    pub fn new(n: usize) -> Self {
        Self { sum: vec![0.0; n], count: vec![0; n] }
    }

    pub fn resize(&mut self, n: usize) {
        self.sum.resize(n, 0.0);
        self.count.resize(n, 0);
    }

    pub fn reset(&mut self) {
        self.sum.iter_mut().for_each(|v| *v = 0.0);
        self.count.iter_mut().for_each(|v| *v = 0);
    }

    pub fn accumulate(&mut self, field: &DecodedField) {
        for d in &field.anchors {
            self.sum[d.anchor] += d.opacity.iter().sum::<f64>() / d.opacity.len().max(1) as f64;
            self.count[d.anchor] += 1;
        }
    }

    pub fn mean(&self, a: usize) -> Option<f64> {
        (self.count[a] > 0).then(|| self.sum[a] / self.count[a] as f64)
    }
}

/// Deactivates anchors observed during the interval whose mean opacity is
/// below `threshold`. Returns the number pruned.
pub fn prune_anchors(anchors: &mut AnchorSet, stats: &OpacityStats, threshold: f64) -> Result<usize> {
    if stats.count.len() != anchors.len() {
        return invalid("opacity stats do not cover the anchor set");
    }
    let mut pruned = 0;
    for a in 0..anchors.len() {
        if anchors.active[a] && stats.mean(a).is_some_and(|m| m < threshold) {
            anchors.active[a] = false;
            pruned += 1;
        }
    }
    Ok(pruned)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchor::FEATURE_DIM;
    use crate::geom::Intrinsics;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zeta_examples() {
        assert_eq!(zeta(0.0, 0.3), 1.0);
        assert!((zeta(0.3, 0.3) - (-0.5f64).exp()).abs() < 1e-15);
        let grid: Vec<f64> = (0..50).map(|i| i as f64 * 0.02).collect();
        for w in grid.windows(2) {
            assert!(zeta(w[0], 0.2) > zeta(w[1], 0.2));
        }
    }

    #[test]
    fn growth_score_examples() {
        let near = GeoClue { s: 0.0, mean_abs_s: 0.0, n: 0.3, views: 1 };
        assert_eq!(growth_score(0.1, Some(&near), 0.0, 2.0, 1.0, 1.0), 0.1);
        assert!((growth_score(0.1, Some(&near), 1.0, 2.0, 1.0, 1.0) - 0.7).abs() < 1e-15);
        // far branch with ζ(s) = 0.5: s = σ·sqrt(2 ln 2)
        let sigma = 1.0;
        let s = sigma * (2.0 * 2f64.ln()).sqrt();
        let far = GeoClue { s, mean_abs_s: s, n: 0.9, views: 3 };
        assert!((growth_score(0.1, Some(&far), 1.0, 2.0, 0.5, sigma) - 0.6).abs() < 1e-12);
        assert_eq!(growth_score(0.1, None, 1.0, 2.0, 0.5, sigma), 0.1);
    }

    proptest! {
        #[test]
        fn zeta_bounded_and_even(s in -10.0f64..10.0, sigma in 0.01f64..5.0) {
            let z = zeta(s, sigma);
            prop_assert!(z > 0.0 || s.abs() / sigma > 30.0);
            prop_assert!(z <= 1.0);
            prop_assert_eq!(z, zeta(-s, sigma));
        }

        #[test]
        fn score_never_below_gradient(g in 0.0f64..1.0, s in -1.0f64..1.0, ms in 0.0f64..1.0, n in 0.0f64..6.0,
                                      wg in 0.0f64..2.0, wn in 0.0f64..2.0, th in 0.01f64..1.0, sz in 0.01f64..1.0) {
            let c = GeoClue { s, mean_abs_s: ms, n, views: 1 };
            prop_assert!(growth_score(g, Some(&c), wg, wn, th, sz) >= g);
        }
    }

    fn flat_view() -> (Camera, FloatMap, FloatMap, FloatMap) {
        let cam = Camera::look_at(Vec3::zeros(), Vec3::z(), -Vec3::y(), Intrinsics::from_fov(32, 32, 60.0)).unwrap();
        let depth = FloatMap::filled(32, 32, 1, 5.0);
        let mut normal = FloatMap::new(32, 32, 3);
        for y in 0..32 {
            for x in 0..32 {
                normal.set(x, y, 2, -1.0);
            }
        }
        let alpha = FloatMap::filled(32, 32, 1, 1.0);
        (cam, depth, normal, alpha)
    }

    fn set_with(points: &[Vec3]) -> AnchorSet {
        let mut s = AnchorSet::empty(2);
        for p in points {
            s.push(*p, &[0.0; FEATURE_DIM], &[0.1, 0.0, 0.0, -0.1, 0.0, 0.0], 0.0).unwrap();
        }
        s
    }

    #[test]
    fn clue_examples() {
        let (cam, depth, normal, alpha) = flat_view();
        let view = GeoView { cam: &cam, depth: &depth, normal: &normal, alpha: &alpha };
        // on the surface, nearer by 0.2 along the optical axis, behind the camera
        let anchors = set_with(&[Vec3::new(0.1, 0.1, 5.0), Vec3::new(0.0, 0.0, 4.8), Vec3::new(0.0, 0.0, -1.0)]);
        let clues = gather_geo_clues(&anchors, &[view, view]);
        let c0 = clues[0].unwrap();
        assert!(c0.s.abs() < 1e-12 && c0.n < 1e-9 && c0.views == 2);
        assert!((clues[1].unwrap().s - 0.2).abs() < 1e-12);
        assert!(clues[2].is_none());
    }

    #[test]
    fn growth_and_dedup() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let voxel = 0.1;
        // offsets ±0.1 with γ = 1 land in the neighbouring voxels
        let mut anchors = set_with(&[Vec3::new(0.05, 0.05, 0.05)]);
        let before = anchors.clone();
        assert_eq!(grow_anchors(&mut anchors, &[0.0], 0.5, voxel, 100, &mut rng).unwrap(), 0);
        assert_eq!(anchors, before);
        assert_eq!(grow_anchors(&mut anchors, &[1.0], 0.5, voxel, 100, &mut rng).unwrap(), 2);
        assert!((anchors.positions[1] - Vec3::new(0.15, 0.05, 0.05)).norm() < 1e-12);
        assert!((anchors.positions[2] - Vec3::new(-0.05, 0.05, 0.05)).norm() < 1e-12);
        // all children land in occupied voxels now
        let mut parent_only = anchors.clone();
        let n = parent_only.len();
        let mut scores = vec![0.0; n];
        scores[0] = 1.0;
        assert_eq!(grow_anchors(&mut parent_only, &scores, 0.5, voxel, 100, &mut rng).unwrap(), 0);
        // hard cap
        let mut capped = set_with(&[Vec3::new(0.05, 0.05, 0.05)]);
        assert_eq!(grow_anchors(&mut capped, &[1.0], 0.5, voxel, 2, &mut rng).unwrap(), 1);
        assert_eq!(capped.len(), 2);
    }

    #[test]
    fn growth_matches_occupancy_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let voxel = 0.2;
        let mut anchors = AnchorSet::empty(4);
        for _ in 0..60 {
            let p = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let offs = random_offsets(4, &mut rng);
            anchors.push(p, &[0.0; FEATURE_DIM], &offs, (0.5f64).ln()).unwrap();
        }
        let scores: Vec<f64> = (0..60).map(|_| rng.random()).collect();
        // brute force: candidate voxels of high scorers minus voxels already occupied
        let occupied: Vec<[i64; 3]> = (0..60).map(|a| voxel_key(&anchors.positions[a], voxel)).collect();
        let mut expect: Vec<[i64; 3]> = Vec::new();
        for a in 0..60 {
            if scores[a] > 0.5 {
                for j in 0..4 {
                    let k = voxel_key(&anchors.center(a, j), voxel);
                    if !occupied.contains(&k) && !expect.contains(&k) {
                        expect.push(k);
                    }
                }
            }
        }
        let added = grow_anchors(&mut anchors, &scores, 0.5, voxel, 10_000, &mut rng).unwrap();
        let got: Vec<[i64; 3]> = (60..anchors.len()).map(|a| voxel_key(&anchors.positions[a], voxel)).collect();
        assert_eq!(added, expect.len());
        assert_eq!(got, expect);
    }

    #[test]
    fn pruning_examples() {
        let mut anchors = set_with(&[Vec3::zeros(), Vec3::x(), Vec3::y()]);
        let mut stats = OpacityStats::new(3);
        stats.sum = vec![0.9, 0.001 * 2.0, 0.0];
        stats.count = vec![1, 2, 0];
        assert_eq!(prune_anchors(&mut anchors, &stats, 0.005).unwrap(), 1);
        assert_eq!(anchors.active, vec![true, false, true]);
    }

    proptest! {
        #[test]
        fn pruning_matches_filter(ops in prop::collection::vec((0.0f64..0.02, 0u64..4), 1..40)) {
            let pts: Vec<Vec3> = (0..ops.len()).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
            let mut anchors = set_with(&pts);
            let stats = OpacityStats { sum: ops.iter().map(|(m, c)| m * *c as f64).collect(), count: ops.iter().map(|o| o.1).collect() };
            prune_anchors(&mut anchors, &stats, 0.005).unwrap();
            for (i, (m, c)) in ops.iter().enumerate() {
                let mean = if *c > 0 { Some(m * *c as f64 / *c as f64) } else { None };
                prop_assert_eq!(anchors.active[i], !mean.is_some_and(|v| v < 0.005));
            }
        }
    }

    #[test]
    fn window_and_validation() {
        let cfg = DensifyConfig::default();
        cfg.validate(5000).unwrap();
        assert!(!cfg.is_round(400) && cfg.is_round(500) && cfg.is_round(2400) && !cfg.is_round(2500) && !cfg.is_round(2450));
        assert!(DensifyConfig { stop: 6000, ..cfg.clone() }.validate(5000).is_err());
    }
}
