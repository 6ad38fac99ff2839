//! Model evaluation and the two analysis studies: Chamfer-ranked pruning of
//! neural Gaussians and the architecture/gating ablation.

use std::fmt::Write as _;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchor::{decode_field, GateConfig};
use crate::dataset::Dataset;
use crate::error::{invalid, Result};
use crate::eval::{chamfer_f1, psnr, GtSurface, PredSurface, SurfaceMetrics};
use crate::geom::{Branch, Camera, Vec3};
use crate::losses::ssim;
use crate::model::{Model, CULL_MARGIN};
use crate::scene::scene_sdf;
use crate::surface::{TriangleMesh, TsdfVolume};
use crate::trainer::{GeoMode, TrainConfig, TrainData, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// TSDF cells along the largest edge of the scene box.
    pub tsdf_resolution: usize,
    pub n_samples: usize,
    /// F1 threshold in TSDF voxels.
    pub tau_voxels: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { tsdf_resolution: 128, n_samples: 100_000, tau_voxels: 2.0, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct ModelMetrics {
    /// Mean over held-out views.
    pub psnr: f64,
    pub ssim: f64,
    /// `None` when the dataset carries no analytic scene.
    pub surface: Option<SurfaceMetrics>,
    pub tau: f64,
    pub mesh: TriangleMesh,
}

/// Box the TSDF covers: the analytic scene box, else the initial points.
pub fn scene_box(ds: &Dataset) -> Result<(Vec3, Vec3)> {
    if let Some(s) = &ds.scene {
        return Ok(s.bbox());
    }
    if ds.init_points.is_empty() {
        return invalid("dataset has neither an analytic scene nor initial points");
    }
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in &ds.init_points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    Ok((lo, hi))
}

pub fn train_cameras(ds: &Dataset) -> Vec<Camera> {
    ds.train_indices().into_iter().map(|i| ds.views[i].camera.clone()).collect()
}

/// Mean PSNR/SSIM on held-out views plus the fused mesh and its F1 against
/// the analytic scene. `keep` masks neural Gaussians (see [`Model::splats`]).
pub fn evaluate_model(model: &Model, ds: &Dataset, cfg: &EvalConfig, keep: Option<&[bool]>) -> Result<ModelMetrics> {
    let test = ds.test_indices();
    let (mut p_sum, mut s_sum) = (0.0, 0.0);
    for &i in &test {
        let v = &ds.views[i];
        let r = model.render(&v.camera, Branch::Render, keep)?;
        p_sum += psnr(&r.color, &v.color)?;
        s_sum += ssim(&r.color, &v.color)?;
    }
    let n = test.len().max(1) as f64;
    let (lo, hi) = scene_box(ds)?;
    let mut vol = TsdfVolume::for_bbox(lo, hi, cfg.tsdf_resolution, 0.1)?;
    let tau = cfg.tau_voxels * vol.voxel;
    let mesh = model.fuse_mesh(&train_cameras(ds), &mut vol, keep)?;
    let surface = match &ds.scene {
        Some(scene) => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            Some(chamfer_f1(&PredSurface::Mesh(&mesh), &GtSurface::Analytic(scene), tau, cfg.n_samples, &mut rng)?)
        }
        None => None,
    };
    Ok(ModelMetrics { psnr: p_sum / n, ssim: s_sum / n, surface, tau, mesh })
}

/// One line of a study table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StudyRow {
    /// Seconds since the Unix epoch when the row was produced.
    pub timestamp: u64,
    pub label: String,
    /// Retained fraction (pruning) or arm description (ablation).
    pub setting: String,
    pub psnr: f64,
    pub ssim: f64,
    pub f1: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub chamfer: Option<f64>,
    /// Neural Gaussians kept (pruning) or active anchors (ablation).
    pub count: usize,
}

impl StudyRow {
    pub const CSV_HEADER: &'static str = "timestamp,label,setting,psnr,ssim,f1,precision,recall,chamfer,count";

    pub fn new(label: &str, setting: String, m: &ModelMetrics, count: usize) -> Self {
        let s = m.surface.as_ref();
        Self {
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            label: label.into(),
            setting,
            psnr: m.psnr,
            ssim: m.ssim,
            f1: s.map(|s| s.f1),
            precision: s.map(|s| s.precision),
            recall: s.map(|s| s.recall),
            chamfer: s.map(|s| s.chamfer),
            count,
        }
    }

    /// Equality ignoring the timestamp.
    pub fn same_result(&self, other: &StudyRow) -> bool {
        StudyRow { timestamp: 0, ..self.clone() } == StudyRow { timestamp: 0, ..other.clone() }
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "unavailable".to_string(), |x| x.to_string());
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.timestamp,
            self.label,
            self.setting,
            self.psnr,
            self.ssim,
            opt(self.f1),
            opt(self.precision),
            opt(self.recall),
            opt(self.chamfer),
            self.count
        )
    }
}

pub fn rows_to_csv(rows: &[StudyRow]) -> String {
    let mut s = String::from(StudyRow::CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Appends rows to `path`, writing the header first when the file is new.
pub fn append_csv(rows: &[StudyRow], path: &Path) -> Result<()> {
    use std::io::Write;
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{}", StudyRow::CSV_HEADER)?;
    }
    for r in rows {
        writeln!(f, "{}", r.csv_row())?;
    }
    Ok(())
}

pub const DROP_LARGEST: &str = "drop-largest-cd";
pub const DROP_SMALLEST: &str = "drop-smallest-cd";
pub const DEFAULT_FRACTIONS: [f64; 6] = [1.0, 0.9, 0.75, 0.5, 0.25, 0.1];

/// Slots `a·k + j` decoded (opacity above the skip threshold) in at least
/// one of `cams`.
fn live_slots(model: &Model, cams: &[Camera]) -> Vec<bool> {
    let k = model.anchors.k;
    let mut live = vec![false; model.slots()];
    for cam in cams {
        let f = decode_field(&model.anchors, &model.heads, cam, Some(CULL_MARGIN));
        for o in &f.owner {
            live[o.0 as usize * k + o.1 as usize] = true;
        }
    }
    live
}

/// Keep masks for `fractions` of the live Gaussians, ranked by
/// `|scene_sdf(μ)|`. Returns `(label, fraction, mask)` for both orderings;
/// slots that are never decoded are always kept.
pub fn pruning_masks(model: &Model, ds: &Dataset, fractions: &[f64]) -> Result<Vec<(&'static str, f64, Vec<bool>)>> {
    let Some(scene) = &ds.scene else {
        return invalid("the pruning study needs an analytic scene");
    };
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return invalid("fractions must lie in [0, 1]");
    }
    let live = live_slots(model, &train_cameras(ds));
    let centers = model.centers();
    let mut ranked: Vec<(f64, usize)> = (0..live.len()).filter(|&i| live[i]).map(|i| (scene_sdf(scene, &centers[i]).abs(), i)).collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let n = ranked.len();
    let mut out = Vec::new();
    for (label, largest_first) in [(DROP_LARGEST, true), (DROP_SMALLEST, false)] {
        for &f in fractions {
            let keep_n = (f * n as f64).round() as usize;
            let mut mask = vec![true; live.len()];
            let dropped = if largest_first { &ranked[keep_n..] } else { &ranked[..n - keep_n] };
            for &(_, i) in dropped {
                mask[i] = false;
            }
            out.push((label, f, mask));
        }
    }
    Ok(out)
}

/// For each ordering and retained fraction: re-render the held-out views and
/// re-extract the mesh with only the kept Gaussians.
pub fn pruning_study(model: &Model, ds: &Dataset, fractions: &[f64], cfg: &EvalConfig) -> Result<Vec<StudyRow>> {
    pruning_masks(model, ds, fractions)?
        .into_iter()
        .map(|(label, f, mask)| {
            let m = evaluate_model(model, ds, cfg, Some(&mask))?;
            let kept = mask.iter().filter(|k| **k).count();
            Ok(StudyRow::new(label, format!("{}", f * 100.0), &m, kept))
        })
        .collect()
}

/// Ablation arms: the four architecture rows and the gradient-gating rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arm {
    /// Geometry losses on the shared rendering model.
    A,
    /// Separate geometry covariance head, no residual.
    B,
    /// Residual geometry head.
    C,
    /// Residual head plus geometry-guided densification.
    D,
    /// Residual head with covariance and opacity gradients from geometry.
    GateBaseline,
    /// As the gate baseline, covariance gradients from geometry removed.
    DetachCov,
    /// As the gate baseline, opacity gradients from geometry removed.
    DetachOpacity,
}

impl Arm {
    pub const ALL: [Arm; 7] = [Arm::A, Arm::B, Arm::C, Arm::D, Arm::GateBaseline, Arm::DetachCov, Arm::DetachOpacity];

    pub fn label(self) -> &'static str {
        match self {
            Arm::A => "a",
            Arm::B => "b",
            Arm::C => "c",
            Arm::D => "d",
            Arm::GateBaseline => "baseline",
            Arm::DetachCov => "detach-cov",
            Arm::DetachOpacity => "detach-opacity",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Arm::A => "geometry losses only",
            Arm::B => "+ geometry head (no residual)",
            Arm::C => "+ residual geometry head",
            Arm::D => "+ geometry-guided densification",
            Arm::GateBaseline => "residual head; all geometry gradients",
            Arm::DetachCov => "residual head; no covariance gradient from geometry",
            Arm::DetachOpacity => "residual head; no opacity gradient from geometry",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Arm::ALL.into_iter().find(|a| a.label() == s.trim()).map_or_else(|| invalid(format!("unknown ablation arm `{s}`")), Ok)
    }

    /// `base` specialized to this arm.
    pub fn config(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        let residual_gates = |opacity: bool, cov: bool| GateConfig {
            opacity_grad_from_geometry: opacity,
            covariance_grad_from_geometry: cov,
            rgb_branch_grad_from_geometry: false,
        };
        match self {
            Arm::A => {
                c.geo_mode = GeoMode::Shared;
                c.gates = GateConfig::all_open();
            }
            Arm::B => c.geo_mode = GeoMode::Independent,
            Arm::C | Arm::D => c.geo_mode = GeoMode::Residual,
            Arm::GateBaseline => {
                c.geo_mode = GeoMode::Residual;
                c.gates = residual_gates(true, true);
            }
            Arm::DetachCov => {
                c.geo_mode = GeoMode::Residual;
                c.gates = residual_gates(true, false);
            }
            Arm::DetachOpacity => {
                c.geo_mode = GeoMode::Residual;
                c.gates = residual_gates(false, true);
            }
        }
        if self != Arm::D {
            c.densify.omega_g = 0.0;
        }
        c
    }
}

pub fn parse_arms(list: &str) -> Result<Vec<Arm>> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(Arm::parse).collect()
}

/// Trains every arm from scratch with the same seed and budget and evaluates
/// it. `progress` receives each finished row.
pub fn ablation_run(base: &TrainConfig, arms: &[Arm], ds: &Dataset, cfg: &EvalConfig, mut progress: impl FnMut(&StudyRow)) -> Result<Vec<StudyRow>> {
    let data = TrainData::from_dataset(ds, base.neighbor_max_angle_deg)?;
    let mut rows = Vec::with_capacity(arms.len());
    for &arm in arms {
        let mut t = Trainer::new(arm.config(base), ds, data.views.len())?;
        t.run(&data, usize::MAX, |_| {})?;
        let m = evaluate_model(&t.model, ds, cfg, None)?;
        let row = StudyRow::new(arm.label(), arm.description().into(), &m, t.model.anchors.active_count());
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// Two-panel line plot (PSNR and F1 against retained fraction) of pruning
/// study rows, one line per ordering.
pub fn pruning_svg(rows: &[StudyRow]) -> String {
    let (w, h, pad) = (360.0, 260.0, 40.0);
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="11">"#, 2.0 * w, h);
    let panels: [(&str, fn(&StudyRow) -> f64); 2] = [("PSNR (dB)", |r| r.psnr), ("F1", |r| r.f1.unwrap_or(0.0))];
    for (pi, (title, get)) in panels.iter().enumerate() {
        let x0 = pi as f64 * w;
        let vals: Vec<f64> = rows.iter().map(get).collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let px = |f: f64| x0 + pad + f / 100.0 * (w - 2.0 * pad);
        let py = |v: f64| h - pad - (v - lo) / span * (h - 2.0 * pad);
        let _ = writeln!(svg, r##"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="#888"/>"##, x0 + pad, pad, w - 2.0 * pad, h - 2.0 * pad);
        let _ = writeln!(svg, r#"<text x="{}" y="{}">{title}</text>"#, x0 + pad, pad - 8.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{}">retained %</text>"#, x0 + w / 2.0 - 25.0, h - 8.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{}">{lo:.3}</text><text x="{}" y="{}">{hi:.3}</text>"#, x0 + 2.0, h - pad, x0 + 2.0, pad + 4.0);
        for (label, color) in [(DROP_LARGEST, "#c0392b"), (DROP_SMALLEST, "#2471a3")] {
            let mut pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.label == label)
                .filter_map(|r| r.setting.parse::<f64>().ok().map(|f| (px(f), py(get(r)))))
                .collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            let path: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
            let _ = writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" "));
        }
    }
    let _ = writeln!(svg, r##"<text x="{}" y="16" fill="#c0392b">{DROP_LARGEST}</text><text x="{}" y="16" fill="#2471a3">{DROP_SMALLEST}</text>"##, pad, pad + 140.0);
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthesize, SynthConfig};

    fn small_model() -> (Dataset, Model) {
        let ds = synthesize(&SynthConfig { views: 9, resolution: 24, init_points: 300, ..Default::default() }).unwrap();
        let data = TrainData::from_dataset(&ds, 60.0).unwrap();
        let cfg = TrainConfig { anchor_divisions: 8, k: 4, ..TrainConfig::default() }.rescaled(100);
        let mut t = Trainer::new(cfg, &ds, data.views.len()).unwrap();
        t.run(&data, 100, |_| {}).unwrap();
        (ds, t.model)
    }

    fn quick() -> EvalConfig {
        EvalConfig { tsdf_resolution: 24, n_samples: 2000, ..Default::default() }
    }

    #[test]
    fn arms_parse_and_reject_unknown() {
        assert_eq!(parse_arms("a,b,c,d").unwrap(), vec![Arm::A, Arm::B, Arm::C, Arm::D]);
        assert_eq!(parse_arms("detach-cov, detach-opacity").unwrap(), vec![Arm::DetachCov, Arm::DetachOpacity]);
        assert!(parse_arms("a,e").is_err());
        let base = TrainConfig::default();
        assert_eq!(Arm::A.config(&base).geo_mode, GeoMode::Shared);
        assert_eq!(Arm::C.config(&base).densify.omega_g, 0.0);
        assert!(Arm::D.config(&base).densify.omega_g > 0.0);
        assert!(!Arm::DetachCov.config(&base).gates.covariance_grad_from_geometry);
        assert!(!Arm::DetachOpacity.config(&base).gates.opacity_grad_from_geometry);
    }

    #[test]
    fn masks_partition_by_cd() {
        let (ds, model) = small_model();
        let masks = pruning_masks(&model, &ds, &[1.0, 0.5, 0.0]).unwrap();
        assert_eq!(masks.len(), 6);
        assert!(masks[0].2.iter().all(|k| *k));
        let scene = ds.scene.as_ref().unwrap();
        let centers = model.centers();
        let live = live_slots(&model, &train_cameras(&ds));
        let cd = |i: usize| scene_sdf(scene, &centers[i]).abs();
        // drop-largest at 50%: every kept live Gaussian is no farther than any dropped one
        let m = &masks[1].2;
        let kept_max = (0..m.len()).filter(|&i| live[i] && m[i]).map(cd).fold(0.0, f64::max);
        let drop_min = (0..m.len()).filter(|&i| live[i] && !m[i]).map(cd).fold(f64::INFINITY, f64::min);
        assert!(kept_max <= drop_min);
        // fraction 0 drops every live Gaussian, both orderings
        assert!((0..m.len()).all(|i| !(live[i] && masks[2].2[i])));
        assert!((0..m.len()).all(|i| !(live[i] && masks[5].2[i])));
    }

    #[test]
    fn full_retention_reproduces_baseline() {
        let (ds, model) = small_model();
        let base = evaluate_model(&model, &ds, &quick(), None).unwrap();
        let rows = pruning_study(&model, &ds, &[1.0, 0.0], &quick()).unwrap();
        assert_eq!(rows.len(), 4);
        for r in rows.iter().filter(|r| r.setting == "100") {
            assert_eq!(r.psnr, base.psnr);
            assert_eq!(r.f1, base.surface.map(|s| s.f1));
        }
        let empty = rows.iter().find(|r| r.setting == "0").unwrap();
        assert!(empty.psnr < base.psnr);
        let svg = pruning_svg(&rows);
        assert!(svg.starts_with("<svg") && svg.contains("polyline"));
        let csv = rows_to_csv(&rows);
        assert_eq!(csv.lines().count(), 5);
    }
}
