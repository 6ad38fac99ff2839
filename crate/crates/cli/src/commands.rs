use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use splatsurf::checkpoint::{load_checkpoint, save_checkpoint};
use splatsurf::dataset::{synthesize, Dataset, SynthConfig};
use splatsurf::scene::canonical_scene;
use splatsurf::study::{
    ablation_run, append_csv, evaluate_model, parse_arms, pruning_study, pruning_svg, rows_to_csv, scene_box, train_cameras, EvalConfig, StudyRow,
};
use splatsurf::surface::{MeshFormat, TsdfVolume};
use splatsurf::trainer::{StepReport, TrainConfig, TrainData, Trainer};

use crate::config::RunConfig;
use crate::output::{prepare_dir, prepare_file, CliResult, Failure, RunManifest};
use crate::{AblateArgs, EvalArgs, ExtractArgs, PruneArgs, SynthArgs, TrainArgs};

const CHECKPOINT: &str = "checkpoint.ckpt";

fn usage(e: splatsurf::Error) -> Failure {
    Failure::Usage(e.to_string())
}

fn load_dataset(dir: &Path) -> CliResult<Dataset> {
    Dataset::load(dir).map_err(|e| Failure::Runtime(format!("dataset {}: {e}", dir.display())))
}

fn print_row(r: &StudyRow) {
    let f1 = r.f1.map_or_else(|| "unavailable".into(), |v| format!("{v:.4}"));
    let cd = r.chamfer.map_or_else(|| "unavailable".into(), |v| format!("{v:.5}"));
    println!("{:<15} {:<12} PSNR {:.2} dB  SSIM {:.4}  F1 {f1}  CD {cd}  count {}", r.label, r.setting, r.psnr, r.ssim, r.count);
}

pub fn synth(a: SynthArgs) -> CliResult<()> {
    canonical_scene(&a.scene).map_err(usage)?;
    let cfg = SynthConfig { scene: a.scene, views: a.views, resolution: a.res, init_points: a.points, point_noise: a.noise, seed: a.seed };
    prepare_dir(&a.out, a.force)?;
    let mut m = RunManifest::new("synth", &cfg, None, &a.out, &a.out, cfg.seed)?;
    m.write()?;
    m.phase("render");
    let ds = synthesize(&cfg).map_err(usage)?;
    m.phase("write");
    ds.write(&a.out)?;
    m.finish()?;
    let (w, h) = ds.resolution();
    println!("{} views at {w}x{h} ({} train, {} test) written to {}", ds.views.len(), ds.train_indices().len(), ds.test_indices().len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct Resolved<'a> {
    train: &'a TrainConfig,
    eval: &'a EvalConfig,
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let file = RunConfig::load(a.config.as_deref())?;
    let eval_cfg = file.eval();
    let resumed = match &a.resume {
        Some(p) => {
            if file.train.is_some() {
                return Err(Failure::Usage("a [train] section cannot be combined with --resume; the checkpoint's config is used".into()));
            }
            Some(load_checkpoint(p)?)
        }
        None => None,
    };
    let config = match &resumed {
        Some(t) => t.config.clone(),
        None => {
            let mut c = file.train.unwrap_or_default();
            if let Some(n) = a.iters {
                c = c.rescaled(n);
            }
            if let Some(s) = a.seed {
                c.seed = s;
            }
            c.validate().map_err(usage)?;
            c
        }
    };
    if a.save_every == Some(0) {
        return Err(Failure::Usage("--save-every must be at least 1".into()));
    }
    prepare_dir(&a.out, a.force)?;
    let mut m = RunManifest::new("train", &Resolved { train: &config, eval: &eval_cfg }, Some(&a.data), &a.out, &a.out, config.seed)?;
    m.write()?;

    m.phase("load");
    let ds = load_dataset(&a.data)?;
    let data = TrainData::from_dataset(&ds, config.neighbor_max_angle_deg)?;
    let mut t = match resumed {
        Some(t) => t,
        None => Trainer::new(config, &ds, data.views.len())?,
    };
    if t.order.len() != data.views.len() {
        return Err(Failure::Runtime(format!("checkpoint was trained on {} views, dataset has {}", t.order.len(), data.views.len())));
    }

    m.phase("train");
    let until = a.until.unwrap_or(usize::MAX).min(t.config.iterations);
    let mut log = BufWriter::new(File::create(a.out.join("train_log.csv"))?);
    writeln!(log, "{}", StepReport::CSV_HEADER)?;
    let ckpt = a.out.join(CHECKPOINT);
    let mut io_err = None;
    let total = t.config.iterations;
    while t.iteration < until {
        let rep = t.train_step(&data)?;
        if let Err(e) = writeln!(log, "{}", rep.csv_row()) {
            io_err = Some(e);
            break;
        }
        if rep.iteration % 100 == 0 || rep.iteration == total {
            eprintln!("[{}/{total}] l_c {:.4} plane {:.4} cross {:.4} anchors {} splats {}", rep.iteration, rep.l_c, rep.l_plane, rep.l_cross, rep.anchors, rep.splats);
        }
        if a.save_every.is_some_and(|n| rep.iteration % n == 0) {
            save_checkpoint(&t, &ckpt)?;
        }
    }
    if let Some(e) = io_err {
        return Err(e.into());
    }
    log.flush()?;
    save_checkpoint(&t, &ckpt)?;
    if t.skipped > 0 {
        eprintln!("warning: {} steps skipped on non-finite losses", t.skipped);
    }

    if t.is_done() {
        m.phase("evaluate");
        let metrics = evaluate_model(&t.model, &ds, &eval_cfg, None)?;
        let row = StudyRow::new("final", format!("{}", t.iteration), &metrics, t.model.anchors.active_count());
        std::fs::write(a.out.join("metrics.csv"), rows_to_csv(std::slice::from_ref(&row)))?;
        println!("final PSNR {:.2} dB after {} iterations", row.psnr, t.iteration);
        print_row(&row);
    } else {
        println!("stopped after {} of {} iterations; resume with --resume {}", t.iteration, total, ckpt.display());
    }
    m.finish()
}

pub fn extract(a: ExtractArgs) -> CliResult<()> {
    let format = MeshFormat::from_path(&a.out).map_err(usage)?;
    if a.voxel.is_some_and(|v| !(v > 0.0) || !v.is_finite()) {
        return Err(Failure::Usage("--voxel must be positive".into()));
    }
    let dir = prepare_file(&a.out, a.force)?;
    let t = load_checkpoint(&a.checkpoint)?;
    #[derive(Serialize)]
    struct Cfg {
        checkpoint: String,
        voxel: Option<f64>,
    }
    let cfg = Cfg { checkpoint: a.checkpoint.display().to_string(), voxel: a.voxel };
    let mut m = RunManifest::new("extract", &cfg, Some(&a.data), &dir, &a.out, t.config.seed)?;
    m.write()?;
    if t.iteration == 0 {
        eprintln!("warning: checkpoint is untrained (0 iterations); the mesh will be empty or noise");
    }
    m.phase("load");
    let ds = load_dataset(&a.data)?;
    m.phase("fuse");
    let (lo, hi) = scene_box(&ds)?;
    let default_res = EvalConfig::default().tsdf_resolution;
    let mut vol = match a.voxel {
        Some(v) => TsdfVolume::for_bbox_voxel(lo, hi, v, 0.1).map_err(usage)?,
        None => TsdfVolume::for_bbox(lo, hi, default_res, 0.1)?,
    };
    let mesh = t.model.fuse_mesh(&train_cameras(&ds), &mut vol, None)?;
    m.phase("write");
    mesh.write(&a.out, format)?;
    m.finish()?;
    println!("{} vertices, {} faces (voxel {:.5}) written to {}", mesh.positions.len(), mesh.faces.len(), vol.voxel, a.out.display());
    Ok(())
}

pub fn eval(a: EvalArgs) -> CliResult<()> {
    let cfg = RunConfig::load(a.config.as_deref())?.eval_only("eval")?.eval();
    prepare_dir(&a.out, a.force)?;
    let t = load_checkpoint(&a.checkpoint)?;
    let mut m = RunManifest::new("eval", &cfg, Some(&a.data), &a.out, &a.out, cfg.seed)?;
    m.write()?;
    m.phase("load");
    let ds = load_dataset(&a.data)?;
    m.phase("evaluate");
    let metrics = evaluate_model(&t.model, &ds, &cfg, None)?;
    let row = StudyRow::new("eval", format!("{}", t.iteration), &metrics, t.model.anchors.active_count());
    if row.f1.is_none() {
        eprintln!("warning: dataset has no analytic scene; surface metrics unavailable");
    }
    std::fs::write(a.out.join("metrics.csv"), rows_to_csv(std::slice::from_ref(&row)))?;
    m.finish()?;
    print_row(&row);
    Ok(())
}

fn parse_fractions(s: &str) -> CliResult<Vec<f64>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| match p.trim().parse::<f64>() {
            Ok(v) if (0.0..=100.0).contains(&v) => Ok(v / 100.0),
            _ => Err(Failure::Usage(format!("bad retained percentage `{p}` (expected a number in 0..=100)"))),
        })
        .collect()
}

pub fn prune(a: PruneArgs) -> CliResult<()> {
    let cfg = RunConfig::load(a.config.as_deref())?.eval_only("study prune")?.eval();
    let fractions = parse_fractions(&a.fractions)?;
    if fractions.is_empty() {
        return Err(Failure::Usage("--fractions is empty".into()));
    }
    prepare_dir(&a.out, a.force)?;
    let t = load_checkpoint(&a.checkpoint)?;
    #[derive(Serialize)]
    struct Cfg<'a> {
        checkpoint: String,
        fractions: &'a [f64],
        eval: &'a EvalConfig,
    }
    let c = Cfg { checkpoint: a.checkpoint.display().to_string(), fractions: &fractions, eval: &cfg };
    let mut m = RunManifest::new("study prune", &c, Some(&a.data), &a.out, &a.out, cfg.seed)?;
    m.write()?;
    m.phase("load");
    let ds = load_dataset(&a.data)?;
    if ds.scene.is_none() {
        return Err(Failure::Usage("the pruning study needs a dataset with an analytic scene".into()));
    }
    m.phase("study");
    let rows = pruning_study(&t.model, &ds, &fractions, &cfg)?;
    std::fs::write(a.out.join("prune.csv"), rows_to_csv(&rows))?;
    std::fs::write(a.out.join("prune.svg"), pruning_svg(&rows))?;
    m.finish()?;
    rows.iter().for_each(print_row);
    Ok(())
}

pub fn ablate(a: AblateArgs) -> CliResult<()> {
    let file = RunConfig::load(a.config.as_deref())?;
    let arms = parse_arms(&a.arms).map_err(usage)?;
    if arms.is_empty() {
        return Err(Failure::Usage("--arms is empty".into()));
    }
    let eval_cfg = file.eval();
    let mut base = file.train.unwrap_or_default();
    if let Some(n) = a.iters {
        base = base.rescaled(n);
    }
    if let Some(s) = a.seed {
        base.seed = s;
    }
    for arm in &arms {
        arm.config(&base).validate().map_err(usage)?;
    }
    prepare_dir(&a.out, a.force)?;
    #[derive(Serialize)]
    struct Cfg<'a> {
        arms: Vec<&'static str>,
        train: &'a TrainConfig,
        eval: &'a EvalConfig,
    }
    let c = Cfg { arms: arms.iter().map(|x| x.label()).collect(), train: &base, eval: &eval_cfg };
    let mut m = RunManifest::new("study ablate", &c, Some(&a.data), &a.out, &a.out, base.seed)?;
    m.write()?;
    m.phase("load");
    let ds = load_dataset(&a.data)?;
    m.phase("study");
    let csv = a.out.join("ablate.csv");
    let mut io_err = None;
    ablation_run(&base, &arms, &ds, &eval_cfg, |row| {
        print_row(row);
        if io_err.is_none() {
            io_err = append_csv(std::slice::from_ref(row), &csv).err();
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    m.finish()
}
