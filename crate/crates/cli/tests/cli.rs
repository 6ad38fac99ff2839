use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

const EVAL_CFG: &str = "[eval]\ntsdf_resolution = 32\nn_samples = 3000\n";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_splatsurf"));
    c.env_remove("SPLATSURF_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "stdout: {}\nstderr: {}", String::from_utf8_lossy(&o.stdout), stderr(&o));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth_into(dir: &Path, seed: &str) -> Output {
    run(&["synth", "--scene", "sphere", "--views", "9", "--res", "24", "--points", "300", "--seed", seed, "--out", s(dir)])
}

/// Tiny dataset plus an eval-only config, shared by the tests.
struct Fixture {
    _tmp: TempDir,
    data: PathBuf,
    eval_cfg: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        ok(synth_into(&data, "0"));
        let eval_cfg = tmp.path().join("eval.toml");
        std::fs::write(&eval_cfg, EVAL_CFG).unwrap();
        Fixture { _tmp: tmp, data, eval_cfg }
    })
}

fn train(out: &Path, extra: &[&str]) -> Output {
    let f = fixture();
    let mut args = vec!["train", "--data", s(&f.data), "--out", s(out), "--config", s(&f.eval_cfg)];
    args.extend_from_slice(extra);
    run(&args)
}

fn manifests(dir: &Path) -> usize {
    std::fs::read_dir(dir).unwrap().filter(|e| e.as_ref().unwrap().file_name() == "manifest.json").count()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}

#[test]
fn synth_writes_the_layout_once() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("ds");
    let o = ok(synth_into(&out, "3"));
    assert!(String::from_utf8_lossy(&o.stdout).contains("9 views at 24x24"));
    for sub in ["images", "depth", "normal"] {
        assert_eq!(std::fs::read_dir(out.join(sub)).unwrap().count(), 9, "{sub}");
    }
    assert!(out.join("scene.json").exists() && out.join("points.ply").exists());
    assert_eq!(manifests(&out), 1);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "synth");
    assert_eq!(m["config"]["views"], 9);
    assert_eq!(m["seed"], 3);

    let again = synth_into(&out, "3");
    assert_eq!(code(&again), 3, "{}", stderr(&again));
    ok(run(&["synth", "--scene", "sphere", "--views", "9", "--res", "24", "--points", "300", "--seed", "3", "--out", s(&out), "--force"]));
    assert_eq!(manifests(&out), 1);
}

fn dataset_files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "manifest.json" {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(synth_into(&a, "7"));
    ok(synth_into(&b, "7"));
    let (fa, fb) = (dataset_files(&a), dataset_files(&b));
    assert_eq!(fa.len(), 9 * 3 + 2);
    assert!(fa == fb);
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["synth", "--scene", "teapot", "--out", s(&tmp.path().join("x"))]);
    assert_eq!(code(&o), 2);
    assert!(!tmp.path().join("x").exists());
    assert_eq!(code(&run(&["synth", "--bogus"])), 2);
    assert_eq!(code(&run(&["study", "prune"])), 2);

    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nlearning_rate = 0.1\n").unwrap();
    let f = fixture();
    let o = run(&["train", "--data", s(&f.data), "--out", s(&tmp.path().join("t")), "--config", s(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));

    std::fs::write(&cfg, "[train]\niterations = 100\nwarmup = 100\n").unwrap();
    let o = run(&["train", "--data", s(&f.data), "--out", s(&tmp.path().join("t")), "--config", s(&cfg)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn missing_dataset_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["train", "--data", s(&tmp.path().join("none")), "--out", s(&tmp.path().join("t")), "--iters", "4"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn smoke_train_writes_checkpoint_log_and_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = ok(train(&out, &["--iters", "10"]));
    assert!(String::from_utf8_lossy(&o.stdout).contains("final PSNR"));
    assert_eq!(csv_rows(&out.join("train_log.csv")).len(), 10);
    assert!(out.join("checkpoint.ckpt").exists());
    let m = csv_rows(&out.join("metrics.csv"));
    assert_eq!(m.len(), 1);
    assert_eq!(manifests(&out), 1);
    let man: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(man["config"]["train"]["iterations"], 10);
    let phases: Vec<&str> = man["timings"].as_array().unwrap().iter().map(|t| t["phase"].as_str().unwrap()).collect();
    assert_eq!(phases, ["load", "train", "evaluate"]);
}

#[test]
fn same_seed_same_log_regardless_of_threads() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(train(&a, &["--iters", "12", "--threads", "1"]));
    let f = fixture();
    ok(bin()
        .env("SPLATSURF_THREADS", "2")
        .args(["train", "--data", s(&f.data), "--out", s(&b), "--config", s(&f.eval_cfg), "--iters", "12"])
        .output()
        .unwrap());
    assert_eq!(std::fs::read(a.join("train_log.csv")).unwrap(), std::fs::read(b.join("train_log.csv")).unwrap());
    assert_eq!(std::fs::read(a.join("checkpoint.ckpt")).unwrap(), std::fs::read(b.join("checkpoint.ckpt")).unwrap());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let (full, half, rest) = (tmp.path().join("full"), tmp.path().join("half"), tmp.path().join("rest"));
    ok(train(&full, &["--iters", "14"]));
    let o = ok(train(&half, &["--iters", "14", "--until", "6"]));
    assert!(String::from_utf8_lossy(&o.stdout).contains("stopped after 6 of 14"));
    assert!(!half.join("metrics.csv").exists());
    ok(train(&rest, &["--resume", s(&half.join("checkpoint.ckpt"))]));
    assert_eq!(std::fs::read(full.join("checkpoint.ckpt")).unwrap(), std::fs::read(rest.join("checkpoint.ckpt")).unwrap());
    let mut joined = csv_rows(&half.join("train_log.csv"));
    joined.extend(csv_rows(&rest.join("train_log.csv")));
    assert_eq!(joined, csv_rows(&full.join("train_log.csv")));

    let o = train(&tmp.path().join("x"), &["--resume", s(&half.join("checkpoint.ckpt")), "--iters", "3"]);
    assert_eq!(code(&o), 2);
}

/// A checkpoint trained for 40 iterations, shared by the extraction and
/// evaluation tests.
fn trained() -> &'static Path {
    static P: OnceLock<(TempDir, PathBuf)> = OnceLock::new();
    &P.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("run");
        ok(train(&out, &["--iters", "40"]));
        let ckpt = out.join("checkpoint.ckpt");
        (tmp, ckpt)
    })
    .1
}

fn ply_vertices(path: &Path) -> usize {
    let bytes = std::fs::read(path).unwrap();
    let text = String::from_utf8_lossy(&bytes);
    let line = text.lines().find(|l| l.starts_with("element vertex")).unwrap();
    line.split_whitespace().nth(2).unwrap().parse().unwrap()
}

#[test]
fn extract_formats_and_voxel_monotonicity() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = s(trained());
    let coarse = tmp.path().join("coarse").join("mesh.ply");
    let fine = tmp.path().join("fine").join("mesh.ply");
    ok(run(&["extract", "--checkpoint", ckpt, "--data", s(&f.data), "--out", s(&coarse), "--voxel", "0.1"]));
    ok(run(&["extract", "--checkpoint", ckpt, "--data", s(&f.data), "--out", s(&fine), "--voxel", "0.05"]));
    let (nc, nf) = (ply_vertices(&coarse), ply_vertices(&fine));
    assert!(nc > 0 && nf >= nc, "coarse {nc} fine {nf}");
    assert_eq!(manifests(coarse.parent().unwrap()), 1);

    let obj = tmp.path().join("obj").join("mesh.obj");
    ok(run(&["extract", "--checkpoint", ckpt, "--data", s(&f.data), "--out", s(&obj), "--voxel", "0.1"]));
    assert!(std::fs::read_to_string(&obj).unwrap().lines().any(|l| l.starts_with("f ")));

    let o = run(&["extract", "--checkpoint", ckpt, "--data", s(&f.data), "--out", s(&tmp.path().join("m.stl"))]);
    assert_eq!(code(&o), 2);
    let o = run(&["extract", "--checkpoint", ckpt, "--data", s(&f.data), "--out", s(&coarse), "--voxel", "0.1"]);
    assert_eq!(code(&o), 3);
    let o = run(&["extract", "--checkpoint", ckpt, "--data", s(&f.data), "--out", s(&coarse), "--voxel", "-1"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn extract_from_untrained_checkpoint_warns() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("run");
    ok(train(&run_dir, &["--iters", "10", "--until", "0"]));
    let mesh = tmp.path().join("mesh").join("m.ply");
    let o = ok(run(&["extract", "--checkpoint", s(&run_dir.join("checkpoint.ckpt")), "--data", s(&f.data), "--out", s(&mesh)]));
    assert!(stderr(&o).contains("untrained"));
    assert!(mesh.exists());
}

#[test]
fn eval_reports_all_metrics() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("eval");
    ok(run(&["eval", "--checkpoint", s(trained()), "--data", s(&f.data), "--out", s(&out), "--config", s(&f.eval_cfg)]));
    let text = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let row = &csv_rows(&out.join("metrics.csv"))[0];
    for key in ["psnr", "ssim", "f1", "chamfer"] {
        let i = header.iter().position(|h| *h == key).unwrap();
        assert!(row[i].parse::<f64>().is_ok_and(f64::is_finite), "{key} = {}", row[i]);
    }
    let o = run(&["eval", "--checkpoint", s(trained()), "--data", s(&f.data), "--out", s(&tmp.path().join("e2")), "--config", s(&tmp.path().join("missing.toml"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn eval_without_analytic_scene_marks_surface_unavailable() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(run(&["synth", "--scene", "sphere", "--views", "9", "--res", "24", "--points", "300", "--out", s(&data)]));
    let path = data.join("scene.json");
    let mut json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    json["scene"] = serde_json::Value::Null;
    std::fs::write(&path, serde_json::to_string(&json).unwrap()).unwrap();
    let out = tmp.path().join("eval");
    ok(run(&["eval", "--checkpoint", s(trained()), "--data", s(&data), "--out", s(&out), "--config", s(&f.eval_cfg)]));
    let row = &csv_rows(&out.join("metrics.csv"))[0];
    assert_eq!(row.iter().filter(|v| *v == "unavailable").count(), 4);
}

#[test]
fn prune_study_rows_and_plot() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("prune");
    ok(run(&["study", "prune", "--checkpoint", s(trained()), "--data", s(&f.data), "--fractions", "100,50,10", "--out", s(&out), "--config", s(&f.eval_cfg)]));
    let rows = csv_rows(&out.join("prune.csv"));
    assert_eq!(rows.len(), 6);
    for label in ["drop-largest-cd", "drop-smallest-cd"] {
        let settings: Vec<&str> = rows.iter().filter(|r| r[1] == label).map(|r| r[2].as_str()).collect();
        assert_eq!(settings, ["100", "50", "10"]);
    }
    assert!(std::fs::read_to_string(out.join("prune.svg")).unwrap().starts_with("<svg"));
    let o = run(&["study", "prune", "--checkpoint", s(trained()), "--data", s(&f.data), "--fractions", "100,150", "--out", s(&tmp.path().join("p2"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn ablation_rows_follow_the_arms() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("ablate");
    ok(run(&["study", "ablate", "--data", s(&f.data), "--arms", "a,b,c,d", "--iters", "8", "--out", s(&out), "--config", s(&f.eval_cfg)]));
    let rows = csv_rows(&out.join("ablate.csv"));
    let labels: Vec<&str> = rows.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(labels, ["a", "b", "c", "d"]);
    let o = run(&["study", "ablate", "--data", s(&f.data), "--arms", "a,e", "--out", s(&tmp.path().join("x"))]);
    assert_eq!(code(&o), 2);
}
