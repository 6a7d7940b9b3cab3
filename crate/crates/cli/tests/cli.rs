use serde_json::Value;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use structinpaint::imageops::{load_image, save_png, Plane};
use structinpaint::maskgen::{save_mask_png, Mask};
use structinpaint::tensor::npy::read_plane;
use structinpaint::trainer::{DataSource, SynthSpec, TrainConfig};

fn sinpaint(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sinpaint"))
        .args(args)
        .env_remove("SINPAINT_SEED")
        .env_remove("SINPAINT_OUT")
        .env_remove("SINPAINT_CONFIG")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = sinpaint(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_rgb(path: &Path, h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) {
    save_png(&Plane::from_fn(h, w, 3, f), path).unwrap();
}

fn tiny_config(dir: &Path) -> PathBuf {
    let mut cfg = TrainConfig::default();
    cfg.generator.image_size = 32;
    cfg.generator.base_channels = 4;
    cfg.generator.residual_blocks = 1;
    cfg.discriminator.base_channels = 4;
    cfg.batch_size = 2;
    cfg.steps = 2;
    cfg.holdout = 4;
    cfg.seed = 5;
    cfg.data = DataSource::Synthetic(SynthSpec { count: 12, size: 32, shapes: (2, 4) });
    cfg.checkpoint_every = 0;
    let path = dir.join("tiny.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    path
}

/// One trained checkpoint shared by the inpainting tests.
fn trained() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        ok(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("run"))]);
        dir
    })
    .path()
}

fn files_in(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    v.sort();
    v
}

#[test]
fn extract_structure_of_a_constant_image() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("flat.png");
    write_rgb(&img, 12, 10, |_, _, _| 0.4);
    let out = dir.path().join("out");
    ok(&["extract-structure", "--in", s(&img), "--out", s(&out)]);
    let (shape, data) = read_plane(&out.join("flat_grad.npy")).unwrap();
    assert_eq!(shape, (12, 10, 6));
    assert!(data.iter().all(|&v| v == 0.0));
    let edges = load_image(&out.join("flat_edges.png")).unwrap();
    assert!(edges.data().iter().all(|&v| v == 0.0));
}

#[test]
fn extract_structure_over_a_directory_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    fs::create_dir(&input).unwrap();
    for i in 0..3 {
        write_rgb(&input.join(format!("im{i}.png")), 16, 16, |y, x, c| if x + i > 8 { 0.9 } else { 0.1 * (y + c) as f64 / 16.0 });
    }
    fs::write(input.join("notes.txt"), "ignored").unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["extract-structure", "--in", s(&input), "--out", s(&a)]);
    ok(&["extract-structure", "--in", s(&input), "--out", s(&b), "--jobs", "1"]);
    let names = files_in(&a);
    assert_eq!(names.len(), 9);
    assert_eq!(names, files_in(&b));
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n}");
    }
}

#[test]
fn unreadable_input_fails_with_a_per_file_message() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    fs::create_dir(&input).unwrap();
    write_rgb(&input.join("good.png"), 8, 8, |_, x, _| x as f64 / 8.0);
    fs::write(input.join("bad.png"), b"garbage").unwrap();
    let out = sinpaint(&["extract-structure", "--in", s(&input), "--out", s(&dir.path().join("o"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.png"));
    assert!(dir.path().join("o/good_grad.npy").exists());
}

#[test]
fn masks_follow_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        ok(&["make-masks", "--count", "3", "--size", "32", "--seed", seed, "--out", s(&out)]);
        (0..3).map(|i| fs::read(out.join(format!("mask_{i:05}.png"))).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(run("a", "1"), run("b", "1"));
    assert_ne!(run("a", "1"), run("c", "2"));
    let regular = dir.path().join("r");
    ok(&["make-masks", "--count", "1", "--size", "16", "--kind", "regular", "--out", s(&regular)]);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(regular.join("masks.json")).unwrap()).unwrap();
    assert_eq!(manifest["masks"][0]["area_ratio"], 0.25);
}

#[test]
fn seed_precedence_is_flag_then_env_then_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let seed_of = |extra_env: Option<&str>, flag: Option<&str>| {
        let out = dir.path().join("m");
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_sinpaint"));
        cmd.args(["make-masks", "--count", "1", "--size", "16", "--config", s(&cfg), "--out", s(&out)]);
        cmd.env_remove("SINPAINT_SEED");
        if let Some(e) = extra_env {
            cmd.env("SINPAINT_SEED", e);
        }
        if let Some(f) = flag {
            cmd.args(["--seed", f]);
        }
        assert!(cmd.output().unwrap().status.success());
        let m: Value = serde_json::from_str(&fs::read_to_string(out.join("masks.json")).unwrap()).unwrap();
        m["seed"].as_u64().unwrap()
    };
    assert_eq!(seed_of(None, None), 5);
    assert_eq!(seed_of(Some("6"), None), 6);
    assert_eq!(seed_of(Some("6"), Some("7")), 7);
}

#[test]
fn synth_data_writes_the_requested_images() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("synth");
    let a = ok(&["synth-data", "--count", "4", "--size", "32", "--seed", "3", "--out", s(&out), "--json"]);
    let b = ok(&["synth-data", "--count", "4", "--size", "32", "--seed", "3", "--out", s(&out), "--json"]);
    let (a, b): (Value, Value) =
        (serde_json::from_slice(&a.stdout).unwrap(), serde_json::from_slice(&b.stdout).unwrap());
    assert_eq!(a["digest"], b["digest"]);
    assert_eq!(files_in(&out).len(), 4);
    assert_eq!(load_image(&out.join("img_00000.png")).unwrap().shape(), (32, 32, 3));
}

#[test]
fn unknown_flags_are_rejected() {
    let out = sinpaint(&["make-masks", "--bogus"]);
    assert!(!out.status.success());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn errors_are_json_on_stderr_with_json_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = sinpaint(&[
        "inpaint", "--ckpt", s(&dir.path().join("missing")), "--in", "x.png", "--mask", "m.png", "--out", "o.png",
        "--json",
    ]);
    assert!(!out.status.success());
    let err: Value = serde_json::from_slice(&out.stderr).expect("stderr is JSON");
    assert!(err["error"].as_str().unwrap().contains("missing"));
}

#[test]
fn train_writes_checkpoints_and_log() {
    let run = trained().join("run");
    for f in ["config.json", "log.jsonl", "final/model.json", "final/state.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(run.join("log.jsonl")).unwrap();
    assert!(!log.trim().is_empty());
    for line in log.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert!(v["total"].is_number());
    }
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let full = ok(&["train", "--config", s(&cfg), "--steps", "3", "--out", s(&dir.path().join("full")), "--json"]);
    ok(&["train", "--config", s(&cfg), "--steps", "1", "--out", s(&dir.path().join("part"))]);
    let resumed = ok(&[
        "train", "--config", s(&cfg), "--steps", "3", "--resume", s(&dir.path().join("part/final")), "--out",
        s(&dir.path().join("rest")), "--json",
    ]);
    let (a, b): (Value, Value) =
        (serde_json::from_slice(&full.stdout).unwrap(), serde_json::from_slice(&resumed.stdout).unwrap());
    assert_eq!(a["digest"], b["digest"]);
    assert_eq!(a["step"], 3);
}

fn inpaint_inputs(dir: &Path, size: usize, mask: &Mask) -> (PathBuf, PathBuf) {
    let img = dir.join(format!("img{size}.png"));
    write_rgb(&img, size, size, |y, x, c| ((x * 7 + y * 3 + c * 50) % 256) as f64 / 255.0);
    let m = dir.join(format!("mask{size}.png"));
    save_mask_png(mask, &m).unwrap();
    (img, m)
}

#[test]
fn inpainting_with_an_empty_mask_returns_the_input() {
    let dir = tempfile::tempdir().unwrap();
    let (img, mask) = inpaint_inputs(dir.path(), 32, &Mask::empty(32, 32));
    let out = dir.path().join("out.png");
    let ckpt = trained().join("run/final");
    ok(&["inpaint", "--ckpt", s(&ckpt), "--in", s(&img), "--mask", s(&mask), "--out", s(&out)]);
    let (a, b) = (load_image(&img).unwrap(), load_image(&out).unwrap());
    assert_eq!(a, b);
}

#[test]
fn inpainting_keeps_known_pixels_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let hole = Mask::from_plane(Plane::from_fn(32, 32, 1, |y, x, _| ((8..20).contains(&y) && (4..28).contains(&x)) as u8 as f64)).unwrap();
    let (img, mask) = inpaint_inputs(dir.path(), 32, &hole);
    let ckpt = trained().join("run/final");
    let (o1, o2) = (dir.path().join("o1.png"), dir.path().join("o2.png"));
    let structure = dir.path().join("structure");
    ok(&[
        "inpaint", "--ckpt", s(&ckpt), "--in", s(&img), "--mask", s(&mask), "--out", s(&o1), "--dump-structure",
        s(&structure),
    ]);
    ok(&["inpaint", "--ckpt", s(&ckpt), "--in", s(&img), "--mask", s(&mask), "--out", s(&o2)]);
    assert_eq!(fs::read(&o1).unwrap(), fs::read(&o2).unwrap());
    let (a, b) = (load_image(&img).unwrap(), load_image(&o1).unwrap());
    for y in 0..32 {
        for x in 0..32 {
            if !hole.is_missing(y, x) {
                for c in 0..3 {
                    assert_eq!(a.get(y, x, c), b.get(y, x, c));
                }
            }
        }
    }
    let dumped = files_in(&structure);
    assert_eq!(dumped.iter().filter(|f| f.ends_with(".npy")).count(), 3);
    let (shape, _) = read_plane(&structure.join("structure_s2.npy")).unwrap();
    assert_eq!(shape, (32, 32, 6));
}

#[test]
fn inpainting_a_wrong_size_names_both_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let (img, mask) = inpaint_inputs(dir.path(), 24, &Mask::empty(24, 24));
    let ckpt = trained().join("run/final");
    let out = sinpaint(&["inpaint", "--ckpt", s(&ckpt), "--in", s(&img), "--mask", s(&mask), "--out", "x.png"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("24x24") && err.contains("32x32"), "{err}");
}

#[test]
fn evaluate_identical_sets_and_skips_unmatched_files() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, gt) = (dir.path().join("pred"), dir.path().join("gt"));
    fs::create_dir(&pred).unwrap();
    fs::create_dir(&gt).unwrap();
    for i in 0..3 {
        let f = |y: usize, x: usize, c: usize| ((x * (i + 2) + y * 5 + c * 40) % 256) as f64 / 255.0;
        write_rgb(&pred.join(format!("{i}.png")), 40, 40, f);
        write_rgb(&gt.join(format!("{i}.png")), 40, 40, f);
    }
    write_rgb(&pred.join("orphan.png"), 40, 40, |_, _, _| 0.5);
    write_rgb(&gt.join("lonely.png"), 40, 40, |_, _, _| 0.5);
    let report = dir.path().join("report.json");
    ok(&["evaluate", "--pred", s(&pred), "--gt", s(&gt), "--out", s(&report)]);
    let r: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["report_version"], 1);
    assert_eq!(r["count"], 3);
    assert_eq!(r["means"]["psnr"], 99.0);
    assert_eq!(r["means"]["l1_percent"], 0.0);
    assert_eq!(r["means"]["ssim"], 1.0);
    let skipped: Vec<&str> = r["skipped"].as_array().unwrap().iter().map(|s| s["name"].as_str().unwrap()).collect();
    assert_eq!(skipped, ["orphan.png", "lonely.png"]);
    assert!(dir.path().join("report.txt").exists());
}

#[test]
fn gradcheck_passes_and_detects_a_corrupted_gradient() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("gc.json");
    ok(&["gradcheck", "--module", "tensor", "--out", s(&report)]);
    let r: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["passed"], true);
    let bad = sinpaint(&["gradcheck", "--module", "tensor", "--inject-fault"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
    assert!(!sinpaint(&["gradcheck", "--module", "nope"]).status.success());
}

#[test]
fn ablate_emits_a_four_row_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("ablation");
    let res = ok(&["ablate", "--config", s(&cfg), "--steps", "1", "--out", s(&out)]);
    let table = String::from_utf8_lossy(&res.stdout);
    assert_eq!(table.lines().count(), 5, "{table}");
    assert!(out.join("ablation.json").exists());
}
