use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "pretrain": {"steps": 3, "batch_size": 2, "denoiser": {"width": 8, "depth": 1, "time_dim": 8}},
  "finetune": {"steps": 2, "batch_size": 2, "class_images": 2, "class_sample_steps": 2}
}"#;

fn dreampaint(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dreampaint"))
        .args(args)
        .current_dir(cwd)
        .env("DREAMPAINT_RUNS", cwd.join("runs"))
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(cwd: &Path, args: &[&str]) -> String {
    let out = dreampaint(cwd, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Exit status and the `{code, message}` line a failing command prints last.
fn failure(out: &Output) -> (i32, String) {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().unwrap_or_default();
    let v: Value = serde_json::from_str(last).unwrap_or_else(|e| panic!("stderr `{stderr}`: {e}"));
    assert!(v["message"].as_str().is_some_and(|m| !m.is_empty()));
    (out.status.code().unwrap(), v["code"].as_str().unwrap().to_string())
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn missing_token_is_an_argument_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dreampaint(
        dir.path(),
        &["finetune", "--base", "b.dpck", "--item", "item", "--class-noun", "mug", "--out", "r"],
    );
    assert_eq!(failure(&out), (2, "E_ARGS".into()));
    let out = dreampaint(dir.path(), &["inpaint", "--ckpt", "x", "--image", "y", "--mask", "z", "--out", "o", "--guidance", "ten"]);
    assert_eq!(failure(&out), (2, "E_ARGS".into()));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"finetune": {"learning_rat": 1}}"#).unwrap();
    let out = dreampaint(dir.path(), &["--config", "c.json", "dataset", "gen", "--out", "d"]);
    assert_eq!(failure(&out), (2, "E_CONFIG".into()));
    assert!(!dir.path().join("d").exists());
}

#[test]
fn help_lists_flags_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let help = ok(dir.path(), &["inpaint", "--help"]);
    assert!(help.contains("--guidance <GUIDANCE>"));
    assert!(help.contains("[default: 10]"), "{help}");
    let help = ok(dir.path(), &["finetune", "--help"]);
    for flag in ["--token", "--class-noun", "--steps", "--lr", "--prior-preservation", "--freeze-text-encoder", "--out"] {
        assert!(help.contains(flag), "{flag} missing from\n{help}");
    }
    assert!(help.contains("paper-scale 500"));
    for cmd in ["pretrain", "eval", "masksweep", "serve"] {
        let help = ok(dir.path(), &[cmd, "--help"]);
        assert!(help.contains("[default:"), "{cmd}");
    }
    ok(dir.path(), &["dataset", "gen", "--help"]);
}

#[test]
fn unreadable_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("junk.dpck"), b"not a checkpoint").unwrap();
    let out = dreampaint(
        dir.path(),
        &["inpaint", "--ckpt", "junk.dpck", "--image", "a.png", "--mask", "b.png", "--out", "o.png"],
    );
    assert_eq!(failure(&out), (3, "E_DATA".into()));
}

#[test]
fn tiny_workflow_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    std::fs::write(cwd.join("tiny.json"), TINY).unwrap();
    let cfg = ["--config", "tiny.json"];
    let with = |args: &[&str]| -> Vec<String> { cfg.iter().chain(args).map(|s| s.to_string()).collect() };
    let run = |args: &[&str]| {
        let v = with(args);
        ok(cwd, &v.iter().map(String::as_str).collect::<Vec<_>>())
    };

    run(&["dataset", "gen", "--out", "data", "--items", "2", "--scenes", "1", "--views", "3", "--corpus", "6", "--rare-items", "1", "--seed", "4"]);
    let manifest = read_json(&cwd.join("data/manifest.json"));
    assert_eq!(manifest["items"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["triples"].as_array().unwrap().len(), 4);

    // A bare run id lands under DREAMPAINT_RUNS.
    run(&["pretrain", "--data", "data", "--out", "base", "--seed", "1"]);
    let base = cwd.join("runs/base");
    assert!(base.join("checkpoint.dpck").is_file());
    assert!(!base.join(".lock").exists());
    let echoed = read_json(&base.join("config.json"));
    assert_eq!(echoed["command"], "pretrain");
    assert_eq!(echoed["config"]["steps"], 3);
    assert_eq!(echoed["config"]["seed"], 1);
    assert_eq!(echoed["config"]["denoiser"]["width"], 8);
    assert_eq!(std::fs::read_to_string(base.join("loss_log.csv")).unwrap().lines().count(), 4);

    for (i, item) in manifest["items"].as_array().unwrap().iter().enumerate() {
        let id = item["item_id"].as_str().unwrap();
        let mut args = vec![
            "finetune", "--base", "runs/base/checkpoint.dpck",
            "--token", item["token"].as_str().unwrap(),
            "--class-noun", item["class_noun"].as_str().unwrap(),
            "--out", id,
        ];
        let item_dir = format!("data/catalog/{id}");
        args.extend(["--item", item_dir.as_str()]);
        if i == 1 {
            args.extend(["--prior-preservation", "--freeze-text-encoder", "--lr", "0.01"]);
        }
        run(&args);
        let run_dir = cwd.join("runs").join(id);
        assert!(run_dir.join("samples/preview.png").is_file());
        let echoed = read_json(&run_dir.join("config.json"));
        assert_eq!(echoed["config"]["steps"], 2);
        assert_eq!(echoed["profile"], "toy");
        if i == 1 {
            assert_eq!(echoed["config"]["prior_preservation"], true);
            assert_eq!(echoed["config"]["finetune_text_encoder"], false);
            assert_eq!(echoed["config"]["learning_rate"], 0.01);
            assert!(run_dir.join("class_priors").is_dir());
        }
    }

    // Inpaint: deterministic, sized like the input, composited outside the mask.
    let item0 = manifest["items"][0]["item_id"].as_str().unwrap();
    let ckpt = format!("runs/{item0}/checkpoint.dpck");
    let mask = dreampaint_mask(cwd);
    for out in ["a.png", "b.png"] {
        run(&["inpaint", "--ckpt", &ckpt, "--image", "data/scenes/scene_00.png", "--mask", &mask, "--seed", "3", "--steps", "10", "--out", out]);
    }
    let a = std::fs::read(cwd.join("a.png")).unwrap();
    assert_eq!(a, std::fs::read(cwd.join("b.png")).unwrap());
    assert_eq!(&a[1..4], b"PNG");
    let out = dreampaint(cwd, &["inpaint", "--ckpt", "runs/base/checkpoint.dpck", "--image", "data/scenes/scene_00.png", "--mask", &mask, "--out", "c.png"]);
    assert_eq!(failure(&out), (2, "E_ARGS".into()));
    run(&["inpaint", "--ckpt", "runs/base/checkpoint.dpck", "--prompt", "a red shirt", "--image", "data/scenes/scene_00.png", "--mask", &mask, "--steps", "5", "--out", "c.png"]);

    let eval = run(&["eval", "--manifest", "data/manifest.json", "--runs", "runs", "--scorer", "random", "--allow-weak-scorer", "--steps", "5", "--out", "report.json"]);
    assert!(eval.contains("dreampaint") && eval.contains("text_only"), "{eval}");
    let report = read_json(&cwd.join("report.json"));
    for m in ["dreampaint", "text_only"] {
        let scores = report["methods"][m]["scores"].as_array().unwrap();
        assert_eq!(scores.len(), 2);
        for s in scores {
            assert!((-1.0..=1.0).contains(&s["score"].as_f64().unwrap()));
        }
    }
    assert_eq!(read_json(&cwd.join("report.config.json"))["config"]["guidance"], 10.0);
    let first = std::fs::read(cwd.join("report.json")).unwrap();
    run(&["eval", "--manifest", "data/manifest.json", "--runs", "runs", "--scorer", "random", "--allow-weak-scorer", "--steps", "5", "--out", "report.json"]);
    assert_eq!(first, std::fs::read(cwd.join("report.json")).unwrap());

    let item_dir = format!("data/catalog/{item0}");
    run(&["masksweep", "--item", &item_dir, "--scene", "data/scenes/scene_00.png", "--scales", "3.0,1.0,2.0", "--ckpt", &ckpt, "--scorer", "random", "--out", "sweep.json"]);
    let sweep = read_json(&cwd.join("sweep.json"));
    let rows = sweep["rows"].as_array().unwrap();
    let scales: Vec<f64> = rows.iter().map(|r| r["scale"].as_f64().unwrap()).collect();
    assert_eq!(scales, [1.0, 2.0, 3.0]);
    let pixels: Vec<u64> = rows.iter().map(|r| r["mask_pixels"].as_u64().unwrap()).collect();
    assert!(pixels[0] < pixels[1] && pixels[1] <= pixels[2], "{pixels:?}");

    // Missing per-item run.
    std::fs::remove_file(cwd.join("runs").join(item0).join("checkpoint.dpck")).unwrap();
    let out = dreampaint(cwd, &["eval", "--manifest", "data/manifest.json", "--scorer", "random", "--allow-weak-scorer", "--out", "r2.json"]);
    assert_eq!(failure(&out), (3, "E_DATA".into()));
}

/// Writes a centred rectangle mask PNG and returns its file name.
fn dreampaint_mask(cwd: &Path) -> String {
    use dreampaint_core::MaskShape;
    MaskShape::Rect {
        cy: 16.0,
        cx: 16.0,
        half_h: 6.0,
        half_w: 5.0,
    }
    .rasterize(32, 32)
    .write_png(cwd.join("mask.png"))
    .unwrap();
    "mask.png".into()
}

#[test]
fn paper_scale_profile_is_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    ok(cwd, &["dataset", "gen", "--out", "data", "--items", "1", "--scenes", "1", "--views", "3", "--corpus", "2", "--rare-items", "0"]);
    std::fs::write(cwd.join("tiny.json"), TINY).unwrap();
    ok(cwd, &["--config", "tiny.json", "pretrain", "--data", "data", "--out", "base"]);
    // The file sets two steps; a profile flag does not override explicit file values.
    ok(cwd, &[
        "--config", "tiny.json", "--profile", "paper-scale", "finetune", "--base", "runs/base/checkpoint.dpck",
        "--item", "data/catalog/item_00", "--token", "zqxv", "--class-noun", "mug", "--out", "ft",
    ]);
    let echoed = read_json(&cwd.join("runs/ft/config.json"));
    assert_eq!(echoed["profile"], "paper-scale");
    assert_eq!(echoed["config"]["learning_rate"], 5e-6);
    assert_eq!(echoed["config"]["steps"], 2);
}
