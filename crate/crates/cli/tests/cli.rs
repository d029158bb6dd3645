use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name)
}

fn storymaker(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_storymaker"))
        .args(args)
        .env("NO_COLOR", "1")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "status {:?}\n{}", out.status, String::from_utf8_lossy(&out.stderr));
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_reuses_one_bundle_for_every_prompt() {
    let dir = tempfile::tempdir().unwrap();
    let base = fixture("base");
    let prompts = [
        "a person waving in the meadow",
        "one person walking, beach",
        "beach scene with one person cheering",
        "a person standing in the snow",
        "one person waving, city",
    ];
    let mut args = vec!["generate", "--checkpoint", s(&base), "--identity", "17", "--sample-steps", "2", "--out", s(dir.path())];
    for p in &prompts {
        args.extend(["--prompt", p]);
    }
    let out = storymaker(&args);
    ok(&out);
    for i in 0..prompts.len() {
        assert!(dir.path().join(format!("image_{i:03}.png")).exists());
    }
    let manifest = json(&dir.path().join("run_manifest.json"));
    let hash = manifest["config"]["bundle_sha256"].as_str().unwrap().to_string();
    let log = String::from_utf8_lossy(&out.stderr);
    let generated: Vec<&str> = log.lines().filter(|l| l.contains("generated")).collect();
    assert_eq!(generated.len(), prompts.len());
    assert!(generated.iter().all(|l| l.contains(&hash)), "{log}");
    assert!(manifest["checkpoints"]["encoders"].is_string());
}

#[test]
fn more_than_two_identities_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let base = fixture("base");
    let out = storymaker(&[
        "generate", "--checkpoint", s(&base), "--identity", "1", "--identity", "2", "--identity", "3", "--prompt", "two people waving", "--out", s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn eval_is_reproducible_and_self_check_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let base = fixture("base");
    let run = |name: &str| {
        let path = dir.path().join(name);
        ok(&storymaker(&[
            "eval", "--checkpoint", s(&base), "--prompts-per-ref", "1", "--sample-steps", "2", "--pair-scenes", "1", "--out", s(&path),
        ]));
        std::fs::read(path).unwrap()
    };
    let (a, b) = (run("a.json"), run("b.json"));
    assert_eq!(a, b);
    let report: Value = serde_json::from_slice(&a).unwrap();
    for key in ["face_sim", "char_sim", "clip_t_analog", "attn_iou"] {
        assert!(report[key].as_f64().unwrap().is_finite(), "{key}");
    }

    let out = storymaker(&["eval", "--checkpoint", s(&base), "--self-check"]);
    ok(&out);
    let me: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((me["face_sim"].as_f64().unwrap() - 1.0).abs() < 1e-5);
    assert!((me["char_sim"].as_f64().unwrap() - 1.0).abs() < 1e-5);
}

#[test]
fn inspect_attn_writes_maps_and_leakage() {
    let dir = tempfile::tempdir().unwrap();
    let base = fixture("base");
    let out = storymaker(&["inspect-attn", "--checkpoint", s(&base), "--out", s(dir.path())]);
    ok(&out);
    for layer in 0..3 {
        for region in 0..3 {
            assert!(dir.path().join(format!("layer{layer}_region{region}.png")).exists());
        }
    }
    let leakage = json(&dir.path().join("leakage.json"));
    assert!(leakage.is_object());
    assert!(dir.path().join("run_manifest.json").exists());
    assert!(String::from_utf8_lossy(&out.stdout).contains("layer 0"));
}

#[test]
fn train_then_resume_matches_a_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("train.toml");
    std::fs::write(&config, "total_steps = 2\nbatch_size = 2\nphase_boundary = 1\ndataset_size = 8\ncheckpoint_interval = 1\n").unwrap();
    let straight = dir.path().join("straight");
    ok(&storymaker(&["train", "--config", s(&config), "--out", s(&straight)]));
    let csv = std::fs::read_to_string(straight.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(json(&straight.join("run_manifest.json"))["checkpoints"]["final"].is_string());

    let resumed = dir.path().join("resumed");
    ok(&storymaker(&["train", "--resume", s(&straight.join("checkpoints/step_000001")), "--out", s(&resumed)]));
    let tensors = |d: &Path| json(&d.join("final/manifest.json"))["tensors"].clone();
    assert_eq!(tensors(&straight), tensors(&resumed));
}
