use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
[synth]
num_scenes = 12
width = 128
height = 128
count_range = [0, 30]

[compression]
grid_size = 8
hist_len = 16

[arch]
grid_size = 8
hist_len = 16
k = 2
enc2d = [4, 8]
enc1d = [4]
local_enc = [4]
pn_hidden = 8
pc_hidden = 8
count_scale = 20.0

[nms]
k = 2
step = 0.1

[train]
epochs = 2
batch_size = 4
lr = 1e-3
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("cfg.toml");
    if !cfg.exists() {
        std::fs::write(&cfg, CONFIG).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_crowd-hat"))
        .current_dir(dir)
        .arg("-c")
        .arg(&cfg)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(out.status.success(), "{args:?} failed: {err}");
    String::from_utf8(out.stdout).unwrap()
}

fn fails(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(!out.status.success(), "{args:?} should fail");
    String::from_utf8(out.stderr).unwrap()
}

#[test]
fn stages_chain_through_files() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--out", "scenes.jsonl"]);
    assert_eq!(
        std::fs::read_to_string(d.join("scenes.jsonl"))
            .unwrap()
            .lines()
            .count(),
        12
    );

    ok(
        d,
        &["compress", "--scenes", "scenes.jsonl", "--out", "features"],
    );
    assert_eq!(std::fs::read_dir(d.join("features")).unwrap().count(), 12);

    ok(
        d,
        &["search", "--scenes", "scenes.jsonl", "--out", "samples"],
    );
    ok(
        d,
        &[
            "train",
            "--samples",
            "samples",
            "--model",
            "out/model.bin",
            "--loss-curve",
            "out/loss.csv",
        ],
    );
    assert!(d.join("out/model.bin").is_file());
    assert_eq!(
        std::fs::read_to_string(d.join("out/loss.csv"))
            .unwrap()
            .lines()
            .count(),
        3
    );

    ok(
        d,
        &[
            "infer",
            "--scenes",
            "scenes.jsonl",
            "--model",
            "out/model.bin",
            "--out",
            "pred.jsonl",
        ],
    );
    let table = ok(
        d,
        &[
            "eval",
            "--predictions",
            "pred.jsonl",
            "--truth",
            "scenes.jsonl",
            "--csv",
            "m.csv",
            "--sigma",
            "8",
        ],
    );
    for metric in ["mae", "rmse", "f1", "ap", "f1_1_100px"] {
        assert!(
            table
                .lines()
                .any(|l| l.split_whitespace().nth(1) == Some(metric)),
            "{metric} missing:\n{table}"
        );
    }
    assert!(d.join("m.csv").is_file());

    ok(
        d,
        &["dump-features", "--scenes", "scenes.jsonl", "--out", "dump"],
    );
    assert!(std::fs::read_dir(d.join("dump")).unwrap().count() >= 4);
}

#[test]
fn pipeline_prints_a_table() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(
        tmp.path(),
        &[
            "pipeline",
            "--workspace",
            "ws",
            "--set",
            "synth.num_scenes=10",
        ],
    );
    assert!(out.contains("crowd_hat"), "{out}");
    assert!(out.contains("baseline_fixed_nms"));
    assert!(tmp.path().join("ws/metrics.csv").is_file());
}

#[test]
fn errors_name_the_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let e = fails(
        d,
        &[
            "infer",
            "--scenes",
            "nope.jsonl",
            "--model",
            "m.json",
            "--out",
            "p.jsonl",
        ],
    );
    assert!(e.contains("[infer]") && e.contains("nope.jsonl"), "{e}");

    let e = fails(d, &["synth", "--out", "x.jsonl", "--set", "arch.k=3"]);
    assert!(e.contains("configuration"), "{e}");

    std::fs::create_dir(d.join("empty")).unwrap();
    let e = fails(d, &["train", "--samples", "empty", "--model", "m.json"]);
    assert!(e.contains("[train]") && e.contains("empty"), "{e}");

    fails(
        d,
        &[
            "eval",
            "--predictions",
            "p",
            "--truth",
            "t",
            "--sigma",
            "1",
            "--iou",
            "0.5",
        ],
    );
}
