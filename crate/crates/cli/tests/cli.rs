use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use interformer::skeleton::load_dataset;
use interformer_cli::config::{merge, parse_assignment, resolve};
use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_interformer"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: [&str; 6] = [
    "--samples-per-class",
    "3",
    "--test-samples-per-class",
    "2",
    "--joints",
    "5",
];

/// Synthesizes a small dataset and trains a few steps under `dir/out`.
fn small_pipeline(dir: &Path) {
    ok(dir, &[&["--seed", "5", "synth"][..], &SMALL].concat());
    ok(
        dir,
        &["--seed", "5", "train", "--steps", "4", "--batch-size", "4"],
    );
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_file() {
            out.push((p.clone(), std::fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(bin().arg("--help").output().unwrap().status.code(), Some(0));
    assert_eq!(
        bin().arg("--version").output().unwrap().status.code(),
        Some(0)
    );
    assert_eq!(
        bin()
            .args(["train", "--help"])
            .output()
            .unwrap()
            .status
            .code(),
        Some(0)
    );
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["frobnicate"],
        vec!["synth", "--samples-per-class", "zero"],
        vec!["--set", "model.nope=1", "synth"],
        vec!["--set", "no_equals_sign", "synth"],
        vec!["synth", "--samples-per-class", "0"],
        vec!["synth", "--classes", "push,dance"],
        vec!["train", "--setup", "S9"],
    ] {
        let out = run(dir.path(), &args);
        assert_eq!(
            out.status.code(),
            Some(1),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn synth_writes_parseable_reproducible_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["--seed", "9", "--out", "a", "synth"]);
    for class in ["push", "wave", "kick", "approach", "still"] {
        assert!(stdout.contains(&format!("{class}=40")), "{stdout}");
        assert!(stdout.contains(&format!("{class}=10")), "{stdout}");
    }
    let train = load_dataset(&dir.path().join("a/train.json")).unwrap();
    let test = load_dataset(&dir.path().join("a/test.json")).unwrap();
    assert_eq!(train.samples.len(), 200);
    assert_eq!(test.samples.len(), 50);
    assert_ne!(train.samples[0], test.samples[0]);
    assert!(dir.path().join("a/config_used.json").exists());

    ok(dir.path(), &["--seed", "9", "--out", "b", "synth"]);
    for f in ["train.json", "test.json", "config_used.json"] {
        let (x, y) = (
            std::fs::read(dir.path().join("a").join(f)).unwrap(),
            std::fs::read(dir.path().join("b").join(f)).unwrap(),
        );
        if f == "config_used.json" {
            let (mut vx, mut vy) = (
                read_json(&dir.path().join("a").join(f)),
                read_json(&dir.path().join("b").join(f)),
            );
            vx["out"] = Value::Null;
            vy["out"] = Value::Null;
            assert_eq!(vx, vy);
        } else {
            assert_eq!(x, y, "{f}");
        }
    }
    ok(dir.path(), &["--seed", "10", "--out", "c", "synth"]);
    assert_ne!(
        std::fs::read(dir.path().join("a/train.json")).unwrap(),
        std::fs::read(dir.path().join("c/train.json")).unwrap()
    );
}

#[test]
fn config_precedence_defaults_file_flags() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("cfg.json");
    std::fs::write(
        &file,
        r#"{"train": {"steps": 7, "batch_size": 3}, "synth": {"joints": 5}}"#,
    )
    .unwrap();

    let cfg = resolve(Some(&file), &[]).unwrap();
    assert_eq!(
        (cfg.train.steps, cfg.train.batch_size, cfg.synth.joints),
        (7, 3, 5)
    );
    assert_eq!(cfg.model.n_layers, 2);

    let cfg = resolve(Some(&file), &[parse_assignment("train.steps=9").unwrap()]).unwrap();
    assert_eq!((cfg.train.steps, cfg.train.batch_size), (9, 3));

    std::fs::write(&file, r#"{"train": {"stepz": 7}}"#).unwrap();
    assert!(resolve(Some(&file), &[]).is_err());
    std::fs::write(&file, "[1, 2]").unwrap();
    assert!(resolve(Some(&file), &[]).is_err());
    assert!(resolve(Some(&dir.path().join("missing.json")), &[]).is_err());

    let mut base = json!({"a": {"b": 1, "c": 2}, "d": 3});
    merge(&mut base, json!({"a": {"c": 5}, "e": 6}));
    assert_eq!(base, json!({"a": {"b": 1, "c": 5}, "d": 3, "e": 6}));
    assert_eq!(
        parse_assignment("x.y=abc").unwrap(),
        ("x.y".to_string(), json!("abc"))
    );
    assert_eq!(parse_assignment("x=[1,2]").unwrap().1, json!([1, 2]));

    // the echoed configuration shows the merged result
    std::fs::write(&file, r#"{"synth": {"joints": 5, "samples_per_class": 2}, "data": {"test_samples_per_class": 2}}"#).unwrap();
    ok(
        dir.path(),
        &["--config", "cfg.json", "synth", "--samples-per-class", "3"],
    );
    let used = read_json(&dir.path().join("out/config_used.json"));
    assert_eq!(used["synth"]["joints"], 5);
    assert_eq!(used["synth"]["samples_per_class"], 3);
}

#[test]
fn train_writes_checkpoint_and_monotonic_log() {
    let dir = tempfile::tempdir().unwrap();
    small_pipeline(dir.path());
    for f in [
        "model.ckpt",
        "model.ckpt.json",
        "train_state.ckpt",
        "train_log.csv",
        "config_used.json",
    ] {
        assert!(dir.path().join("out").join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(dir.path().join("out/train_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("step,L_s,L_ff,total,seconds"));
    let steps: Vec<usize> = lines
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(steps, vec![1, 2, 3, 4]);
}

#[test]
fn missing_dataset_is_a_clear_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["train", "--train-data", "nowhere.json"]);
    assert_eq!(out.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(
        msg.contains("training data not found") && msg.contains("nowhere.json"),
        "{msg}"
    );
}

#[test]
fn resumed_training_matches_the_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &[&["--seed", "2", "synth"][..], &SMALL].concat());
    let train = [
        "--seed",
        "2",
        "--set",
        "paths.train_data=out/train.json",
        "train",
        "--batch-size",
        "4",
    ];
    ok(
        d,
        &[&train[..], &["--out", "full", "--steps", "6"]].concat(),
    );
    ok(
        d,
        &[&train[..], &["--out", "half", "--steps", "3"]].concat(),
    );
    ok(
        d,
        &[
            &train[..],
            &[
                "--out",
                "rest",
                "--steps",
                "6",
                "--resume",
                "half/train_state.ckpt",
            ],
        ]
        .concat(),
    );
    assert_eq!(
        std::fs::read(d.join("full/model.ckpt")).unwrap(),
        std::fs::read(d.join("rest/model.ckpt")).unwrap()
    );
    assert_eq!(
        std::fs::read(d.join("full/train_state.ckpt")).unwrap(),
        std::fs::read(d.join("rest/train_state.ckpt")).unwrap()
    );
    let log = std::fs::read_to_string(d.join("rest/train_log.csv")).unwrap();
    assert_eq!(
        log.lines()
            .skip(1)
            .map(|l| l.split(',').next().unwrap())
            .collect::<Vec<_>>(),
        ["4", "5", "6"]
    );

    // resuming into the directory that holds the state would overwrite it
    let out = run(
        d,
        &[
            &train[..],
            &[
                "--out",
                "half",
                "--steps",
                "6",
                "--resume",
                "half/train_state.ckpt",
            ],
        ]
        .concat(),
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn generate_modes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_pipeline(d);
    let g = d.join("out/generated");

    ok(d, &["generate", "--sample", "0", "--noise-sd", "0"]);
    let first = std::fs::read(g.join("reaction_0.json")).unwrap();
    ok(d, &["generate", "--sample", "0", "--noise-sd", "0"]);
    assert_eq!(std::fs::read(g.join("reaction_0.json")).unwrap(), first);

    std::fs::remove_dir_all(&g).unwrap();
    let stdout = ok(
        d,
        &[
            "generate",
            "--sample",
            "1",
            "--samples",
            "5",
            "--noise-sd",
            "0.3",
            "--csv",
        ],
    );
    let files: Vec<_> = std::fs::read_dir(&g)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(
        files.iter().filter(|f| f.ends_with(".json")).count(),
        5,
        "{files:?}"
    );
    assert_eq!(files.iter().filter(|f| f.ends_with(".csv")).count(), 5);
    assert_eq!(stdout.lines().count(), 5);
    let csv = std::fs::read_to_string(g.join("reaction_0.csv")).unwrap();
    assert!(csv.starts_with("frame,joint,x,y,z"), "{csv}");

    // synthetic lengths are 20..=30, so chunks of 8 split every action
    let stdout = ok(
        d,
        &["generate", "--sample", "2", "--long", "--chunk-len", "8"],
    );
    let chunks = stdout
        .split("chunks [")
        .nth(1)
        .unwrap()
        .split(']')
        .next()
        .unwrap();
    assert!(chunks.split(", ").count() >= 3, "{stdout}");
    let stdout = ok(d, &["generate", "--sample", "2"]);
    assert!(
        stdout.contains("chunks [")
            && !stdout
                .split("chunks [")
                .nth(1)
                .unwrap()
                .split(']')
                .next()
                .unwrap()
                .contains(',')
    );

    // explicit files, round-tripped through the sequence format
    let test = load_dataset(&d.join("out/test.json")).unwrap();
    interformer::skeleton::save_sequence(
        &d.join("action.json"),
        &test.topology,
        &test.samples[3].action,
    )
    .unwrap();
    interformer::skeleton::save_sequence(
        &d.join("first.json"),
        &test.topology,
        &test.samples[3].reaction,
    )
    .unwrap();
    ok(
        d,
        &[
            "--out",
            "files",
            "generate",
            "--checkpoint",
            "out/model.ckpt",
            "--action",
            "action.json",
            "--first-frame",
            "first.json",
        ],
    );
    assert!(d.join("files/generated/reaction_0.json").exists());

    for args in [
        vec!["generate"],
        vec!["generate", "--action", "action.json"],
        vec!["generate", "--sample", "99"],
        vec!["generate", "--sample", "0", "--samples", "3"],
        vec!["generate", "--sample", "0", "--samples", "0"],
    ] {
        assert_eq!(run(d, &args).status.code(), Some(1), "{args:?}");
    }
}

#[test]
fn eval_writes_reports_without_touching_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_pipeline(d);
    let before = snapshot(&d.join("out"));
    let stdout = ok(
        d,
        &[
            "--out",
            "eval",
            "--set",
            "paths.train_data=out/train.json",
            "--set",
            "paths.test_data=out/test.json",
            "--set",
            "paths.checkpoint=out/model.ckpt",
            "eval",
            "--epochs",
            "2",
        ],
    );
    assert_eq!(snapshot(&d.join("out")), before);
    assert!(stdout.contains("Average"));
    let report = read_json(&d.join("eval/report.json"));
    let classes = report["classes"].as_array().unwrap().len();
    assert_eq!(classes, 5);
    let table = std::fs::read_to_string(d.join("eval/report.txt")).unwrap();
    let first_block: Vec<&str> = table.split("\n\n").next().unwrap().lines().collect();
    // header, rule, one row per class, average
    assert_eq!(first_block.len() - 2, classes + 1);
    assert!(d.join("eval/classifier.ckpt").exists());
    assert!(d.join("eval/config_used.json").exists());

    // a saved classifier is reused as is
    let stdout2 = ok(
        d,
        &[
            "--out",
            "eval2",
            "--set",
            "paths.train_data=out/train.json",
            "--set",
            "paths.test_data=out/test.json",
            "--set",
            "paths.checkpoint=out/model.ckpt",
            "eval",
            "--classifier",
            "eval/classifier.ckpt",
        ],
    );
    assert_eq!(stdout, stdout2);
    assert!(!d.join("eval2/classifier.ckpt").exists());
}

#[test]
fn ablate_reports_each_setup_over_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &[&["--seed", "4", "synth"][..], &SMALL].concat());
    let stdout = ok(
        d,
        &[
            "--seed",
            "4",
            "ablate",
            "--steps",
            "2",
            "--batch-size",
            "4",
            "--seeds",
            "2",
            "--epochs",
            "1",
            "--no-multihead-grid",
        ],
    );
    let rows: Vec<&str> = stdout.lines().filter(|l| l.contains('±')).collect();
    for s in ["S1", "S2", "S3", "S4", "ZeroV", "GT"] {
        assert_eq!(
            rows.iter()
                .filter(|r| r.split_whitespace().next() == Some(s))
                .count(),
            1,
            "{s}: {stdout}"
        );
    }
    assert_eq!(rows.len(), 6);
    let report = read_json(&d.join("out/ablation.json"));
    assert_eq!(report["seeds"], json!([4, 5]));
    for v in report["variants"].as_array().unwrap() {
        assert_eq!(
            report["runs"][v["name"].as_str().unwrap()]
                .as_array()
                .unwrap()
                .len(),
            2
        );
        assert!(v["accuracy"]["sd"].as_f64().unwrap() >= 0.0);
    }
    assert!(d.join("out/ablation.txt").exists());

    // setups differ only in their declared switches
    let cfg =
        |s: &str, i: usize| read_json(&d.join(format!("out/runs/{s}/seed{i}/config_used.json")));
    let strip = |mut v: Value| {
        for key in ["use_spatial", "use_adjacency", "use_distance"] {
            v["model"].as_object_mut().unwrap().remove(key);
        }
        v["out"] = Value::Null;
        v
    };
    for s in ["S2", "S3", "S4"] {
        assert_eq!(strip(cfg("S1", 0)), strip(cfg(s, 0)), "{s}");
        assert_ne!(cfg("S1", 0)["model"], cfg(s, 0)["model"]);
    }
    assert_eq!(cfg("S1", 1)["seed"], 5);
}

#[test]
fn ablate_multihead_grid_adds_single_head_variants() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &[&["synth"][..], &SMALL].concat());
    let stdout = ok(
        d,
        &[
            "ablate",
            "--steps",
            "1",
            "--batch-size",
            "4",
            "--seeds",
            "1",
            "--epochs",
            "1",
            "--setups",
            "S4",
        ],
    );
    let report = read_json(&d.join("out/ablation.json"));
    let names: Vec<&str> = report["variants"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v["name"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["S4", "S4 T1", "S4 S1h", "S4 T1 S1h"]);
    let heads: Vec<(u64, u64)> = report["variants"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| {
            (
                v["model"]["temporal_heads"].as_u64().unwrap(),
                v["model"]["spatial_heads"].as_u64().unwrap(),
            )
        })
        .collect();
    assert_eq!(heads, [(3, 3), (1, 3), (3, 1), (1, 1)]);
    assert!(stdout.contains("S4 T1 S1h"));
}
