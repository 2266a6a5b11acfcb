use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

fn picanet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_picanet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &[&str] = &[
    "--set",
    "train.input_size=16",
    "--set",
    "train.batch_size=2",
    "--set",
    "model.channels=[2,3,3,4,4]",
    "--set",
    "model.convs=[1,1,1,1,1]",
    "--set",
    "model.fc_channels=4",
    "--set",
    "model.fc_dilation=1",
    "--set",
    "model.head_channels=2",
    "--set",
    "model.renet_hidden=2",
    "--set",
    "model.local_grid=3",
    "--set",
    "model.local_dilation=1",
];

#[test]
fn synth_train_eval_infer_round_trip() {
    let d = tempdir().unwrap();
    let (data, run) = (d.path().join("data"), d.path().join("run"));
    let o = picanet(&[
        "synth",
        "--out",
        s(&data),
        "--count",
        "3",
        "--size",
        "16",
        "--seed",
        "5",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let mut args = vec![
        "train",
        "--data",
        s(&data),
        "--out",
        s(&run),
        "--set",
        "train.steps=2",
    ];
    args.extend_from_slice(TINY);
    let o = picanet(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.toml", "train_log.csv", "final.ckpt"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let ckpt = run.join("final.ckpt");

    let o = picanet(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["images"], 3);

    let out = d.path().join("infer");
    let img = data.join("images/00000.png");
    let o = picanet(&[
        "infer",
        "--checkpoint",
        s(&ckpt),
        "--image",
        s(&img),
        "--out",
        s(&out),
        "--pixel",
        "3,4",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("00000_saliency.png").is_file());
    assert!(out.join("00000_dec6_y3_x4.txt").is_file());

    let o = picanet(&[
        "infer",
        "--checkpoint",
        s(&ckpt),
        "--image",
        s(&img),
        "--out",
        s(&out),
        "--pixel",
        "99,0",
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn configuration_errors_exit_with_2() {
    let d = tempdir().unwrap();
    let data = d.path().join("data");
    assert_eq!(
        code(&picanet(&[
            "synth",
            "--out",
            s(&data),
            "--count",
            "1",
            "--size",
            "16"
        ])),
        0
    );
    let out = d.path().join("run");
    for bad in [
        "train.stepz=3",
        "train.lr=-1",
        "model.local_grid=4",
        "train.input_size=30",
    ] {
        let o = picanet(&["train", "--data", s(&data), "--out", s(&out), "--set", bad]);
        assert_eq!(code(&o), 2, "{bad}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(
        code(&picanet(&["synth", "--out", s(&data), "--size", "30"])),
        2
    );
    assert_eq!(code(&picanet(&["frobnicate"])), 2);
}

#[test]
fn diverged_training_exits_with_3() {
    let d = tempdir().unwrap();
    let data = d.path().join("data");
    assert_eq!(
        code(&picanet(&[
            "synth",
            "--out",
            s(&data),
            "--count",
            "2",
            "--size",
            "16"
        ])),
        0
    );
    let out = d.path().join("run");
    let mut args = vec![
        "train",
        "--data",
        s(&data),
        "--out",
        s(&out),
        "--set",
        "train.steps=30",
        "--set",
        "train.lr=1e30",
    ];
    args.extend_from_slice(TINY);
    assert_eq!(code(&picanet(&args)), 3);
}

#[test]
fn missing_files_exit_with_1() {
    let d = tempdir().unwrap();
    let missing = d.path().join("nope.ckpt");
    assert_eq!(
        code(&picanet(&[
            "eval",
            "--checkpoint",
            s(&missing),
            "--data",
            s(d.path())
        ])),
        1
    );
}

#[test]
fn bench_reports_json() {
    let o = picanet(&["bench", "--warmup", "0", "--trials", "2", "--json"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["speedup"].as_f64().unwrap() > 0.0);
    assert!(v["max_abs_diff"].as_f64().unwrap() < 1e-4);
}
