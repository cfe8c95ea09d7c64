use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn editloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_editloc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}\n{}", o.status.code(), stderr(&o));
    o
}

#[test]
fn help_lists_every_subcommand() {
    let o = editloc(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in [
        "build-dataset",
        "train-diffusion",
        "extract-features",
        "train",
        "finetune",
        "eval",
        "predict",
        "ablate",
    ] {
        assert!(text.contains(sub), "{sub} missing from help:\n{text}");
    }
}

#[test]
fn usage_and_config_errors_exit_1() {
    assert_eq!(editloc(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(editloc(&["train", "--bogus"]).status.code(), Some(1));

    let o = editloc(&["build-dataset"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--out"), "{}", stderr(&o));

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = editloc(&[
        "build-dataset",
        "--out",
        out.to_str().unwrap(),
        "--set",
        "dataset.n_pair=3",
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let o = editloc(&[
        "build-dataset",
        "--out",
        out.to_str().unwrap(),
        "--edited-fraction",
        "1.5",
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn io_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let o = editloc(&[
        "train-diffusion",
        "--manifest",
        missing.to_str().unwrap(),
        "--out",
        dir.path().join("diff").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = editloc(&[
        "build-dataset",
        "--out",
        dir.path().join("x").to_str().unwrap(),
        "--config",
        missing.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

const SMOKE_CONFIG: &str = r#"
seed = 17

[diffusion]
steps = 3
batch_size = 4
warmup_steps = 1

[diffusion.model]
base_width = 8
depth = 2
max_groups = 4

[features]
n_steps = 2
batch_size = 16

[model]
base_width = 8
depth = 2
max_groups = 4
cbam_reduction = 4

[train]
epochs = 1
batch_size = 16
learning_rate = 1e-3

[finetune]
epochs = 1
batch_size = 16
relevance_samples = 1

[finetune.ig]
steps = 8
chunk = 8

[eval]
overlay_rows = 3
"#;

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// build-dataset, train-diffusion, extract-features, train, finetune, eval,
/// predict and ablate on a 200-pair dataset with tiny models.
#[test]
fn full_pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let config = p("smoke.toml");
    fs::write(&config, SMOKE_CONFIG).unwrap();
    let c = ["--config", config.as_str()];

    ok(editloc(&[&["build-dataset", "--out", &p("data")][..], &c].concat()));
    let stamp = read_json(&dir.path().join("data/run.json"));
    assert_eq!(stamp["seed"], 17);
    assert_eq!(stamp["config"]["dataset"]["n_pairs"], 200);
    assert!(stamp["code_version"].is_string());

    ok(editloc(
        &[
            &["train-diffusion", "--manifest", &p("data"), "--out", &p("diff")][..],
            &c,
        ]
        .concat(),
    ));
    assert!(dir.path().join("diff/diffusion.ckpt").exists());
    assert_eq!(
        fs::read_to_string(dir.path().join("diff/diffusion_log.jsonl"))
            .unwrap()
            .lines()
            .count(),
        3
    );
    let stamp = read_json(&dir.path().join("diff/run.json"));
    assert_eq!(stamp["inputs"][0]["role"], "dataset");

    ok(editloc(
        &[
            &[
                "extract-features",
                "--manifest",
                &p("data"),
                "--checkpoint",
                &p("diff"),
                "--out",
                &p("feat"),
            ][..],
            &["--variant", "all"],
            &c,
        ]
        .concat(),
    ));
    ok(editloc(
        &[
            &[
                "extract-features",
                "--manifest",
                &p("data"),
                "--checkpoint",
                &p("diff"),
                "--out",
                &p("feat"),
            ][..],
            &["--side", "orig", "--split", "test", "--variant", "phi"],
            &c,
        ]
        .concat(),
    ));

    let (data, feat, s1) = (p("data"), p("feat"), p("s1"));
    ok(editloc(
        &[
            &["train", "--manifest", &data, "--features", &feat, "--out", &s1][..],
            &c,
        ]
        .concat(),
    ));
    for f in ["best.ckpt", "last.ckpt", "train_log.jsonl", "timing.jsonl", "run.json"] {
        assert!(dir.path().join("s1").join(f).exists(), "{f}");
    }

    // Re-running from the stamped configuration reproduces the checkpoint.
    let stamp = p("s1/run.json");
    ok(editloc(&[
        "train",
        "--manifest",
        &p("data"),
        "--features",
        &p("feat"),
        "--out",
        &p("s1_again"),
        "--config",
        &stamp,
    ]));
    assert_eq!(
        fs::read(dir.path().join("s1/best.ckpt")).unwrap(),
        fs::read(dir.path().join("s1_again/best.ckpt")).unwrap()
    );

    ok(editloc(
        &[
            &[
                "finetune",
                "--from",
                &p("s1"),
                "--manifest",
                &p("data"),
                "--features",
                &p("feat"),
                "--out",
                &p("s2"),
            ][..],
            &c,
        ]
        .concat(),
    ));
    let log = fs::read_to_string(dir.path().join("s2/train_log.jsonl")).unwrap();
    assert!(log.contains("\"rel_loss\":"), "{log}");

    let o = ok(editloc(
        &[
            &[
                "eval",
                "--checkpoint",
                &p("s2"),
                "--manifest",
                &p("data"),
                "--features",
                &p("feat"),
            ][..],
            &[
                "--out",
                &p("eval/report.json"),
                "--histogram",
                &p("eval/hist.csv"),
                "--overlays",
                &p("eval/grid.png"),
            ],
            &c,
        ]
        .concat(),
    ));
    assert!(String::from_utf8_lossy(&o.stdout).contains("SSIM"));
    let report = read_json(&dir.path().join("eval/report.json"));
    assert_eq!(report["split"], "test");
    assert_eq!(report["pairs"].as_array().unwrap().len(), 20);
    assert!(report["missing"].as_array().unwrap().is_empty());
    assert_eq!(
        fs::read_to_string(dir.path().join("eval/hist.csv"))
            .unwrap()
            .lines()
            .count(),
        101
    );
    assert!(dir.path().join("eval/grid.png").exists());
    assert!(dir.path().join("eval/report.json.run.json").exists());

    let image = dir
        .path()
        .join("data/images")
        .read_dir()
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    ok(editloc(
        &[
            &["predict", "--checkpoint", &p("s1"), "--diffusion", &p("diff")][..],
            &[
                "--image",
                image.to_str().unwrap(),
                "--out",
                &p("mask.png"),
                "--overlay",
                &p("side.png"),
            ],
            &c,
        ]
        .concat(),
    ));
    assert!(dir.path().join("mask.png").exists());
    assert!(dir.path().join("side.png").exists());
    let wrong = editloc(&[
        "predict",
        "--checkpoint",
        &p("s1"),
        "--diffusion",
        &p("diff"),
        "--image",
        image.to_str().unwrap(),
        "--out",
        &p("m2.png"),
        "--variant",
        "A",
    ]);
    assert_eq!(wrong.status.code(), Some(1), "{}", stderr(&wrong));

    ok(editloc(
        &[
            &[
                "ablate",
                "--manifest",
                &p("data"),
                "--features",
                &p("feat"),
                "--out",
                &p("abl/table.csv"),
            ][..],
            &c,
        ]
        .concat(),
    ));
    assert!(dir.path().join("abl/table.md").exists());
    assert!(dir.path().join("abl/table.csv.runs/phi/best.ckpt").exists());
    let table = fs::read_to_string(dir.path().join("abl/table.csv")).unwrap();
    assert_eq!(table.lines().filter(|l| !l.starts_with('#')).count(), 7, "{table}");
}
