use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vqg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vqg"))
        .args(args)
        .current_dir(cwd)
        .env_remove("VQG_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

const SMALL: &str = r#"{
  "train": {"epochs": 1, "hidden": 8, "latent": 4, "batch_size": 16},
  "eval": {"diversity_draws": 3, "probe_train_records": 40, "probe": {"epochs": 2}},
  "variants": ["OURS", "V_IC2Q"],
  "paths": {"checkpoints": "ckpt", "reports": "reports"}
}"#;

fn setup(dir: &Path) {
    fs::write(dir.join("small.json"), SMALL).unwrap();
    ok(&vqg(&["gen-data", "--config", "small.json", "--n", "60", "--seed", "3", "--out", "data"], dir));
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    for f in ["train.jsonl", "val.jsonl", "test.jsonl", "manifest.json", "train.manifest.json"] {
        assert!(dir.join("data").join(f).exists(), "{f}");
    }
    for v in ["OURS", "V_IC2Q"] {
        ok(&vqg(&["train", "--config", "small.json", "--variant", v, "--data", "data"], dir));
    }
    assert!(dir.join("ckpt/OURS.ckpt").exists());
    let history = fs::read_to_string(dir.join("ckpt/OURS.history.csv")).unwrap();
    assert!(history.starts_with("epoch,split,L_MLE,L_i,L_a,L_t,L_prior_z,L_prior_t,total,lr"));
    let echoed = fs::read_to_string(dir.join("ckpt/OURS.config.json")).unwrap();
    assert!(echoed.contains("\"hidden\": 8"));

    ok(&vqg(
        &["generate", "--config", "small.json", "--variant", "OURS", "--data", "data", "--category", "color", "--n", "2", "--out", "gen.jsonl"],
        dir,
    ));
    let lines: Vec<serde_json::Value> = fs::read_to_string(dir.join("gen.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 6);
    assert!(lines.iter().all(|l| l["category"] == "color" && l["questions"].as_array().unwrap().len() == 2));
    assert!(dir.join("gen.config.json").exists());

    ok(&vqg(&["evaluate", "--config", "small.json", "--data", "data"], dir));
    ok(&vqg(&["probe", "--config", "small.json", "--data", "data", "--plot"], dir));
    assert!(dir.join("reports/OURS.t.svg").exists());
    ok(&vqg(
        &[
            "report",
            "reports/OURS.metrics.json",
            "reports/OURS.probe.json",
            "reports/V_IC2Q.metrics.json",
            "--out",
            "tables",
        ],
        dir,
    ));
    let t1 = fs::read_to_string(dir.join("tables/table1.csv")).unwrap();
    assert_eq!(t1.lines().count(), 1 + 2 + 1);
    assert!(t1.lines().any(|l| l.starts_with("Ours,t,")));
    let t3 = fs::read_to_string(dir.join("tables/table3.csv")).unwrap();
    assert!(t3.lines().next().unwrap().contains("color_strength"));
}

#[test]
fn identical_seeds_give_identical_outputs() {
    let runs: Vec<_> = (0..2)
        .map(|_| {
            let tmp = tempfile::tempdir().unwrap();
            setup(tmp.path());
            ok(&vqg(&["train", "--config", "small.json", "--variant", "OURS", "--data", "data"], tmp.path()));
            ok(&vqg(
                &["generate", "--config", "small.json", "--variant", "OURS", "--data", "data", "--out", "gen.jsonl"],
                tmp.path(),
            ));
            tmp
        })
        .collect();
    for f in ["data/train.jsonl", "data/test.jsonl", "ckpt/OURS.history.csv", "ckpt/OURS.ckpt", "gen.jsonl"] {
        assert_eq!(
            fs::read(runs[0].path().join(f)).unwrap(),
            fs::read(runs[1].path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn exit_codes_follow_error_kinds() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    let code = |args: &[&str]| vqg(args, dir).status.code();

    assert_eq!(code(&["train", "--variant", "NOPE", "--data", "data"]), Some(2));
    assert_eq!(code(&["frobnicate"]), Some(2));
    fs::write(dir.join("bad.json"), r#"{"trian": {}}"#).unwrap();
    assert_eq!(code(&["gen-data", "--config", "bad.json", "--out", "x"]), Some(2));
    assert_eq!(
        code(&["generate", "--checkpoint", "missing.ckpt", "--data", "data", "--out", "g.jsonl"]),
        Some(3)
    );
    assert_eq!(code(&["train", "--variant", "OURS", "--data", "no-such-dir"]), Some(3));
    fs::write(dir.join("corrupt.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(
        code(&["generate", "--checkpoint", "corrupt.ckpt", "--data", "data", "--out", "g.jsonl"]),
        Some(2)
    );
    fs::write(
        dir.join("explode.json"),
        r#"{"train": {"epochs": 2, "hidden": 8, "latent": 4, "batch_size": 16, "lr0": 1e300, "clip_norm": null}}"#,
    )
    .unwrap();
    assert_eq!(code(&["train", "--config", "explode.json", "--variant", "OURS", "--data", "data"]), Some(4));
}

#[test]
fn category_flag_requires_t_space() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    ok(&vqg(&["train", "--config", "small.json", "--variant", "OURS", "--data", "data"], dir));
    let out = vqg(
        &["generate", "--config", "small.json", "--variant", "OURS", "--space", "z", "--category", "color", "--data", "data", "--out", "g.jsonl"],
        dir,
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("t-space"));
}
