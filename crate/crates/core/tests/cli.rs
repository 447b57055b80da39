use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use near_core::cli::RunManifest;
use near_core::data::{
    build_label_space, load_dataset, save_dataset, EmbeddingDataset, ImageRecord,
};
use serde_json::Value;
use tempfile::TempDir;

fn near(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_near"))
        .args(args)
        .env_remove("NEAR_SEED")
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().count(), 1, "stdout: {text}");
    serde_json::from_str(text.trim()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let root = dir.path().to_path_buf();
        let out = near(&[
            "synth",
            "--classes",
            "6",
            "--dim",
            "16",
            "--test-per-class",
            "5",
            "--seed",
            "3",
            "--out-train",
            s(&root.join("train.json")),
            "--out-test",
            s(&root.join("test.json")),
        ]);
        assert_eq!(
            out.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        Self { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn train(&self, model: &str, extra: &[&str]) -> Output {
        let model = self.path(model);
        let mut args = vec![
            "train",
            "--data",
            s(&self.root.join("train.json")),
            "--test",
            s(&self.root.join("test.json")),
            "--out",
            s(&model),
        ]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
        args.extend(extra.iter().map(|a| a.to_string()));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        near(&refs)
    }
}

#[test]
fn synth_writes_loadable_datasets() {
    let f = Fixture::new();
    let train = load_dataset(f.path("train.json")).unwrap();
    let test = load_dataset(f.path("test.json")).unwrap();
    assert_eq!(train.len(), 30);
    assert_eq!(test.len(), 30);
    assert!(train.has_ground_truth());
}

#[test]
fn long_tail_shots() {
    let dir = TempDir::new().unwrap();
    let train = dir.path().join("lt.json");
    let out = near(&[
        "synth",
        "--classes",
        "3",
        "--dim",
        "8",
        "--shots-list",
        "10,10,3",
        "--out-train",
        s(&train),
        "--out-test",
        s(&dir.path().join("lt_test.json")),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    assert_eq!(v["n_train"], 23);
    assert_eq!(load_dataset(&train).unwrap().len(), 23);
}

#[test]
fn invalid_arguments_exit_two() {
    let dir = TempDir::new().unwrap();
    let args = |noise: &str| {
        near(&[
            "synth",
            "--noise",
            noise,
            "--out-train",
            s(&dir.path().join("a.json")),
            "--out-test",
            s(&dir.path().join("b.json")),
        ])
    };
    assert_eq!(args("1.5").status.code(), Some(2));
    assert_eq!(near(&["train"]).status.code(), Some(2));
    assert_eq!(near(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(near(&["eval"]).status.code(), Some(2));
}

#[test]
fn near_training_writes_model_and_manifest() {
    let f = Fixture::new();
    let out = f.train("model.json", &["--seed", "1"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v = stdout_json(&out);
    assert!(v["cacc"].as_f64().unwrap() > 0.0);
    let manifest_path = f.path("model.manifest.json");
    let text = std::fs::read_to_string(&manifest_path).unwrap();
    let manifest = RunManifest::from_json_str(&text).unwrap();
    assert_eq!(manifest.epochs.len(), 50);
    assert_eq!(manifest.seed, 1);
    assert!(manifest.wall_clock_seconds.is_none());
    assert_eq!(
        RunManifest::from_json_str(&manifest.to_json_string()).unwrap(),
        manifest
    );
    let report = manifest.report.as_ref().unwrap();
    assert!(report.candidate_quality.is_some());
    assert_eq!(report.label_space_size, manifest.filtered_labels.len());

    let eval = near(&[
        "eval",
        "--model",
        s(&f.path("model.json")),
        "--test",
        s(&f.path("test.json")),
    ]);
    assert_eq!(eval.status.code(), Some(0));
    assert_eq!(stdout_json(&eval)["cacc"].as_f64(), Some(report.cacc));

    let inspect = near(&["inspect", s(&manifest_path)]);
    assert_eq!(inspect.status.code(), Some(0));
    let iv = stdout_json(&inspect);
    assert_eq!(iv["kind"], "manifest");
    assert_eq!(iv["tau_trajectory"].as_array().unwrap().len(), 40);
    let inspect = near(&["inspect", s(&f.path("model.json"))]);
    assert_eq!(stdout_json(&inspect)["kind"], "model");
}

#[test]
fn zeroshot_manifest_has_no_epochs() {
    let f = Fixture::new();
    let out = f.train("zs.json", &["--mode", "zeroshot"]);
    assert_eq!(out.status.code(), Some(0));
    let m =
        RunManifest::from_json_str(&std::fs::read_to_string(f.path("zs.manifest.json")).unwrap())
            .unwrap();
    assert!(m.epochs.is_empty());
    let train = load_dataset(f.path("train.json")).unwrap();
    assert_eq!(
        m.filtered_labels.len(),
        build_label_space(train.training_view()).unwrap().k()
    );
}

#[test]
fn seed_comes_from_flag_then_config_then_env() {
    let f = Fixture::new();
    let cfg = f.path("cfg.json");
    std::fs::write(&cfg, r#"{"seed": 9, "total_epochs": 4, "warm_epochs": 2}"#).unwrap();
    let seed_of = |model: &str, extra: &[&str], env: Option<&str>| {
        let mut args = vec![
            "train".to_string(),
            "--data".into(),
            s(&f.path("train.json")).into(),
            "--out".into(),
            s(&f.path(model)).into(),
        ];
        args.extend(extra.iter().map(|a| a.to_string()));
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_near"));
        cmd.args(&args).env_remove("NEAR_SEED");
        if let Some(e) = env {
            cmd.env("NEAR_SEED", e);
        }
        let out = cmd.output().unwrap();
        assert_eq!(
            out.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let manifest = f.path(model).with_extension("manifest.json");
        RunManifest::from_json_str(&std::fs::read_to_string(manifest).unwrap()).unwrap()
    };
    let fast = ["--epochs", "3", "--warm-epochs", "1"];
    assert_eq!(seed_of("a.json", &fast, None).seed, 0);
    assert_eq!(seed_of("b.json", &fast, Some("7")).seed, 7);
    let m = seed_of("c.json", &["--config", s(&cfg)], Some("7"));
    assert_eq!(m.seed, 9);
    assert_eq!(m.epochs.len(), 4);
    let m = seed_of("d.json", &["--config", s(&cfg), "--seed", "11"], Some("7"));
    assert_eq!(m.seed, 11);
}

#[test]
fn runtime_failures_exit_one() {
    let f = Fixture::new();
    assert_eq!(
        near(&["inspect", s(&f.path("missing.json"))]).status.code(),
        Some(1)
    );
    std::fs::write(f.path("junk.json"), "{\"not\": \"a manifest\"}").unwrap();
    assert_eq!(
        near(&["inspect", s(&f.path("junk.json"))]).status.code(),
        Some(1)
    );

    let out = f.train("m.json", &["--epochs", "3", "--warm-epochs", "1"]);
    assert_eq!(out.status.code(), Some(0));
    let test = load_dataset(f.path("test.json")).unwrap();
    let stripped = EmbeddingDataset::new(
        test.dim(),
        test.ids()
            .enumerate()
            .map(|(i, id)| ImageRecord {
                id: id.to_string(),
                embedding: test.embedding(i).to_vec(),
                mllm_label: test.training_view().label(i).to_string(),
                gt_label: None,
            })
            .collect(),
        test.label_embeddings().clone(),
    )
    .unwrap();
    save_dataset(&stripped, f.path("nogt.json")).unwrap();
    let eval = near(&[
        "eval",
        "--model",
        s(&f.path("m.json")),
        "--test",
        s(&f.path("nogt.json")),
    ]);
    assert_eq!(eval.status.code(), Some(1));

    let bad = f.path("bad.json");
    std::fs::write(&bad, "[1, 2").unwrap();
    let out = near(&["train", "--data", s(&bad), "--out", s(&f.path("x.json"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn threshold_and_config_validation() {
    let f = Fixture::new();
    let out = f.train("t.json", &["--threshold", "often"]);
    assert_eq!(out.status.code(), Some(2));
    let out = f.train("t.json", &["--batch-size", "7"]);
    assert_eq!(out.status.code(), Some(2));
    let cfg = f.path("cfg.json");
    std::fs::write(&cfg, r#"{"epochz": 3}"#).unwrap();
    assert_eq!(
        f.train("t.json", &["--config", s(&cfg)]).status.code(),
        Some(2)
    );
    let out = f.train(
        "t.json",
        &["--threshold", "0.4", "--epochs", "4", "--warm-epochs", "2"],
    );
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn candidate_quality_comparison() {
    let f = Fixture::new();
    let out = near(&["eval", "--candidate-quality", s(&f.path("train.json"))]);
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    for key in ["raw", "random", "knn"] {
        let q = v["candidate_quality_modes"][key].as_f64().unwrap();
        assert!((-1.0..=1.0).contains(&q));
    }
}
