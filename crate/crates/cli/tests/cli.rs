use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_stgcn");

const TINY: &str = r#"
[data]
window = 30
step = 10

[model]
widths = [4, 4]
strides = [1, 2]
temporal_kernel = 3

[train]
epochs = 2
batch_size = 8
"#;

fn stgcn(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("STGCN_OUT_ROOT")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

/// Small dataset: 3 subjects, 1 trial each, 3 classes.
fn tiny_data(tmp: &TempDir) -> PathBuf {
    let dir = tmp.path().join("data");
    let o = stgcn(&[
        "synth",
        "--out",
        s(&dir),
        "--classes",
        "3",
        "--subjects",
        "3",
        "--trials",
        "1",
        "--gestures-per-subject",
        "4",
        "--min-frames",
        "20",
        "--max-frames",
        "30",
        "--seed",
        "5",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir
}

fn tiny_config(tmp: &TempDir) -> PathBuf {
    let p = tmp.path().join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p
}

#[test]
fn synth_defaults_give_eight_subjects_three_trials_ten_classes() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("d");
    let o = stgcn(&["synth", "--out", s(&dir)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m: toml::Table =
        toml::from_str(&std::fs::read_to_string(dir.join("manifest.toml")).unwrap()).unwrap();
    assert_eq!(m["gestures"].as_array().unwrap().len(), 10);
    let videos = m["videos"].as_array().unwrap();
    assert_eq!(videos.len(), 24);
    let subjects: std::collections::BTreeSet<_> = videos
        .iter()
        .map(|v| v["subject_id"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(subjects.len(), 8);
}

#[test]
fn synth_same_seed_gives_identical_trees() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let c = tmp.path().join("c");
    for (dir, seed) in [(&a, "4"), (&b, "4"), (&c, "5")] {
        let o = stgcn(&[
            "synth",
            "--out",
            s(dir),
            "--subjects",
            "2",
            "--trials",
            "2",
            "--seed",
            seed,
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(tree(&a), tree(&b));
    assert_ne!(tree(&a), tree(&c));
}

#[test]
fn synth_two_classes_uses_two_labels() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("d");
    let o = stgcn(&[
        "synth",
        "--out",
        s(&dir),
        "--classes",
        "2",
        "--subjects",
        "2",
        "--trials",
        "2",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut seen = std::collections::BTreeSet::new();
    for e in std::fs::read_dir(dir.join("transcriptions")).unwrap() {
        for line in std::fs::read_to_string(e.unwrap().path()).unwrap().lines() {
            seen.insert(line.split_whitespace().last().unwrap().to_string());
        }
    }
    assert_eq!(seen.into_iter().collect::<Vec<_>>(), ["G1", "G2"]);
}

#[test]
fn synth_refuses_non_empty_directory_without_force() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("d");
    std::fs::create_dir(&dir).unwrap();
    std::fs::write(dir.join("keep.txt"), "x").unwrap();
    let o = stgcn(&[
        "synth",
        "--out",
        s(&dir),
        "--subjects",
        "1",
        "--trials",
        "1",
    ]);
    assert_ne!(code(&o), 0);
    assert!(stderr(&o).contains("--force"));
    assert!(!dir.join("manifest.toml").exists());
    let o = stgcn(&[
        "synth",
        "--out",
        s(&dir),
        "--subjects",
        "1",
        "--trials",
        "1",
        "--force",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(dir.join("manifest.toml").exists());
}

fn gradcheck(tmp: &TempDir, extra: &[&str]) -> Output {
    let cfg = tiny_config(tmp);
    let out = tmp.path().join(format!("gc{}", extra.len()));
    let mut args = vec![
        "gradcheck",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--frames",
        "12",
        "--max-elements",
        "60",
    ];
    args.extend_from_slice(extra);
    stgcn(&args)
}

#[test]
fn gradcheck_passes_on_small_model() {
    let tmp = TempDir::new().unwrap();
    let o = gradcheck(&tmp, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = tmp.path().join("gc0");
    assert!(out.join("run_manifest.json").exists());
    assert!(std::fs::read_to_string(out.join("gradcheck.txt"))
        .unwrap()
        .contains("PASS"));
}

#[test]
fn gradcheck_fails_below_discretization_floor() {
    let tmp = TempDir::new().unwrap();
    let o = gradcheck(&tmp, &["--tol", "1e-12"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn gradcheck_catches_corrupted_adjoint() {
    let tmp = TempDir::new().unwrap();
    let o = gradcheck(&tmp, &["--corrupt-adjoint", "graph_conv"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_named() {
    let tmp = TempDir::new().unwrap();
    let data = tiny_data(&tmp);
    let cfg = tiny_config(&tmp);
    let o = stgcn(&[
        "train",
        "--data",
        s(&data),
        "--config",
        s(&cfg),
        "--out",
        s(&tmp.path().join("t")),
        "--set",
        "train.learning_rate=0.1",
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, format!("{TINY}\nwarmup = 3\n")).unwrap();
    let o = stgcn(&[
        "crossval",
        "--data",
        s(&data),
        "--config",
        s(&bad),
        "--out",
        s(&tmp.path().join("c")),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("warmup"), "{}", stderr(&o));
}

#[test]
fn missing_manifest_is_refused() {
    let tmp = TempDir::new().unwrap();
    let empty = tmp.path().join("nothing");
    std::fs::create_dir(&empty).unwrap();
    let cfg = tiny_config(&tmp);
    for cmd in ["train", "crossval"] {
        let o = stgcn(&[
            cmd,
            "--data",
            s(&empty),
            "--config",
            s(&cfg),
            "--out",
            s(&tmp.path().join(cmd)),
        ]);
        assert_eq!(code(&o), 3, "{}", stderr(&o));
        assert!(stderr(&o).contains("manifest"), "{}", stderr(&o));
    }
}

#[test]
fn train_then_eval_on_one_fold() {
    let tmp = TempDir::new().unwrap();
    let data = tiny_data(&tmp);
    let cfg = tiny_config(&tmp);
    let out = tmp.path().join("train");
    let o = stgcn(&[
        "train",
        "--data",
        s(&data),
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--fold",
        "SubjC",
        "--epochs",
        "1",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in [
        "run_manifest.json",
        "config.toml",
        "model.params",
        "history.json",
        "metrics.csv",
        "last.ckpt",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    // The flag overrides the file and the effective value is echoed.
    let effective: toml::Table =
        toml::from_str(&std::fs::read_to_string(out.join("config.toml")).unwrap()).unwrap();
    assert_eq!(effective["train"]["epochs"].as_integer(), Some(1));
    assert_eq!(effective["model"]["classes"].as_integer(), Some(3));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("run_manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["config"]["train"]["epochs"], 1);
    assert_eq!(manifest["command"], "train");

    let ev = tmp.path().join("eval");
    let o = stgcn(&[
        "eval",
        "--data",
        s(&data),
        "--params",
        s(&out.join("model.params")),
        "--out",
        s(&ev),
        "--fold",
        "SubjC",
        "--config",
        s(&cfg),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).starts_with("accuracy "));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["folds"].as_array().unwrap().len(), 1);
    assert_eq!(report["folds"][0]["subject"], "SubjC");
    let csv = std::fs::read_to_string(ev.join("predictions.csv")).unwrap();
    assert!(csv
        .lines()
        .skip(1)
        .all(|l| l.starts_with("SubjC,Suturing_C")));
}

#[test]
fn resume_matches_uninterrupted_training() {
    let tmp = TempDir::new().unwrap();
    let data = tiny_data(&tmp);
    let cfg = tiny_config(&tmp);
    let full = tmp.path().join("full");
    let half = tmp.path().join("half");
    let rest = tmp.path().join("rest");
    let base = ["--data", s(&data), "--config", s(&cfg)];
    let run = |out: &Path, extra: &[&str]| {
        let mut args = vec!["train"];
        args.extend_from_slice(&base);
        args.extend_from_slice(&["--out", s(out)]);
        args.extend_from_slice(extra);
        let o = stgcn(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    };
    run(&full, &["--epochs", "2"]);
    run(&half, &["--epochs", "1"]);
    run(
        &rest,
        &["--epochs", "2", "--resume", s(&half.join("last.ckpt"))],
    );
    assert_eq!(
        std::fs::read(full.join("model.params")).unwrap(),
        std::fs::read(rest.join("model.params")).unwrap()
    );
    assert_eq!(
        std::fs::read(full.join("metrics.csv")).unwrap(),
        std::fs::read(rest.join("metrics.csv")).unwrap()
    );
}

#[test]
fn crossval_reports_every_fold_and_reruns_identically() {
    let tmp = TempDir::new().unwrap();
    let data = tiny_data(&tmp);
    let cfg = tiny_config(&tmp);
    let run = |name: &str, extra: &[&str]| {
        let out = tmp.path().join(name);
        let mut args = vec![
            "crossval",
            "--data",
            s(&data),
            "--config",
            s(&cfg),
            "--out",
            s(&out),
            "--seed",
            "3",
        ];
        args.extend_from_slice(extra);
        let o = stgcn(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        (out, stdout(&o))
    };
    let (a, text) = run("a", &[]);
    let (b, _) = run("b", &["--jobs", "2"]);
    assert!(text.contains("average accuracy"), "{text}");
    assert!(text.contains("chance"), "{text}");
    for f in ["report.json", "predictions.csv"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("report.json")).unwrap()).unwrap();
    let subjects: Vec<_> = report["folds"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["subject"].clone())
        .collect();
    assert_eq!(subjects, ["SubjB", "SubjC", "SubjD"]);
    for sub in ["SubjB", "SubjC", "SubjD"] {
        assert!(a.join(format!("confusion_{sub}.svg")).exists());
    }
    assert!(a.join("timing.json").exists());

    let (one, _) = run("one", &["--fold", "SubjC"]);
    let report1: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(one.join("report.json")).unwrap()).unwrap();
    assert_eq!(report1["folds"].as_array().unwrap().len(), 1);
    assert_eq!(report1["folds"][0], report["folds"][1]);
}

#[test]
fn default_output_root_comes_from_environment() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(&tmp);
    let root = tmp.path().join("root");
    let o = Command::new(BIN)
        .args([
            "gradcheck",
            "--config",
            s(&cfg),
            "--frames",
            "8",
            "--max-elements",
            "10",
        ])
        .env("STGCN_OUT_ROOT", &root)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let runs: Vec<_> = std::fs::read_dir(&root)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(runs.len(), 1);
    assert!(runs[0].to_str().unwrap().starts_with("gradcheck-"));
}
