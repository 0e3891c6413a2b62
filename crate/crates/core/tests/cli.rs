use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_isup-grading");

const TINY: &[&str] = &[
    "synth.slides_per_grade=4",
    "synth.slide_size=512",
    "tiling.bag_size=8",
    "mil.k=2",
    "mil.epochs=2",
    "mil.restarts=1",
    "dataset.per_class=8",
    "ssl.epochs=1",
    "ssl.batch_size=8",
    "grader.epochs=2",
    "split.val_fraction=0.25",
    "split.test_fraction=0.25",
    "run.render_png=false",
];

fn isup(args: &[&str], root: &Path) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.arg("--log").arg("warn").arg("--run-root").arg(root);
    for s in TINY {
        cmd.arg("--set").arg(s);
    }
    cmd.args(args).env_remove("ISUP_RUN_ROOT").output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_every_stage_and_resumes() {
    let root = tempfile::tempdir().unwrap();
    let run = root.path().join("tiny");
    let dir = run.to_str().unwrap();
    let first = isup(&["run", "--run-dir", dir, "--ablate", "no-or"], root.path());
    assert!(first.status.success(), "{}", stderr(&first));
    for stage in ["synth", "tile", "train-mil", "build-ssl-dataset", "pretrain", "finetune", "evaluate", "finetune-no-or", "evaluate-no-or"] {
        assert!(run.join(stage).is_dir(), "missing stage {stage}");
    }
    for file in ["manifest.json", "summary.json", "evaluate/metrics.json", "evaluate/predictions.jsonl", "evaluate/confusion.csv", "evaluate/explainability.json"] {
        assert!(run.join(file).is_file(), "missing {file}");
    }
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert!(summary.get("full").is_some() && summary.get("no-or").is_some());

    let metrics = std::fs::read(run.join("evaluate/metrics.json")).unwrap();
    let again = isup(&["run", "--run-dir", dir, "--ablate", "no-or"], root.path());
    assert!(again.status.success(), "{}", stderr(&again));
    let out = String::from_utf8_lossy(&again.stdout);
    assert!(out.contains("skipped (up to date)"), "{out}");
    assert_eq!(std::fs::read(run.join("evaluate/metrics.json")).unwrap(), metrics);
}

#[test]
fn stages_chain_through_explicit_paths() {
    let root = tempfile::tempdir().unwrap();
    let p = |s: &str| root.path().join(s).to_str().unwrap().to_string();
    let ok = |o: Output| {
        assert!(o.status.success(), "{}", stderr(&o));
        String::from_utf8_lossy(&o.stdout).trim().lines().last().unwrap().to_string()
    };
    let labels = ok(isup(&["synth", "--output", &p("synth")], root.path()));
    let tiles = ok(isup(&["tile", "--input", &labels, "--output", &p("tile")], root.path()));
    assert!(tiles.ends_with("tiles.jsonl"));
    let split = |n: &str| root.path().join("tile").join(format!("{n}.jsonl")).to_str().unwrap().to_string();
    let mil = ok(isup(&["train-mil", "--train", &split("train"), "--val", &split("val"), "--output", &p("mil")], root.path()));
    let corpus = ok(isup(&["build-ssl-dataset", "--checkpoint", &mil, "--manifest", &split("train"), "--output", &p("ds")], root.path()));
    let backbone = ok(isup(&["pretrain", "--corpus", &corpus, "--output", &p("ssl")], root.path()));
    let grader = ok(isup(
        &["finetune", "--train", &split("train"), "--val", &split("val"), "--backbone", &backbone, "--output", &p("ft")],
        root.path(),
    ));
    let predicted = isup(&["predict", "--checkpoint", &grader, "--manifest", &split("test"), "--report", &p("pred")], root.path());
    assert!(predicted.status.success(), "{}", stderr(&predicted));
    let evaluated = isup(
        &["evaluate", "--predictions", &(p("pred") + "/predictions.jsonl"), "--manifest", &split("test"), "--report", &p("eval")],
        root.path(),
    );
    assert!(evaluated.status.success(), "{}", stderr(&evaluated));
    assert!(root.path().join("eval/metrics.json").is_file());
}

#[test]
fn unknown_config_key_exits_with_code_two() {
    let root = tempfile::tempdir().unwrap();
    let o = isup(&["--set", "mil.nonsense=3", "run"], root.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nonsense"), "{}", stderr(&o));
}

#[test]
fn failing_stage_is_named_and_exits_with_code_one() {
    let root = tempfile::tempdir().unwrap();
    let missing = root.path().join("absent.jsonl");
    let o = isup(&["tile", "--input", missing.to_str().unwrap(), "--output", root.path().join("t").to_str().unwrap()], root.path());
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("tile"), "{err}");
    assert!(err.contains("absent.jsonl"), "{err}");
}
