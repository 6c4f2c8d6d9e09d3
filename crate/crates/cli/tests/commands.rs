use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
w = 2
trials = 2
folds = 3
seed = 5

[paths]
sessions = "data/sessions.csv"
catalog = "data/catalog.csv"
annotations = "data/annotations.jsonl"
workdir = "work"

[sgns]
vector_size = 16
epochs = 3

[text]
dim = 64

[synth]
annotated_sessions = 150
unlabeled_sessions = 300
topics = 8
items_per_topic = 20

[gbdt]
num_rounds = 20

[importance]
w = 2
background = 50
max_rows = 40
"#;

fn sessionseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sessionseg"))
        .arg("--config")
        .arg(dir.join("sessionseg.toml"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("sessionseg.toml"), CONFIG).unwrap();
    dir
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn full_flow_is_reproducible() {
    let dir = setup();
    let d = dir.path();
    ok(&sessionseg(d, &["synth"]));
    ok(&sessionseg(d, &["embed"]));
    let first_table = std::fs::read(d.join("work/embeddings.vec")).unwrap();
    ok(&sessionseg(d, &["embed"]));
    assert_eq!(std::fs::read(d.join("work/embeddings.vec")).unwrap(), first_table);

    let summary: serde_json::Value = serde_json::from_str(&ok(&sessionseg(d, &["features"]))).unwrap();
    let rows = summary["rows"].as_f64().unwrap();
    let rate = summary["positives"].as_f64().unwrap() / rows;
    assert!((summary["positive_rate"].as_f64().unwrap() - rate).abs() < 1e-12);
    assert_eq!(summary["dim"], 24);

    let w3: serde_json::Value = serde_json::from_str(&ok(&sessionseg(d, &["features", "--w", "3"]))).unwrap();
    assert_eq!(w3["dim"], 60);

    ok(&sessionseg(d, &["train"]));
    let report = std::fs::read(d.join("work/report_gbdt_w2.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_slice(&report).unwrap();
    assert_eq!(parsed["test"]["threshold"], 0.5);
    assert!(parsed["baseline"]["f1"].is_number());
    ok(&sessionseg(d, &["train"]));
    assert_eq!(std::fs::read(d.join("work/report_gbdt_w2.json")).unwrap(), report);

    let top = ok(&sessionseg(d, &["importance"]));
    assert!(top.lines().next().unwrap().contains("):"), "{top}");
    let csv = std::fs::read_to_string(d.join("work/importance_gbdt_w2.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 24);

    ok(&sessionseg(d, &["train", "--model", "logreg"]));
    assert!(d.join("work/report_logreg_w2.json").exists());
}

#[test]
fn user_errors_exit_with_one() {
    let dir = setup();
    let d = dir.path();
    // inputs not generated yet
    let out = sessionseg(d, &["embed"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sessions.csv"));

    assert_eq!(sessionseg(d, &["features", "--w", "0"]).status.code(), Some(1));
    assert_eq!(sessionseg(d, &["train", "--threshold", "1.5"]).status.code(), Some(1));

    let out = Command::new(env!("CARGO_BIN_EXE_sessionseg"))
        .args(["--config", d.join("missing.toml").to_str().unwrap(), "synth"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn importance_rejects_a_model_for_another_window() {
    let dir = setup();
    let d = dir.path();
    ok(&sessionseg(d, &["synth"]));
    ok(&sessionseg(d, &["run"]));
    ok(&sessionseg(d, &["features", "--w", "3"]));
    let model = d.join("work/model_gbdt_w2.json");
    let out = sessionseg(d, &["importance", "--w", "3", "--model-file", model.to_str().unwrap()]);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.code(), Some(1), "stderr: {stderr}");
    assert!(stderr.contains("dim") || stderr.contains("window") || stderr.contains("w="), "{stderr}");
}
