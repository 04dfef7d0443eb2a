//! The `oemstream` binary against the shipped demo configs.

use std::path::PathBuf;
use std::process::Command;

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn oemstream(out: &std::path::Path, args: &[&str]) -> String {
    let cfg = configs().join("demo.json");
    let output = Command::new(env!("CARGO_BIN_EXE_oemstream"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    String::from_utf8(output.stdout).unwrap()
}

#[test]
fn run_persists_records() {
    let dir = tempfile::tempdir().unwrap();
    let queries = dir.path().join("q.jsonl");
    std::fs::write(
        &queries,
        r#"{"query_id":"a","q":"Where are the keys?","candidates":[{"label":"A","text":"table"},{"label":"B","text":"drawer"},{"label":"C","text":"sink"},{"label":"D","text":"shelf"}],"submit_time":61.0}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let summary = oemstream(&out, &["run", "--queries", queries.to_str().unwrap()]);
    assert!(summary.starts_with("clips 12 "), "{summary}");
    for f in ["memory.jsonl", "answers.jsonl", "violations.jsonl", "events.jsonl"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    assert_eq!(std::fs::read_to_string(out.join("memory.jsonl")).unwrap().lines().count(), 12);

    let again = dir.path().join("again");
    oemstream(&again, &["run", "--queries", queries.to_str().unwrap()]);
    for f in ["memory.jsonl", "answers.jsonl", "events.jsonl"] {
        assert_eq!(std::fs::read(out.join(f)).unwrap(), std::fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn bench_reports_accuracy_and_audit() {
    let dir = tempfile::tempdir().unwrap();
    let items = configs().join("items.jsonl");
    let md = oemstream(dir.path(), &["bench", "--items", items.to_str().unwrap(), "--seeds", "3"]);
    assert!(md.starts_with("| sel | run |"), "{md}");
    assert!(md.lines().any(|l| l.contains("| all |")));
    assert_eq!(std::fs::read_to_string(dir.path().join("audit.jsonl")).unwrap().lines().count(), 1);
    assert_eq!(std::fs::read_to_string(dir.path().join("records.jsonl")).unwrap().lines().count(), 18);
    assert!(dir.path().join("accuracy.csv").is_file());
}

#[test]
fn sweep_marks_selection_and_violations() {
    let dir = tempfile::tempdir().unwrap();
    let grid = configs().join("grid.json");
    let md = oemstream(dir.path(), &["sweep", "--grid", grid.to_str().unwrap(), "--repeats", "3"]);
    let selected: Vec<&str> = md.lines().filter(|l| l.starts_with("| * |")).collect();
    assert_eq!(selected.len(), 1, "{md}");
    assert!(selected[0].contains("768x1024") && selected[0].contains("| full |"), "{md}");
    assert!(md.contains("VIOLATION"));
    assert_eq!(std::fs::read_to_string(dir.path().join("sweep_rows.jsonl")).unwrap().lines().count(), 8);
}

#[test]
fn ttft_campaign() {
    let dir = tempfile::tempdir().unwrap();
    let md = oemstream(dir.path(), &["ttft", "--n", "200"]);
    let row = md.lines().nth(2).unwrap();
    assert!(row.contains("mock-2b") && row.contains("| 200 |"), "{md}");
    let samples: Vec<f64> = serde_json::from_str(&std::fs::read_to_string(dir.path().join("ttft_samples.json")).unwrap()).unwrap();
    assert_eq!(samples.len(), 200);
}

#[test]
fn missing_config_is_an_error() {
    let output = Command::new(env!("CARGO_BIN_EXE_oemstream")).args(["--config", "/nonexistent.json", "run"]).output().unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("nonexistent"));
}
