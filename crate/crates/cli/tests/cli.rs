use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/fixtures")
        .join(name)
}

fn deepedit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deepedit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn probe(dir: &Path, phase: &str, config: &str) -> PathBuf {
    let out = dir.join(format!("{phase}-{config}.jsonl"));
    let bundle = fixture("hp-mini");
    let cfg = fixture(config);
    let o = deepedit(&[
        "probe",
        "--phase",
        phase,
        "--bundle",
        s(&bundle),
        "--endpoint-config",
        s(&cfg),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn report(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn shallow_probe_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let pre = probe(dir.path(), "pre", "mock-pre.json");
    let post = probe(dir.path(), "post", "mock-shallow.json");
    let out = dir.path().join("report.json");
    let bundle = fixture("hp-mini");
    let o = deepedit(&[
        "eval",
        "--bundle",
        s(&bundle),
        "--pre",
        s(&pre),
        "--post",
        s(&post),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&out);
    assert!((r["ifr_overall"].as_f64().unwrap() - 0.585786).abs() < 1e-6);
    assert_eq!(r["ckp"].as_f64().unwrap(), 1.0);

    // Same inputs, same bytes.
    let again = dir.path().join("again.json");
    deepedit(&[
        "eval",
        "--bundle",
        s(&bundle),
        "--pre",
        s(&pre),
        "--post",
        s(&post),
        "--out",
        s(&again),
    ]);
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn deep_edit_via_endpoints() {
    let bundle = fixture("hp-mini");
    let o = deepedit(&[
        "eval",
        "--bundle",
        s(&bundle),
        "--pre-endpoint",
        s(&fixture("mock-pre.json")),
        "--post-endpoint",
        s(&fixture("mock-deep.json")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["ifr_overall"].as_f64().unwrap(), 0.0);
    assert_eq!(r["ckp"].as_f64().unwrap(), 1.0);
}

#[test]
fn identical_endpoints_need_dry_run() {
    let bundle = fixture("hp-mini");
    let pre = fixture("mock-pre.json");
    let args = [
        "eval",
        "--bundle",
        s(&bundle),
        "--pre-endpoint",
        s(&pre),
        "--post-endpoint",
        s(&pre),
    ];
    assert_eq!(deepedit(&args).status.code(), Some(2));
    let mut dry = args.to_vec();
    dry.push("--dry-run");
    let o = deepedit(&dry);
    assert_eq!(o.status.code(), Some(0));
    assert!(o.stdout.is_empty());
}

#[test]
fn missing_chain_exits_with_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let pre = probe(dir.path(), "pre", "mock-pre.json");
    let post = probe(dir.path(), "post", "mock-shallow.json");
    let text = std::fs::read_to_string(&pre).unwrap();
    let trimmed: Vec<&str> = text.lines().skip(1).collect();
    std::fs::write(&pre, trimmed.join("\n") + "\n").unwrap();
    let bundle = fixture("hp-mini");
    let o = deepedit(&["eval", "--bundle", s(&bundle), "--pre", s(&pre), "--post", s(&post)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no probe record"));
    let dry = deepedit(&[
        "eval",
        "--bundle",
        s(&bundle),
        "--pre",
        s(&pre),
        "--post",
        s(&post),
        "--dry-run",
    ]);
    assert_eq!(dry.status.code(), Some(3));
}

#[test]
fn stats_of_fixture() {
    let o = deepedit(&["stats", "--bundle", s(&fixture("hp-mini"))]);
    assert!(o.status.success());
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["total"], 3);
    assert_eq!(v["by_length"]["1"], 1);
    assert_eq!(v["by_length"]["2"], 2);
}

#[test]
fn mock_edit_reports() {
    let bundle = fixture("hp-mini");
    let o = deepedit(&["mock-edit", "--bundle", s(&bundle), "--scope", "deep"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["ifr_overall"].as_f64().unwrap(), 0.0);
    assert_eq!(r["efficacy"].as_f64().unwrap(), 1.0);
    let bad = deepedit(&["mock-edit", "--bundle", s(&bundle), "--noise", "1.5"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn build_from_seed_file_with_mock() {
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("built");
    let checkpoint = dir.path().join("state.json");
    let o = deepedit(&[
        "build",
        "--seeds",
        s(&fixture("seeds.csv")),
        "--row",
        "21",
        "--graph-id",
        "hp",
        "--endpoint-config",
        s(&fixture("mock-pre.json")),
        "--mock-knowledge",
        s(&fixture("hp-mini")),
        "--checkpoint",
        s(&checkpoint),
        "--out",
        s(&stem),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["status"], "idle");
    assert_eq!(summary["edges"], 1);
    assert_eq!(summary["chains"], 1);
    assert!(checkpoint.exists());
    let stats = deepedit(&["stats", "--bundle", s(&stem)]);
    let v: Value = serde_json::from_slice(&stats.stdout).unwrap();
    assert_eq!(v["total"], 1);
}

#[test]
fn bad_inputs() {
    let o = deepedit(&["stats", "--bundle", "/nonexistent/x"]);
    assert_eq!(o.status.code(), Some(3));
    let o = deepedit(&[
        "build",
        "--seed",
        "only two | parts",
        "--endpoint-config",
        s(&fixture("mock-pre.json")),
        "--out",
        "/tmp/x",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = deepedit(&[
        "probe",
        "--phase",
        "during",
        "--bundle",
        "b",
        "--endpoint-config",
        "e",
        "--out",
        "o",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn transcript_keeps_raw_samples() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("pre.jsonl");
    let transcript = dir.path().join("pre.transcript.jsonl");
    let o = deepedit(&[
        "probe",
        "--phase",
        "pre",
        "--bundle",
        s(&fixture("hp-mini")),
        "--endpoint-config",
        s(&fixture("mock-pre.json")),
        "--out",
        s(&out),
        "--transcript",
        s(&transcript),
    ]);
    assert!(o.status.success());
    let lines = std::fs::read_to_string(&transcript).unwrap();
    // 5 chain steps and 2 contextual facts, 5 samples each.
    assert_eq!(lines.lines().count(), 35);
    assert!(!std::fs::read_to_string(&out).unwrap().contains("raw_responses"));
}
