use std::path::{Path, PathBuf};
use std::process::Command;

fn core_fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(name)
}

fn conductor(dir: &Path) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_conductor"));
    cmd.current_dir(dir).env_remove("RUST_LOG");
    cmd
}

#[test]
fn run_prints_the_response() {
    let dir = tempfile::tempdir().unwrap();
    let out = conductor(dir.path())
        .args(["run", "--script"])
        .arg(core_fixture("demo_script.json"))
        .args([
            "--request",
            "Can you describe this picture and count how many objects in the picture?",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("3 objects"));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("object-detection via facebook/detr-resnet-101: ok"),
        "{stderr}"
    );
    assert!(dir.path().join("artifacts/s000001/log.jsonl").is_file());

    let out = conductor(dir.path())
        .args(["run", "--trace", "--script"])
        .arg(core_fixture("demo_script.json"))
        .args(["--request", "nothing to see"])
        .output()
        .unwrap();
    let trace: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(trace["plan"], serde_json::json!([]));
    // A fresh process continues the session numbering.
    assert!(dir.path().join("artifacts/s000002").is_dir());
}

#[test]
fn bench_writes_both_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = conductor(dir.path())
        .args([
            "bench",
            "--critic",
            "--passing",
            "--report",
            "reports/run1",
            "--dataset",
        ])
        .arg(core_fixture("bench.jsonl"))
        .arg("--script")
        .arg(core_fixture("demo_script.json"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("reports/run1.csv")).unwrap();
    // The demo script answers "[]" to every benchmark request and "yes" to every critic question.
    assert_eq!(
        csv.lines().last().unwrap(),
        "all,10,0.00,0.00,0.00,0.00,1.0000,100.00,0.00"
    );
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("reports/run1.json")).unwrap()).unwrap();
    assert_eq!(json["examples"].as_array().unwrap().len(), 10);
}

#[test]
fn unreachable_backend_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = conductor(dir.path())
        .args([
            "run",
            "--backend",
            "http",
            "--base-url",
            "http://127.0.0.1:9/v1",
            "--request",
            "hi",
        ])
        .env("RUST_BACKTRACE", "0")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("backend unavailable"));
}

#[test]
fn example_config_loads() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("conductor.example.toml");
    let cfg = conductor_core::service::ServiceConfig::load(&path).unwrap();
    assert_eq!(cfg.selection.k, 5);
}
