use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use serde_json::{json, Value};

fn hilo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hilo")).args(args).output().unwrap()
}

fn write_config(dir: &Path, cfg: &Value) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, cfg.to_string()).unwrap();
    p.to_str().unwrap().to_string()
}

fn small() -> Value {
    json!({"dataset": {"kind": "generate", "spec": {"frames": 450}}})
}

#[test]
fn compare_prints_a_row_per_strategy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small());
    let out = hilo(&["compare", "--config", &cfg, "--seed", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["mpeg", "glimpse_like", "dds_like", "cloudseg_like", "vpaas"] {
        let rows = text.lines().filter(|l| l.split_whitespace().next() == Some(name)).count();
        assert_eq!(rows, 1, "{name}\n{text}");
    }

    let out = hilo(&["compare", "--config", &cfg, "--seed", "2", "--json"]);
    let reports: Vec<Value> = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(reports.len(), 5);
}

#[test]
fn run_is_deterministic_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small());
    let out_dir = dir.path().join("out");
    let a = hilo(&["run", "--config", &cfg, "--seed", "9", "--out", out_dir.to_str().unwrap()]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let b = hilo(&["run", "--config", &cfg, "--seed", "9"]);
    assert_eq!(a.stdout, b.stdout);

    let metrics: Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("metrics.json")).unwrap()).unwrap();
    let printed: Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(metrics, printed);
    let traces = std::fs::read_to_string(out_dir.join("traces.jsonl")).unwrap();
    assert_eq!(traces.lines().count(), 2);

    let rep = hilo(&["report", out_dir.join("metrics.json").to_str().unwrap()]);
    assert!(rep.status.success());
    assert!(String::from_utf8(rep.stdout).unwrap().contains("vpaas"));
}

#[test]
fn generated_dataset_can_be_run_from_a_path() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, r#"{"frames": 450}"#).unwrap();
    let data = dir.path().join("data.jsonl");
    let out = hilo(&["generate-dataset", "--spec", spec.to_str().unwrap(), "--seed", "4", "--out", data.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let cfg = write_config(dir.path(), &json!({"dataset": {"kind": "path", "path": data}}));
    let out = hilo(&["run", "--config", &cfg, "--strategy", "mpeg"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(m["strategy"], "mpeg");
}

#[test]
fn bad_config_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &json!({"network": {"wan_mbps": -1.0}}));
    let out = hilo(&["run", "--config", &cfg]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("network"));

    let cfg = write_config(dir.path(), &json!({"learner": {"budget": "lots"}}));
    let out = hilo(&["run", "--config", &cfg]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learner.budget"));

    let out = hilo(&["run", "--strategy", "nope"]);
    assert!(!out.status.success());
}

struct Server(std::process::Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn serve_accepts_experiments() {
    let mut child = Command::new(env!("CARGO_BIN_EXE_hilo"))
        .arg("serve")
        .env("HILO_PORT", "0")
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let stdout = child.stdout.take().unwrap();
    let _server = Server(child);
    let mut line = String::new();
    BufReader::new(stdout).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").expect(&line).to_string();

    let body = small().to_string();
    let mut conn = TcpStream::connect(&addr).unwrap();
    write!(
        conn,
        "POST /experiments HTTP/1.1\r\nHost: {addr}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut resp = String::new();
    conn.read_to_string(&mut resp).unwrap();
    assert!(resp.starts_with("HTTP/1.1 201"), "{resp}");
    let json_body = resp.split("\r\n\r\n").nth(1).unwrap();
    let v: Value = serde_json::from_str(json_body).unwrap();
    assert_eq!(v["status"], "finished");
}
