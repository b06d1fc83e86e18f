use std::io::{Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::Value;
use teachloop::domain::load_domain;
use teachloop::teaching::{Curriculum, Incoming, Mode, TeachingConfig};
use teachloop_service::session::Session;
use teachloop_service::{AppState, ServiceConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_teachloop"))
}

fn pool() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/domains")
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().unwrap()
}

fn error_record(o: &Output) -> Value {
    assert!(!o.status.success());
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().last().expect("an error record");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {line}"))
}

#[test]
fn curriculum_files_are_ordered_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let p = pool();
    let pool = p.to_str().unwrap();
    for out in ["a", "b"] {
        let o = run(&["gen-curriculum", "--pool", pool, "--seed", "7", "--out", out], dir.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["delivery.kc.json", "delivery.lessons.txt", "skateboard.kc.json"] {
        assert_eq!(std::fs::read(dir.path().join("a").join(f)).unwrap(), std::fs::read(dir.path().join("b").join(f)).unwrap());
    }
    let bank: Value = serde_json::from_slice(&std::fs::read(dir.path().join("a/delivery.kc.json")).unwrap()).unwrap();
    assert_eq!(bank["schema"], "kc/v1");
    let labels: Vec<&str> = bank["lessons"].as_array().unwrap().iter().map(|l| l["label"].as_str().unwrap()).collect();
    assert!(labels[0].contains("mud") && !labels[0].contains("recharged"), "{labels:?}");
    assert!(labels[1].contains("recharged"), "{labels:?}");
    assert!(labels[2].contains("all features"), "{labels:?}");
}

#[test]
fn empty_pool_fails_with_a_record() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("delivery");
    std::fs::create_dir_all(d.join("teach")).unwrap();
    std::fs::copy(pool().join("delivery/domain.json"), d.join("domain.json")).unwrap();
    let o = run(&["gen-curriculum", "--pool", d.to_str().unwrap()], dir.path());
    assert_eq!(error_record(&o)["error"]["kind"], "empty_pool");
}

#[test]
fn usage_errors_are_records_too() {
    let o = run(&["simulate", "--seed", "x"], Path::new("."));
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_record(&o)["error"]["kind"], "usage");
    assert!(run(&["--help"], Path::new(".")).status.success());
}

#[test]
fn minimal_study_is_one_session_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("study.toml"),
        "schema_version = \"simulate/v1\"\nmodes = [\"open\"]\ndomains = [\"delivery\"]\nlearners_per_cell = 1\n",
    )
    .unwrap();
    let p = pool();
    for out in ["a", "b"] {
        let o = run(&["simulate", "--config", "study.toml", "--pool", p.to_str().unwrap(), "--seed", "3", "--out", out], dir.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = std::fs::read(dir.path().join("a/study.json")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b/study.json")).unwrap());
    assert_eq!(std::fs::read(dir.path().join("a/summary.tsv")).unwrap(), std::fs::read(dir.path().join("b/summary.tsv")).unwrap());
    let report: Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(report["schema"], "study/v1");
    assert_eq!(report["sessions"].as_array().unwrap().len(), 1);
    assert_eq!(report["sessions"][0]["seed"], 3);
}

#[test]
fn study_config_errors_are_listed_together() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("bad.toml"),
        "schema_version = \"simulate/v1\"\nmodes = []\ndomains = [\"kitchen\"]\nlearners_per_cell = 0\n",
    )
    .unwrap();
    let p = pool();
    let o = run(&["simulate", "--config", "bad.toml", "--pool", p.to_str().unwrap()], dir.path());
    let rec = error_record(&o);
    assert_eq!(rec["error"]["kind"], "invalid_config");
    assert_eq!(rec["error"]["details"].as_array().unwrap().len(), 3, "{rec}");
    std::fs::write(dir.path().join("old.toml"), "schema_version = \"simulate/v0\"\n").unwrap();
    let o = run(&["simulate", "--config", "old.toml", "--pool", p.to_str().unwrap()], dir.path());
    assert_eq!(error_record(&o)["error"]["kind"], "invalid_config");
}

#[test]
fn filter_inspection_traces_every_event() {
    let dir = tempfile::tempdir().unwrap();
    let cur = Curriculum::new(&load_domain(&pool().join("delivery")).unwrap()).unwrap();
    let cfg = TeachingConfig { mode: Mode::Open, seed: 11, ..TeachingConfig::default() };
    let (mut s, _) = Session::create(&cur, "x".into(), cfg, 0, None).unwrap();
    std::fs::write(dir.path().join("fresh.json"), serde_json::to_string(&s.export()).unwrap()).unwrap();
    for _ in 0..4 {
        s.apply(&cur, Incoming::Ack, None, 0).unwrap();
    }
    std::fs::write(dir.path().join("later.json"), serde_json::to_string(&s.export()).unwrap()).unwrap();

    let o = run(&["inspect-filter", "fresh.json", "--out", "f"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["inspect-filter", "later.json", "--out", "l"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let trace: Vec<Value> = serde_json::from_slice(&std::fs::read(dir.path().join("l/trace.json")).unwrap()).unwrap();
    assert_eq!(trace.len(), s.state.history.len());
    let snaps = std::fs::read_to_string(dir.path().join("l/snapshots.ndjson")).unwrap();
    assert_eq!(snaps.lines().count(), s.snapshots.len());
    assert!(snaps.lines().all(|l| serde_json::from_str::<Value>(l).unwrap()["schema"] == "pf/v1"));

    // the first demonstration moves mass onto the side it teaches
    let region = {
        let mut r = s.snapshots[0].prior.clone();
        for n in &s.state.history[0].constraints {
            r.insert(teachloop::bec::HalfSpaceConstraint::new(teachloop::sphere::Vec3::from_f64(*n), teachloop::bec::Provenance::Demonstration).unwrap());
        }
        r
    };
    let prior_mass = s.snapshots[0].to_particles().mass_in(&region);
    assert!(trace[0]["mass"].as_f64().unwrap() > prior_mass, "{} vs {prior_mass}", trace[0]["mass"]);
    let fresh: Vec<Value> = serde_json::from_slice(&std::fs::read(dir.path().join("f/trace.json")).unwrap()).unwrap();
    assert_eq!(fresh.len(), 1);

    std::fs::write(dir.path().join("corrupt.json"), "{\"schema\": \"session/v1\"").unwrap();
    let o = run(&["inspect-filter", "corrupt.json"], dir.path());
    assert_eq!(error_record(&o)["error"]["kind"], "parse");
}

#[test]
fn serve_rejects_a_missing_pool_by_name() {
    let o = run(&["serve", "--pool", "/no/such/pool", "--port", "0"], Path::new("."));
    let rec = error_record(&o);
    assert_eq!(rec["error"]["kind"], "invalid_config");
    assert!(rec["error"]["message"].as_str().unwrap().contains("/no/such/pool"));
}

fn http(port: u16, method: &str, path: &str, body: &str) -> std::io::Result<String> {
    let mut s = TcpStream::connect(("127.0.0.1", port))?;
    write!(
        s,
        "{method} {path} HTTP/1.1\r\nHost: localhost\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )?;
    let mut out = String::new();
    s.read_to_string(&mut out)?;
    Ok(out)
}

fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

#[cfg(unix)]
#[test]
fn sigterm_leaves_replayable_logs_and_busy_ports_fail() {
    let dir = tempfile::tempdir().unwrap();
    let logs = dir.path().join("logs");
    let port = free_port();
    let p = pool();
    let mut child = bin()
        .args(["serve", "--pool", p.to_str().unwrap(), "--port", &port.to_string()])
        .env("TEACHLOOP_LOG_DIR", &logs)
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let t0 = Instant::now();
    let domains = loop {
        match http(port, "GET", "/domains", "") {
            Ok(r) => break r,
            Err(_) if t0.elapsed() < Duration::from_secs(30) => std::thread::sleep(Duration::from_millis(50)),
            Err(e) => panic!("service did not come up: {e}"),
        }
    };
    assert!(domains.starts_with("HTTP/1.1 200"), "{domains}");

    // a second server on the same port cannot start
    let o = run(&["serve", "--pool", p.to_str().unwrap(), "--port", &port.to_string()], dir.path());
    assert_eq!(error_record(&o)["error"]["kind"], "bind");

    let created = http(port, "POST", "/sessions", r#"{"condition":"full","domain":"delivery","seed":5}"#).unwrap();
    assert!(created.starts_with("HTTP/1.1 201"), "{created}");
    let body: Value = serde_json::from_str(created.split("\r\n\r\n").nth(1).unwrap()).unwrap();
    let id = body["session_id"].as_str().unwrap().to_string();
    let acked = http(port, "POST", &format!("/sessions/{id}/response"), r#"{"type":"ack"}"#).unwrap();
    assert!(acked.starts_with("HTTP/1.1 200"), "{acked}");
    let live = http(port, "GET", &format!("/sessions/{id}/export"), "").unwrap();
    let live: Value = serde_json::from_str(live.split("\r\n\r\n").nth(1).unwrap()).unwrap();

    Command::new("kill").args(["-TERM", &child.id().to_string()]).status().unwrap();
    let status = child.wait().unwrap();
    assert!(status.success(), "{status:?}");

    let cfg = ServiceConfig { pool: p, log_dir: logs, ..ServiceConfig::default() };
    let state = AppState::load(&cfg).unwrap();
    let sessions = state.sessions.read().unwrap();
    let replayed = sessions[&id].lock().unwrap().export();
    assert_eq!(serde_json::to_value(&replayed).unwrap(), live);
}
