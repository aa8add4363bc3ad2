use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use refiner_api::{router, ApiConfig};
use serde_json::Value;
use tower::ServiceExt;

fn refiner(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_refiner"))
        .args(args)
        .env_remove("REFINER_DB")
        .env_remove("REFINER_CONFIG")
        .output()
        .expect("run refiner")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = refiner(args);
    assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
    stdout(&o)
}

fn json(args: &[&str]) -> Value {
    serde_json::from_str(&ok(args)).unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    ledger: PathBuf,
    db: PathBuf,
}

impl Fixture {
    fn db(&self) -> &str {
        self.db.to_str().unwrap()
    }
}

fn generated(blocks: u64) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let ledger = dir.path().join("l.jsonl");
    let db = dir.path().join("d");
    ok(&["generate", "--seed", "1", "--blocks", &blocks.to_string(), "--out", ledger.to_str().unwrap()]);
    Fixture { _dir: dir, ledger, db }
}

fn ingested(blocks: u64) -> Fixture {
    let f = generated(blocks);
    ok(&["ingest", "--db", f.db(), "--source", f.ledger.to_str().unwrap()]);
    f
}

fn line_count(path: &Path) -> u64 {
    std::fs::read_to_string(path).unwrap().lines().count() as u64
}

#[test]
fn generate_ingest_stats_counts_every_block() {
    let f = generated(20);
    assert_eq!(line_count(&f.ledger), 20);
    let summary = json(&["ingest", "--db", f.db(), "--source", f.ledger.to_str().unwrap()]);
    assert_eq!(summary["recorded_block_height"], 19);
    let stats = json(&["stats", "--db", f.db()]);
    assert_eq!(stats["block_count"], 20);
}

#[test]
fn example_condition_runs() {
    let f = ingested(20);
    let rows = json(&["query", "--db", f.db(), r#"EmployeeInfo.EmployeeElement.Name="David""#]);
    assert!(rows.is_array());
}

#[test]
fn syntax_error_names_offset() {
    let f = ingested(5);
    let o = refiner(&["query", "--db", f.db(), "a="]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).is_empty());
    let err = stderr(&o);
    assert!(err.contains("offset 2"), "{err}");
    assert_eq!(err.matches("offset").count(), 1, "{err}");
}

#[test]
fn exit_codes() {
    let f = ingested(5);
    let missing = f.db.with_file_name("missing");
    let cases: Vec<(Vec<&str>, i32)> = vec![
        (vec!["--help"], 0),
        (vec!["--version"], 0),
        (vec![], 1),
        (vec!["frobnicate"], 1),
        (vec!["blocks", "--bogus"], 1),
        (vec!["stats"], 1),
        (vec!["blocks", "--db", f.db(), "--limit", "0"], 1),
        (vec!["blocks", "--db", f.db(), "--from", "4", "--to", "1"], 1),
        (vec!["tx", "--db", f.db(), "--time-from", "yesterday"], 1),
        (vec!["query", "--db", f.db(), "x > 1", "--limit", "0"], 1),
        (vec!["stats", "--db", missing.to_str().unwrap()], 2),
        (vec!["tx", "--db", f.db(), "no-such-tx"], 2),
        (vec!["blocks", "--db", f.db(), "99"], 2),
        (vec!["schemas", "--db", f.db(), "77"], 2),
        (vec!["ingest", "--db", f.db()], 1),
        (vec!["blocks", "--db", f.db(), "0"], 0),
    ];
    for (args, code) in cases {
        let o = refiner(&args);
        assert_eq!(o.status.code(), Some(code), "{args:?}: {}", stderr(&o));
        if code != 0 {
            assert!(stdout(&o).is_empty(), "{args:?} wrote to stdout");
            assert!(!stderr(&o).is_empty(), "{args:?} printed no message");
        }
    }
}

#[test]
fn db_comes_from_environment() {
    let f = ingested(5);
    let o = Command::new(env!("CARGO_BIN_EXE_refiner"))
        .arg("stats")
        .env("REFINER_DB", &f.db)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    let stats: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(stats["block_count"], 5);
}

#[test]
fn table_format_renders_rows() {
    let f = ingested(5);
    let out = ok(&["--format", "table", "blocks", "--db", f.db()]);
    let lines: Vec<&str> = out.lines().collect();
    assert!(lines[0].starts_with("block_hash"), "{out}");
    assert!(lines[1].starts_with("---"));
    assert_eq!(lines.len(), 2 + 5 + 1);
    assert_eq!(*lines.last().unwrap(), "(5 of 5)");
}

async fn api_data(db: &Path, method: &str, uri: &str, body: Option<Value>) -> String {
    let app = router(&ApiConfig::new(db), None);
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK, "{uri}");
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let envelope: Value = serde_json::from_slice(&bytes).unwrap();
    serde_json::to_string(&envelope["data"]).unwrap()
}

#[tokio::test(flavor = "multi_thread")]
async fn json_output_matches_api_payloads() {
    let f = ingested(20);
    let db = f.db.clone();
    let members = json(&["schemas", "--db", f.db(), "1", "--states", "--limit", "1"]);
    let key = members[0]["key"].as_str().unwrap().to_string();
    let tx_id = json(&["tx", "--db", f.db(), "--limit", "1", "--desc"])[0]["tx_id"]
        .as_str()
        .unwrap()
        .to_string();

    let cases: Vec<(Vec<String>, &str, String, Option<Value>)> = vec![
        (vec!["history".into(), key.clone()], "GET", format!("/states/{key}/history"), None),
        (
            vec!["history".into(), key.clone(), "--include-invalid".into()],
            "GET",
            format!("/states/{key}/history?include_invalid=true"),
            None,
        ),
        (vec!["blocks".into(), "--from".into(), "3".into(), "--limit".into(), "4".into()], "GET", "/blocks?from=3&limit=4".into(), None),
        (vec!["blocks".into(), "7".into()], "GET", "/blocks/7".into(), None),
        (
            vec!["tx".into(), "--creator".into(), "Org1MSP".into(), "--include-invalid".into(), "--desc".into()],
            "GET",
            "/transactions?creator=Org1MSP&valid=false&order=desc".into(),
            None,
        ),
        (vec!["tx".into(), tx_id.clone()], "GET", format!("/transactions/{tx_id}"), None),
        (vec!["schemas".into()], "GET", "/schemas".into(), None),
        (vec!["schemas".into(), "2".into()], "GET", "/schemas/2".into(), None),
        (vec!["schemas".into(), "3".into(), "--states".into(), "--offset".into(), "2".into()], "GET", "/schemas/3/states?offset=2".into(), None),
        (vec!["stats".into()], "GET", "/stats".into(), None),
        (
            vec!["query".into(), "a02 >= 0".into(), "--scope".into(), "history".into(), "--limit".into(), "7".into()],
            "POST",
            "/query".into(),
            Some(serde_json::json!({"expr": "a02 >= 0", "scope": "history", "limit": 7})),
        ),
        (
            vec!["query".into(), "NOT b03 = true".into(), "--schema-id".into(), "3".into()],
            "POST",
            "/query".into(),
            Some(serde_json::json!({"expr": "NOT b03 = true", "schema_id": 3})),
        ),
    ];
    for (args, method, uri, body) in cases {
        let mut argv: Vec<&str> = args.iter().map(String::as_str).collect();
        argv.extend(["--db", f.db()]);
        let cli = ok(&argv);
        let api = api_data(&db, method, &uri, body).await;
        assert_eq!(cli.trim_end(), api, "{argv:?} vs {uri}");
    }
}

fn kill_term(child: &Child) {
    let status = Command::new("kill").args(["-TERM", &child.id().to_string()]).status().unwrap();
    assert!(status.success());
}

fn wait_exit(child: &mut Child, timeout: Duration) -> i32 {
    let start = Instant::now();
    loop {
        if let Some(status) = child.try_wait().unwrap() {
            return status.code().unwrap_or(-1);
        }
        assert!(start.elapsed() < timeout, "process did not exit");
        std::thread::sleep(Duration::from_millis(50));
    }
}

fn wait_for(what: &str, timeout: Duration, mut check: impl FnMut() -> bool) {
    let start = Instant::now();
    while !check() {
        assert!(start.elapsed() < timeout, "timed out waiting for {what}");
        std::thread::sleep(Duration::from_millis(100));
    }
}

fn stored_blocks(db: &str) -> Option<u64> {
    let o = refiner(&["stats", "--db", db]);
    if o.status.code() != Some(0) {
        return None;
    }
    serde_json::from_slice::<Value>(&o.stdout).ok()?["block_count"].as_u64()
}

#[test]
fn follow_tails_until_terminated() {
    let f = generated(12);
    let text = std::fs::read_to_string(&f.ledger).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let live = f.ledger.with_file_name("live.jsonl");
    std::fs::write(&live, lines[..6].join("\n") + "\n").unwrap();

    let mut child = Command::new(env!("CARGO_BIN_EXE_refiner"))
        .args(["ingest", "--follow", "--db", f.db(), "--source", live.to_str().unwrap()])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    wait_for("first blocks", Duration::from_secs(30), || stored_blocks(f.db()) == Some(6));
    let mut file = std::fs::OpenOptions::new().append(true).open(&live).unwrap();
    file.write_all((lines[6..].join("\n") + "\n").as_bytes()).unwrap();
    drop(file);
    wait_for("appended blocks", Duration::from_secs(30), || stored_blocks(f.db()) == Some(12));

    kill_term(&child);
    assert_eq!(wait_exit(&mut child, Duration::from_secs(30)), 0);
    let mut out = String::new();
    child.stdout.take().unwrap().read_to_string(&mut out).unwrap();
    let summary: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(summary["recorded_block_height"], 11);
}

fn http_get(port: u16, path: &str) -> Option<Value> {
    let mut s = TcpStream::connect(("127.0.0.1", port)).ok()?;
    write!(s, "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").ok()?;
    let mut resp = String::new();
    s.read_to_string(&mut resp).ok()?;
    let body = resp.split_once("\r\n\r\n")?.1;
    serde_json::from_str(body).ok()
}

#[test]
fn serve_with_ingest_reports_sync_progress() {
    let f = generated(10);
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let listen = format!("127.0.0.1:{port}");
    let mut child = Command::new(env!("CARGO_BIN_EXE_refiner"))
        .args(["serve", "--db", f.db(), "--listen", &listen, "--ingest", "--source", f.ledger.to_str().unwrap()])
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    wait_for("synced status", Duration::from_secs(30), || {
        http_get(port, "/sync/status").is_some_and(|v| v["data"]["recorded_block_height"] == 9)
    });
    let status = http_get(port, "/sync/status").unwrap();
    assert_eq!(status["data"]["source_height"], 9);
    assert!(status["data"]["last_sync_at"].is_string());
    let stats = http_get(port, "/stats").unwrap();
    assert_eq!(stats["data"]["block_count"], 10);

    kill_term(&child);
    assert_eq!(wait_exit(&mut child, Duration::from_secs(30)), 0);
}

#[test]
fn serve_fails_fast_on_missing_store() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("none");
    let o = refiner(&["serve", "--db", db.to_str().unwrap(), "--listen", "127.0.0.1:0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("store unavailable"), "{}", stderr(&o));
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("bench");
    let o = refiner(&[
        "--format",
        "table",
        "bench",
        "--blocks",
        "31",
        "--txs-per-block",
        "10",
        "--checkpoints",
        "100,200,300",
        "--dir",
        store.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    let rows: Vec<&str> = out.lines().collect();
    assert_eq!(rows.len(), 1 + 6, "{out}");
    assert!(stderr(&o).contains("parser: r^2"));

    let again = refiner(&["bench", "--dir", store.to_str().unwrap()]);
    assert_eq!(again.status.code(), Some(1));
    let unreachable = refiner(&["bench", "--blocks", "3", "--checkpoints", "1000"]);
    assert_eq!(unreachable.status.code(), Some(1));
}
