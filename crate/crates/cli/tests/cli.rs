mod common;

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

use common::core_assets;
use serde_json::{json, Value};
use tempfile::TempDir;

fn codemem(data: &Path) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_codemem"));
    cmd.arg("--data-dir")
        .arg(data)
        .env_remove("CODEMEM_CONFIG")
        .env_remove("CODEMEM_API_TOKEN")
        .env_remove("RUST_LOG");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().unwrap()
}

fn ok(cmd: &mut Command) -> String {
    let out = run(cmd);
    assert!(
        out.status.success(),
        "{:?} failed\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn desk() -> std::path::PathBuf {
    core_assets().join("suites/desk.json")
}

fn traces() -> String {
    format!("replay:{}", core_assets().join("traces").display())
}

#[test]
fn version_and_help() {
    let dir = TempDir::new().unwrap();
    let out = ok(codemem(dir.path()).arg("--version"));
    assert!(out.contains(env!("CARGO_PKG_VERSION")));
    let help = ok(codemem(dir.path()).arg("--help"));
    for verb in ["serve", "run", "skills", "skill", "registry", "fixtures", "eval", "metrics", "trace"] {
        assert!(help.contains(verb), "{verb} missing from help");
    }
}

#[test]
fn run_then_reuse_the_skill() {
    let dir = TempDir::new().unwrap();
    let out = ok(codemem(dir.path()).args(["run", "--task"]).arg(desk()).args([
        "--task-id",
        "case_study_bridge",
        "--driver",
        &traces(),
    ]));
    let report: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(report["status"], "done");
    assert_eq!(report["driver_calls"], 15);
    assert_eq!(report["drive"].as_array().unwrap().len(), 4);
    assert!(report["last"]["final"].as_str().unwrap().contains("outlook_onedrive_bridge"));
    let session = report["session_id"].as_str().unwrap().to_string();

    let list = ok(codemem(dir.path()).args(["skills", "list"]));
    assert!(list.starts_with("outlook_onedrive_bridge\tv1\t"), "{list}");
    let shown: Value = serde_json::from_str(&ok(codemem(dir.path()).args(["skills", "show", "outlook_onedrive_bridge@1"]))).unwrap();
    let exported = ok(codemem(dir.path()).args(["skills", "export", "outlook_onedrive_bridge"]));
    assert_eq!(shown["source"], exported);
    let file = dir.path().join("bridge.py");
    ok(codemem(dir.path()).args(["skills", "export", "outlook_onedrive_bridge@v1", "--out"]).arg(&file));
    assert_eq!(std::fs::read_to_string(&file).unwrap(), exported);
    assert!(!run(codemem(dir.path()).args(["skills", "show", "outlook_onedrive_bridge@2"])).status.success());

    let reused: Value = serde_json::from_str(&ok(codemem(dir.path()).args([
        "skill",
        "run",
        "outlook_onedrive_bridge",
        "--args",
        r#"{"days_back": 15}"#,
    ])))
    .unwrap();
    assert_eq!(reused["result"]["exit_status"]["status"], "success");
    let paths: Vec<&Value> = reused["drive"].as_array().unwrap().iter().map(|f| &f["path"]).collect();
    let original: Vec<&Value> = report["drive"].as_array().unwrap().iter().collect();
    assert_eq!(paths, original);

    let metrics: Value = serde_json::from_str(&ok(codemem(dir.path()).args(["metrics", "--session", &session]))).unwrap();
    let react = metrics["context_cost"]["react"]["total"].as_u64().unwrap();
    let codemem_total = metrics["context_cost"]["codemem"]["total"].as_u64().unwrap();
    assert!(react > codemem_total);
    let one: Value = serde_json::from_str(&ok(codemem(dir.path()).args(["metrics", "--session", &session, "--mode", "react"]))).unwrap();
    assert_eq!(one["context_cost"]["react"]["total"], react);
    assert!(one["context_cost"].get("codemem").is_none());
    assert!(!run(codemem(dir.path()).args(["metrics", "--session", &session, "--mode", "fast"])).status.success());
    assert!(!run(codemem(dir.path()).args(["metrics", "--session", "sess-none"])).status.success());
}

#[test]
fn single_task_files_and_failing_runs() {
    let dir = TempDir::new().unwrap();
    let suite: Value = serde_json::from_str(&std::fs::read_to_string(desk()).unwrap()).unwrap();
    let task = suite["tasks"].as_array().unwrap().iter().find(|t| t["task_id"] == "acme_invoice").unwrap();
    let file = dir.path().join("task.json");
    std::fs::write(&file, task.to_string()).unwrap();
    let out = ok(codemem(dir.path()).args(["run", "--task"]).arg(&file).args(["--driver", &traces()]));
    let report: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(report["task_id"], "acme_invoice");

    // a suite with several tasks needs --task-id
    let out = run(codemem(dir.path()).args(["run", "--task"]).arg(desk()).args(["--driver", &traces()]));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--task-id"));

    // the wrong trace diverges: summary still printed, exit status 1
    let wrong = format!("replay:{}", core_assets().join("traces/weekly_subjects.jsonl").display());
    let out = run(codemem(dir.path()).args(["run", "--task"]).arg(&file).args(["--driver", &wrong]));
    assert_eq!(out.status.code(), Some(1));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["error"].as_str().unwrap().contains("diverge"), "{report}");
}

#[test]
fn registry_import_persists() {
    let dir = TempDir::new().unwrap();
    let out = ok(codemem(dir.path()).args(["registry", "search", "fetch emails", "-k", "3"]));
    assert!(out.starts_with("outlook__list_emails\t"), "{out}");

    let manifest = dir.path().join("crm.json");
    let doc = json!({"tools": [
        {"name": "crm__find_contact", "summary": "Find a contact by name", "tags": ["crm", "contact"]},
        {"name": "crm__update_contact", "summary": "Update a contact record", "tags": ["crm", "contact"]},
    ]});
    std::fs::write(&manifest, doc.to_string()).unwrap();
    let out = ok(codemem(dir.path()).args(["registry", "import"]).arg(&manifest));
    assert!(out.contains("imported 2 tools (6 in registry)"), "{out}");
    let out = ok(codemem(dir.path()).args(["registry", "search", "find contact", "-k", "1"]));
    assert_eq!(out.lines().collect::<Vec<_>>(), ["crm__find_contact\tFind a contact by name"]);
    // importing the same names again is refused and leaves nothing behind
    let again = run(codemem(dir.path()).args(["registry", "import"]).arg(&manifest));
    assert_eq!(again.status.code(), Some(2));
    assert_eq!(std::fs::read_dir(dir.path().join("manifests")).unwrap().count(), 1);

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"tools": [{"name": "Not A Name", "summary": "x"}]}"#).unwrap();
    assert!(!run(codemem(dir.path()).args(["registry", "import"]).arg(&bad)).status.success());
}

#[test]
fn fixtures_load_into_a_session() {
    let dir = TempDir::new().unwrap();
    let names = ok(codemem(dir.path()).args(["fixtures", "list"]));
    assert_eq!(names.trim(), "case_study");

    let out = ok(codemem(dir.path()).args(["run", "--task"]).arg(desk()).args([
        "--task-id",
        "count_attachment_emails",
        "--driver",
        &traces(),
    ]));
    let session = serde_json::from_str::<Value>(&out).unwrap()["session_id"].as_str().unwrap().to_string();
    let mut scenario = serde_json::to_value(codemem::toolhost::Scenario::case_study()).unwrap();
    scenario["name"] = json!("empty_inbox");
    scenario["emails"] = json!([]);
    let file = dir.path().join("empty.json");
    std::fs::write(&file, scenario.to_string()).unwrap();
    let out = ok(codemem(dir.path()).args(["fixtures", "load"]).arg(&file).args(["--session", &session]));
    assert!(out.contains("empty_inbox"));
    let info: Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("sessions").join(&session).join("session.json")).unwrap())
            .unwrap();
    assert_eq!(info["scenario"], "empty_inbox");

    // scenarios dropped into the data dir join the catalog
    std::fs::create_dir_all(dir.path().join("fixtures")).unwrap();
    std::fs::copy(&file, dir.path().join("fixtures/empty.json")).unwrap();
    let names = ok(codemem(dir.path()).args(["fixtures", "list"]));
    assert_eq!(names.lines().collect::<Vec<_>>(), ["case_study", "empty_inbox"]);

    std::fs::write(&file, "{}").unwrap();
    assert!(!run(codemem(dir.path()).args(["fixtures", "load"]).arg(&file).args(["--session", &session])).status.success());
    let good = dir.path().join("fixtures/empty.json");
    assert!(!run(codemem(dir.path()).args(["fixtures", "load"]).arg(&good).args(["--session", "sess-none"])).status.success());
}

#[test]
fn eval_writes_a_report() {
    let dir = TempDir::new().unwrap();
    let report = dir.path().join("report.json");
    let out = ok(codemem(dir.path())
        .args(["eval", "--suite"])
        .arg(desk())
        .args(["--driver", &traces(), "--repeats", "2", "--label", "desk", "--out"])
        .arg(&report));
    assert!(out.lines().nth(1).unwrap().starts_with("desk\t100%\t"), "{out}");
    let doc: Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    let tasks = serde_json::from_str::<Value>(&std::fs::read_to_string(desk()).unwrap()).unwrap()["tasks"]
        .as_array()
        .unwrap()
        .len();
    assert_eq!(doc["records"].as_array().unwrap().len(), tasks * 2);
    assert_eq!(doc["rows"][0]["correctness_min"], 100.0);
    assert_eq!(doc["rows"][0]["runs"], 2);

    let out = ok(codemem(dir.path()).args(["eval", "--records"]).arg(core_assets().join("records/summary_fixture.jsonl")));
    assert_eq!(out.lines().nth(1).unwrap(), "fixture\t96%\t7.00\t100.48\t2020000");
    assert!(out.contains("FAIL t17#0"));
}

#[test]
fn judged_tasks_need_verdicts() {
    let dir = TempDir::new().unwrap();
    let mut suite: Value = serde_json::from_str(&std::fs::read_to_string(desk()).unwrap()).unwrap();
    let tasks = suite["tasks"].as_array_mut().unwrap();
    tasks.retain(|t| t["task_id"] == "count_attachment_emails");
    tasks[0]["checker"] = json!({"kind": "judge", "rubric": "Counts emails with attachments."});
    let file = dir.path().join("judged.json");
    std::fs::write(&file, suite.to_string()).unwrap();
    let out = run(codemem(dir.path()).args(["eval", "--suite"]).arg(&file).args(["--driver", &traces()]));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("judge"));

    let verdicts = dir.path().join("verdicts.json");
    std::fs::write(&verdicts, r#"{"count_attachment_emails": false}"#).unwrap();
    let out = ok(codemem(dir.path())
        .args(["eval", "--suite"])
        .arg(&file)
        .args(["--driver", &traces(), "--verdicts"])
        .arg(&verdicts));
    assert!(out.contains("\t0%\t"), "{out}");
}

#[test]
fn trace_seal_reproduces_the_shipped_hashes() {
    let dir = TempDir::new().unwrap();
    let shipped = core_assets().join("traces/case_study_bridge.jsonl");
    let original = std::fs::read_to_string(&shipped).unwrap();
    // drop every hash, then seal again
    let bare: String = original
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("context_hash");
            format!("{v}\n")
        })
        .collect();
    let input = dir.path().join("bare.jsonl");
    std::fs::write(&input, &bare).unwrap();
    let sealed = dir.path().join("sealed.jsonl");
    ok(codemem(dir.path())
        .args(["trace", "seal", "--suite"])
        .arg(desk())
        .args(["--task", "case_study_bridge", "--trace"])
        .arg(&input)
        .arg("--out")
        .arg(&sealed));
    assert_eq!(std::fs::read_to_string(&sealed).unwrap(), original);
    assert_eq!(std::fs::read_to_string(&input).unwrap(), bare);

    // in place, and a trace that stops short is refused
    ok(codemem(dir.path()).args(["trace", "seal", "--suite"]).arg(desk()).args(["--task", "case_study_bridge", "--trace"]).arg(&input));
    assert_eq!(std::fs::read_to_string(&input).unwrap(), original);
    let short: String = bare.lines().take(3).map(|l| format!("{l}\n")).collect();
    std::fs::write(&input, short).unwrap();
    let out = run(codemem(dir.path()).args(["trace", "seal", "--suite"]).arg(desk()).args(["--task", "case_study_bridge", "--trace"]).arg(&input));
    assert!(!out.status.success());
}

#[test]
fn config_comes_from_the_environment() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("codemem.toml");
    std::fs::write(&config, "max_steps = 0\n").unwrap();
    let out = run(codemem(dir.path()).env("CODEMEM_CONFIG", &config).args(["fixtures", "list"]));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("max_steps"));

    let out = run(codemem(dir.path()).env("CODEMEM_CONFIG", dir.path().join("missing.toml")).args(["fixtures", "list"]));
    assert_eq!(out.status.code(), Some(2));

    // the config's data_dir is used unless --data-dir overrides it
    let data = dir.path().join("from-config");
    std::fs::write(&config, format!("data_dir = {:?}\n", data.to_str().unwrap())).unwrap();
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_codemem"));
    let out = cmd.env("CODEMEM_CONFIG", &config).args(["skills", "list"]).output().unwrap();
    assert!(out.status.success());
    assert!(data.join("skills").is_dir());
}

#[test]
fn serve_needs_a_token() {
    let dir = TempDir::new().unwrap();
    let out = run(codemem(dir.path()).args(["serve", "--listen", "127.0.0.1:0"]));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("CODEMEM_API_TOKEN"));
}

#[test]
fn serve_reports_a_taken_port() {
    let dir = TempDir::new().unwrap();
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = taken.local_addr().unwrap().to_string();
    let out = run(codemem(dir.path()).env("CODEMEM_API_TOKEN", "t0k3n").args(["serve", "--listen", &addr]));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("port in use"));
}

#[test]
fn serve_answers_over_http() {
    let dir = TempDir::new().unwrap();
    let mut child = codemem(dir.path())
        .env("CODEMEM_API_TOKEN", "t0k3n")
        .args(["serve", "--listen", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let base = line.trim().strip_prefix("codemem listening on ").unwrap().to_string();

    let health: Value = ureq::get(&format!("{base}/healthz")).call().unwrap().into_json().unwrap();
    assert_eq!(health["version"], env!("CARGO_PKG_VERSION"));
    let denied = ureq::get(&format!("{base}/skills")).set("Authorization", "Bearer nope").call();
    assert!(matches!(denied, Err(ureq::Error::Status(401, _))));
    let skills: Value = ureq::get(&format!("{base}/skills"))
        .set("Authorization", "Bearer t0k3n")
        .call()
        .unwrap()
        .into_json()
        .unwrap();
    assert_eq!(skills, json!([]));
    child.kill().unwrap();
    child.wait().unwrap();
}
