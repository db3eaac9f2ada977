use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::sync::Arc;

use codemem::registry::Registry;
use codemem::sandbox::{
    generate_preamble, skill_call_stub, ExecutionRequest, ExitStatus, Limits, Sandbox, SandboxConfig,
    SandboxError,
};
use codemem::toolhost::{BoundExecution, ExecutionContext, Scenario, ToolHost, CASE_STUDY_MANIFEST};

const SKILL: &str = include_str!("../assets/skills/outlook_onedrive_bridge.py");

fn host() -> Arc<ToolHost> {
    let registry = Arc::new(Registry::new());
    registry.import_manifest(CASE_STUDY_MANIFEST).unwrap();
    let host = Arc::new(ToolHost::new(registry));
    host.load_fixture("s", Arc::new(Scenario::case_study()));
    host
}

fn request(source: &str, limits: Limits) -> ExecutionRequest {
    ExecutionRequest {
        session_id: "s".into(),
        execution_id: "exec-1".into(),
        source: source.into(),
        loaded_tools: host().registry().names(),
        loaded_skills: vec![],
        limits,
    }
}

fn bound(host: &Arc<ToolHost>) -> Arc<BoundExecution> {
    Arc::new(BoundExecution {
        host: host.clone(),
        ctx: ExecutionContext::new("s", "exec-1", host.registry().names()),
    })
}

fn run(source: &str, limits: Limits) -> Result<codemem::sandbox::ExecutionOutcome, SandboxError> {
    let host = host();
    let schemas = host.registry().schemas(&host.registry().names()).unwrap();
    let preamble = generate_preamble(&schemas, &[]).unwrap();
    let env = vec![("CODEMEM_NOW".to_string(), "2025-12-20T12:00:00Z".to_string())];
    Sandbox::default().execute(&request(source, limits), &preamble, bound(&host), &env)
}

#[test]
fn hello_world() {
    let out = run("print('ok')", Limits::default()).unwrap();
    assert_eq!(out.result.exit_status, ExitStatus::Success);
    assert_eq!(out.result.stdout_tail, "ok\n");
    assert!(out.invocations.is_empty());
}

#[test]
fn nonzero_exit_keeps_stderr() {
    let out = run("import sys\nprint('before')\nraise KeyError('real_company')", Limits::default()).unwrap();
    assert_eq!(out.result.exit_status, ExitStatus::Nonzero { code: 1 });
    assert!(out.result.stdout_tail.contains("before"));
    assert!(out.result.stdout_tail.contains("KeyError"));
}

#[test]
fn wall_timeout() {
    let limits = Limits {
        wall_timeout_secs: 1.0,
        ..Limits::default()
    };
    let out = run("import time\ntime.sleep(10)", limits).unwrap();
    assert_eq!(out.result.exit_status, ExitStatus::Timeout);
    assert!(out.result.wall_time < 5.0);
}

#[test]
fn output_is_tail_truncated() {
    let limits = Limits {
        max_output: 100,
        ..Limits::default()
    };
    let out = run("print('x' * 1000)\nprint('END')", limits).unwrap();
    assert!(out.result.stdout_tail.starts_with("[truncated "));
    assert!(out.result.stdout_tail.ends_with("END\n"));
}

#[test]
fn missing_interpreter() {
    let sandbox = Sandbox::new(SandboxConfig {
        interpreter: vec!["definitely-not-a-python-xyz".into()],
        scratch_root: None,
    });
    let host = host();
    let err = sandbox
        .execute(&request("print(1)", Limits::default()), "", bound(&host), &[])
        .unwrap_err();
    assert!(matches!(err, SandboxError::InterpreterNotFound(_)));
    assert!(!sandbox.interpreter_available());
}

#[test]
fn wrong_token_kills_execution_and_records_nothing() {
    // the script bypasses its own client and talks to the bridge with a forged token
    let source = r#"
import os, socket, time
host, _, port = os.environ["CODEMEM_BRIDGE_ADDR"].rpartition(":")
s = socket.create_connection((host, int(port)))
s.sendall(b'{"id":1,"tool":"outlook__list_emails","args":{},"token":"00000000000000000000000000000000"}\n')
s.makefile("rb").readline()
time.sleep(10)
"#;
    let host = host();
    let dispatcher = bound(&host);
    let preamble = generate_preamble(&[], &[]).unwrap();
    let err = Sandbox::default()
        .execute(&request(source, Limits::default()), &preamble, dispatcher.clone(), &[])
        .unwrap_err();
    assert!(matches!(err, SandboxError::BridgeAuthFailure(_)));
    assert!(dispatcher.ctx.records().is_empty());
}

#[test]
fn tool_errors_are_catchable() {
    let source = r#"
async def main():
    try:
        await outlook__get_attachment("nope")
    except ToolError as e:
        print("caught", e.kind)
codemem_run(main)
"#;
    let out = run(source, Limits::default()).unwrap();
    assert_eq!(out.result.exit_status, ExitStatus::Success);
    assert!(out.result.stdout_tail.starts_with("caught "));
    assert_eq!(out.invocations.len(), 1);
    assert!(!out.invocations[0].outcome.is_ok());
}

#[test]
fn case_study_skill_end_to_end() {
    let host = host();
    let schemas = host.registry().schemas(&host.registry().names()).unwrap();
    let preamble = generate_preamble(&schemas, &[]).unwrap();
    let source = format!("{SKILL}{}", skill_call_stub("agent_main", &serde_json::json!({"days_back": 15})));
    let env = vec![("CODEMEM_NOW".to_string(), "2025-12-20T12:00:00Z".to_string())];
    let out = Sandbox::default()
        .execute(&request(&source, Limits::default()), &preamble, bound(&host), &env)
        .unwrap();
    assert_eq!(out.result.exit_status, ExitStatus::Success, "{}", out.result.stdout_tail);
    assert_eq!(out.result.calls_to("outlook__list_emails"), 1);
    assert_eq!(out.result.calls_to("outlook__get_attachment"), 4);
    assert_eq!(out.result.calls_to("onedrive__upload_file"), 4);
    let drive = host.drive("s").unwrap();
    let paths: Vec<&str> = drive.keys().map(String::as_str).collect();
    assert_eq!(
        paths,
        [
            "Email Attachments December/Acme/acme_invoice.pdf",
            "Email Attachments December/Globex/figures_q4.xlsx",
            "Email Attachments December/Initech/contract.pdf",
            "Email Attachments December/Umbrella/po_1182.pdf",
        ]
    );
    assert!(!out.result.stdout_tail.contains("CODEMEM-PAYLOAD-SENTINEL"));
}

#[test]
fn raw_socket_roundtrip_with_right_token() {
    // exercises the bridge the way a foreign client would, from outside python
    use codemem::sandbox::bridge::BridgeServer;
    let host = host();
    let dispatcher = bound(&host);
    let server = BridgeServer::start("abc".into(), 10, dispatcher.clone()).unwrap();
    let mut conn = TcpStream::connect(server.addr()).unwrap();
    conn.write_all(b"{\"id\":1,\"tool\":\"onedrive__list_files\",\"args\":{},\"token\":\"abc\"}\n")
        .unwrap();
    let mut line = String::new();
    BufReader::new(conn).read_line(&mut line).unwrap();
    assert_eq!(line, "{\"id\":1,\"ok\":true,\"result\":[]}\n");
    assert_eq!(dispatcher.ctx.records().len(), 1);
}

#[test]
fn tracebacks_point_into_the_script() {
    let out = run("x = 1\n\nraise KeyError('real_company')", Limits::default()).unwrap();
    assert_eq!(out.result.exit_status, ExitStatus::Nonzero { code: 1 });
    let tail = &out.result.stdout_tail;
    assert!(tail.contains("File \"<script>\", line 3"), "{tail}");
    assert!(!tail.contains("<stdin>") && !tail.contains("codemem-"), "{tail}");
    let exit = run("import sys\nsys.exit(3)", Limits::default()).unwrap();
    assert_eq!(exit.result.exit_status, ExitStatus::Nonzero { code: 3 });
}
