//! Runs generated scripts in a child interpreter process.
//!
//! Each execution gets a fresh scratch directory, a bridge listener with a
//! one-time token, a wall-clock limit and a cap on captured output. Isolation
//! beyond the token (filesystem, network, cgroups) is left to the deployment.

pub mod bridge;
pub mod preamble;

use std::fmt;
use std::io::{self, Read, Write};
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::toolhost::{Dispatcher, InvocationRecord, Outcome};
use bridge::{generate_token, BridgeServer};
pub use preamble::{generate_preamble, skill_call_stub, PreambleError};

pub const ENV_BRIDGE_ADDR: &str = "CODEMEM_BRIDGE_ADDR";
pub const ENV_BRIDGE_TOKEN: &str = "CODEMEM_BRIDGE_TOKEN";
pub const ENV_EXECUTION_ID: &str = "CODEMEM_EXECUTION_ID";
pub const ENV_NOW: &str = "CODEMEM_NOW";

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("interpreter `{0}` not found")]
    InterpreterNotFound(String),
    #[error("bridge authentication failed in execution {0}; execution killed")]
    BridgeAuthFailure(String),
    #[error("invalid limits: {0}")]
    InvalidLimits(String),
    #[error(transparent)]
    Preamble(#[from] PreambleError),
    #[error("sandbox i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    pub wall_timeout_secs: f64,
    pub max_output: usize,
    pub max_bridge_calls: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            wall_timeout_secs: 120.0,
            max_output: 65536,
            max_bridge_calls: 1000,
        }
    }
}

impl Limits {
    pub fn validate(&self) -> Result<(), SandboxError> {
        if !(self.wall_timeout_secs > 0.0) || self.max_output == 0 || self.max_bridge_calls == 0 {
            return Err(SandboxError::InvalidLimits(format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillRef {
    pub name: String,
    #[serde(default)]
    pub version: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRequest {
    pub session_id: String,
    pub execution_id: String,
    pub source: String,
    pub loaded_tools: Vec<String>,
    pub loaded_skills: Vec<SkillRef>,
    pub limits: Limits,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ExitStatus {
    Success,
    Nonzero { code: i32 },
    Timeout,
    Killed,
}

impl ExitStatus {
    pub fn is_success(&self) -> bool {
        matches!(self, ExitStatus::Success)
    }
}

impl fmt::Display for ExitStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExitStatus::Success => f.write_str("success"),
            ExitStatus::Nonzero { code } => write!(f, "nonzero ({code})"),
            ExitStatus::Timeout => f.write_str("timeout"),
            ExitStatus::Killed => f.write_str("killed"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeCallRef {
    pub invocation_id: String,
    pub tool: String,
    pub ok: bool,
}

/// Runs `source` compiled as `<script>`, so tracebacks number its lines
/// from 1 whatever the preamble holds, and drops the runner's own frame.
fn script_runner(source: &str) -> String {
    const RUNNER: &str = r#"
try:
    exec(compile(_cm_source, "<script>", "exec"), globals())
except SystemExit:
    raise
except BaseException as _cm_exc:
    import traceback as _cm_traceback
    _cm_traceback.print_exception(type(_cm_exc), _cm_exc, _cm_exc.__traceback__.tb_next)
    raise SystemExit(1)
"#;
    format!(
        "\n# ---- script ----\n_cm_source = {}{RUNNER}",
        serde_json::Value::String(source.to_string())
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub execution_id: String,
    pub exit_status: ExitStatus,
    pub stdout_tail: String,
    pub bridge_calls: Vec<BridgeCallRef>,
    pub wall_time: f64,
    pub started_at: DateTime<Utc>,
}

impl ExecutionResult {
    /// Exactly what the model is shown: captured output plus an exit summary.
    /// Timing is left out so replayed sessions see identical text.
    pub fn visible_text(&self) -> String {
        let mut out = self.stdout_tail.clone();
        if !out.is_empty() && !out.ends_with('\n') {
            out.push('\n');
        }
        out.push_str(&format!(
            "[exit status: {}; bridge calls: {}]",
            self.exit_status,
            self.bridge_calls.len()
        ));
        out
    }

    pub fn calls_to(&self, tool: &str) -> usize {
        self.bridge_calls.iter().filter(|c| c.tool == tool).count()
    }
}

/// An execution result together with the full invocation records.
#[derive(Debug, Clone)]
pub struct ExecutionOutcome {
    pub result: ExecutionResult,
    pub invocations: Vec<InvocationRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandboxConfig {
    /// Interpreter command line; the script path is appended.
    pub interpreter: Vec<String>,
    /// Parent for per-execution scratch directories (system temp if unset).
    pub scratch_root: Option<PathBuf>,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        Self {
            interpreter: vec!["python3".into(), "-u".into()],
            scratch_root: None,
        }
    }
}

/// Keeps the most recent `cap` bytes of a stream and counts what was dropped.
#[derive(Debug, Default)]
struct TailBuffer {
    cap: usize,
    bytes: Vec<u8>,
    dropped: usize,
}

impl TailBuffer {
    fn push(&mut self, chunk: &[u8]) {
        self.bytes.extend_from_slice(chunk);
        if self.bytes.len() > self.cap * 2 {
            let excess = self.bytes.len() - self.cap;
            self.bytes.drain(..excess);
            self.dropped += excess;
        }
    }

    fn finish(mut self) -> String {
        if self.bytes.len() > self.cap {
            let excess = self.bytes.len() - self.cap;
            self.bytes.drain(..excess);
            self.dropped += excess;
        }
        truncate_marker(self.dropped, &self.bytes)
    }
}

fn truncate_marker(dropped: usize, tail: &[u8]) -> String {
    if dropped == 0 {
        return String::from_utf8_lossy(tail).into_owned();
    }
    // skip a partially cut UTF-8 sequence at the front
    let start = tail.iter().take(3).take_while(|b| (**b & 0xC0) == 0x80).count();
    format!(
        "[truncated {} bytes]\n{}",
        dropped + start,
        String::from_utf8_lossy(&tail[start..])
    )
}

/// Truncates `text` to its last `max` bytes with a `[truncated N bytes]` marker.
pub fn tail_with_marker(text: &[u8], max: usize) -> String {
    let mut buf = TailBuffer {
        cap: max,
        ..Default::default()
    };
    buf.push(text);
    buf.finish()
}

#[derive(Debug, Clone, Default)]
pub struct Sandbox {
    config: SandboxConfig,
}

impl Sandbox {
    pub fn new(config: SandboxConfig) -> Self {
        Self { config }
    }

    pub fn config(&self) -> &SandboxConfig {
        &self.config
    }

    /// Whether the interpreter can be started at all.
    pub fn interpreter_available(&self) -> bool {
        let Some(program) = self.config.interpreter.first() else {
            return false;
        };
        Command::new(program)
            .args(&self.config.interpreter[1..])
            .arg("-c")
            .arg("pass")
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .status()
            .map(|s| s.success())
            .unwrap_or(false)
    }

    /// Runs `preamble + request.source` with the bridge wired to `dispatcher`.
    pub fn execute(
        &self,
        request: &ExecutionRequest,
        preamble: &str,
        dispatcher: Arc<dyn Dispatcher>,
        extra_env: &[(String, String)],
    ) -> Result<ExecutionOutcome, SandboxError> {
        request.limits.validate()?;
        let program = self
            .config
            .interpreter
            .first()
            .ok_or_else(|| SandboxError::InterpreterNotFound(String::new()))?;

        let scratch = match &self.config.scratch_root {
            Some(root) => {
                std::fs::create_dir_all(root)?;
                tempfile::Builder::new().prefix("codemem-").tempdir_in(root)?
            }
            None => tempfile::Builder::new().prefix("codemem-").tempdir()?,
        };
        let text = format!("{preamble}{}", script_runner(&request.source));

        let token = generate_token();
        let bridge = BridgeServer::start(token.clone(), request.limits.max_bridge_calls, dispatcher.clone())?;

        let started_at = Utc::now();
        let clock = Instant::now();
        let mut command = Command::new(program);
        command
            .args(&self.config.interpreter[1..])
            // read from stdin so no scratch path leaks into tracebacks
            .arg("-")
            .current_dir(scratch.path())
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .env(ENV_BRIDGE_ADDR, bridge.addr().to_string())
            .env(ENV_BRIDGE_TOKEN, &token)
            .env(ENV_EXECUTION_ID, &request.execution_id)
            .env("PYTHONIOENCODING", "utf-8")
            .env("PYTHONUNBUFFERED", "1")
            .envs(extra_env.iter().map(|(k, v)| (k.as_str(), v.as_str())));
        let mut child = command.spawn().map_err(|e| match e.kind() {
            io::ErrorKind::NotFound | io::ErrorKind::PermissionDenied => {
                SandboxError::InterpreterNotFound(program.clone())
            }
            _ => SandboxError::Io(e),
        })?;

        if let Some(mut stdin) = child.stdin.take() {
            std::thread::spawn(move || {
                let _ = stdin.write_all(text.as_bytes());
            });
        }

        let output = Arc::new(Mutex::new(TailBuffer {
            cap: request.limits.max_output,
            ..Default::default()
        }));
        let readers: Vec<_> = [
            child.stdout.take().map(|s| Box::new(s) as Box<dyn Read + Send>),
            child.stderr.take().map(|s| Box::new(s) as Box<dyn Read + Send>),
        ]
        .into_iter()
        .flatten()
        .map(|mut stream| {
            let output = output.clone();
            thread::spawn(move || {
                let mut chunk = [0u8; 8192];
                loop {
                    match stream.read(&mut chunk) {
                        Ok(0) | Err(_) => break,
                        Ok(n) => output.lock().expect("output lock poisoned").push(&chunk[..n]),
                    }
                }
            })
        })
        .collect();

        let deadline = Duration::from_secs_f64(request.limits.wall_timeout_secs);
        let exit_status = loop {
            if bridge.auth_failed() {
                let _ = child.kill();
                let _ = child.wait();
                return Err(SandboxError::BridgeAuthFailure(request.execution_id.clone()));
            }
            if let Some(status) = child.try_wait()? {
                break match status.code() {
                    Some(0) => ExitStatus::Success,
                    Some(code) => ExitStatus::Nonzero { code },
                    None => ExitStatus::Killed,
                };
            }
            if clock.elapsed() >= deadline {
                let _ = child.kill();
                let _ = child.wait();
                break ExitStatus::Timeout;
            }
            thread::sleep(Duration::from_millis(2));
        };
        let wall_time = clock.elapsed().as_secs_f64();

        // Grandchildren may keep the pipes open; give readers a bounded grace period.
        let grace = Instant::now();
        while readers.iter().any(|r| !r.is_finished()) && grace.elapsed() < Duration::from_millis(500) {
            thread::sleep(Duration::from_millis(2));
        }
        for r in readers.into_iter().filter(|r| r.is_finished()) {
            let _ = r.join();
        }
        drop(bridge);

        let stdout_tail = std::mem::take(&mut *output.lock().expect("output lock poisoned")).finish();
        let invocations = dispatcher.records();
        let bridge_calls = invocations
            .iter()
            .map(|r| BridgeCallRef {
                invocation_id: r.invocation_id.clone(),
                tool: r.tool.clone(),
                ok: matches!(r.outcome, Outcome::Ok { .. }),
            })
            .collect();
        Ok(ExecutionOutcome {
            result: ExecutionResult {
                execution_id: request.execution_id.clone(),
                exit_status,
                stdout_tail,
                bridge_calls,
                wall_time,
                started_at,
            },
            invocations,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_keeps_tail() {
        assert_eq!(tail_with_marker(b"hello", 10), "hello");
        assert_eq!(tail_with_marker(b"0123456789", 4), "[truncated 6 bytes]\n6789");
        // cut inside a multi-byte char: the orphaned continuation byte is dropped too
        let s = "aé".as_bytes(); // a, 0xC3, 0xA9
        assert_eq!(tail_with_marker(s, 1), "[truncated 3 bytes]\n");
    }

    #[test]
    fn visible_text_has_no_timing() {
        let r = ExecutionResult {
            execution_id: "exec-1".into(),
            exit_status: ExitStatus::Nonzero { code: 1 },
            stdout_tail: "boom".into(),
            bridge_calls: vec![],
            wall_time: 1.25,
            started_at: Utc::now(),
        };
        assert_eq!(r.visible_text(), "boom\n[exit status: nonzero (1); bridge calls: 0]");
    }

    #[test]
    fn limits_must_be_positive() {
        assert!(Limits::default().validate().is_ok());
        let bad = Limits {
            max_output: 0,
            ..Limits::default()
        };
        assert!(bad.validate().is_err());
    }
}
