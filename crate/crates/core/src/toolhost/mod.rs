//! Dispatches bridge tool calls to their bindings and records every
//! invocation.
//!
//! Progressive disclosure is enforced here: a tool that exists but was not
//! loaded into the calling session is refused with `not_loaded`.

pub mod filter;
pub mod fixture;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::registry::{Binding, Registry};
pub use fixture::{FixtureState, Scenario};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ToolError {
    #[error("tool `{0}` has no binding")]
    UnboundTool(String),
    #[error("tool `{0}` was not loaded in this session; call load_functions first")]
    NotLoaded(String),
    #[error("{kind}: {message}")]
    Binding { kind: String, message: String },
}

impl ToolError {
    pub fn binding(kind: &str, message: impl Into<String>) -> Self {
        ToolError::Binding {
            kind: kind.to_string(),
            message: message.into(),
        }
    }

    pub fn bad_args(message: impl Into<String>) -> Self {
        Self::binding("bad_args", message)
    }

    pub fn kind(&self) -> &str {
        match self {
            ToolError::UnboundTool(_) => "unbound_tool",
            ToolError::NotLoaded(_) => "not_loaded",
            ToolError::Binding { kind, .. } => kind,
        }
    }

    pub fn message(&self) -> String {
        match self {
            ToolError::Binding { message, .. } => message.clone(),
            other => other.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Ok { result: Value },
    Error { kind: String, message: String },
}

impl Outcome {
    pub fn is_ok(&self) -> bool {
        matches!(self, Outcome::Ok { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvocationRecord {
    pub invocation_id: String,
    pub execution_id: String,
    pub tool: String,
    pub args: Value,
    pub outcome: Outcome,
    pub sequence_index: u64,
    pub timestamp: DateTime<Utc>,
}

impl InvocationRecord {
    /// The record without its wall-clock timestamp, for determinism checks.
    pub fn canonical(&self) -> Value {
        serde_json::json!({
            "tool": self.tool,
            "args": self.args,
            "outcome": self.outcome,
            "sequence_index": self.sequence_index,
        })
    }
}

/// Per-execution view used while a sandboxed script runs.
#[derive(Debug)]
pub struct ExecutionContext {
    pub session_id: String,
    pub execution_id: String,
    pub loaded_tools: BTreeSet<String>,
    records: Mutex<Vec<InvocationRecord>>,
}

impl ExecutionContext {
    pub fn new(
        session_id: impl Into<String>,
        execution_id: impl Into<String>,
        loaded_tools: impl IntoIterator<Item = String>,
    ) -> Self {
        Self {
            session_id: session_id.into(),
            execution_id: execution_id.into(),
            loaded_tools: loaded_tools.into_iter().collect(),
            records: Mutex::new(Vec::new()),
        }
    }

    fn record(&self, tool: &str, args: Value, outcome: Outcome) {
        let mut records = self.records.lock().expect("record lock poisoned");
        let sequence_index = records.len() as u64;
        records.push(InvocationRecord {
            invocation_id: format!("{}#{}", self.execution_id, sequence_index),
            execution_id: self.execution_id.clone(),
            tool: tool.to_string(),
            args,
            outcome,
            sequence_index,
            timestamp: Utc::now(),
        });
    }

    pub fn records(&self) -> Vec<InvocationRecord> {
        self.records.lock().expect("record lock poisoned").clone()
    }
}

/// The tool-side of the sandbox bridge.
pub trait Dispatcher: Send + Sync {
    /// Executes a tool call and records it.
    fn dispatch(&self, tool: &str, args: Value) -> Result<Value, ToolError>;
    /// Records a call the bridge refused before it reached a binding.
    fn reject(&self, tool: &str, args: Value, error: &ToolError);
    fn records(&self) -> Vec<InvocationRecord>;
}

pub struct ToolHost {
    registry: Arc<Registry>,
    fixtures: RwLock<HashMap<String, Arc<Mutex<FixtureState>>>>,
    http: ureq::Agent,
}

impl std::fmt::Debug for ToolHost {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToolHost").finish_non_exhaustive()
    }
}

impl ToolHost {
    pub fn new(registry: Arc<Registry>) -> Self {
        Self {
            registry,
            fixtures: RwLock::new(HashMap::new()),
            http: ureq::AgentBuilder::new()
                .timeout(Duration::from_secs(60))
                .build(),
        }
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    /// Installs (or replaces) a session's fixture with an empty drive.
    pub fn load_fixture(&self, session_id: &str, scenario: Arc<Scenario>) {
        self.fixtures
            .write()
            .expect("fixture lock poisoned")
            .insert(session_id.to_string(), Arc::new(Mutex::new(FixtureState::new(scenario))));
    }

    /// Installs previously saved fixture state (scenario plus drive).
    pub fn restore_fixture(&self, session_id: &str, state: FixtureState) {
        self.fixtures
            .write()
            .expect("fixture lock poisoned")
            .insert(session_id.to_string(), Arc::new(Mutex::new(state)));
    }

    pub fn fixture(&self, session_id: &str) -> Option<FixtureState> {
        self.fixtures
            .read()
            .expect("fixture lock poisoned")
            .get(session_id)
            .map(|f| f.lock().expect("fixture lock poisoned").clone())
    }

    pub fn drive(&self, session_id: &str) -> Option<BTreeMap<String, Vec<u8>>> {
        self.fixture(session_id).map(|f| f.drive)
    }

    pub fn reset_fixture(&self, session_id: &str) -> bool {
        match self.fixtures.read().expect("fixture lock poisoned").get(session_id) {
            Some(f) => {
                f.lock().expect("fixture lock poisoned").reset();
                true
            }
            None => false,
        }
    }

    /// Runs one tool call in `ctx` and appends its record, whatever the outcome.
    pub fn invoke(&self, ctx: &ExecutionContext, tool: &str, args: Value) -> Result<Value, ToolError> {
        let result = self.run_binding(ctx, tool, &args);
        let outcome = match &result {
            Ok(v) => Outcome::Ok { result: v.clone() },
            Err(e) => Outcome::Error {
                kind: e.kind().to_string(),
                message: e.message(),
            },
        };
        ctx.record(tool, args, outcome);
        result
    }

    fn run_binding(&self, ctx: &ExecutionContext, tool: &str, args: &Value) -> Result<Value, ToolError> {
        let entry = self
            .registry
            .entry(tool)
            .ok_or_else(|| ToolError::UnboundTool(tool.to_string()))?;
        if !ctx.loaded_tools.contains(tool) {
            return Err(ToolError::NotLoaded(tool.to_string()));
        }
        match entry.binding {
            Binding::None => Err(ToolError::UnboundTool(tool.to_string())),
            Binding::Fixture { handler } => {
                let fixture = self
                    .fixtures
                    .read()
                    .expect("fixture lock poisoned")
                    .get(&ctx.session_id)
                    .cloned()
                    .ok_or_else(|| {
                        ToolError::binding(
                            "fixture_missing",
                            format!("session `{}` has no fixture loaded", ctx.session_id),
                        )
                    })?;
                let mut state = fixture.lock().expect("fixture lock poisoned");
                state.handle(&handler, args)
            }
            Binding::Http { url } => self.call_http(&url, args),
        }
    }

    fn call_http(&self, url: &str, args: &Value) -> Result<Value, ToolError> {
        let response = self.http.post(url).send_json(args.clone()).map_err(|e| match e {
            ureq::Error::Status(code, resp) => ToolError::binding(
                "http_status",
                format!("{code}: {}", resp.into_string().unwrap_or_default()),
            ),
            other => ToolError::binding("http_transport", other.to_string()),
        })?;
        let body = response
            .into_string()
            .map_err(|e| ToolError::binding("http_transport", e.to_string()))?;
        Ok(serde_json::from_str(&body).unwrap_or(Value::String(body)))
    }
}

/// A [`ToolHost`] bound to one execution.
pub struct BoundExecution {
    pub host: Arc<ToolHost>,
    pub ctx: ExecutionContext,
}

impl Dispatcher for BoundExecution {
    fn dispatch(&self, tool: &str, args: Value) -> Result<Value, ToolError> {
        self.host.invoke(&self.ctx, tool, args)
    }

    fn reject(&self, tool: &str, args: Value, error: &ToolError) {
        self.ctx.record(
            tool,
            args,
            Outcome::Error {
                kind: error.kind().to_string(),
                message: error.message(),
            },
        );
    }

    fn records(&self) -> Vec<InvocationRecord> {
        self.ctx.records()
    }
}

/// The built-in manifest binding the case-study fixture tools.
pub const CASE_STUDY_MANIFEST: &str = include_str!("../../assets/manifests/case_study.json");
