//! The agent loop: a driver proposes actions, the runtime executes them
//! against the registry, todo store, sandbox and skill bank, and every step
//! lands in the session trajectory.

pub mod driver;
pub mod trajectory;

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use chrono::{DateTime, SecondsFormat, Utc};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::registry::{Binding, LoadedSet, Registry, RegistryError, DEFAULT_SEARCH_K};
use crate::sandbox::{
    generate_preamble, skill_call_stub, ExecutionRequest, ExecutionResult, Limits, Sandbox, SandboxConfig,
    SandboxError, SkillRef, ENV_NOW,
};
use crate::skillbank::{ExecutionEvidence, Skill, SkillBank, SkillDraft, SkillError, ValidationRecord};
use crate::todos::{TodoError, TodoItem, TodoList, TodoStore};
use crate::toolhost::{BoundExecution, ExecutionContext, FixtureState, Scenario, ToolError, ToolHost};
use driver::{ActionKind, Driver, DriverError, VisibleContext};
pub use trajectory::{visible_messages, Event, EventKind, SessionStatus, Trajectory};

pub const SYSTEM_PROMPT_V1: &str = include_str!("../../assets/prompts/system_v1.txt");

/// Tools the driver may call directly. Registry tools are only reachable
/// from inside `execute_code`.
pub const CORE_TOOLS: [&str; 7] = [
    "search_functions",
    "load_functions",
    "write_todos",
    "execute_code",
    "register_skill",
    "run_skill",
    "search_skills",
];

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("session `{session_id}` is {status:?}")]
    SessionNotActive {
        session_id: String,
        status: SessionStatus,
    },
    #[error(transparent)]
    Driver(#[from] DriverError),
    #[error("step limit of {0} reached")]
    StepLimitExceeded(usize),
    #[error("visible context of {tokens} tokens exceeds the budget of {budget}")]
    TokenBudgetExceeded { tokens: u64, budget: u64 },
    #[error(transparent)]
    Skill(#[from] SkillError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Todo(#[from] TodoError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Tool(#[from] ToolError),
    #[error("invalid arguments: {0}")]
    InvalidArguments(String),
    #[error("storage: {0}")]
    Io(String),
}

impl From<std::io::Error> for OrchestratorError {
    fn from(e: std::io::Error) -> Self {
        OrchestratorError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuntimeConfig {
    pub max_steps: usize,
    /// Estimated tokens of visible context allowed before a driver call.
    pub token_budget: u64,
    pub limits: Limits,
    /// Lets `register_skill` proceed without `user_confirmed`.
    pub auto_register: bool,
    /// Truncate visible history to the plan after a failed execution.
    pub recover_on_failure: bool,
    pub system_prompt: String,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            max_steps: 40,
            token_budget: 200_000,
            limits: Limits::default(),
            auto_register: false,
            recover_on_failure: true,
            system_prompt: SYSTEM_PROMPT_V1.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub created_at: DateTime<Utc>,
    pub status: SessionStatus,
    pub loaded_tools: LoadedSet,
    pub loaded_skills: Vec<SkillRef>,
    pub executions: u32,
    pub scenario: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct SavedFixture {
    scenario: Scenario,
    drive: BTreeMap<String, String>,
}

struct SessionHandle {
    /// Serializes driver loops and executions within the session.
    run: Mutex<()>,
    info: Mutex<SessionInfo>,
    trajectory: RwLock<Trajectory>,
    dir: Option<PathBuf>,
}

impl SessionHandle {
    fn id(&self) -> String {
        self.info.lock().expect("session lock poisoned").session_id.clone()
    }
}

/// Called for every appended event, with the session id.
pub type EventSink = Arc<dyn Fn(&str, &Event) + Send + Sync>;

pub struct Runtime {
    registry: Arc<Registry>,
    skills: Arc<SkillBank>,
    todos: Arc<TodoStore>,
    tools: Arc<ToolHost>,
    sandbox: Sandbox,
    config: RuntimeConfig,
    sessions: RwLock<HashMap<String, Arc<SessionHandle>>>,
    sessions_dir: Option<PathBuf>,
    sinks: RwLock<Vec<EventSink>>,
    created: AtomicU64,
}

impl std::fmt::Debug for Runtime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Runtime").field("config", &self.config).finish_non_exhaustive()
    }
}

fn parse_args<T: serde::de::DeserializeOwned>(args: &Value) -> Result<T, String> {
    serde_json::from_value(args.clone()).map_err(|e| e.to_string())
}

#[derive(Deserialize)]
struct SearchArgs {
    query: String,
    #[serde(default = "default_k")]
    k: usize,
}

fn default_k() -> usize {
    DEFAULT_SEARCH_K
}

#[derive(Deserialize)]
struct LoadArgs {
    names: Vec<String>,
}

#[derive(Deserialize)]
struct TodoArgs {
    todos: Vec<TodoItem>,
}

#[derive(Deserialize)]
struct ExecuteArgs {
    source: String,
    #[serde(default)]
    skills: Vec<SkillRef>,
}

#[derive(Deserialize)]
struct RegisterArgs {
    #[serde(flatten)]
    draft: SkillDraft,
    execution_id: String,
    #[serde(default)]
    user_confirmed: bool,
}

#[derive(Deserialize)]
struct RunSkillArgs {
    name: String,
    #[serde(default)]
    version: Option<u32>,
    #[serde(default = "empty_object")]
    args: Value,
}

fn empty_object() -> Value {
    json!({})
}

impl Runtime {
    pub fn new(
        registry: Arc<Registry>,
        skills: Arc<SkillBank>,
        todos: Arc<TodoStore>,
        sandbox: Sandbox,
        config: RuntimeConfig,
    ) -> Self {
        Self {
            tools: Arc::new(ToolHost::new(registry.clone())),
            registry,
            skills,
            todos,
            sandbox,
            config,
            sessions: RwLock::new(HashMap::new()),
            sessions_dir: None,
            sinks: RwLock::new(Vec::new()),
            created: AtomicU64::new(0),
        }
    }

    /// A runtime with in-memory stores and the built-in case-study tools.
    pub fn in_memory(config: RuntimeConfig) -> Self {
        Self::in_memory_with(config, SandboxConfig::default())
    }

    /// [`Runtime::in_memory`] with a chosen interpreter.
    pub fn in_memory_with(config: RuntimeConfig, sandbox: SandboxConfig) -> Self {
        let registry = Arc::new(Registry::new());
        registry
            .import_manifest(crate::toolhost::CASE_STUDY_MANIFEST)
            .expect("built-in manifest is valid");
        Self::new(
            registry,
            Arc::new(SkillBank::in_memory()),
            Arc::new(TodoStore::in_memory()),
            Sandbox::new(sandbox),
            config,
        )
    }

    /// A runtime persisting skills, todos and sessions under `data_dir`.
    /// Previously saved sessions are loaded back.
    pub fn open(
        data_dir: &Path,
        registry: Arc<Registry>,
        sandbox: SandboxConfig,
        config: RuntimeConfig,
    ) -> Result<Self, OrchestratorError> {
        let skills = Arc::new(SkillBank::open(data_dir.join("skills"))?);
        let todos = Arc::new(TodoStore::open(data_dir.join("todos"))?);
        let mut runtime = Self::new(registry, skills, todos, Sandbox::new(sandbox), config);
        let dir = data_dir.join("sessions");
        fs::create_dir_all(&dir)?;
        runtime.sessions_dir = Some(dir.clone());
        for entry in fs::read_dir(&dir)?.filter_map(Result::ok) {
            if entry.path().join("session.json").is_file() {
                runtime.load_session(&entry.path())?;
            }
        }
        Ok(runtime)
    }

    fn load_session(&self, dir: &Path) -> Result<(), OrchestratorError> {
        let corrupt = |what: &str, e: String| OrchestratorError::Io(format!("{}/{what}: {e}", dir.display()));
        let info: SessionInfo = serde_json::from_slice(&fs::read(dir.join("session.json"))?)
            .map_err(|e| corrupt("session.json", e.to_string()))?;
        let mut trajectory = Trajectory::new(info.session_id.clone());
        if let Ok(text) = fs::read_to_string(dir.join("events.jsonl")) {
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                trajectory
                    .events
                    .push(serde_json::from_str(line).map_err(|e| corrupt("events.jsonl", e.to_string()))?);
            }
        }
        if let Ok(bytes) = fs::read(dir.join("fixture.json")) {
            let saved: SavedFixture =
                serde_json::from_slice(&bytes).map_err(|e| corrupt("fixture.json", e.to_string()))?;
            let mut state = FixtureState::new(Arc::new(saved.scenario));
            for (path, content) in saved.drive {
                let bytes = BASE64
                    .decode(content)
                    .map_err(|e| corrupt("fixture.json", e.to_string()))?;
                state.drive.insert(path, bytes);
            }
            self.tools.restore_fixture(&info.session_id, state);
        }
        self.todos.open_session(&info.session_id);
        let handle = SessionHandle {
            run: Mutex::new(()),
            info: Mutex::new(info.clone()),
            trajectory: RwLock::new(trajectory),
            dir: Some(dir.to_path_buf()),
        };
        self.sessions
            .write()
            .expect("session map poisoned")
            .insert(info.session_id, Arc::new(handle));
        Ok(())
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    pub fn skills(&self) -> &Arc<SkillBank> {
        &self.skills
    }

    pub fn todos(&self) -> &Arc<TodoStore> {
        &self.todos
    }

    pub fn tools(&self) -> &Arc<ToolHost> {
        &self.tools
    }

    pub fn sandbox(&self) -> &Sandbox {
        &self.sandbox
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.config
    }

    pub fn add_sink(&self, sink: EventSink) {
        self.sinks.write().expect("sink lock poisoned").push(sink);
    }

    fn handle(&self, session_id: &str) -> Result<Arc<SessionHandle>, OrchestratorError> {
        self.sessions
            .read()
            .expect("session map poisoned")
            .get(session_id)
            .cloned()
            .ok_or_else(|| OrchestratorError::UnknownSession(session_id.to_string()))
    }

    /// Starts a session, optionally with a fixture scenario behind the
    /// fixture-bound tools.
    pub fn create_session(&self, scenario: Option<Scenario>) -> Result<String, OrchestratorError> {
        let mut bytes = [0u8; 6];
        rand::thread_rng().fill_bytes(&mut bytes);
        let n = self.created.fetch_add(1, Ordering::SeqCst) + 1;
        let session_id = format!("sess-{n}-{}", hex::encode(bytes));

        let dir = match &self.sessions_dir {
            Some(root) => {
                let dir = root.join(&session_id);
                fs::create_dir_all(&dir)?;
                Some(dir)
            }
            None => None,
        };
        let info = SessionInfo {
            session_id: session_id.clone(),
            created_at: Utc::now(),
            status: SessionStatus::Active,
            loaded_tools: LoadedSet::new(),
            loaded_skills: Vec::new(),
            executions: 0,
            scenario: scenario.as_ref().map(|s| s.name.clone()),
        };
        if let Some(scenario) = scenario {
            self.tools.load_fixture(&session_id, Arc::new(scenario));
        }
        self.todos.open_session(&session_id);
        let handle = Arc::new(SessionHandle {
            run: Mutex::new(()),
            info: Mutex::new(info),
            trajectory: RwLock::new(Trajectory::new(session_id.clone())),
            dir,
        });
        self.sessions
            .write()
            .expect("session map poisoned")
            .insert(session_id.clone(), handle.clone());
        self.save_info(&handle);
        self.save_fixture(&handle);
        self.append(
            &handle,
            EventKind::SessionCreated {
                session_id: session_id.clone(),
            },
        );
        Ok(session_id)
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.read().expect("session map poisoned").keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn session_info(&self, session_id: &str) -> Result<SessionInfo, OrchestratorError> {
        Ok(self.handle(session_id)?.info.lock().expect("session lock poisoned").clone())
    }

    pub fn trajectory(&self, session_id: &str) -> Result<Trajectory, OrchestratorError> {
        Ok(self.handle(session_id)?.trajectory.read().expect("trajectory lock poisoned").clone())
    }

    pub fn events_after(&self, session_id: &str, seq: u64) -> Result<Vec<Event>, OrchestratorError> {
        let handle = self.handle(session_id)?;
        let trajectory = handle.trajectory.read().expect("trajectory lock poisoned");
        Ok(trajectory.after(seq).to_vec())
    }

    pub fn visible_context(&self, session_id: &str) -> Result<VisibleContext, OrchestratorError> {
        let handle = self.handle(session_id)?;
        Ok(self.context_of(&handle))
    }

    fn context_of(&self, handle: &SessionHandle) -> VisibleContext {
        let trajectory = handle.trajectory.read().expect("trajectory lock poisoned");
        VisibleContext {
            messages: visible_messages(&self.config.system_prompt, &trajectory.events),
        }
    }

    pub fn drive(&self, session_id: &str) -> Option<BTreeMap<String, Vec<u8>>> {
        self.tools.drive(session_id)
    }

    /// Puts `scenario` behind the session's fixture-bound tools, with an
    /// empty drive.
    pub fn load_fixture(&self, session_id: &str, scenario: Scenario) -> Result<(), OrchestratorError> {
        let handle = self.handle(session_id)?;
        let _run = handle.run.lock().expect("run lock poisoned");
        scenario.validate().map_err(OrchestratorError::InvalidArguments)?;
        handle.info.lock().expect("session lock poisoned").scenario = Some(scenario.name.clone());
        self.tools.load_fixture(session_id, Arc::new(scenario));
        self.save_info(&handle);
        self.save_fixture(&handle);
        Ok(())
    }

    /// Empties the session's fixture drive.
    pub fn reset_fixture(&self, session_id: &str) -> Result<bool, OrchestratorError> {
        let handle = self.handle(session_id)?;
        let _run = handle.run.lock().expect("run lock poisoned");
        let reset = self.tools.reset_fixture(session_id);
        self.save_fixture(&handle);
        Ok(reset)
    }

    fn append(&self, handle: &SessionHandle, kind: EventKind) -> Event {
        let event = handle
            .trajectory
            .write()
            .expect("trajectory lock poisoned")
            .push(kind)
            .clone();
        let session_id = handle.id();
        if let Some(dir) = &handle.dir {
            let line = serde_json::to_string(&event).expect("event serializes") + "\n";
            let written = OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join("events.jsonl"))
                .and_then(|mut f| f.write_all(line.as_bytes()));
            if let Err(e) = written {
                tracing::warn!(session = %session_id, "could not persist event: {e}");
            }
        }
        for sink in self.sinks.read().expect("sink lock poisoned").iter() {
            sink(&session_id, &event);
        }
        event
    }

    fn save_info(&self, handle: &SessionHandle) {
        let Some(dir) = &handle.dir else { return };
        let info = handle.info.lock().expect("session lock poisoned").clone();
        let bytes = serde_json::to_vec_pretty(&info).expect("session info serializes");
        let tmp = dir.join("session.json.tmp");
        if let Err(e) = fs::write(&tmp, bytes).and_then(|_| fs::rename(&tmp, dir.join("session.json"))) {
            tracing::warn!(session = %info.session_id, "could not persist session: {e}");
        }
    }

    fn save_fixture(&self, handle: &SessionHandle) {
        let Some(dir) = &handle.dir else { return };
        let Some(state) = self.tools.fixture(&handle.id()) else { return };
        let saved = SavedFixture {
            scenario: (*state.scenario).clone(),
            drive: state
                .drive
                .iter()
                .map(|(k, v)| (k.clone(), BASE64.encode(v)))
                .collect(),
        };
        let bytes = serde_json::to_vec(&saved).expect("fixture serializes");
        if let Err(e) = fs::write(dir.join("fixture.json"), bytes) {
            tracing::warn!("could not persist fixture: {e}");
        }
    }

    fn set_status(&self, handle: &SessionHandle, status: SessionStatus) {
        {
            let mut info = handle.info.lock().expect("session lock poisoned");
            if info.status == status {
                return;
            }
            info.status = status;
        }
        self.save_info(handle);
        self.append(handle, EventKind::StatusChanged { status });
    }

    /// Feeds a user message and drives the loop until the model answers,
    /// asks the user something, or a limit is hit. Returns the new events.
    pub fn run_session(
        &self,
        session_id: &str,
        user_message: &str,
        driver: &mut dyn Driver,
    ) -> Result<Vec<Event>, OrchestratorError> {
        let handle = self.handle(session_id)?;
        let _run = handle.run.lock().expect("run lock poisoned");
        let status = handle.info.lock().expect("session lock poisoned").status;
        if !matches!(status, SessionStatus::Active | SessionStatus::AwaitingUser) {
            return Err(OrchestratorError::SessionNotActive {
                session_id: session_id.to_string(),
                status,
            });
        }
        let start = handle
            .trajectory
            .read()
            .expect("trajectory lock poisoned")
            .events
            .last()
            .map_or(0, |e| e.seq);
        let delta = |h: &SessionHandle| h.trajectory.read().expect("trajectory lock poisoned").after(start).to_vec();

        self.append(
            &handle,
            EventKind::UserMessage {
                text: user_message.to_string(),
            },
        );
        self.set_status(&handle, SessionStatus::Active);

        let budget = driver
            .token_budget()
            .map_or(self.config.token_budget, |b| b.min(self.config.token_budget));
        for _ in 0..self.config.max_steps {
            let context = self.context_of(&handle);
            let tokens = context.token_estimate();
            if tokens > budget {
                self.set_status(&handle, SessionStatus::Failed);
                return Err(OrchestratorError::TokenBudgetExceeded { tokens, budget });
            }
            let clock = Instant::now();
            let reply = driver.next(&context)?;
            let duration_s = clock.elapsed().as_secs_f64();
            self.append(
                &handle,
                EventKind::AssistantAction {
                    action: reply.action.clone(),
                    token_estimate: crate::metrics::estimate_tokens(&reply.raw_text),
                    raw_text: reply.raw_text,
                    usage: reply.usage,
                    duration_s,
                    context_hash: context.hash(),
                },
            );
            match reply.action {
                ActionKind::Final { .. } => {
                    self.set_status(&handle, SessionStatus::Done);
                    return Ok(delta(&handle));
                }
                ActionKind::AskUser { .. } => {
                    self.set_status(&handle, SessionStatus::AwaitingUser);
                    return Ok(delta(&handle));
                }
                ActionKind::ToolCall { name, args } => self.dispatch(&handle, &name, &args),
            }
        }
        self.set_status(&handle, SessionStatus::Failed);
        Err(OrchestratorError::StepLimitExceeded(self.config.max_steps))
    }

    fn tool_result(&self, handle: &SessionHandle, tool: &str, result: Result<String, String>) {
        let (ok, visible) = match result {
            Ok(text) => (true, text),
            Err(text) => (false, format!("error: {text}")),
        };
        self.append(
            handle,
            EventKind::ToolResult {
                tool: tool.to_string(),
                ok,
                visible,
            },
        );
    }

    fn dispatch(&self, handle: &SessionHandle, name: &str, args: &Value) {
        let session_id = handle.id();
        match name {
            "search_functions" => {
                let result = parse_args::<SearchArgs>(args).and_then(|a| {
                    let hits = self.registry.search(&a.query, a.k).map_err(|e| e.to_string())?;
                    Ok(serde_json::to_string(&hits).expect("hits serialize"))
                });
                self.tool_result(handle, name, result);
            }
            "load_functions" => {
                let result = parse_args::<LoadArgs>(args).and_then(|a| {
                    let schemas = {
                        let mut info = handle.info.lock().expect("session lock poisoned");
                        info.loaded_tools.load(&self.registry, &a.names).map_err(|e| e.to_string())?
                    };
                    self.save_info(handle);
                    let shown: Vec<Value> = schemas
                        .iter()
                        .map(|s| {
                            json!({
                                "name": s.descriptor.name,
                                "summary": s.descriptor.summary,
                                "description": s.long_description,
                                "parameters": s.parameters,
                                "returns": s.returns,
                            })
                        })
                        .collect();
                    Ok(serde_json::to_string(&shown).expect("schemas serialize"))
                });
                self.tool_result(handle, name, result);
            }
            "write_todos" => match parse_args::<TodoArgs>(args) {
                Ok(a) => {
                    let result = self.write_todos_locked(handle, a.todos).map(|list| {
                        format!("{}revision {}", list.render(), list.revision)
                    });
                    self.tool_result(handle, name, result.map_err(|e| e.to_string()));
                }
                Err(e) => self.tool_result(handle, name, Err(e)),
            },
            "execute_code" => match parse_args::<ExecuteArgs>(args) {
                Ok(a) => {
                    let outcome = self.execute(handle, a.source, a.skills, &[]);
                    self.after_driver_execution(handle, name, outcome);
                }
                Err(e) => self.tool_result(handle, name, Err(e)),
            },
            "run_skill" => match parse_args::<RunSkillArgs>(args) {
                Ok(a) => {
                    let outcome = self.run_skill_locked(handle, &a.name, a.version, &a.args);
                    self.after_driver_execution(handle, name, outcome);
                }
                Err(e) => self.tool_result(handle, name, Err(e)),
            },
            "register_skill" => {
                let result = parse_args::<RegisterArgs>(args).and_then(|a| {
                    self.register_locked(handle, &session_id, a)
                        .map(|skill| {
                            format!(
                                "registered skill `{}` v{} (sha256 {})",
                                skill.name, skill.version, skill.content_hash
                            )
                        })
                        .map_err(|e| e.to_string())
                });
                self.tool_result(handle, name, result);
            }
            "search_skills" => {
                let result = parse_args::<SearchArgs>(args)
                    .map(|a| serde_json::to_string(&self.skills.search(&a.query, a.k)).expect("hits serialize"));
                self.tool_result(handle, name, result);
            }
            other if self.registry.contains(other) => self.tool_result(
                handle,
                other,
                Err(format!(
                    "`{other}` is a registry tool; load it with load_functions and call it from execute_code"
                )),
            ),
            other => self.tool_result(
                handle,
                other,
                Err(format!("unknown tool `{other}`; core tools are {}", CORE_TOOLS.join(", "))),
            ),
        }
    }

    fn after_driver_execution(
        &self,
        handle: &SessionHandle,
        tool: &str,
        outcome: Result<ExecutionResult, OrchestratorError>,
    ) {
        match outcome {
            Ok(result) if result.exit_status.is_success() => {}
            Ok(result) => self.recover(handle, &result.execution_id, &result.visible_text()),
            Err(e) => {
                let text = e.to_string();
                self.tool_result(handle, tool, Err(text.clone()));
                let failed = format!("exec-{}", handle.info.lock().expect("session lock poisoned").executions);
                self.recover(handle, &failed, &format!("error: {text}"));
            }
        }
    }

    /// Re-anchors the visible history on the todo list after a failure.
    fn recover(&self, handle: &SessionHandle, execution_id: &str, failure: &str) {
        if !self.config.recover_on_failure {
            return;
        }
        let Ok(list) = self.todos.get(&handle.id()) else { return };
        if list.items.is_empty() {
            return;
        }
        let resume_at = list.first_open().map(|i| i.content.clone());
        let note = format!(
            "State recovery: execution {execution_id} failed and the earlier conversation was dropped.\n\
             Current plan:\n{}Resume at: {}\nFailure output:\n{failure}",
            list.render(),
            resume_at.as_deref().unwrap_or("(every item is completed)"),
        );
        self.append(
            handle,
            EventKind::StateRecovery {
                failed_execution: execution_id.to_string(),
                resume_at,
                todo_revision: list.revision,
                note,
            },
        );
    }

    /// Replaces a session's todo list outside the driver loop.
    pub fn write_todos(&self, session_id: &str, items: Vec<TodoItem>) -> Result<TodoList, OrchestratorError> {
        let handle = self.handle(session_id)?;
        let _run = handle.run.lock().expect("run lock poisoned");
        Ok(self.write_todos_locked(&handle, items)?)
    }

    fn write_todos_locked(&self, handle: &SessionHandle, items: Vec<TodoItem>) -> Result<TodoList, TodoError> {
        let list = self.todos.write(&handle.id(), items)?;
        self.append(handle, EventKind::TodoWrite { list: list.clone() });
        Ok(list)
    }

    /// Registers a skill from an execution of this session, as the
    /// `register_skill` tool would. Used when a user confirms from outside
    /// the driver loop.
    pub fn register_skill(
        &self,
        session_id: &str,
        draft: SkillDraft,
        execution_id: &str,
        user_confirmed: bool,
    ) -> Result<Arc<Skill>, OrchestratorError> {
        let handle = self.handle(session_id)?;
        let _run = handle.run.lock().expect("run lock poisoned");
        self.register_locked(
            &handle,
            session_id,
            RegisterArgs {
                draft,
                execution_id: execution_id.to_string(),
                user_confirmed,
            },
        )
    }

    fn register_locked(
        &self,
        handle: &SessionHandle,
        session_id: &str,
        args: RegisterArgs,
    ) -> Result<Arc<Skill>, OrchestratorError> {
        if !args.user_confirmed && !self.config.auto_register {
            return Err(OrchestratorError::InvalidArguments(
                "registering a skill requires user_confirmed=true; ask the user first".into(),
            ));
        }
        let evidence = {
            let trajectory = handle.trajectory.read().expect("trajectory lock poisoned");
            let found = trajectory
                .executions()
                .find(|(_, r)| r.execution_id == args.execution_id)
                .map(|(_, r)| ExecutionEvidence {
                    session_id: session_id.to_string(),
                    execution_id: r.execution_id.clone(),
                    succeeded: r.exit_status.is_success(),
                });
            found
        };
        let mut draft = args.draft;
        if draft.required_tools.is_empty() {
            draft.required_tools = self.tools_named_in(&draft.source);
        }
        let skill = self.skills.register(
            draft,
            ValidationRecord {
                session_id: session_id.to_string(),
                execution_id: args.execution_id,
                user_confirmed: args.user_confirmed,
            },
            evidence.as_ref(),
            |t| self.registry.contains(t),
        )?;
        self.append(
            handle,
            EventKind::SkillRegistered {
                name: skill.name.clone(),
                version: skill.version,
                content_hash: skill.content_hash.clone(),
            },
        );
        Ok(skill)
    }

    /// Registry tools whose names occur in `source` as identifiers.
    fn tools_named_in(&self, source: &str) -> Vec<String> {
        self.registry
            .names()
            .into_iter()
            .filter(|name| {
                source.match_indices(name.as_str()).any(|(i, _)| {
                    let before = source[..i].chars().next_back();
                    let after = source[i + name.len()..].chars().next();
                    let ident = |c: Option<char>| c.is_some_and(|c| c.is_alphanumeric() || c == '_');
                    !ident(before) && !ident(after)
                })
            })
            .collect()
    }

    /// The reuse fast path: runs a stored skill's entrypoint with `arguments`
    /// and no driver involvement.
    pub fn run_skill(
        &self,
        session_id: &str,
        name: &str,
        version: Option<u32>,
        arguments: &Value,
    ) -> Result<ExecutionResult, OrchestratorError> {
        let handle = self.handle(session_id)?;
        let _run = handle.run.lock().expect("run lock poisoned");
        self.run_skill_locked(&handle, name, version, arguments)
    }

    fn run_skill_locked(
        &self,
        handle: &SessionHandle,
        name: &str,
        version: Option<u32>,
        arguments: &Value,
    ) -> Result<ExecutionResult, OrchestratorError> {
        let skill = self.skills.get(name, version)?;
        for tool in &skill.required_tools {
            match self.registry.entry(tool).map(|e| e.binding) {
                None | Some(Binding::None) => return Err(ToolError::UnboundTool(tool.clone()).into()),
                Some(_) => {}
            }
        }
        if !arguments.is_object() {
            return Err(OrchestratorError::InvalidArguments("skill arguments must be a JSON object".into()));
        }
        let stub = skill_call_stub(&skill.entrypoint, arguments);
        self.execute(
            handle,
            stub,
            vec![SkillRef {
                name: skill.name.clone(),
                version: Some(skill.version),
            }],
            &skill.required_tools,
        )
    }

    fn execute(
        &self,
        handle: &SessionHandle,
        source: String,
        skill_refs: Vec<SkillRef>,
        extra_tools: &[String],
    ) -> Result<ExecutionResult, OrchestratorError> {
        let skills: Vec<Arc<Skill>> = skill_refs
            .iter()
            .map(|r| self.skills.get(&r.name, r.version))
            .collect::<Result<_, _>>()?;
        let (session_id, execution_id, loaded) = {
            let mut info = handle.info.lock().expect("session lock poisoned");
            let mut wanted: Vec<String> = extra_tools.to_vec();
            wanted.extend(skills.iter().flat_map(|s| s.required_tools.iter().cloned()));
            info.loaded_tools.load(&self.registry, &wanted)?;
            for s in &skills {
                let r = SkillRef {
                    name: s.name.clone(),
                    version: Some(s.version),
                };
                if !info.loaded_skills.contains(&r) {
                    info.loaded_skills.push(r);
                }
            }
            info.executions += 1;
            (
                info.session_id.clone(),
                format!("exec-{}", info.executions),
                info.loaded_tools.iter().cloned().collect::<Vec<_>>(),
            )
        };
        self.save_info(handle);

        let schemas = self.registry.schemas(&loaded)?;
        let skill_views: Vec<&Skill> = skills.iter().map(|s| s.as_ref()).collect();
        let preamble = generate_preamble(&schemas, &skill_views).map_err(SandboxError::from)?;
        let mut env = Vec::new();
        if let Some(fixture) = self.tools.fixture(&session_id) {
            env.push((
                ENV_NOW.to_string(),
                fixture.scenario.now.to_rfc3339_opts(SecondsFormat::Secs, true),
            ));
        }
        let request = ExecutionRequest {
            session_id: session_id.clone(),
            execution_id: execution_id.clone(),
            source: source.clone(),
            loaded_tools: loaded.clone(),
            loaded_skills: skill_refs,
            limits: self.config.limits,
        };
        let dispatcher = Arc::new(BoundExecution {
            host: self.tools.clone(),
            ctx: ExecutionContext::new(session_id, execution_id, loaded),
        });
        let outcome = self.sandbox.execute(&request, &preamble, dispatcher, &env);
        self.save_fixture(handle);
        let outcome = outcome?;
        for record in outcome.invocations {
            self.append(handle, EventKind::Invocation { record });
        }
        let visible = outcome.result.visible_text();
        self.append(
            handle,
            EventKind::ExecutionResult {
                source,
                result: outcome.result.clone(),
                visible,
            },
        );
        Ok(outcome.result)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use driver::ScriptedDriver;

    fn runtime() -> Runtime {
        Runtime::in_memory(RuntimeConfig::default())
    }

    fn call(name: &str, args: Value) -> ActionKind {
        ActionKind::ToolCall {
            name: name.into(),
            args,
        }
    }

    #[test]
    fn immediate_final() {
        let rt = runtime();
        let id = rt.create_session(None).unwrap();
        let mut d = ScriptedDriver::new([ActionKind::Final { text: "hi".into() }]);
        let delta = rt.run_session(&id, "hello", &mut d).unwrap();
        let actions = delta
            .iter()
            .filter(|e| matches!(e.kind, EventKind::AssistantAction { .. }))
            .count();
        assert_eq!(actions, 1);
        assert_eq!(rt.session_info(&id).unwrap().status, SessionStatus::Done);
        assert!(matches!(
            rt.run_session(&id, "again", &mut d),
            Err(OrchestratorError::SessionNotActive { .. })
        ));
    }

    #[test]
    fn ask_user_pauses_and_resumes() {
        let rt = runtime();
        let id = rt.create_session(None).unwrap();
        let mut d = ScriptedDriver::new([
            ActionKind::AskUser { text: "add a memory?".into() },
            ActionKind::Final { text: "ok".into() },
        ]);
        rt.run_session(&id, "task", &mut d).unwrap();
        assert_eq!(rt.session_info(&id).unwrap().status, SessionStatus::AwaitingUser);
        rt.run_session(&id, "no log required", &mut d).unwrap();
        assert_eq!(rt.session_info(&id).unwrap().status, SessionStatus::Done);
    }

    #[test]
    fn step_limit_fails_session() {
        let rt = Runtime::in_memory(RuntimeConfig {
            max_steps: 2,
            ..RuntimeConfig::default()
        });
        let id = rt.create_session(None).unwrap();
        let mut d = ScriptedDriver::new(
            std::iter::repeat(call("search_functions", json!({"query": "email"}))).take(5),
        );
        assert!(matches!(
            rt.run_session(&id, "loop", &mut d),
            Err(OrchestratorError::StepLimitExceeded(2))
        ));
        assert_eq!(rt.session_info(&id).unwrap().status, SessionStatus::Failed);
        assert_eq!(rt.trajectory(&id).unwrap().driver_calls(), 2);
    }

    #[test]
    fn token_budget_is_checked_before_each_call() {
        let rt = Runtime::in_memory(RuntimeConfig {
            token_budget: 10,
            ..RuntimeConfig::default()
        });
        let id = rt.create_session(None).unwrap();
        let mut d = ScriptedDriver::new([ActionKind::Final { text: "x".into() }]);
        assert!(matches!(
            rt.run_session(&id, "hi", &mut d),
            Err(OrchestratorError::TokenBudgetExceeded { budget: 10, .. })
        ));
    }

    #[test]
    fn core_tools_report_errors_visibly() {
        let rt = runtime();
        let id = rt.create_session(None).unwrap();
        let mut d = ScriptedDriver::new([
            call("load_functions", json!({"names": ["nope"]})),
            call("outlook__list_emails", json!({})),
            call("write_todos", json!({"todos": [{"status": "done", "content": "x"}]})),
            call("register_skill", json!({"name": "s", "source": "def agent_main(): pass", "execution_id": "exec-1", "user_confirmed": true})),
            ActionKind::Final { text: "bye".into() },
        ]);
        rt.run_session(&id, "go", &mut d).unwrap();
        let t = rt.trajectory(&id).unwrap();
        let results: Vec<(bool, String)> = t
            .events
            .iter()
            .filter_map(|e| match &e.kind {
                EventKind::ToolResult { ok, visible, .. } => Some((*ok, visible.clone())),
                _ => None,
            })
            .collect();
        assert_eq!(results.len(), 4);
        assert!(results.iter().all(|(ok, v)| !ok && v.starts_with("error: ")));
        assert!(results[1].1.contains("load_functions"));
    }

    #[test]
    fn search_and_load_extend_the_session() {
        let rt = runtime();
        let id = rt.create_session(None).unwrap();
        let mut d = ScriptedDriver::new([
            call("search_functions", json!({"query": "fetch emails", "k": 5})),
            call("load_functions", json!({"names": ["outlook__list_emails"]})),
            ActionKind::Final { text: "done".into() },
        ]);
        rt.run_session(&id, "go", &mut d).unwrap();
        let info = rt.session_info(&id).unwrap();
        assert!(info.loaded_tools.contains("outlook__list_emails"));
        let ctx = rt.visible_context(&id).unwrap();
        assert!(ctx.messages[3].content.starts_with(r#"[{"name":"outlook__list_emails""#));
    }

    #[test]
    fn registration_needs_confirmation() {
        let rt = runtime();
        let id = rt.create_session(None).unwrap();
        let handle = rt.handle(&id).unwrap();
        let args: RegisterArgs = serde_json::from_value(json!({
            "name": "s", "source": "def agent_main(): pass", "execution_id": "exec-1"
        }))
        .unwrap();
        assert!(matches!(
            rt.register_locked(&handle, &id, args),
            Err(OrchestratorError::InvalidArguments(_))
        ));
    }

    #[test]
    fn tool_names_are_matched_as_identifiers() {
        let rt = runtime();
        let found = rt.tools_named_in("await outlook__list_emails(x)\n# outlook__list_emailsx\n");
        assert_eq!(found, ["outlook__list_emails"]);
    }

    #[test]
    fn unknown_skill() {
        let rt = runtime();
        let id = rt.create_session(None).unwrap();
        assert!(matches!(
            rt.run_skill(&id, "nope", None, &json!({})),
            Err(OrchestratorError::Skill(SkillError::UnknownSkill(_)))
        ));
    }

    #[test]
    fn prompt_asset_is_pinned() {
        assert_eq!(
            crate::skillbank::content_hash(SYSTEM_PROMPT_V1),
            include_str!("../../assets/prompts/system_v1.sha256").trim()
        );
        for tool in CORE_TOOLS {
            assert!(SYSTEM_PROMPT_V1.contains(&format!("\n{tool} {{")), "{tool}");
        }
    }
}
