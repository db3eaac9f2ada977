//! Task suites, checkers and the summary table.
//!
//! Every run gets a fresh in-memory runtime so repeated runs of a replay
//! trace see identical visible context.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use chrono::Duration as ChronoDuration;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::orchestrator::driver::{ActionKind, Driver, HttpDriver, ReplayDriver, TraceStep};
use crate::orchestrator::{EventKind, Runtime, RuntimeConfig, SessionStatus, Trajectory};
use crate::sandbox::SandboxConfig;
use crate::toolhost::fixture::CODEWORD;
use crate::toolhost::Scenario;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("suite: {0}")]
    SuiteParse(String),
    #[error("no fixture scenario named `{0}`")]
    FixtureMissing(String),
    #[error("unknown rule checker `{0}`")]
    UnknownChecker(String),
    #[error("bad driver spec `{0}` (expected replay:<dir> or http:<endpoint>)")]
    DriverSpec(String),
    #[error("judge: {0}")]
    Judge(String),
    #[error("label `{label}` is missing or duplicates runs: {detail}")]
    IncompleteGrid { label: String, detail: String },
    #[error("{0}")]
    Run(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Checker {
    Rule {
        checker_id: String,
        #[serde(default)]
        params: Value,
    },
    Judge {
        rubric: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: String,
    pub prompt: String,
    pub difficulty: u8,
    /// Scenario name; `case_study` is built in.
    #[serde(default = "default_fixture")]
    pub fixture: String,
    /// Answers given, in order, whenever the agent asks the user something.
    #[serde(default)]
    pub user_replies: Vec<String>,
    pub checker: Checker,
    /// Trace file name inside a replay directory (`<task_id>.jsonl` if unset).
    #[serde(default)]
    pub trace: Option<String>,
}

fn default_fixture() -> String {
    "case_study".into()
}

impl Task {
    pub fn trace_file(&self) -> String {
        self.trace.clone().unwrap_or_else(|| format!("{}.jsonl", self.task_id))
    }

    pub fn messages(&self) -> Vec<String> {
        std::iter::once(self.prompt.clone())
            .chain(self.user_replies.iter().cloned())
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Suite {
    pub tasks: Vec<Task>,
}

pub fn parse_suite(text: &str) -> Result<Suite, EvalError> {
    let suite: Suite = serde_json::from_str(text).map_err(|e| EvalError::SuiteParse(e.to_string()))?;
    let mut seen = BTreeSet::new();
    for task in &suite.tasks {
        if !(1..=5).contains(&task.difficulty) {
            return Err(EvalError::SuiteParse(format!(
                "task `{}`: difficulty {} outside 1..=5",
                task.task_id, task.difficulty
            )));
        }
        if !seen.insert(task.task_id.as_str()) {
            return Err(EvalError::SuiteParse(format!("duplicate task id `{}`", task.task_id)));
        }
    }
    Ok(suite)
}

/// Named scenarios available to tasks.
#[derive(Debug, Clone)]
pub struct FixtureCatalog {
    scenarios: BTreeMap<String, Scenario>,
}

impl Default for FixtureCatalog {
    fn default() -> Self {
        let mut scenarios = BTreeMap::new();
        let case_study = Scenario::case_study();
        scenarios.insert(case_study.name.clone(), case_study);
        Self { scenarios }
    }
}

impl FixtureCatalog {
    pub fn insert(&mut self, scenario: Scenario) {
        self.scenarios.insert(scenario.name.clone(), scenario);
    }

    /// Adds every `*.json` scenario in `dir`.
    pub fn load_dir(&mut self, dir: &Path) -> Result<usize, EvalError> {
        let mut n = 0;
        let entries = std::fs::read_dir(dir).map_err(|e| EvalError::Run(format!("{}: {e}", dir.display())))?;
        for entry in entries.filter_map(Result::ok) {
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let text = std::fs::read_to_string(&path).map_err(|e| EvalError::Run(e.to_string()))?;
            let scenario = Scenario::from_json(&text)
                .map_err(|e| EvalError::Run(format!("{}: {e}", path.display())))?;
            self.insert(scenario);
            n += 1;
        }
        Ok(n)
    }

    pub fn get(&self, name: &str) -> Result<&Scenario, EvalError> {
        self.scenarios
            .get(name)
            .ok_or_else(|| EvalError::FixtureMissing(name.to_string()))
    }

    pub fn names(&self) -> Vec<String> {
        self.scenarios.keys().cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DriverSpec {
    /// A directory of `<task_id>.jsonl` traces, or a single trace file.
    Replay(PathBuf),
    Http(String),
}

impl FromStr for DriverSpec {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(path) = s.strip_prefix("replay:") {
            Ok(DriverSpec::Replay(PathBuf::from(path)))
        } else if let Some(url) = s.strip_prefix("http:") {
            // `http:http://host/...` and `http://host/...` both work
            let url = if url.starts_with("//") { format!("http:{url}") } else { url.to_string() };
            Ok(DriverSpec::Http(url))
        } else if s.starts_with("https://") {
            Ok(DriverSpec::Http(s.to_string()))
        } else {
            Err(EvalError::DriverSpec(s.to_string()))
        }
    }
}

impl DriverSpec {
    pub fn label(&self) -> String {
        match self {
            DriverSpec::Replay(p) => format!("replay:{}", p.display()),
            DriverSpec::Http(u) => format!("http:{u}"),
        }
    }

    pub fn driver_for(&self, task: &Task) -> Result<Box<dyn Driver>, EvalError> {
        match self {
            DriverSpec::Replay(path) => {
                let file = if path.is_dir() { path.join(task.trace_file()) } else { path.clone() };
                Ok(Box::new(ReplayDriver::from_file(&file).map_err(|e| EvalError::Run(e.to_string()))?))
            }
            DriverSpec::Http(url) => Ok(Box::new(HttpDriver::new(url.clone()))),
        }
    }
}

/// What a checker gets to look at after a run.
pub struct RunView<'a> {
    pub trajectory: &'a Trajectory,
    pub status: SessionStatus,
    pub scenario: &'a Scenario,
    pub drive: &'a BTreeMap<String, Vec<u8>>,
}

/// Drive contents a correct case-study run must produce, derived from the
/// scenario alone.
pub fn case_study_expected(scenario: &Scenario, days_back: i64) -> BTreeMap<String, Vec<u8>> {
    const MONTHS: [&str; 12] = [
        "January", "February", "March", "April", "May", "June", "July", "August", "September", "October",
        "November", "December",
    ];
    use chrono::Datelike;
    let cutoff = scenario.now - ChronoDuration::days(days_back);
    let folder = format!("Email Attachments {}", MONTHS[scenario.now.month0() as usize]);
    let mut expected = BTreeMap::new();
    for email in &scenario.emails {
        if email.received_at < cutoff || !email.has_attachments || email.from_address.ends_with("@agentr.dev") {
            continue;
        }
        let wanted = email.attachments.iter().find(|a| {
            let name = a.filename.to_lowercase();
            name.ends_with(".pdf") || name.ends_with(".xlsx")
        });
        if let Some(a) = wanted {
            let company = if a.company == CODEWORD {
                a.metadata.get("real_company").cloned().unwrap_or_default()
            } else {
                a.company.clone()
            };
            expected.insert(format!("{folder}/{company}/{}", a.filename), a.content.clone());
        }
    }
    expected
}

fn check_rule(checker_id: &str, params: &Value, run: &RunView<'_>) -> Result<(bool, String), EvalError> {
    match checker_id {
        "all" => {
            let rules = params.get("rules").and_then(Value::as_array).cloned().unwrap_or_default();
            for rule in rules {
                let id = rule.get("checker_id").and_then(Value::as_str).unwrap_or("");
                let (ok, why) = check_rule(id, rule.get("params").unwrap_or(&Value::Null), run)?;
                if !ok {
                    return Ok((false, why));
                }
            }
            Ok((true, "all rules passed".into()))
        }
        "case_study_bridge" => {
            let days = params.get("days_back").and_then(Value::as_i64).unwrap_or(15);
            // negative filter: nothing the run uploaded may come from an internal sender
            for record in run.trajectory.invocations() {
                if record.tool != "onedrive__upload_file" || !record.outcome.is_ok() {
                    continue;
                }
                let content = record.args.get("content").and_then(Value::as_str).unwrap_or("");
                let bytes = decode_upload(content, record.args.get("encoding").and_then(Value::as_str));
                if let Some((email, _)) = run.scenario.source_of(&bytes) {
                    if email.from_address.ends_with("@agentr.dev") {
                        return Ok((false, format!("uploaded a file from internal email {}", email.id)));
                    }
                }
            }
            let expected = case_study_expected(run.scenario, days);
            if run.drive != &expected {
                let got: Vec<&String> = run.drive.keys().collect();
                let want: Vec<&String> = expected.keys().collect();
                return Ok((false, format!("drive holds {got:?}, expected {want:?}")));
            }
            Ok((true, format!("{} files uploaded as expected", expected.len())))
        }
        "final_contains" => {
            let text = run.trajectory.final_text().unwrap_or("");
            let needles = params.get("all").and_then(Value::as_array).cloned().unwrap_or_default();
            for needle in needles.iter().filter_map(Value::as_str) {
                if !text.contains(needle) {
                    return Ok((false, format!("final answer lacks `{needle}`")));
                }
            }
            Ok((true, "final answer mentions every expected item".into()))
        }
        "drive_file" => {
            let path = params.get("path").and_then(Value::as_str).unwrap_or("");
            let Some(content) = run.drive.get(path) else {
                return Ok((false, format!("no drive file at `{path}`")));
            };
            if let Some(needle) = params.get("contains").and_then(Value::as_str) {
                if !String::from_utf8_lossy(content).contains(needle) {
                    return Ok((false, format!("`{path}` lacks `{needle}`")));
                }
            }
            if let Some(needle) = params.get("excludes").and_then(Value::as_str) {
                if String::from_utf8_lossy(content).contains(needle) {
                    return Ok((false, format!("`{path}` should not contain `{needle}`")));
                }
            }
            if let Some(email_id) = params.get("attachment_of").and_then(Value::as_str) {
                let index = params.get("index").and_then(Value::as_u64).unwrap_or(0) as usize;
                let source = run
                    .scenario
                    .email(email_id)
                    .and_then(|e| e.attachments.get(index))
                    .map(|a| &a.content);
                if source != Some(content) {
                    return Ok((false, format!("`{path}` is not attachment {index} of {email_id}")));
                }
            }
            if let Some(n) = params.get("total_files").and_then(Value::as_u64) {
                if run.drive.len() as u64 != n {
                    return Ok((false, format!("drive holds {} files, expected {n}", run.drive.len())));
                }
            }
            Ok((true, format!("`{path}` present")))
        }
        "tool_used" => {
            let name = params.get("name").and_then(Value::as_str).unwrap_or("");
            let used = run.trajectory.invocations().any(|r| r.tool == name && r.outcome.is_ok());
            Ok((used, format!("`{name}` {}", if used { "invoked" } else { "never invoked" })))
        }
        "status" => {
            let want = params.get("is").and_then(Value::as_str).unwrap_or("done");
            let got = serde_json::to_value(run.status).expect("status serializes");
            Ok((got == want, format!("session ended {got}")))
        }
        other => Err(EvalError::UnknownChecker(other.to_string())),
    }
}

fn decode_upload(content: &str, encoding: Option<&str>) -> Vec<u8> {
    use base64::Engine as _;
    match encoding {
        Some("utf8") => content.as_bytes().to_vec(),
        _ => base64::engine::general_purpose::STANDARD
            .decode(content)
            .unwrap_or_default(),
    }
}

/// The trajectory as a judge sees it: tool selections with arguments, the
/// code that ran, and what it printed.
pub fn judge_transcript(trajectory: &Trajectory) -> Value {
    let steps: Vec<Value> = trajectory
        .events
        .iter()
        .filter_map(|e| match &e.kind {
            EventKind::UserMessage { text } => Some(json!({"type": "user_message", "text": text})),
            EventKind::AssistantAction { action, .. } => Some(match action {
                ActionKind::ToolCall { name, args } => json!({"type": "tool_call", "name": name, "args": args}),
                ActionKind::Final { text } => json!({"type": "final", "text": text}),
                ActionKind::AskUser { text } => json!({"type": "ask_user", "text": text}),
            }),
            EventKind::ToolResult { tool, ok, visible } => {
                Some(json!({"type": "tool_result", "tool": tool, "ok": ok, "output": visible}))
            }
            EventKind::ExecutionResult { source, result, .. } => Some(json!({
                "type": "execution",
                "execution_id": result.execution_id,
                "code": source,
                "exit_status": result.exit_status.to_string(),
                "output": result.stdout_tail,
            })),
            EventKind::Invocation { record } => Some(json!({
                "type": "invocation",
                "execution_id": record.execution_id,
                "tool": record.tool,
                "args": record.args,
                "ok": record.outcome.is_ok(),
            })),
            EventKind::StateRecovery { note, .. } => Some(json!({"type": "state_recovery", "note": note})),
            _ => None,
        })
        .collect();
    json!({"session_id": trajectory.session_id, "steps": steps})
}

pub trait Judge: Send + Sync {
    fn verdict(&self, task: &Task, rubric: &str, transcript: &Value) -> Result<bool, EvalError>;
}

/// Verdicts read from a `{task_id: bool}` file.
#[derive(Debug, Clone, Default)]
pub struct VerdictFile(pub HashMap<String, bool>);

impl VerdictFile {
    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|e| EvalError::Judge(e.to_string()))?;
        serde_json::from_str(&text)
            .map(VerdictFile)
            .map_err(|e| EvalError::Judge(e.to_string()))
    }
}

impl Judge for VerdictFile {
    fn verdict(&self, task: &Task, _rubric: &str, _transcript: &Value) -> Result<bool, EvalError> {
        self.0
            .get(&task.task_id)
            .copied()
            .ok_or_else(|| EvalError::Judge(format!("no verdict for `{}`", task.task_id)))
    }
}

/// POSTs `{task_id, prompt, rubric, transcript}` and reads `{"passed": bool}`.
#[derive(Debug, Clone)]
pub struct HttpJudge {
    endpoint: String,
    agent: ureq::Agent,
}

impl HttpJudge {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(300)).build(),
        }
    }
}

impl Judge for HttpJudge {
    fn verdict(&self, task: &Task, rubric: &str, transcript: &Value) -> Result<bool, EvalError> {
        let body = json!({"task_id": task.task_id, "prompt": task.prompt, "rubric": rubric, "transcript": transcript});
        let reply: Value = self
            .agent
            .post(&self.endpoint)
            .send_json(body)
            .map_err(|e| EvalError::Judge(e.to_string()))?
            .into_json()
            .map_err(|e| EvalError::Judge(e.to_string()))?;
        reply
            .get("passed")
            .and_then(Value::as_bool)
            .ok_or_else(|| EvalError::Judge("reply lacks a boolean `passed`".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub label: String,
    pub task_id: String,
    pub run_index: u32,
    pub passed: bool,
    pub assistant_calls: u64,
    pub wall_time: f64,
    pub total_tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    #[serde(skip)]
    pub trajectory: Option<Trajectory>,
}

#[derive(Clone)]
pub struct EvalOptions {
    pub repeats: u32,
    pub workers: usize,
    pub runtime: RuntimeConfig,
    pub sandbox: SandboxConfig,
    pub label: Option<String>,
    /// Sent with every request when the driver is an HTTP endpoint.
    pub model: Option<String>,
    pub api_key: Option<String>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            repeats: 1,
            workers: 4,
            runtime: RuntimeConfig::default(),
            sandbox: SandboxConfig::default(),
            label: None,
            model: None,
            api_key: None,
        }
    }
}

/// Result of driving one task in a fresh runtime.
pub struct TaskRun {
    pub runtime: Runtime,
    pub session_id: String,
    pub error: Option<String>,
}

/// Feeds the prompt and then each scripted reply while the agent keeps
/// asking questions.
pub fn drive_task(
    task: &Task,
    scenario: &Scenario,
    driver: &mut dyn Driver,
    config: &RuntimeConfig,
) -> Result<TaskRun, EvalError> {
    drive_task_with(task, scenario, driver, config, &SandboxConfig::default())
}

/// [`drive_task`] with a chosen interpreter.
pub fn drive_task_with(
    task: &Task,
    scenario: &Scenario,
    driver: &mut dyn Driver,
    config: &RuntimeConfig,
    sandbox: &SandboxConfig,
) -> Result<TaskRun, EvalError> {
    let runtime = Runtime::in_memory_with(config.clone(), sandbox.clone());
    let session_id = runtime
        .create_session(Some(scenario.clone()))
        .map_err(|e| EvalError::Run(e.to_string()))?;
    let mut error = None;
    for message in task.messages() {
        match runtime.run_session(&session_id, &message, driver) {
            Ok(_) => {}
            Err(e) => {
                error = Some(e.to_string());
                break;
            }
        }
        let status = runtime.session_info(&session_id).map(|i| i.status);
        if status.ok() != Some(SessionStatus::AwaitingUser) {
            break;
        }
    }
    Ok(TaskRun {
        runtime,
        session_id,
        error,
    })
}

pub fn run_task(
    task: &Task,
    run_index: u32,
    spec: &DriverSpec,
    catalog: &FixtureCatalog,
    options: &EvalOptions,
    judge: Option<&dyn Judge>,
) -> Result<TaskRecord, EvalError> {
    let scenario = catalog.get(&task.fixture)?;
    let mut driver: Box<dyn Driver> = match spec {
        DriverSpec::Http(url) => {
            let mut http = HttpDriver::new(url.clone());
            if let Some(model) = &options.model {
                http = http.with_model(model);
            }
            if let Some(key) = &options.api_key {
                http = http.with_api_key(key);
            }
            Box::new(http)
        }
        DriverSpec::Replay(_) => spec.driver_for(task)?,
    };
    let clock = Instant::now();
    let run = drive_task_with(task, scenario, driver.as_mut(), &options.runtime, &options.sandbox)?;
    let wall_time = clock.elapsed().as_secs_f64();
    let trajectory = run
        .runtime
        .trajectory(&run.session_id)
        .map_err(|e| EvalError::Run(e.to_string()))?;
    let status = run
        .runtime
        .session_info(&run.session_id)
        .map_err(|e| EvalError::Run(e.to_string()))?
        .status;
    let drive = run.runtime.drive(&run.session_id).unwrap_or_default();

    let (passed, detail) = match (&run.error, &task.checker) {
        (Some(e), _) => (false, e.clone()),
        (None, Checker::Rule { checker_id, params }) => check_rule(
            checker_id,
            params,
            &RunView {
                trajectory: &trajectory,
                status,
                scenario,
                drive: &drive,
            },
        )?,
        (None, Checker::Judge { rubric }) => {
            let judge = judge.ok_or_else(|| EvalError::Judge("task needs a judge but none is configured".into()))?;
            let passed = judge.verdict(task, rubric, &judge_transcript(&trajectory))?;
            (passed, "judged".into())
        }
    };
    Ok(TaskRecord {
        label: options.label.clone().unwrap_or_else(|| spec.label()),
        task_id: task.task_id.clone(),
        run_index,
        passed,
        assistant_calls: trajectory.driver_calls() as u64,
        wall_time,
        total_tokens: trajectory.total_usage(),
        detail: Some(detail),
        session_id: Some(run.session_id),
        trajectory: Some(trajectory),
    })
}

/// Runs every task `repeats` times across `workers` threads. Records come
/// back in suite order, then run order.
pub fn run_suite(
    suite: &Suite,
    spec: &DriverSpec,
    catalog: &FixtureCatalog,
    options: &EvalOptions,
    judge: Option<&dyn Judge>,
) -> Result<Vec<TaskRecord>, EvalError> {
    for task in &suite.tasks {
        catalog.get(&task.fixture)?;
    }
    let jobs: Vec<(usize, u32)> = (0..suite.tasks.len())
        .flat_map(|t| (0..options.repeats).map(move |r| (t, r)))
        .collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, u32, Result<TaskRecord, EvalError>)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..options.workers.max(1).min(jobs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(t, r)) = jobs.get(i) else { break };
                let record = run_task(&suite.tasks[t], r, spec, catalog, options, judge);
                results.lock().expect("results poisoned").push((t, r, record));
            });
        }
    });
    let mut results = results.into_inner().expect("results poisoned");
    results.sort_by_key(|(t, r, _)| (*t, *r));
    results.into_iter().map(|(_, _, r)| r).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    /// Lowest per-run pass rate, in percent.
    pub correctness_min: f64,
    pub avg_calls: f64,
    pub p50_latency: f64,
    pub total_tokens: u64,
    pub tasks: usize,
    pub runs: usize,
}

/// Lower median: the `(n-1)/2`-th smallest value.
pub fn lower_median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted[(sorted.len() - 1) / 2]
}

/// One row per label. Every label must have exactly one record for each
/// (task, run) pair it mentions.
pub fn aggregate(records: &[TaskRecord]) -> Result<Vec<SummaryRow>, EvalError> {
    let mut by_label: BTreeMap<&str, Vec<&TaskRecord>> = BTreeMap::new();
    for r in records {
        by_label.entry(&r.label).or_default().push(r);
    }
    let mut rows = Vec::new();
    for (label, group) in by_label {
        let tasks: BTreeSet<&str> = group.iter().map(|r| r.task_id.as_str()).collect();
        let runs: BTreeSet<u32> = group.iter().map(|r| r.run_index).collect();
        let mut cells: BTreeMap<(&str, u32), usize> = BTreeMap::new();
        for r in &group {
            *cells.entry((r.task_id.as_str(), r.run_index)).or_default() += 1;
        }
        let mut problems = Vec::new();
        for t in &tasks {
            for run in &runs {
                match cells.get(&(*t, *run)).copied().unwrap_or(0) {
                    1 => {}
                    0 => problems.push(format!("missing {t}#{run}")),
                    n => problems.push(format!("{n} records for {t}#{run}")),
                }
            }
        }
        if !problems.is_empty() {
            return Err(EvalError::IncompleteGrid {
                label: label.to_string(),
                detail: problems.join(", "),
            });
        }
        let correctness_min = runs
            .iter()
            .map(|run| {
                let passed = group.iter().filter(|r| r.run_index == *run && r.passed).count();
                100.0 * passed as f64 / tasks.len() as f64
            })
            .fold(f64::INFINITY, f64::min);
        let n = group.len() as f64;
        let latencies: Vec<f64> = group.iter().map(|r| r.wall_time).collect();
        rows.push(SummaryRow {
            label: label.to_string(),
            correctness_min,
            avg_calls: group.iter().map(|r| r.assistant_calls as f64).sum::<f64>() / n,
            p50_latency: lower_median(&latencies),
            total_tokens: group.iter().map(|r| r.total_tokens).sum(),
            tasks: tasks.len(),
            runs: runs.len(),
        });
    }
    Ok(rows)
}

/// Runs an unsealed trace for `task` and returns it with every step's
/// context hash filled in.
pub fn seal_trace(
    task: &Task,
    scenario: &Scenario,
    steps: Vec<TraceStep>,
    config: &RuntimeConfig,
) -> Result<Vec<TraceStep>, EvalError> {
    let total = steps.len();
    let mut driver = ReplayDriver::new(steps);
    let run = drive_task(task, scenario, &mut driver, config)?;
    if let Some(e) = run.error {
        return Err(EvalError::Run(e));
    }
    if !driver.is_exhausted() {
        return Err(EvalError::Run(format!(
            "session ended after {} of {total} trace steps",
            driver.position()
        )));
    }
    Ok(driver.sealed())
}
