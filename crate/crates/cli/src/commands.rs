use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use codemem::evalharness::{
    aggregate, parse_suite, run_suite, seal_trace, DriverSpec, EvalOptions, HttpJudge, Judge, Suite, Task,
    TaskRecord, VerdictFile,
};
use codemem::metrics::CostMode;
use codemem::orchestrator::driver::{parse_trace, render_trace, ActionKind, TraceStep};
use codemem::orchestrator::{EventKind, SessionStatus};
use codemem::toolhost::Scenario;
use serde_json::{json, Value};

use crate::app::{load_catalog, parse_skill_ref, App};
use crate::config::{Config, ENV_API_TOKEN, ENV_CONFIG};
use crate::server::{self, AppState};

#[derive(Debug, Parser)]
#[command(name = "codemem", version, about = "Agent runtime with on-demand tools, sandboxed scripts and reusable skills")]
pub struct Cli {
    /// TOML config file.
    #[arg(long, global = true, env = ENV_CONFIG)]
    pub config: Option<PathBuf>,
    /// Overrides `data_dir` from the config.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

impl Cli {
    pub fn is_serve(&self) -> bool {
        matches!(self.command, Command::Serve { .. })
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Serve the HTTP API and event stream.
    Serve {
        #[arg(long)]
        listen: Option<String>,
    },
    /// Run one task to completion and print a summary.
    Run(RunArgs),
    /// Inspect the skill bank.
    Skills {
        #[command(subcommand)]
        action: SkillsCommand,
    },
    /// Run a stored skill.
    Skill {
        #[command(subcommand)]
        action: SkillCommand,
    },
    /// Import manifests into the tool registry, or search it.
    Registry {
        #[command(subcommand)]
        action: RegistryCommand,
    },
    /// Load fixture scenarios.
    Fixtures {
        #[command(subcommand)]
        action: FixturesCommand,
    },
    /// Run an evaluation suite and write a report.
    Eval(EvalArgs),
    /// Context-cost and phase-timing report for a session.
    Metrics {
        #[arg(long)]
        session: String,
        #[arg(long)]
        mode: Option<CostMode>,
    },
    /// Work with replay traces.
    Trace {
        #[command(subcommand)]
        action: TraceCommand,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// A task object, or a suite (then pick one with --task-id).
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long)]
    pub task_id: Option<String>,
    /// replay:<trace file or dir> | http:<endpoint>
    #[arg(long)]
    pub driver: String,
}

#[derive(Debug, Subcommand)]
pub enum SkillsCommand {
    List,
    /// Metadata and source of `<name>[@version]`.
    Show { skill: String },
    /// Write the source of `<name>[@version]` to stdout or a file.
    Export {
        skill: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum SkillCommand {
    /// Call `<name>[@version]` with JSON keyword arguments.
    Run {
        skill: String,
        #[arg(long, default_value = "{}")]
        args: String,
        /// Existing session; a new one is created otherwise.
        #[arg(long)]
        session: Option<String>,
        /// Scenario for the new session.
        #[arg(long)]
        fixture: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum RegistryCommand {
    Import { file: PathBuf },
    Search {
        query: String,
        #[arg(short, default_value_t = codemem::registry::DEFAULT_SEARCH_K)]
        k: usize,
    },
}

#[derive(Debug, Subcommand)]
pub enum FixturesCommand {
    /// Put a scenario behind a session's fixture-bound tools.
    Load {
        file: PathBuf,
        #[arg(long)]
        session: String,
    },
    /// Names of the available scenarios.
    List,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "records")]
    pub suite: Option<PathBuf>,
    /// replay:<dir> | http:<endpoint>
    #[arg(long, required_unless_present = "records")]
    pub driver: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub repeats: u32,
    #[arg(long, default_value_t = 4)]
    pub workers: usize,
    /// Label for the summary row (the driver spec otherwise).
    #[arg(long)]
    pub label: Option<String>,
    /// JSON object of task id to verdict, for judged tasks.
    #[arg(long, conflicts_with = "judge")]
    pub verdicts: Option<PathBuf>,
    /// Endpoint that judges transcripts.
    #[arg(long)]
    pub judge: Option<String>,
    /// Aggregate existing JSONL records instead of running a suite.
    #[arg(long, conflicts_with_all = ["suite", "driver"])]
    pub records: Option<PathBuf>,
    /// Report file (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum TraceCommand {
    /// Run a trace against its task and fill in every step's context hash.
    Seal {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long)]
        trace: PathBuf,
        /// Where to write the sealed trace (in place otherwise).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut config = Config::load(cli.config.as_deref())?;
    if let Some(dir) = &cli.data_dir {
        config.data_dir = dir.clone();
    }
    Ok(config)
}

fn print_json(value: &Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    let config = load_config(&cli)?;
    match cli.command {
        Command::Serve { listen } => serve(config, listen),
        Command::Run(args) => run_task(App::open(config)?, args),
        Command::Skills { action } => skills(App::open(config)?, action),
        Command::Skill {
            action:
                SkillCommand::Run {
                    skill,
                    args,
                    session,
                    fixture,
                },
        } => skill_run(App::open(config)?, &skill, &args, session, fixture),
        Command::Registry { action } => registry(App::open(config)?, action),
        Command::Fixtures { action } => fixtures(App::open(config)?, action),
        Command::Eval(args) => eval(&config, args),
        Command::Metrics { session, mode } => {
            let app = App::open(config)?;
            print_json(&app.metrics(&session, mode)?)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Trace {
            action: TraceCommand::Seal { suite, task, trace, out },
        } => seal(&config, &suite, &task, &trace, out.as_deref()),
    }
}

fn serve(mut config: Config, listen: Option<String>) -> Result<ExitCode> {
    if let Some(listen) = listen {
        config.listen = listen;
    }
    let token = config
        .api_token
        .clone()
        .ok_or_else(|| anyhow!("serving needs an API token: set api_token in the config or {ENV_API_TOKEN}"))?;
    let listen = config.listen.clone();
    let app = App::open(config)?;
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&listen).await.map_err(|e| {
            if e.kind() == std::io::ErrorKind::AddrInUse {
                anyhow!("port in use: {listen}")
            } else {
                anyhow!("cannot listen on {listen}: {e}")
            }
        })?;
        let addr = listener.local_addr()?;
        println!("codemem listening on http://{addr}");
        std::io::stdout().flush()?;
        tracing::info!(%addr, "serving");
        server::serve(listener, AppState::new(app, token)).await?;
        Ok::<_, anyhow::Error>(())
    })?;
    Ok(ExitCode::SUCCESS)
}

fn read_suite(path: &Path) -> Result<Suite> {
    let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
    parse_suite(&text).with_context(|| path.display().to_string())
}

/// A task file holds one task object or a whole suite.
fn read_task(path: &Path, task_id: Option<&str>) -> Result<Task> {
    let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
    let doc: Value = serde_json::from_str(&text).with_context(|| path.display().to_string())?;
    if doc.get("tasks").is_some() {
        let suite = parse_suite(&text)?;
        return match task_id {
            Some(id) => suite
                .tasks
                .into_iter()
                .find(|t| t.task_id == id)
                .ok_or_else(|| anyhow!("no task `{id}` in {}", path.display())),
            None if suite.tasks.len() == 1 => Ok(suite.tasks.into_iter().next().expect("one task")),
            None => bail!("{} holds {} tasks; pick one with --task-id", path.display(), suite.tasks.len()),
        };
    }
    let task: Task = serde_json::from_value(doc).with_context(|| path.display().to_string())?;
    Ok(parse_suite(&json!({"tasks": [task]}).to_string())?.tasks.remove(0))
}

fn last_words(events: &[codemem::orchestrator::Event]) -> Option<Value> {
    events.iter().rev().find_map(|e| match &e.kind {
        EventKind::AssistantAction {
            action: ActionKind::Final { text },
            ..
        } => Some(json!({"final": text})),
        EventKind::AssistantAction {
            action: ActionKind::AskUser { text },
            ..
        } => Some(json!({"ask_user": text})),
        _ => None,
    })
}

fn run_task(app: App, args: RunArgs) -> Result<ExitCode> {
    let task = read_task(&args.task, args.task_id.as_deref())?;
    let mut driver = app.driver(&args.driver, Some(&task))?;
    let scenario = app.scenario(&task.fixture)?;
    let runtime = &app.runtime;
    let session_id = runtime.create_session(Some(scenario))?;
    let mut error = None;
    for message in task.messages() {
        if let Err(e) = runtime.run_session(&session_id, &message, driver.as_mut()) {
            error = Some(e.to_string());
            break;
        }
        if runtime.session_info(&session_id)?.status != SessionStatus::AwaitingUser {
            break;
        }
    }
    let info = runtime.session_info(&session_id)?;
    let trajectory = runtime.trajectory(&session_id)?;
    let drive: Vec<String> = runtime.drive(&session_id).unwrap_or_default().into_keys().collect();
    let mut report = json!({
        "session_id": session_id,
        "task_id": task.task_id,
        "status": info.status,
        "driver_calls": trajectory.driver_calls(),
        "executions": info.executions,
        "drive": drive,
    });
    if let Some(words) = last_words(&trajectory.events) {
        report["last"] = words;
    }
    if let Some(e) = &error {
        report["error"] = json!(e);
    }
    print_json(&report)?;
    Ok(if error.is_none() && info.status == SessionStatus::Done {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn skills(app: App, action: SkillsCommand) -> Result<ExitCode> {
    let bank = app.runtime.skills();
    match action {
        SkillsCommand::List => {
            let mut latest = bank.list();
            latest.sort_by(|a, b| a.name.cmp(&b.name));
            let mut out = std::io::stdout().lock();
            for s in latest {
                let flag = if s.deprecated { " (deprecated)" } else { "" };
                writeln!(out, "{}\tv{}{flag}\t{}", s.name, s.version, s.description)?;
            }
        }
        SkillsCommand::Show { skill } => {
            let (name, version) = parse_skill_ref(&skill)?;
            print_json(&json!(*bank.get(&name, version)?))?;
        }
        SkillsCommand::Export { skill, out } => {
            let (name, version) = parse_skill_ref(&skill)?;
            let skill = bank.get(&name, version)?;
            match out {
                Some(path) => std::fs::write(&path, &skill.source).with_context(|| path.display().to_string())?,
                None => std::io::stdout().lock().write_all(skill.source.as_bytes())?,
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn skill_run(app: App, skill: &str, args: &str, session: Option<String>, fixture: Option<String>) -> Result<ExitCode> {
    let (name, version) = parse_skill_ref(skill)?;
    let args: Value = serde_json::from_str(args).context("--args must be a JSON object")?;
    let runtime = &app.runtime;
    let session_id = match session {
        Some(id) => {
            runtime.session_info(&id)?;
            id
        }
        None => runtime.create_session(app.session_scenario(fixture.as_deref())?)?,
    };
    let result = runtime.run_skill(&session_id, &name, version, &args)?;
    let drive: Vec<Value> = runtime
        .drive(&session_id)
        .unwrap_or_default()
        .iter()
        .map(|(path, bytes)| json!({"path": path, "size": bytes.len()}))
        .collect();
    let ok = result.exit_status.is_success();
    print_json(&json!({
        "session_id": session_id,
        "visible": result.visible_text(),
        "result": result,
        "drive": drive,
    }))?;
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn registry(app: App, action: RegistryCommand) -> Result<ExitCode> {
    match action {
        RegistryCommand::Import { file } => {
            let text = std::fs::read_to_string(&file).with_context(|| file.display().to_string())?;
            let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("manifest");
            let n = app.import_manifest(&text, stem)?;
            println!("imported {n} tools ({} in registry)", app.runtime.registry().len());
        }
        RegistryCommand::Search { query, k } => {
            let mut out = std::io::stdout().lock();
            for hit in app.runtime.registry().search(&query, k)? {
                writeln!(out, "{}\t{}", hit.name, hit.summary)?;
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn fixtures(app: App, action: FixturesCommand) -> Result<ExitCode> {
    match action {
        FixturesCommand::Load { file, session } => {
            let text = std::fs::read_to_string(&file).with_context(|| file.display().to_string())?;
            let scenario = Scenario::from_json(&text).map_err(|e| anyhow!("{}: {e}", file.display()))?;
            let name = scenario.name.clone();
            app.runtime.load_fixture(&session, scenario)?;
            println!("loaded scenario `{name}` into {session}");
        }
        FixturesCommand::List => {
            for name in app.catalog.names() {
                println!("{name}");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn read_records(path: &Path) -> Result<Vec<TaskRecord>> {
    let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

fn eval(config: &Config, args: EvalArgs) -> Result<ExitCode> {
    let records = match &args.records {
        Some(path) => read_records(path)?,
        None => {
            let suite = read_suite(args.suite.as_deref().expect("clap requires --suite"))?;
            let spec: DriverSpec = args.driver.as_deref().expect("clap requires --driver").parse()?;
            let catalog = load_catalog(config)?;
            let options = EvalOptions {
                repeats: args.repeats,
                workers: args.workers,
                runtime: config.runtime_config(),
                sandbox: config.sandbox_config(),
                label: args.label.clone(),
                model: config.driver.model.clone(),
                api_key: config.driver.api_key(),
            };
            let verdicts = args.verdicts.as_deref().map(VerdictFile::load).transpose()?;
            let http = args.judge.clone().map(HttpJudge::new);
            let judge: Option<&dyn Judge> = match (&verdicts, &http) {
                (Some(v), _) => Some(v),
                (_, Some(h)) => Some(h),
                _ => None,
            };
            run_suite(&suite, &spec, &catalog, &options, judge)?
        }
    };
    let rows = aggregate(&records)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "label\tcorrectness\tavg_calls\tp50_latency_s\ttotal_tokens")?;
    for row in &rows {
        writeln!(
            out,
            "{}\t{:.0}%\t{:.2}\t{:.2}\t{}",
            row.label, row.correctness_min, row.avg_calls, row.p50_latency, row.total_tokens
        )?;
    }
    for r in records.iter().filter(|r| !r.passed) {
        writeln!(out, "FAIL {}#{}: {}", r.task_id, r.run_index, r.detail.as_deref().unwrap_or(""))?;
    }
    if let Some(path) = &args.out {
        let report = json!({"rows": rows, "records": records});
        std::fs::write(path, serde_json::to_vec_pretty(&report)?).with_context(|| path.display().to_string())?;
    }
    Ok(ExitCode::SUCCESS)
}

fn seal(config: &Config, suite: &Path, task_id: &str, trace: &Path, out: Option<&Path>) -> Result<ExitCode> {
    let suite = read_suite(suite)?;
    let task = suite
        .tasks
        .iter()
        .find(|t| t.task_id == task_id)
        .ok_or_else(|| anyhow!("no task `{task_id}` in the suite"))?;
    let catalog = load_catalog(config)?;
    let scenario = catalog.get(&task.fixture)?;
    let text = std::fs::read_to_string(trace).with_context(|| trace.display().to_string())?;
    let steps: Vec<TraceStep> = parse_trace(&text)?
        .into_iter()
        .map(|s| TraceStep {
            context_hash: None,
            ..s
        })
        .collect();
    let n = steps.len();
    let sealed = seal_trace(task, scenario, steps, &config.runtime_config())?;
    let target = out.unwrap_or(trace);
    std::fs::write(target, render_trace(&sealed)).with_context(|| target.display().to_string())?;
    println!("sealed {n} steps into {}", target.display());
    Ok(ExitCode::SUCCESS)
}
