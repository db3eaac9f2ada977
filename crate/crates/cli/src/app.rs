//! Runtime wiring shared by the server and the one-shot commands.

use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use codemem::evalharness::{DriverSpec, FixtureCatalog, Task};
use codemem::metrics::{context_cost, phase_timings, CostMode};
use codemem::orchestrator::driver::{Driver, ReplayDriver};
use codemem::registry::Registry;
use codemem::toolhost::{Scenario, CASE_STUDY_MANIFEST};
use codemem::Runtime;
use serde_json::{json, Map, Value};

use crate::config::Config;

pub struct App {
    pub config: Config,
    pub runtime: Arc<Runtime>,
    pub catalog: FixtureCatalog,
}

impl App {
    /// Opens the persistent runtime under `config.data_dir`: the built-in
    /// manifest plus every imported one, saved skills, todos and sessions.
    pub fn open(config: Config) -> Result<Self> {
        config.prepare_data_dir()?;
        config.check_interpreter();
        let registry = Arc::new(Registry::new());
        registry.import_manifest(CASE_STUDY_MANIFEST)?;
        let manifests = manifests_dir(&config);
        for path in sorted_json(&manifests)? {
            let text = std::fs::read_to_string(&path)?;
            registry
                .import_manifest(&text)
                .with_context(|| format!("manifest {}", path.display()))?;
        }
        let catalog = load_catalog(&config)?;
        let runtime = Runtime::open(
            &config.data_dir,
            registry,
            config.sandbox_config(),
            config.runtime_config(),
        )?;
        Ok(Self {
            config,
            runtime: Arc::new(runtime),
            catalog,
        })
    }

    /// Validates a manifest against the live registry and keeps a copy so
    /// later starts load it again.
    pub fn import_manifest(&self, text: &str, stem: &str) -> Result<usize> {
        let n = self.runtime.registry().import_manifest(text)?;
        let dir = manifests_dir(&self.config);
        std::fs::create_dir_all(&dir)?;
        let index = sorted_json(&dir)?.len() + 1;
        let stem: String = stem
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
            .collect();
        std::fs::write(dir.join(format!("{index:04}-{stem}.json")), text)?;
        Ok(n)
    }

    pub fn scenario(&self, name: &str) -> Result<Scenario> {
        Ok(self.catalog.get(name)?.clone())
    }

    /// Scenario for a new session: `Some(name)` picks one, `None` means the
    /// configured default.
    pub fn session_scenario(&self, name: Option<&str>) -> Result<Option<Scenario>> {
        match name.or(self.config.default_fixture.as_deref()) {
            Some(name) => Ok(Some(self.scenario(name)?)),
            None => Ok(None),
        }
    }

    /// `replay:<file>`, `replay:<dir>` (needs a task to pick the trace),
    /// `http:<url>`, or a bare http(s) URL.
    pub fn driver(&self, spec: &str, task: Option<&Task>) -> Result<Box<dyn Driver>> {
        match DriverSpec::from_str(spec)? {
            DriverSpec::Replay(path) => {
                let file = if path.is_dir() {
                    let task = task.ok_or_else(|| anyhow!("replay:{} is a directory; name a trace file", path.display()))?;
                    path.join(task.trace_file())
                } else {
                    path
                };
                Ok(Box::new(ReplayDriver::from_file(&file)?))
            }
            DriverSpec::Http(url) => Ok(Box::new(self.config.driver.http(&url, self.config.token_budget))),
        }
    }

    /// The configured endpoint, when there is one.
    pub fn default_driver(&self) -> Option<Box<dyn Driver>> {
        let endpoint = self.config.driver.endpoint.as_ref()?;
        Some(Box::new(self.config.driver.http(endpoint, self.config.token_budget)))
    }

    pub fn metrics(&self, session_id: &str, mode: Option<CostMode>) -> Result<Value> {
        metrics_report(&self.runtime, session_id, mode)
    }
}

/// Built-in scenarios, then `<data_dir>/fixtures`, then `fixtures_dir`.
pub fn load_catalog(config: &Config) -> Result<FixtureCatalog> {
    let mut catalog = FixtureCatalog::default();
    let fixtures = config.data_dir.join("fixtures");
    if fixtures.is_dir() {
        catalog.load_dir(&fixtures)?;
    }
    if let Some(dir) = &config.fixtures_dir {
        catalog.load_dir(dir)?;
    }
    Ok(catalog)
}

pub fn metrics_report(runtime: &Runtime, session_id: &str, mode: Option<CostMode>) -> Result<Value> {
    let trajectory = runtime.trajectory(session_id)?;
    let prompt = &runtime.config().system_prompt;
    let modes = match mode {
        Some(m) => vec![m],
        None => vec![CostMode::React, CostMode::Codemem],
    };
    let mut costs = Map::new();
    for m in modes {
        costs.insert(m.to_string(), serde_json::to_value(context_cost(&trajectory, m, prompt)?)?);
    }
    Ok(json!({
        "session_id": session_id,
        "context_cost": costs,
        "phase_timings": phase_timings(&trajectory)?,
    }))
}

/// `name` or `name@<version>`.
pub fn parse_skill_ref(text: &str) -> Result<(String, Option<u32>)> {
    match text.split_once('@') {
        None => Ok((text.to_string(), None)),
        Some((name, v)) => {
            let v = v.strip_prefix('v').unwrap_or(v);
            match v.parse() {
                Ok(version) => Ok((name.to_string(), Some(version))),
                Err(_) => bail!("bad skill version in `{text}`"),
            }
        }
    }
}

fn manifests_dir(config: &Config) -> PathBuf {
    config.data_dir.join("manifests")
}

fn sorted_json(dir: &std::path::Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("json"))
        .collect();
    paths.sort();
    Ok(paths)
}
