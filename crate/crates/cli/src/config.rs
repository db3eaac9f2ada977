use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use codemem::orchestrator::driver::HttpDriver;
use codemem::sandbox::{Limits, SandboxConfig};
use codemem::RuntimeConfig;
use serde::{Deserialize, Serialize};

pub const ENV_CONFIG: &str = "CODEMEM_CONFIG";
pub const ENV_API_TOKEN: &str = "CODEMEM_API_TOKEN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data_dir: PathBuf,
    pub interpreter: Vec<String>,
    pub listen: String,
    /// Bearer token for the HTTP API; `CODEMEM_API_TOKEN` overrides it.
    pub api_token: Option<String>,
    /// Scenario new sessions get when a request does not name one.
    pub default_fixture: Option<String>,
    /// Extra `*.json` scenarios, on top of `<data_dir>/fixtures`.
    pub fixtures_dir: Option<PathBuf>,
    pub max_steps: usize,
    pub token_budget: u64,
    pub auto_register: bool,
    pub limits: LimitsConfig,
    pub driver: DriverConfig,
}

impl Default for Config {
    fn default() -> Self {
        let runtime = RuntimeConfig::default();
        Self {
            data_dir: PathBuf::from("codemem-data"),
            interpreter: SandboxConfig::default().interpreter,
            listen: "127.0.0.1:8787".into(),
            api_token: None,
            default_fixture: Some("case_study".into()),
            fixtures_dir: None,
            max_steps: runtime.max_steps,
            token_budget: runtime.token_budget,
            auto_register: runtime.auto_register,
            limits: LimitsConfig::default(),
            driver: DriverConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LimitsConfig {
    pub wall_timeout_secs: f64,
    pub max_output: usize,
    pub max_bridge_calls: usize,
}

impl Default for LimitsConfig {
    fn default() -> Self {
        let l = Limits::default();
        Self {
            wall_timeout_secs: l.wall_timeout_secs,
            max_output: l.max_output,
            max_bridge_calls: l.max_bridge_calls,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriverConfig {
    /// Chat-completions URL used when a request names no driver.
    pub endpoint: Option<String>,
    pub model: Option<String>,
    /// Name of the environment variable holding the endpoint's API key.
    pub api_key_env: Option<String>,
}

impl DriverConfig {
    pub fn http(&self, endpoint: &str, budget: u64) -> HttpDriver {
        let mut driver = HttpDriver::new(endpoint).with_budget(budget);
        if let Some(model) = &self.model {
            driver = driver.with_model(model);
        }
        if let Some(key) = self.api_key() {
            driver = driver.with_api_key(key);
        }
        driver
    }

    pub fn api_key(&self) -> Option<String> {
        self.api_key_env.as_ref().and_then(|v| std::env::var(v).ok())
    }
}

impl Config {
    /// Reads `path` if given (a missing file is an error), else defaults.
    /// The token from the environment wins over the file.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut config = match path {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("config {}", path.display()))?;
                Self::parse(&text).with_context(|| format!("config {}", path.display()))?
            }
            None => Self::default(),
        };
        if let Ok(token) = std::env::var(ENV_API_TOKEN) {
            if !token.is_empty() {
                config.api_token = Some(token);
            }
        }
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let config: Config = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.interpreter.is_empty() {
            bail!("interpreter must name a command");
        }
        if self.max_steps == 0 {
            bail!("max_steps must be at least 1");
        }
        let secs = self.limits.wall_timeout_secs;
        if secs.is_nan() || secs <= 0.0 {
            bail!("limits.wall_timeout_secs must be positive");
        }
        if matches!(&self.api_token, Some(t) if t.is_empty()) {
            bail!("api_token must not be empty");
        }
        Ok(())
    }

    pub fn runtime_config(&self) -> RuntimeConfig {
        RuntimeConfig {
            max_steps: self.max_steps,
            token_budget: self.token_budget,
            auto_register: self.auto_register,
            limits: Limits {
                wall_timeout_secs: self.limits.wall_timeout_secs,
                max_output: self.limits.max_output,
                max_bridge_calls: self.limits.max_bridge_calls,
            },
            ..RuntimeConfig::default()
        }
    }

    pub fn sandbox_config(&self) -> SandboxConfig {
        SandboxConfig {
            interpreter: self.interpreter.clone(),
            scratch_root: None,
        }
    }

    /// Creates the data directory and proves it writable.
    pub fn prepare_data_dir(&self) -> Result<()> {
        std::fs::create_dir_all(&self.data_dir)
            .with_context(|| format!("data_dir {}", self.data_dir.display()))?;
        let probe = self.data_dir.join(".write-probe");
        std::fs::write(&probe, b"").with_context(|| format!("data_dir {} is not writable", self.data_dir.display()))?;
        let _ = std::fs::remove_file(probe);
        Ok(())
    }

    /// Warns when the interpreter cannot be found; executions would fail later.
    pub fn check_interpreter(&self) -> bool {
        let command = Path::new(&self.interpreter[0]);
        let found = if command.components().count() > 1 {
            command.is_file()
        } else {
            std::env::var_os("PATH")
                .map(|paths| std::env::split_paths(&paths).any(|dir| dir.join(command).is_file()))
                .unwrap_or(false)
        };
        if !found {
            tracing::warn!(interpreter = %command.display(), "interpreter not found; executions will fail");
        }
        found
    }
}
