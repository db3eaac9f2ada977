//! Tool manifest store with deterministic lexical search and just-in-time
//! schema loading.
//!
//! Agents never see the whole catalogue. They search for candidate tools
//! (name + summary only) and then load the full schema of the few they
//! intend to call. Search cost in context tokens is a function of `k`, not of
//! the registry size.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Default number of search hits returned to the agent.
pub const DEFAULT_SEARCH_K: usize = 5;

/// Maximum length of a tool summary, in characters.
pub const MAX_SUMMARY_CHARS: usize = 200;

const NAME_WEIGHT: usize = 3;
const TAG_WEIGHT: usize = 2;
const SUMMARY_WEIGHT: usize = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RegistryError {
    #[error("manifest parse error: {0}")]
    Parse(String),
    #[error("duplicate tool name `{0}`")]
    DuplicateName(String),
    #[error("invalid tool `{name}`: {reason}")]
    InvalidTool { name: String, reason: String },
    #[error("registry is empty")]
    EmptyRegistry,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("unknown tool(s): {}", .0.join(", "))]
    UnknownTool(Vec<String>),
}

/// Summary-level view of a tool: what search returns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolDescriptor {
    pub name: String,
    pub summary: String,
    pub tags: BTreeSet<String>,
    pub binding_ref: String,
}

/// Full tool definition, disclosed only after `load_functions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSchema {
    pub descriptor: ToolDescriptor,
    pub long_description: String,
    pub parameters: Value,
    pub returns: String,
}

impl ToolSchema {
    /// Parameter names in declaration order.
    pub fn parameter_names(&self) -> Vec<String> {
        self.parameters
            .get("properties")
            .and_then(Value::as_object)
            .map(|props| props.keys().cloned().collect())
            .unwrap_or_default()
    }

    pub fn name(&self) -> &str {
        &self.descriptor.name
    }
}

/// How a tool is executed by the tool host.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Binding {
    /// One of the built-in mock handlers backed by per-session fixture state.
    Fixture { handler: String },
    /// Arguments are POSTed as a JSON body; the response body is the result.
    Http { url: String },
    /// Declared but not executable.
    None,
}

impl Binding {
    pub fn reference(&self) -> String {
        match self {
            Binding::Fixture { handler } => format!("fixture:{handler}"),
            Binding::Http { url } => format!("http:{url}"),
            Binding::None => "none".to_string(),
        }
    }
}

/// A stored registry entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolEntry {
    pub schema: ToolSchema,
    pub binding: Binding,
}

#[derive(Debug, Deserialize)]
struct ManifestDocument {
    #[serde(default)]
    tools: Vec<ManifestTool>,
}

#[derive(Debug, Deserialize)]
struct ManifestTool {
    name: String,
    summary: String,
    #[serde(default)]
    tags: Vec<String>,
    #[serde(default)]
    long_description: String,
    #[serde(default = "empty_parameters")]
    parameters: Value,
    #[serde(default)]
    returns: String,
    #[serde(default)]
    binding: Option<Binding>,
}

fn empty_parameters() -> Value {
    serde_json::json!({"type": "object", "properties": {}, "required": []})
}

/// Lowercases and splits on runs of non-alphanumeric characters. `__` service
/// separators therefore split like any other punctuation.
pub fn tokenize(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Checks the `[a-z0-9_]+(__[a-z0-9_]+)?` naming rule. Underscores are legal
/// in both halves, so the pattern reduces to a nonempty `[a-z0-9_]` run.
pub fn is_valid_tool_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

/// Service prefix of a tool name (`outlook` for `outlook__list_emails`).
pub fn service_prefix(name: &str) -> Option<&str> {
    name.split_once("__").map(|(service, _)| service)
}

/// Validates a parameter document against the supported JSON-Schema subset:
/// an object schema with typed properties and a `required` list naming only
/// declared properties.
pub fn validate_parameters(doc: &Value) -> Result<(), String> {
    const TYPES: [&str; 7] = [
        "string", "integer", "number", "boolean", "object", "array", "null",
    ];
    let obj = doc.as_object().ok_or("parameters must be an object")?;
    if obj.get("type").and_then(Value::as_str) != Some("object") {
        return Err("parameters.type must be \"object\"".into());
    }
    let props = match obj.get("properties") {
        None => return Ok(()),
        Some(p) => p.as_object().ok_or("parameters.properties must be an object")?,
    };
    for (key, prop) in props {
        let ty = prop
            .get("type")
            .and_then(Value::as_str)
            .ok_or_else(|| format!("property `{key}` has no type"))?;
        if !TYPES.contains(&ty) {
            return Err(format!("property `{key}` has unsupported type `{ty}`"));
        }
    }
    if let Some(req) = obj.get("required") {
        let req = req.as_array().ok_or("parameters.required must be a list")?;
        for r in req {
            let r = r.as_str().ok_or("required entries must be strings")?;
            if !props.contains_key(r) {
                return Err(format!("required property `{r}` is not declared"));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Default)]
struct Snapshot {
    tools: BTreeMap<String, ToolEntry>,
}

/// Shared tool registry. Imports serialize and swap in a new snapshot;
/// searches and loads read a consistent snapshot without blocking imports.
#[derive(Debug, Default)]
pub struct Registry {
    snapshot: RwLock<Arc<Snapshot>>,
}

/// A scored search hit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchHit {
    pub name: String,
    pub summary: String,
    #[serde(skip)]
    pub score: usize,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    fn current(&self) -> Arc<Snapshot> {
        self.snapshot.read().expect("registry lock poisoned").clone()
    }

    pub fn len(&self) -> usize {
        self.current().tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, name: &str) -> bool {
        self.current().tools.contains_key(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.current().tools.keys().cloned().collect()
    }

    pub fn entry(&self, name: &str) -> Option<ToolEntry> {
        self.current().tools.get(name).cloned()
    }

    /// Imports every tool in a manifest document. All or nothing.
    pub fn import_manifest(&self, document: &str) -> Result<usize, RegistryError> {
        let doc: ManifestDocument =
            serde_json::from_str(document).map_err(|e| RegistryError::Parse(e.to_string()))?;
        let mut incoming = BTreeMap::new();
        for tool in doc.tools {
            let entry = Self::entry_from_manifest(tool)?;
            let name = entry.schema.descriptor.name.clone();
            if incoming.insert(name.clone(), entry).is_some() {
                return Err(RegistryError::DuplicateName(name));
            }
        }

        let mut guard = self.snapshot.write().expect("registry lock poisoned");
        if let Some(clash) = incoming.keys().find(|n| guard.tools.contains_key(*n)) {
            return Err(RegistryError::DuplicateName(clash.clone()));
        }
        let count = incoming.len();
        let mut tools = guard.tools.clone();
        tools.extend(incoming);
        *guard = Arc::new(Snapshot { tools });
        Ok(count)
    }

    fn entry_from_manifest(tool: ManifestTool) -> Result<ToolEntry, RegistryError> {
        let invalid = |reason: String| RegistryError::InvalidTool {
            name: tool.name.clone(),
            reason,
        };
        if !is_valid_tool_name(&tool.name) {
            return Err(invalid("name must match [a-z0-9_]+(__[a-z0-9_]+)?".into()));
        }
        if tool.summary.chars().count() > MAX_SUMMARY_CHARS {
            return Err(invalid(format!(
                "summary longer than {MAX_SUMMARY_CHARS} characters"
            )));
        }
        validate_parameters(&tool.parameters).map_err(invalid)?;
        let binding = tool.binding.clone().unwrap_or(Binding::None);
        let descriptor = ToolDescriptor {
            name: tool.name,
            summary: tool.summary,
            tags: tool.tags.iter().map(|t| t.to_lowercase()).collect(),
            binding_ref: binding.reference(),
        };
        Ok(ToolEntry {
            schema: ToolSchema {
                descriptor,
                long_description: tool.long_description,
                parameters: tool.parameters,
                returns: tool.returns,
            },
            binding,
        })
    }

    /// Ranks tools by weighted token overlap with `query`. Zero-score tools
    /// are dropped; ties go to the lexicographically smaller name.
    pub fn search(&self, query: &str, k: usize) -> Result<Vec<SearchHit>, RegistryError> {
        if k == 0 {
            return Err(RegistryError::InvalidK);
        }
        let snap = self.current();
        if snap.tools.is_empty() {
            return Err(RegistryError::EmptyRegistry);
        }
        let q = tokenize(query);
        let mut hits: Vec<SearchHit> = snap
            .tools
            .values()
            .filter_map(|entry| {
                let d = &entry.schema.descriptor;
                let score = NAME_WEIGHT * q.intersection(&tokenize(&d.name)).count()
                    + TAG_WEIGHT * q.intersection(&d.tags).count()
                    + SUMMARY_WEIGHT * q.intersection(&tokenize(&d.summary)).count();
                (score > 0).then(|| SearchHit {
                    name: d.name.clone(),
                    summary: d.summary.clone(),
                    score,
                })
            })
            .collect();
        hits.sort_by(|a, b| b.score.cmp(&a.score).then_with(|| a.name.cmp(&b.name)));
        hits.truncate(k);
        Ok(hits)
    }

    /// Resolves full schemas. Fails without side effects if any name is
    /// unknown.
    pub fn schemas(&self, names: &[String]) -> Result<Vec<ToolSchema>, RegistryError> {
        let snap = self.current();
        let missing: Vec<String> = names
            .iter()
            .filter(|n| !snap.tools.contains_key(*n))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(RegistryError::UnknownTool(missing));
        }
        Ok(names
            .iter()
            .map(|n| snap.tools[n].schema.clone())
            .collect())
    }
}

/// The per-session set of tools whose schemas have been disclosed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadedSet(BTreeSet<String>);

impl LoadedSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// `load_functions`: returns the requested schemas and extends the set.
    /// Idempotent per name; atomic on unknown names.
    pub fn load(
        &mut self,
        registry: &Registry,
        names: &[String],
    ) -> Result<Vec<ToolSchema>, RegistryError> {
        let schemas = registry.schemas(names)?;
        self.0.extend(names.iter().cloned());
        Ok(schemas)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains(name)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &String> {
        self.0.iter()
    }

    pub fn insert(&mut self, name: String) {
        self.0.insert(name);
    }
}
