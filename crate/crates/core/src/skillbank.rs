//! Procedural memory: immutable, versioned, content-hashed skill storage.
//!
//! Layout on disk, one directory per skill:
//!
//! ```text
//! skills/<name>/v<version>.code
//! skills/<name>/v<version>.meta.json
//! skills/<name>/v<version>.deprecated   (optional marker)
//! ```
//!
//! Stored sources are never rewritten. Deprecation is a separate marker file
//! so the code and metadata of a version stay byte-stable.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::registry::tokenize;

pub const DEFAULT_ENTRYPOINT: &str = "agent_main";

#[derive(Debug, Error)]
pub enum SkillError {
    #[error("skill source is empty")]
    EmptySource,
    #[error("entrypoint `{0}` is not defined in the skill source")]
    MissingEntrypoint(String),
    #[error("invalid skill name `{0}`")]
    InvalidName(String),
    #[error("no successful execution backs this skill: {0}")]
    ValidationMissing(String),
    #[error("required tool(s) not in registry: {}", .0.join(", "))]
    UnknownTool(Vec<String>),
    #[error("unknown skill `{0}`")]
    UnknownSkill(String),
    #[error("skill `{name}` has no version {version}")]
    UnknownVersion { name: String, version: u32 },
    #[error("stored skill `{0}` is corrupt: {1}")]
    Corrupt(String, String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Which execution proved the skill works.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub session_id: String,
    pub execution_id: String,
    pub user_confirmed: bool,
}

/// What the caller knows about the execution a [`ValidationRecord`] cites.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionEvidence {
    pub session_id: String,
    pub execution_id: String,
    pub succeeded: bool,
}

/// Registration input; version, hash and timestamp are assigned by the bank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillDraft {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub source: String,
    #[serde(default = "default_entrypoint")]
    pub entrypoint: String,
    #[serde(default)]
    pub signature: String,
    #[serde(default)]
    pub required_tools: Vec<String>,
}

fn default_entrypoint() -> String {
    DEFAULT_ENTRYPOINT.to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skill {
    pub name: String,
    pub version: u32,
    pub source: String,
    pub entrypoint: String,
    pub signature: String,
    pub description: String,
    pub required_tools: Vec<String>,
    pub validation: ValidationRecord,
    pub content_hash: String,
    pub created_at: DateTime<Utc>,
    #[serde(default)]
    pub deprecated: bool,
}

/// Everything except the source; this is the `.meta.json` sidecar.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SkillMeta {
    name: String,
    version: u32,
    entrypoint: String,
    signature: String,
    description: String,
    required_tools: Vec<String>,
    validation: ValidationRecord,
    content_hash: String,
    created_at: DateTime<Utc>,
}

/// Search hit over the latest version of each skill.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillHit {
    pub name: String,
    pub version: u32,
    pub description: String,
    #[serde(skip)]
    pub score: usize,
}

pub fn content_hash(source: &str) -> String {
    hex::encode(Sha256::digest(source.as_bytes()))
}

/// Textual check that `entrypoint` is defined as a (possibly async) function.
pub fn defines_function(source: &str, entrypoint: &str) -> bool {
    source.lines().any(|line| {
        let line = line.trim_start();
        let line = line.strip_prefix("async ").map(str::trim_start).unwrap_or(line);
        line.strip_prefix("def ")
            .map(str::trim_start)
            .and_then(|rest| rest.strip_prefix(entrypoint))
            .is_some_and(|rest| rest.trim_start().starts_with('('))
    })
}

fn is_valid_skill_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

#[derive(Debug, Default)]
pub struct SkillBank {
    root: Option<PathBuf>,
    skills: RwLock<BTreeMap<String, Vec<Arc<Skill>>>>,
    register_lock: Mutex<()>,
}

impl SkillBank {
    /// A bank that lives only in memory.
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a bank rooted at `dir`, loading every stored version
    /// and verifying its content hash.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, SkillError> {
        let root = dir.into();
        fs::create_dir_all(&root)?;
        let mut skills: BTreeMap<String, Vec<Arc<Skill>>> = BTreeMap::new();
        let mut names: Vec<_> = fs::read_dir(&root)?
            .filter_map(Result::ok)
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        for name in names {
            let versions = load_versions(&root.join(&name), &name)?;
            if !versions.is_empty() {
                skills.insert(name, versions);
            }
        }
        Ok(Self {
            root: Some(root),
            skills: RwLock::new(skills),
            register_lock: Mutex::new(()),
        })
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    /// Freezes a validated skill as the next version of `draft.name`.
    pub fn register(
        &self,
        draft: SkillDraft,
        validation: ValidationRecord,
        evidence: Option<&ExecutionEvidence>,
        is_known_tool: impl Fn(&str) -> bool,
    ) -> Result<Arc<Skill>, SkillError> {
        if !is_valid_skill_name(&draft.name) {
            return Err(SkillError::InvalidName(draft.name));
        }
        if draft.source.trim().is_empty() {
            return Err(SkillError::EmptySource);
        }
        if !defines_function(&draft.source, &draft.entrypoint) {
            return Err(SkillError::MissingEntrypoint(draft.entrypoint));
        }
        match evidence {
            Some(e)
                if e.succeeded
                    && e.execution_id == validation.execution_id
                    && e.session_id == validation.session_id => {}
            Some(e) if !e.succeeded => {
                return Err(SkillError::ValidationMissing(format!(
                    "execution {} did not succeed",
                    e.execution_id
                )))
            }
            _ => {
                return Err(SkillError::ValidationMissing(format!(
                    "execution {} not found in session {}",
                    validation.execution_id, validation.session_id
                )))
            }
        }
        let unknown: Vec<String> = draft
            .required_tools
            .iter()
            .filter(|t| !is_known_tool(t))
            .cloned()
            .collect();
        if !unknown.is_empty() {
            return Err(SkillError::UnknownTool(unknown));
        }

        let _guard = self.register_lock.lock().expect("skill lock poisoned");
        let version = self
            .skills
            .read()
            .expect("skill lock poisoned")
            .get(&draft.name)
            .map_or(1, |v| v.len() as u32 + 1);
        let skill = Skill {
            content_hash: content_hash(&draft.source),
            name: draft.name,
            version,
            source: draft.source,
            entrypoint: draft.entrypoint,
            signature: draft.signature,
            description: draft.description,
            required_tools: draft.required_tools,
            validation,
            created_at: Utc::now(),
            deprecated: false,
        };
        if let Some(root) = &self.root {
            persist(root, &skill)?;
        }
        let skill = Arc::new(skill);
        self.skills
            .write()
            .expect("skill lock poisoned")
            .entry(skill.name.clone())
            .or_default()
            .push(skill.clone());
        Ok(skill)
    }

    /// Latest version when `version` is `None`.
    pub fn get(&self, name: &str, version: Option<u32>) -> Result<Arc<Skill>, SkillError> {
        let skills = self.skills.read().expect("skill lock poisoned");
        let versions = skills
            .get(name)
            .ok_or_else(|| SkillError::UnknownSkill(name.to_string()))?;
        match version {
            None => Ok(versions.last().expect("no empty version lists").clone()),
            Some(v) => versions
                .get((v as usize).wrapping_sub(1))
                .cloned()
                .ok_or(SkillError::UnknownVersion {
                    name: name.to_string(),
                    version: v,
                }),
        }
    }

    /// Latest version of every skill, by name.
    pub fn list(&self) -> Vec<Arc<Skill>> {
        self.skills
            .read()
            .expect("skill lock poisoned")
            .values()
            .filter_map(|v| v.last().cloned())
            .collect()
    }

    pub fn versions(&self, name: &str) -> Result<Vec<Arc<Skill>>, SkillError> {
        self.skills
            .read()
            .expect("skill lock poisoned")
            .get(name)
            .cloned()
            .ok_or_else(|| SkillError::UnknownSkill(name.to_string()))
    }

    /// Ranks latest, non-deprecated versions by name (weight 3) and
    /// description (weight 1) token overlap; ties by ascending name.
    pub fn search(&self, query: &str, k: usize) -> Vec<SkillHit> {
        let q = tokenize(query);
        let mut hits: Vec<SkillHit> = self
            .list()
            .into_iter()
            .filter(|s| !s.deprecated)
            .filter_map(|s| {
                let score = 3 * q.intersection(&tokenize(&s.name)).count()
                    + q.intersection(&tokenize(&s.description)).count();
                (score > 0).then(|| SkillHit {
                    name: s.name.clone(),
                    version: s.version,
                    description: s.description.clone(),
                    score,
                })
            })
            .collect();
        hits.sort_by(|a, b| b.score.cmp(&a.score).then_with(|| a.name.cmp(&b.name)));
        hits.truncate(k);
        hits
    }

    /// Flags a version as deprecated: hidden from search, still retrievable.
    pub fn deprecate(&self, name: &str, version: u32) -> Result<(), SkillError> {
        let _guard = self.register_lock.lock().expect("skill lock poisoned");
        let mut skills = self.skills.write().expect("skill lock poisoned");
        let versions = skills
            .get_mut(name)
            .ok_or_else(|| SkillError::UnknownSkill(name.to_string()))?;
        let slot = versions
            .get_mut((version as usize).wrapping_sub(1))
            .ok_or(SkillError::UnknownVersion {
                name: name.to_string(),
                version,
            })?;
        if let Some(root) = &self.root {
            fs::write(root.join(name).join(format!("v{version}.deprecated")), b"")?;
        }
        let mut updated = (**slot).clone();
        updated.deprecated = true;
        *slot = Arc::new(updated);
        Ok(())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)
}

fn persist(root: &Path, skill: &Skill) -> Result<(), SkillError> {
    let dir = root.join(&skill.name);
    fs::create_dir_all(&dir)?;
    let meta = SkillMeta {
        name: skill.name.clone(),
        version: skill.version,
        entrypoint: skill.entrypoint.clone(),
        signature: skill.signature.clone(),
        description: skill.description.clone(),
        required_tools: skill.required_tools.clone(),
        validation: skill.validation.clone(),
        content_hash: skill.content_hash.clone(),
        created_at: skill.created_at,
    };
    let v = skill.version;
    write_atomic(&dir.join(format!("v{v}.code")), skill.source.as_bytes())?;
    let meta = serde_json::to_vec_pretty(&meta).expect("meta serializes");
    // meta goes last: a version without a sidecar is ignored on load
    write_atomic(&dir.join(format!("v{v}.meta.json")), &meta)?;
    Ok(())
}

fn load_versions(dir: &Path, name: &str) -> Result<Vec<Arc<Skill>>, SkillError> {
    let corrupt = |msg: String| SkillError::Corrupt(name.to_string(), msg);
    let mut versions = Vec::new();
    for v in 1.. {
        let meta_path = dir.join(format!("v{v}.meta.json"));
        if !meta_path.exists() {
            break;
        }
        let meta: SkillMeta = serde_json::from_slice(&fs::read(&meta_path)?)
            .map_err(|e| corrupt(format!("v{v} metadata: {e}")))?;
        let source = fs::read_to_string(dir.join(format!("v{v}.code")))?;
        if meta.version != v || meta.name != name {
            return Err(corrupt(format!("v{v} metadata names the wrong version")));
        }
        if content_hash(&source) != meta.content_hash {
            return Err(corrupt(format!("v{v} source does not match its hash")));
        }
        versions.push(Arc::new(Skill {
            name: meta.name,
            version: meta.version,
            source,
            entrypoint: meta.entrypoint,
            signature: meta.signature,
            description: meta.description,
            required_tools: meta.required_tools,
            validation: meta.validation,
            content_hash: meta.content_hash,
            created_at: meta.created_at,
            deprecated: dir.join(format!("v{v}.deprecated")).exists(),
        }));
    }
    Ok(versions)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SOURCE: &str = "async def agent_main(days_back=15):\n    return days_back\n";

    fn draft(name: &str, source: &str) -> SkillDraft {
        SkillDraft {
            name: name.into(),
            description: "Copy PDF and XLSX email attachments into OneDrive".into(),
            source: source.into(),
            entrypoint: DEFAULT_ENTRYPOINT.into(),
            signature: "days_back=15".into(),
            required_tools: vec!["outlook__list_emails".into()],
        }
    }

    fn ok_evidence() -> (ValidationRecord, ExecutionEvidence) {
        (
            ValidationRecord {
                session_id: "s1".into(),
                execution_id: "exec-1".into(),
                user_confirmed: true,
            },
            ExecutionEvidence {
                session_id: "s1".into(),
                execution_id: "exec-1".into(),
                succeeded: true,
            },
        )
    }

    fn register(bank: &SkillBank, name: &str, source: &str) -> Result<Arc<Skill>, SkillError> {
        let (v, e) = ok_evidence();
        bank.register(draft(name, source), v, Some(&e), |_| true)
    }

    #[test]
    fn versions_are_monotone_and_frozen() {
        let bank = SkillBank::in_memory();
        let v1 = register(&bank, "outlook_onedrive_bridge", SOURCE).unwrap();
        assert_eq!(v1.version, 1);
        let v2 = register(&bank, "outlook_onedrive_bridge", &format!("{SOURCE}# v2\n")).unwrap();
        assert_eq!(v2.version, 2);
        let again = bank.get("outlook_onedrive_bridge", Some(1)).unwrap();
        assert_eq!(again.source, SOURCE);
        assert_eq!(again.content_hash, content_hash(SOURCE));
        assert_eq!(bank.get("outlook_onedrive_bridge", None).unwrap().version, 2);
    }

    #[test]
    fn failed_execution_is_not_validation() {
        let bank = SkillBank::in_memory();
        let (v, mut e) = ok_evidence();
        e.succeeded = false;
        let err = bank.register(draft("b", SOURCE), v.clone(), Some(&e), |_| true);
        assert!(matches!(err, Err(SkillError::ValidationMissing(_))));
        let err = bank.register(draft("b", SOURCE), v, None, |_| true);
        assert!(matches!(err, Err(SkillError::ValidationMissing(_))));
    }

    #[test]
    fn precondition_errors() {
        let bank = SkillBank::in_memory();
        assert!(matches!(register(&bank, "b", "  \n"), Err(SkillError::EmptySource)));
        assert!(matches!(
            register(&bank, "b", "def other():\n    pass\n"),
            Err(SkillError::MissingEntrypoint(_))
        ));
        assert!(matches!(register(&bank, "B/../x", SOURCE), Err(SkillError::InvalidName(_))));
        let (v, e) = ok_evidence();
        let err = bank.register(draft("b", SOURCE), v, Some(&e), |_| false);
        assert!(matches!(err, Err(SkillError::UnknownTool(t)) if t == ["outlook__list_emails"]));
    }

    #[test]
    fn lookup_errors() {
        let bank = SkillBank::in_memory();
        assert!(matches!(bank.get("ghost", None), Err(SkillError::UnknownSkill(_))));
        register(&bank, "bridge", SOURCE).unwrap();
        assert!(matches!(
            bank.get("bridge", Some(2)),
            Err(SkillError::UnknownVersion { version: 2, .. })
        ));
        assert!(matches!(bank.get("bridge", Some(0)), Err(SkillError::UnknownVersion { .. })));
    }

    #[test]
    fn entrypoint_detection() {
        assert!(defines_function("def agent_main():\n", "agent_main"));
        assert!(defines_function("  async  def agent_main (x=1):\n", "agent_main"));
        assert!(!defines_function("def agent_main_v2():\n", "agent_main"));
        assert!(!defines_function("agent_main()\n", "agent_main"));
    }

    #[test]
    fn search_latest_only() {
        let bank = SkillBank::in_memory();
        assert!(bank.search("email attachment", 5).is_empty());
        register(&bank, "outlook_onedrive_bridge", SOURCE).unwrap();
        let mut other = draft("weekly_report", "def agent_main():\n    pass\n");
        other.description = "Summarize sheet rows".into();
        let (v, e) = ok_evidence();
        bank.register(other, v, Some(&e), |_| true).unwrap();
        register(&bank, "outlook_onedrive_bridge", &format!("{SOURCE}\n")).unwrap();

        let hits = bank.search("email attachment", 5);
        assert_eq!(hits.len(), 1);
        assert_eq!((hits[0].name.as_str(), hits[0].version), ("outlook_onedrive_bridge", 2));
        assert!(bank.search("zzqq", 5).is_empty());
    }

    #[test]
    fn deprecated_hidden_from_search_but_retrievable() {
        let bank = SkillBank::in_memory();
        register(&bank, "bridge", SOURCE).unwrap();
        bank.deprecate("bridge", 1).unwrap();
        assert!(bank.search("bridge", 5).is_empty());
        assert!(bank.get("bridge", Some(1)).unwrap().deprecated);
    }

    #[test]
    fn survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let hash = {
            let bank = SkillBank::open(dir.path()).unwrap();
            register(&bank, "bridge", SOURCE).unwrap();
            register(&bank, "bridge", "def agent_main():\n    pass\n").unwrap();
            bank.deprecate("bridge", 2).unwrap();
            bank.get("bridge", Some(1)).unwrap().content_hash.clone()
        };
        assert!(dir.path().join("bridge/v1.code").exists());
        assert!(dir.path().join("bridge/v1.meta.json").exists());
        let bank = SkillBank::open(dir.path()).unwrap();
        let v1 = bank.get("bridge", Some(1)).unwrap();
        assert_eq!(v1.source, SOURCE);
        assert_eq!(v1.content_hash, hash);
        assert!(bank.get("bridge", None).unwrap().deprecated);
        assert_eq!(register(&bank, "bridge", SOURCE).unwrap().version, 3);
    }

    #[test]
    fn tampered_source_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        {
            let bank = SkillBank::open(dir.path()).unwrap();
            register(&bank, "bridge", SOURCE).unwrap();
        }
        fs::write(dir.path().join("bridge/v1.code"), "def agent_main(): pass\n").unwrap();
        assert!(matches!(SkillBank::open(dir.path()), Err(SkillError::Corrupt(..))));
    }
}
