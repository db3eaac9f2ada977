//! External working memory: per-session plan checklists.
//!
//! Writes replace the whole list. An item is identified by its exact content
//! string; for every item present before and after a write, status may only
//! move forward (`pending -> in_progress -> completed`, or straight to
//! `completed`). At most one item may be `in_progress`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TodoError {
    #[error("status of `{content}` cannot move from {from} to {to}")]
    StatusRegression {
        content: String,
        from: TodoStatus,
        to: TodoStatus,
    },
    #[error("{0} items are in_progress; at most one is allowed")]
    MultipleInProgress(usize),
    #[error("todo items must have nonempty content")]
    EmptyItem,
    #[error("duplicate todo item `{0}`")]
    DuplicateItem(String),
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("todo store i/o: {0}")]
    Io(String),
}

impl From<io::Error> for TodoError {
    fn from(e: io::Error) -> Self {
        TodoError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TodoStatus {
    Pending,
    InProgress,
    Completed,
}

impl fmt::Display for TodoStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TodoStatus::Pending => "pending",
            TodoStatus::InProgress => "in_progress",
            TodoStatus::Completed => "completed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TodoItem {
    pub status: TodoStatus,
    pub content: String,
}

impl TodoItem {
    pub fn new(status: TodoStatus, content: impl Into<String>) -> Self {
        Self {
            status,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TodoList {
    pub session_id: String,
    pub items: Vec<TodoItem>,
    pub revision: u64,
}

impl TodoList {
    fn empty(session_id: &str) -> Self {
        Self {
            session_id: session_id.to_string(),
            items: Vec::new(),
            revision: 0,
        }
    }

    /// The sub-goal to resume at after a failure.
    pub fn first_open(&self) -> Option<&TodoItem> {
        self.items
            .iter()
            .find(|i| i.status != TodoStatus::Completed)
    }

    /// Renders the list in the `todos:` block layout the agent is shown.
    pub fn render(&self) -> String {
        let mut out = String::from("todos:\n");
        for item in &self.items {
            out.push_str(&format!(
                "  - status: {}\n    content: {}\n",
                item.status, item.content
            ));
        }
        out
    }
}

/// Checks a proposed replacement against the current list.
pub fn check_transition(current: &[TodoItem], proposed: &[TodoItem]) -> Result<(), TodoError> {
    let mut seen = HashSet::new();
    for item in proposed {
        if item.content.trim().is_empty() {
            return Err(TodoError::EmptyItem);
        }
        if !seen.insert(item.content.as_str()) {
            return Err(TodoError::DuplicateItem(item.content.clone()));
        }
    }
    let in_progress = proposed
        .iter()
        .filter(|i| i.status == TodoStatus::InProgress)
        .count();
    if in_progress > 1 {
        return Err(TodoError::MultipleInProgress(in_progress));
    }
    let before: HashMap<&str, TodoStatus> = current
        .iter()
        .map(|i| (i.content.as_str(), i.status))
        .collect();
    for item in proposed {
        if let Some(&from) = before.get(item.content.as_str()) {
            if item.status < from {
                return Err(TodoError::StatusRegression {
                    content: item.content.clone(),
                    from,
                    to: item.status,
                });
            }
        }
    }
    Ok(())
}

/// Session-scoped todo lists, optionally persisted as one JSON file per
/// session under `root`.
#[derive(Debug, Default)]
pub struct TodoStore {
    root: Option<PathBuf>,
    lists: RwLock<BTreeMap<String, Arc<Mutex<TodoList>>>>,
}

impl TodoStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, TodoError> {
        let root = dir.into();
        fs::create_dir_all(&root)?;
        let mut lists = BTreeMap::new();
        for entry in fs::read_dir(&root)?.filter_map(Result::ok) {
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let list: TodoList = serde_json::from_slice(&fs::read(&path)?)
                .map_err(|e| TodoError::Io(format!("{}: {e}", path.display())))?;
            lists.insert(list.session_id.clone(), Arc::new(Mutex::new(list)));
        }
        Ok(Self {
            root: Some(root),
            lists: RwLock::new(lists),
        })
    }

    /// Registers a session with an empty list (revision 0). Idempotent.
    pub fn open_session(&self, session_id: &str) {
        self.lists
            .write()
            .expect("todo lock poisoned")
            .entry(session_id.to_string())
            .or_insert_with(|| Arc::new(Mutex::new(TodoList::empty(session_id))));
    }

    fn slot(&self, session_id: &str) -> Result<Arc<Mutex<TodoList>>, TodoError> {
        self.lists
            .read()
            .expect("todo lock poisoned")
            .get(session_id)
            .cloned()
            .ok_or_else(|| TodoError::UnknownSession(session_id.to_string()))
    }

    /// Atomically replaces the session's list; rejected writes change nothing.
    pub fn write(&self, session_id: &str, items: Vec<TodoItem>) -> Result<TodoList, TodoError> {
        let slot = self.slot(session_id)?;
        let mut list = slot.lock().expect("todo lock poisoned");
        check_transition(&list.items, &items)?;
        let next = TodoList {
            session_id: session_id.to_string(),
            items,
            revision: list.revision + 1,
        };
        if let Some(root) = &self.root {
            let path = root.join(format!("{session_id}.json"));
            let tmp = path.with_extension("tmp");
            fs::write(&tmp, serde_json::to_vec_pretty(&next).expect("todo list serializes"))?;
            fs::rename(tmp, path)?;
        }
        *list = next.clone();
        Ok(next)
    }

    pub fn get(&self, session_id: &str) -> Result<TodoList, TodoError> {
        Ok(self.slot(session_id)?.lock().expect("todo lock poisoned").clone())
    }
}
