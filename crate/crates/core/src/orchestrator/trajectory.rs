//! Append-only session record and the model-visible view derived from it.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::driver::{ActionKind, Message, Role, Usage};
use crate::sandbox::ExecutionResult;
use crate::todos::TodoList;
use crate::toolhost::InvocationRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Active,
    AwaitingUser,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventKind {
    SessionCreated {
        session_id: String,
    },
    UserMessage {
        text: String,
    },
    AssistantAction {
        action: ActionKind,
        raw_text: String,
        token_estimate: u64,
        usage: Usage,
        /// Wall time of the driver call that produced the action.
        duration_s: f64,
        context_hash: String,
    },
    /// Model-visible result of a core tool call other than code execution.
    ToolResult {
        tool: String,
        ok: bool,
        visible: String,
    },
    ExecutionResult {
        source: String,
        result: ExecutionResult,
        visible: String,
    },
    Invocation {
        record: InvocationRecord,
    },
    TodoWrite {
        list: TodoList,
    },
    SkillRegistered {
        name: String,
        version: u32,
        content_hash: String,
    },
    /// Visible history was truncated and re-anchored on the todo list.
    StateRecovery {
        failed_execution: String,
        resume_at: Option<String>,
        todo_revision: u64,
        note: String,
    },
    StatusChanged {
        status: SessionStatus,
    },
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::SessionCreated { .. } => "session_created",
            EventKind::UserMessage { .. } => "user_message",
            EventKind::AssistantAction { .. } => "assistant_action",
            EventKind::ToolResult { .. } => "tool_result",
            EventKind::ExecutionResult { .. } => "execution_result",
            EventKind::Invocation { .. } => "invocation",
            EventKind::TodoWrite { .. } => "todo_write",
            EventKind::SkillRegistered { .. } => "skill_registered",
            EventKind::StateRecovery { .. } => "state_recovery",
            EventKind::StatusChanged { .. } => "status_changed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub at: DateTime<Utc>,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub session_id: String,
    pub events: Vec<Event>,
}

impl Trajectory {
    pub fn new(session_id: impl Into<String>) -> Self {
        Self {
            session_id: session_id.into(),
            events: Vec::new(),
        }
    }

    /// Appends with the next sequence number.
    pub fn push(&mut self, kind: EventKind) -> &Event {
        let seq = self.events.last().map_or(1, |e| e.seq + 1);
        self.events.push(Event {
            seq,
            at: Utc::now(),
            kind,
        });
        self.events.last().expect("just pushed")
    }

    pub fn after(&self, seq: u64) -> &[Event] {
        let start = self.events.partition_point(|e| e.seq <= seq);
        &self.events[start..]
    }

    pub fn driver_calls(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e.kind, EventKind::AssistantAction { .. }))
            .count()
    }

    pub fn executions(&self) -> impl Iterator<Item = (&str, &ExecutionResult)> {
        self.events.iter().filter_map(|e| match &e.kind {
            EventKind::ExecutionResult { source, result, .. } => Some((source.as_str(), result)),
            _ => None,
        })
    }

    pub fn invocations(&self) -> impl Iterator<Item = &InvocationRecord> {
        self.events.iter().filter_map(|e| match &e.kind {
            EventKind::Invocation { record } => Some(record),
            _ => None,
        })
    }

    pub fn tool_calls(&self) -> impl Iterator<Item = (&str, &Value)> {
        self.events.iter().filter_map(|e| match &e.kind {
            EventKind::AssistantAction {
                action: ActionKind::ToolCall { name, args },
                ..
            } => Some((name.as_str(), args)),
            _ => None,
        })
    }

    pub fn final_text(&self) -> Option<&str> {
        self.events.iter().rev().find_map(|e| match &e.kind {
            EventKind::AssistantAction {
                action: ActionKind::Final { text },
                ..
            } => Some(text.as_str()),
            _ => None,
        })
    }

    pub fn total_usage(&self) -> u64 {
        self.events
            .iter()
            .map(|e| match &e.kind {
                EventKind::AssistantAction { usage, .. } => usage.total(),
                _ => 0,
            })
            .sum()
    }
}

/// The messages a model sees after `events`, starting from `system_prompt`.
///
/// Invocation payloads never appear: executions contribute only their
/// visible text. A state-recovery event truncates the history to the system
/// prompt, the user's messages and the recovery note.
pub fn visible_messages(system_prompt: &str, events: &[Event]) -> Vec<Message> {
    let mut messages = vec![Message::new(Role::System, system_prompt)];
    let mut user_messages: Vec<Message> = Vec::new();
    for event in events {
        match &event.kind {
            EventKind::UserMessage { text } => {
                let m = Message::new(Role::User, text.clone());
                user_messages.push(m.clone());
                messages.push(m);
            }
            EventKind::AssistantAction { raw_text, .. } => {
                messages.push(Message::new(Role::Assistant, raw_text.clone()));
            }
            EventKind::ToolResult { visible, .. } | EventKind::ExecutionResult { visible, .. } => {
                messages.push(Message::new(Role::Tool, visible.clone()));
            }
            EventKind::StateRecovery { note, .. } => {
                messages.truncate(1);
                messages.extend(user_messages.iter().cloned());
                messages.push(Message::new(Role::System, note.clone()));
            }
            EventKind::SessionCreated { .. }
            | EventKind::Invocation { .. }
            | EventKind::TodoWrite { .. }
            | EventKind::SkillRegistered { .. }
            | EventKind::StatusChanged { .. } => {}
        }
    }
    messages
}
