//! The model side of the loop: something that turns visible context into
//! the next [`ActionKind`].

use std::collections::VecDeque;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::metrics::estimate_tokens;

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("trace exhausted after {0} steps")]
    TraceExhausted(usize),
    #[error("trace diverged at step {step}: expected context {expected}, got {actual}")]
    TraceDivergence {
        step: usize,
        expected: String,
        actual: String,
    },
    #[error("trace line {line}: {message}")]
    TraceFormat { line: usize, message: String },
    #[error("http driver: {0}")]
    Http(String),
    #[error("unparseable model reply: {0}")]
    Format(String),
    #[error("context of {tokens} tokens exceeds the driver budget of {budget}")]
    OverBudget { tokens: u64, budget: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::Tool => "tool",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

/// What the model asked for. `ask_user` is an explicit marker, never inferred
/// from the text of a final answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ActionKind {
    ToolCall {
        name: String,
        #[serde(default = "empty_object")]
        args: Value,
    },
    Final {
        text: String,
    },
    AskUser {
        text: String,
    },
}

fn empty_object() -> Value {
    json!({})
}

impl ActionKind {
    pub fn tool_name(&self) -> Option<&str> {
        match self {
            ActionKind::ToolCall { name, .. } => Some(name),
            _ => None,
        }
    }

    /// Canonical text form, used when a driver supplies no raw text.
    pub fn to_text(&self) -> String {
        serde_json::to_string(self).expect("action serializes")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Usage {
    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriverReply {
    pub action: ActionKind,
    pub raw_text: String,
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisibleContext {
    pub messages: Vec<Message>,
}

impl VisibleContext {
    /// sha256 over `role\ncontent\n` for every message.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for m in &self.messages {
            h.update(m.role.as_str().as_bytes());
            h.update(b"\n");
            h.update(m.content.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn token_estimate(&self) -> u64 {
        self.messages.iter().map(|m| estimate_tokens(&m.content)).sum()
    }
}

pub trait Driver: Send {
    fn next(&mut self, context: &VisibleContext) -> Result<DriverReply, DriverError>;

    /// Largest context (estimated tokens) this driver accepts.
    fn token_budget(&self) -> Option<u64> {
        None
    }
}

/// One line of a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_hash: Option<String>,
    pub action: ActionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
}

impl TraceStep {
    pub fn new(action: ActionKind) -> Self {
        Self {
            context_hash: None,
            action,
            raw_text: None,
            usage: None,
        }
    }
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceStep>, DriverError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| DriverError::TraceFormat {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn render_trace(steps: &[TraceStep]) -> String {
    steps
        .iter()
        .map(|s| serde_json::to_string(s).expect("trace step serializes") + "\n")
        .collect()
}

/// Plays back a recorded trace, checking each step's context hash.
#[derive(Debug, Clone)]
pub struct ReplayDriver {
    steps: Vec<TraceStep>,
    position: usize,
    /// Hashes seen at each step, for sealing unsealed traces.
    observed: Vec<String>,
}

impl ReplayDriver {
    pub fn new(steps: Vec<TraceStep>) -> Self {
        Self {
            steps,
            position: 0,
            observed: Vec::new(),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, DriverError> {
        let text = std::fs::read_to_string(path).map_err(|e| DriverError::TraceFormat {
            line: 0,
            message: format!("{}: {e}", path.display()),
        })?;
        Ok(Self::new(parse_trace(&text)?))
    }

    pub fn position(&self) -> usize {
        self.position
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn is_exhausted(&self) -> bool {
        self.position >= self.steps.len()
    }

    /// The consumed steps with their observed context hashes filled in.
    pub fn sealed(&self) -> Vec<TraceStep> {
        self.steps
            .iter()
            .zip(&self.observed)
            .map(|(s, h)| TraceStep {
                context_hash: Some(h.clone()),
                ..s.clone()
            })
            .collect()
    }
}

impl Driver for ReplayDriver {
    fn next(&mut self, context: &VisibleContext) -> Result<DriverReply, DriverError> {
        let Some(step) = self.steps.get(self.position) else {
            return Err(DriverError::TraceExhausted(self.steps.len()));
        };
        let actual = context.hash();
        if let Some(expected) = &step.context_hash {
            if *expected != actual {
                return Err(DriverError::TraceDivergence {
                    step: self.position + 1,
                    expected: expected.clone(),
                    actual,
                });
            }
        }
        self.position += 1;
        self.observed.push(actual);
        let raw_text = step.raw_text.clone().unwrap_or_else(|| step.action.to_text());
        let usage = step.usage.unwrap_or(Usage {
            prompt_tokens: context.token_estimate(),
            completion_tokens: estimate_tokens(&raw_text),
        });
        Ok(DriverReply {
            action: step.action.clone(),
            raw_text,
            usage,
        })
    }
}

/// Returns queued actions without any context checks.
#[derive(Debug, Clone, Default)]
pub struct ScriptedDriver {
    queue: VecDeque<ActionKind>,
    served: usize,
}

impl ScriptedDriver {
    pub fn new(actions: impl IntoIterator<Item = ActionKind>) -> Self {
        Self {
            queue: actions.into_iter().collect(),
            served: 0,
        }
    }
}

impl Driver for ScriptedDriver {
    fn next(&mut self, context: &VisibleContext) -> Result<DriverReply, DriverError> {
        let action = self.queue.pop_front().ok_or(DriverError::TraceExhausted(self.served))?;
        self.served += 1;
        let raw_text = action.to_text();
        Ok(DriverReply {
            usage: Usage {
                prompt_tokens: context.token_estimate(),
                completion_tokens: estimate_tokens(&raw_text),
            },
            action,
            raw_text,
        })
    }
}

/// Posts a chat-completions request and reads one action from the reply.
///
/// The action is taken from the first `tool_calls` entry if present, else
/// from a JSON object in the message content; plain text becomes `final`.
#[derive(Debug, Clone)]
pub struct HttpDriver {
    endpoint: String,
    model: Option<String>,
    api_key: Option<String>,
    budget: Option<u64>,
    agent: ureq::Agent,
}

impl HttpDriver {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: None,
            api_key: None,
            budget: None,
            agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(300)).build(),
        }
    }

    pub fn with_model(mut self, model: impl Into<String>) -> Self {
        self.model = Some(model.into());
        self
    }

    pub fn with_api_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(key.into());
        self
    }

    pub fn with_budget(mut self, tokens: u64) -> Self {
        self.budget = Some(tokens);
        self
    }

    pub fn request_body(&self, context: &VisibleContext) -> Value {
        // tool results go out as user turns: the wire format would otherwise
        // need tool_call ids the loop does not track
        let messages: Vec<Value> = context
            .messages
            .iter()
            .map(|m| match m.role {
                Role::Tool => json!({"role": "user", "content": format!("[tool result]\n{}", m.content)}),
                r => json!({"role": r.as_str(), "content": m.content}),
            })
            .collect();
        let mut body = json!({"messages": messages});
        if let Some(model) = &self.model {
            body["model"] = json!(model);
        }
        body
    }
}

/// Extracts an action from a chat-completions response document.
pub fn parse_completion(doc: &Value) -> Result<(ActionKind, String, Usage), DriverError> {
    let message = doc
        .pointer("/choices/0/message")
        .ok_or_else(|| DriverError::Format("missing choices[0].message".into()))?;
    let usage = Usage {
        prompt_tokens: doc.pointer("/usage/prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
        completion_tokens: doc
            .pointer("/usage/completion_tokens")
            .and_then(Value::as_u64)
            .unwrap_or(0),
    };
    if let Some(call) = message.pointer("/tool_calls/0/function") {
        let name = call
            .get("name")
            .and_then(Value::as_str)
            .ok_or_else(|| DriverError::Format("tool call without a name".into()))?;
        let args = match call.get("arguments") {
            Some(Value::String(s)) => serde_json::from_str(s).map_err(|e| DriverError::Format(e.to_string()))?,
            Some(v) => v.clone(),
            None => json!({}),
        };
        let action = ActionKind::ToolCall {
            name: name.to_string(),
            args,
        };
        let raw = action.to_text();
        return Ok((action, raw, usage));
    }
    let content = message.get("content").and_then(Value::as_str).unwrap_or("").to_string();
    let action = match (content.find('{'), content.rfind('}')) {
        (Some(a), Some(b)) if a < b => serde_json::from_str::<ActionKind>(&content[a..=b]).ok(),
        _ => None,
    }
    .unwrap_or_else(|| ActionKind::Final { text: content.trim().to_string() });
    Ok((action, content, usage))
}

impl Driver for HttpDriver {
    fn next(&mut self, context: &VisibleContext) -> Result<DriverReply, DriverError> {
        if let Some(budget) = self.budget {
            let tokens = context.token_estimate();
            if tokens > budget {
                return Err(DriverError::OverBudget { tokens, budget });
            }
        }
        let mut request = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            request = request.set("Authorization", &format!("Bearer {key}"));
        }
        let response = request
            .send_json(self.request_body(context))
            .map_err(|e| DriverError::Http(e.to_string()))?;
        let doc: Value = response.into_json().map_err(|e| DriverError::Http(e.to_string()))?;
        let (action, raw_text, usage) = parse_completion(&doc)?;
        Ok(DriverReply {
            action,
            raw_text,
            usage,
        })
    }

    fn token_budget(&self) -> Option<u64> {
        self.budget
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(text: &str) -> VisibleContext {
        VisibleContext {
            messages: vec![Message::new(Role::System, "sys"), Message::new(Role::User, text)],
        }
    }

    #[test]
    fn hash_covers_roles_and_boundaries() {
        let a = VisibleContext {
            messages: vec![Message::new(Role::User, "ab")],
        };
        let b = VisibleContext {
            messages: vec![Message::new(Role::Assistant, "ab")],
        };
        assert_ne!(a.hash(), b.hash());
        let mut h = Sha256::new();
        h.update(b"user\nab\n");
        assert_eq!(a.hash(), hex::encode(h.finalize()));
    }

    #[test]
    fn replay_checks_hash_and_exhausts() {
        let good = ctx("hi");
        let mut step = TraceStep::new(ActionKind::Final { text: "hi".into() });
        step.context_hash = Some(good.hash());
        let mut d = ReplayDriver::new(vec![step.clone()]);
        assert!(matches!(
            d.clone().next(&ctx("other")),
            Err(DriverError::TraceDivergence { step: 1, .. })
        ));
        let reply = d.next(&good).unwrap();
        assert_eq!(reply.raw_text, r#"{"type":"final","text":"hi"}"#);
        assert!(matches!(d.next(&good), Err(DriverError::TraceExhausted(1))));
    }

    #[test]
    fn unsealed_steps_are_sealed_with_observed_hashes() {
        let mut d = ReplayDriver::new(vec![TraceStep::new(ActionKind::Final { text: "x".into() })]);
        d.next(&ctx("a")).unwrap();
        assert_eq!(d.sealed()[0].context_hash.as_deref(), Some(ctx("a").hash().as_str()));
    }

    #[test]
    fn trace_round_trip() {
        let text = "{\"action\":{\"type\":\"tool_call\",\"name\":\"search_functions\",\"args\":{\"query\":\"fetch emails\",\"k\":5}}}\n";
        let steps = parse_trace(text).unwrap();
        assert_eq!(render_trace(&steps), text);
        assert!(matches!(parse_trace("{"), Err(DriverError::TraceFormat { line: 1, .. })));
    }

    #[test]
    fn completion_parsing() {
        let doc = json!({"choices":[{"message":{"content":"ok {\"type\":\"ask_user\",\"text\":\"sure?\"}"}}],
                         "usage":{"prompt_tokens":10,"completion_tokens":2}});
        let (a, _, u) = parse_completion(&doc).unwrap();
        assert_eq!(a, ActionKind::AskUser { text: "sure?".into() });
        assert_eq!(u.total(), 12);

        let doc = json!({"choices":[{"message":{"content":null,"tool_calls":[{"function":{"name":"load_functions","arguments":"{\"names\":[]}"}}]}}]});
        let (a, _, _) = parse_completion(&doc).unwrap();
        assert_eq!(a.tool_name(), Some("load_functions"));

        let doc = json!({"choices":[{"message":{"content":"all done"}}]});
        assert_eq!(parse_completion(&doc).unwrap().0, ActionKind::Final { text: "all done".into() });
    }
}
