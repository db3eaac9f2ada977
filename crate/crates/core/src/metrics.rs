//! Context-cost and phase-timing accounting over recorded trajectories.
//!
//! Two cost models are computed from the same trajectory. `react` prices
//! the session as if every tool call, including each bridge invocation made
//! from inside a script, had been a separate model turn that re-reads the
//! whole history. `codemem` prices only what the model actually saw.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::orchestrator::driver::ActionKind;
use crate::orchestrator::trajectory::{EventKind, Trajectory};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("trajectory has no user messages, actions or executions")]
    EmptyTrajectory,
}

/// `ceil(chars / 4)`.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    React,
    Codemem,
}

impl FromStr for CostMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "react" => Ok(CostMode::React),
            "codemem" => Ok(CostMode::Codemem),
            other => Err(format!("unknown cost mode `{other}` (react|codemem)")),
        }
    }
}

impl fmt::Display for CostMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CostMode::React => "react",
            CostMode::Codemem => "codemem",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextCost {
    pub mode: CostMode,
    pub s_prompt: u64,
    /// History re-read at each step (react only).
    pub s_history: Vec<u64>,
    /// Tool output returned at each step (react only).
    pub s_tool_outputs: Vec<u64>,
    pub s_code_block: u64,
    pub s_final_result: u64,
    pub n_steps: u64,
    pub total: u64,
}

/// One model turn in the react pricing: what it emitted and what came back.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReactStep {
    pub action: String,
    pub output: String,
}

/// `total = sum_i (s_prompt + history_i + output_i)`, where `history_i`
/// is everything emitted and returned before step `i`.
pub fn react_cost(s_prompt: u64, steps: &[ReactStep], tokens: &dyn Fn(&str) -> u64) -> ContextCost {
    let mut history = 0u64;
    let mut s_history = Vec::with_capacity(steps.len());
    let mut s_tool_outputs = Vec::with_capacity(steps.len());
    let mut total = 0u64;
    for step in steps {
        let output = tokens(&step.output);
        total += s_prompt + history + output;
        s_history.push(history);
        s_tool_outputs.push(output);
        history += tokens(&step.action) + output;
    }
    ContextCost {
        mode: CostMode::React,
        s_prompt,
        s_history,
        s_tool_outputs,
        s_code_block: 0,
        s_final_result: 0,
        n_steps: steps.len() as u64,
        total,
    }
}

/// The trajectory re-expressed as one-tool-per-turn steps.
pub fn react_steps(trajectory: &Trajectory) -> Vec<ReactStep> {
    let mut steps: Vec<ReactStep> = Vec::new();
    let mut awaiting_output = false;
    for event in &trajectory.events {
        match &event.kind {
            EventKind::AssistantAction { action, raw_text, .. } => {
                awaiting_output = false;
                let runs_code = matches!(
                    action,
                    ActionKind::ToolCall { name, .. } if name == "execute_code" || name == "run_skill"
                );
                if !runs_code {
                    steps.push(ReactStep {
                        action: raw_text.clone(),
                        output: String::new(),
                    });
                    awaiting_output = matches!(action, ActionKind::ToolCall { .. });
                }
            }
            EventKind::ToolResult { visible, .. } if awaiting_output => {
                if let Some(last) = steps.last_mut() {
                    last.output = visible.clone();
                }
                awaiting_output = false;
            }
            EventKind::Invocation { record } => {
                let output = match &record.outcome {
                    crate::toolhost::Outcome::Ok { result } => result.to_string(),
                    crate::toolhost::Outcome::Error { kind, message } => {
                        json!({"error": {"kind": kind, "message": message}}).to_string()
                    }
                };
                steps.push(ReactStep {
                    action: json!({"type": "tool_call", "name": record.tool, "args": record.args}).to_string(),
                    output,
                });
            }
            _ => {}
        }
    }
    steps
}

fn check_nonempty(trajectory: &Trajectory) -> Result<(), MetricsError> {
    let has_content = trajectory.events.iter().any(|e| {
        matches!(
            e.kind,
            EventKind::UserMessage { .. } | EventKind::AssistantAction { .. } | EventKind::ExecutionResult { .. }
        )
    });
    if has_content {
        Ok(())
    } else {
        Err(MetricsError::EmptyTrajectory)
    }
}

fn prompt_tokens(trajectory: &Trajectory, system_prompt: &str, tokens: &dyn Fn(&str) -> u64) -> u64 {
    tokens(system_prompt)
        + trajectory
            .events
            .iter()
            .map(|e| match &e.kind {
                EventKind::UserMessage { text } => tokens(text),
                _ => 0,
            })
            .sum::<u64>()
}

pub fn context_cost(
    trajectory: &Trajectory,
    mode: CostMode,
    system_prompt: &str,
) -> Result<ContextCost, MetricsError> {
    context_cost_with(trajectory, mode, system_prompt, &estimate_tokens)
}

/// [`context_cost`] with a caller-supplied tokenizer.
pub fn context_cost_with(
    trajectory: &Trajectory,
    mode: CostMode,
    system_prompt: &str,
    tokens: &dyn Fn(&str) -> u64,
) -> Result<ContextCost, MetricsError> {
    check_nonempty(trajectory)?;
    let s_prompt = prompt_tokens(trajectory, system_prompt, tokens);
    match mode {
        CostMode::React => Ok(react_cost(s_prompt, &react_steps(trajectory), tokens)),
        CostMode::Codemem => {
            let mut s_code_block = 0;
            let mut s_final_result = 0;
            let mut n_steps = 0;
            for event in &trajectory.events {
                match &event.kind {
                    EventKind::AssistantAction { raw_text, .. } => {
                        s_code_block += tokens(raw_text);
                        n_steps += 1;
                    }
                    EventKind::ToolResult { visible, .. } | EventKind::ExecutionResult { visible, .. } => {
                        s_final_result += tokens(visible)
                    }
                    EventKind::StateRecovery { note, .. } => s_final_result += tokens(note),
                    _ => {}
                }
            }
            Ok(ContextCost {
                mode,
                s_prompt,
                s_history: Vec::new(),
                s_tool_outputs: Vec::new(),
                s_code_block,
                s_final_result,
                n_steps,
                total: s_prompt + s_code_block + s_final_result,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub t_plan: f64,
    pub t_write_code: f64,
    pub t_debug: f64,
    pub t_execute: f64,
    pub t_task: f64,
}

/// Splits session time into phases.
///
/// Executions count toward `t_execute`. A driver call made after a failed
/// execution and before the next one is debugging; a call that requests an
/// execution (or one made after the first execution) is code writing; the
/// remaining calls, before any execution, are planning.
pub fn phase_timings(trajectory: &Trajectory) -> Result<PhaseTimings, MetricsError> {
    check_nonempty(trajectory)?;
    let (mut plan, mut write, mut debug, mut execute) = (0.0, 0.0, 0.0, 0.0);
    let mut executed = false;
    let mut last_failed = false;
    for event in &trajectory.events {
        match &event.kind {
            EventKind::AssistantAction { action, duration_s, .. } => {
                let runs_code = matches!(
                    action,
                    ActionKind::ToolCall { name, .. } if name == "execute_code" || name == "run_skill"
                );
                if last_failed {
                    debug += duration_s;
                } else if runs_code || executed {
                    write += duration_s;
                } else {
                    plan += duration_s;
                }
            }
            EventKind::ExecutionResult { result, .. } => {
                execute += result.wall_time;
                executed = true;
                last_failed = !result.exit_status.is_success();
            }
            EventKind::ToolResult { tool, ok: false, .. } if tool == "execute_code" || tool == "run_skill" => {
                executed = true;
                last_failed = true;
            }
            _ => {}
        }
    }
    Ok(PhaseTimings {
        t_plan: plan,
        t_write_code: write,
        t_debug: debug,
        t_execute: execute,
        t_task: plan + write + debug + execute,
    })
}
