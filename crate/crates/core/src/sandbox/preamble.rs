//! Generates the Python preamble prepended to every sandboxed script.
//!
//! The preamble carries a minimal bridge client, one async stub per loaded
//! tool, and the full source of every loaded skill. Output is a pure
//! function of the inputs.

use std::collections::BTreeMap;

use serde_json::Value;
use thiserror::Error;

use crate::registry::ToolSchema;
use crate::skillbank::Skill;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PreambleError {
    #[error("`{name}` is defined by both {first} and {second}")]
    NameCollision {
        name: String,
        first: String,
        second: String,
    },
}

/// Bootstrap shared by every preamble: bridge client, error type and helpers.
pub const BOOTSTRAP: &str = r#"# ---- codemem preamble ----
import asyncio as _cm_asyncio
import base64
import inspect as _cm_inspect
import json as _cm_json
import os as _cm_os
import socket as _cm_socket
import sys as _cm_sys
from datetime import datetime, timedelta, timezone


class ToolError(Exception):
    """Raised when the tool host answers a call with ok=false."""

    def __init__(self, kind, message):
        super().__init__(f"{kind}: {message}")
        self.kind = kind
        self.message = message


class _CodememBridge:
    def __init__(self):
        addr = _cm_os.environ.get("CODEMEM_BRIDGE_ADDR")
        token = _cm_os.environ.get("CODEMEM_BRIDGE_TOKEN")
        if not addr or not token:
            _cm_sys.stderr.write(
                "codemem: CODEMEM_BRIDGE_ADDR and CODEMEM_BRIDGE_TOKEN must be set\n")
            _cm_sys.exit(70)
        host, _, port = addr.rpartition(":")
        self._addr = (host, int(port))
        self._token = token
        self._sock = None
        self._reader = None
        self._next_id = 1

    def call(self, name, args):
        if self._sock is None:
            self._sock = _cm_socket.create_connection(self._addr)
            self._reader = self._sock.makefile("rb")
        request_id = self._next_id
        self._next_id += 1
        frame = {"id": request_id, "tool": name, "args": args, "token": self._token}
        line = _cm_json.dumps(frame, separators=(",", ":"), ensure_ascii=False)
        self._sock.sendall((line + "\n").encode("utf-8"))
        while True:
            line = self._reader.readline()
            if not line:
                raise ConnectionError("codemem bridge closed the connection")
            reply = _cm_json.loads(line)
            if reply.get("id") == request_id:
                break
        if reply.get("ok"):
            return reply.get("result")
        error = reply.get("error") or {}
        raise ToolError(error.get("kind", "error"), error.get("message", ""))


_cm_bridge = _CodememBridge()


def _cm_tool(name, params):
    def call(*args, **kwargs):
        if len(args) > len(params):
            raise TypeError(f"{name}() takes {len(params)} positional arguments")
        payload = dict(zip(params, args))
        for key, value in kwargs.items():
            if key in payload:
                raise TypeError(f"{name}() got multiple values for argument '{key}'")
            payload[key] = value
        return _cm_bridge.call(name, payload)

    async def stub(*args, **kwargs):
        return call(*args, **kwargs)

    stub.__name__ = name
    stub.sync = call
    globals()[name] = stub


def codemem_now():
    """Session clock: the fixture's notion of now when one is set."""
    raw = _cm_os.environ.get("CODEMEM_NOW")
    if raw:
        return datetime.fromisoformat(raw.replace("Z", "+00:00"))
    return datetime.now(timezone.utc)


def codemem_run(target, **kwargs):
    """Calls a sync or async function (or awaits a coroutine) to completion."""
    result = target(**kwargs) if callable(target) else target
    if _cm_inspect.iscoroutine(result):
        result = _cm_asyncio.run(result)
    return result
"#;

fn py_string(text: &str) -> String {
    // JSON string literals are valid Python string literals.
    Value::String(text.to_string()).to_string()
}

/// Builds the preamble for the given tools and skills.
pub fn generate_preamble(tools: &[ToolSchema], skills: &[&Skill]) -> Result<String, PreambleError> {
    let mut owners: BTreeMap<&str, String> = BTreeMap::new();
    for tool in tools {
        owners.insert(tool.name(), format!("tool `{}`", tool.name()));
    }
    for skill in skills {
        let owner = format!("skill `{}` v{}", skill.name, skill.version);
        if let Some(first) = owners.get(skill.entrypoint.as_str()) {
            return Err(PreambleError::NameCollision {
                name: skill.entrypoint.clone(),
                first: first.clone(),
                second: owner,
            });
        }
        owners.insert(&skill.entrypoint, owner);
    }

    let mut out = String::from(BOOTSTRAP);
    if !tools.is_empty() {
        out.push_str("\n# ---- tools ----\n");
    }
    for tool in tools {
        let params: Vec<String> = tool.parameter_names().iter().map(|p| py_string(p)).collect();
        out.push_str(&format!(
            "_cm_tool({}, [{}])\n",
            py_string(tool.name()),
            params.join(", ")
        ));
    }
    for skill in skills {
        out.push_str(&format!(
            "\n# ---- skill {} v{} ({}) ----\n",
            skill.name, skill.version, skill.content_hash
        ));
        out.push_str(&skill.source);
        if !skill.source.ends_with('\n') {
            out.push('\n');
        }
    }
    Ok(out)
}

/// Driver-free call of a skill entrypoint with JSON arguments; a non-`None`
/// return value is printed as JSON.
pub fn skill_call_stub(entrypoint: &str, arguments: &Value) -> String {
    format!(
        "\n# ---- skill call ----\n_cm_result = codemem_run({entrypoint}, **_cm_json.loads({}))\nif _cm_result is not None:\n    print(_cm_json.dumps(_cm_result, default=str))\n",
        py_string(&arguments.to_string())
    )
}
