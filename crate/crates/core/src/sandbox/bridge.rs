//! Loopback bridge between a sandboxed script and the tool host.
//!
//! Frames are UTF-8 JSON, one per line:
//!
//! ```text
//! -> {"id": n, "tool": name, "args": {...}, "token": t}
//! <- {"id": n, "ok": true, "result": ...}
//! <- {"id": n, "ok": false, "error": {"kind": k, "message": m}}
//! ```
//!
//! A frame with a missing or wrong token trips the execution's auth flag;
//! from then on every frame is refused and nothing is recorded.

use std::collections::HashSet;
use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use rand::RngCore;
use serde_json::{json, Value};

use crate::toolhost::{Dispatcher, ToolError};

/// 128 random bits, hex encoded.
pub fn generate_token() -> String {
    let mut bytes = [0u8; 16];
    rand::thread_rng().fill_bytes(&mut bytes);
    hex::encode(bytes)
}

fn tokens_match(expected: &str, given: &str) -> bool {
    let (a, b) = (expected.as_bytes(), given.as_bytes());
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

fn error_frame(id: &Value, kind: &str, message: &str) -> Value {
    json!({"id": id, "ok": false, "error": {"kind": kind, "message": message}})
}

struct Shared {
    token: String,
    max_calls: usize,
    dispatcher: Arc<dyn Dispatcher>,
    seen_ids: Mutex<HashSet<String>>,
    calls: AtomicUsize,
    auth_failed: AtomicBool,
    shutdown: AtomicBool,
}

impl Shared {
    /// Answers one request line.
    fn handle(&self, line: &str) -> Value {
        let frame: Value = match serde_json::from_str(line) {
            Ok(Value::Object(map)) => Value::Object(map),
            Ok(_) => return error_frame(&Value::Null, "bad_frame", "frame must be a JSON object"),
            Err(e) => return error_frame(&Value::Null, "bad_frame", &e.to_string()),
        };
        let id = frame.get("id").cloned().unwrap_or(Value::Null);
        if !(id.is_u64() || id.is_i64()) {
            return error_frame(&Value::Null, "bad_frame", "`id` must be an integer");
        }
        let token_ok = frame
            .get("token")
            .and_then(Value::as_str)
            .is_some_and(|t| tokens_match(&self.token, t));
        if !token_ok {
            self.auth_failed.store(true, Ordering::SeqCst);
        }
        if self.auth_failed.load(Ordering::SeqCst) {
            return error_frame(&id, "auth_failed", "bridge token mismatch; execution terminated");
        }
        let Some(tool) = frame.get("tool").and_then(Value::as_str) else {
            return error_frame(&id, "bad_frame", "`tool` must be a string");
        };
        let args = frame.get("args").cloned().unwrap_or_else(|| json!({}));

        let refuse = |error: ToolError| {
            self.dispatcher.reject(tool, args.clone(), &error);
            error_frame(&id, error.kind(), &error.message())
        };
        if !args.is_object() {
            return refuse(ToolError::bad_args("`args` must be a JSON object"));
        }
        if !self
            .seen_ids
            .lock()
            .expect("bridge lock poisoned")
            .insert(id.to_string())
        {
            return refuse(ToolError::binding("duplicate_id", format!("id {id} already used")));
        }
        if self.calls.fetch_add(1, Ordering::SeqCst) >= self.max_calls {
            return refuse(ToolError::binding(
                "limit_exceeded",
                format!("more than {} bridge calls", self.max_calls),
            ));
        }
        match self.dispatcher.dispatch(tool, args.clone()) {
            Ok(result) => json!({"id": id, "ok": true, "result": result}),
            Err(e) => error_frame(&id, e.kind(), &e.message()),
        }
    }

    fn serve_connection(&self, stream: TcpStream) -> io::Result<()> {
        let mut writer = stream.try_clone()?;
        for line in BufReader::new(stream).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let reply = self.handle(&line);
            writer.write_all(format!("{reply}\n").as_bytes())?;
            writer.flush()?;
        }
        Ok(())
    }
}

/// A running bridge listener bound to an ephemeral loopback port.
pub struct BridgeServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    accept: Option<JoinHandle<()>>,
}

impl BridgeServer {
    pub fn start(token: String, max_calls: usize, dispatcher: Arc<dyn Dispatcher>) -> io::Result<Self> {
        let listener = TcpListener::bind(("127.0.0.1", 0))?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            token,
            max_calls,
            dispatcher,
            seen_ids: Mutex::new(HashSet::new()),
            calls: AtomicUsize::new(0),
            auth_failed: AtomicBool::new(false),
            shutdown: AtomicBool::new(false),
        });
        let accept_shared = shared.clone();
        let accept = thread::Builder::new()
            .name("codemem-bridge".into())
            .spawn(move || {
                for stream in listener.incoming() {
                    if accept_shared.shutdown.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let conn_shared = accept_shared.clone();
                    thread::spawn(move || {
                        if let Err(e) = conn_shared.serve_connection(stream) {
                            tracing::debug!("bridge connection closed: {e}");
                        }
                    });
                }
            })?;
        Ok(Self {
            addr,
            shared,
            accept: Some(accept),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn auth_failed(&self) -> bool {
        self.shared.auth_failed.load(Ordering::SeqCst)
    }

    /// Answers a frame without going through a socket.
    pub fn handle_line(&self, line: &str) -> Value {
        self.shared.handle(line)
    }
}

impl Drop for BridgeServer {
    fn drop(&mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        // wake the blocking accept
        let _ = TcpStream::connect(self.addr);
        if let Some(handle) = self.accept.take() {
            let _ = handle.join();
        }
    }
}
