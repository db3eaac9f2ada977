#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use codemem_cli::app::App;
use codemem_cli::config::Config;
use codemem_cli::server::{router, AppState};
use serde_json::Value;
use tempfile::TempDir;

pub const TOKEN: &str = "test-token-0123";

pub fn core_assets() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/assets")
}

pub fn trace(name: &str) -> PathBuf {
    core_assets().join("traces").join(name)
}

pub fn desk_task(task_id: &str) -> Value {
    let suite: Value =
        serde_json::from_str(&std::fs::read_to_string(core_assets().join("suites/desk.json")).unwrap()).unwrap();
    suite["tasks"]
        .as_array()
        .unwrap()
        .iter()
        .find(|t| t["task_id"] == task_id)
        .unwrap()
        .clone()
}

pub struct Server {
    pub base: String,
    pub dir: TempDir,
    pub state: Arc<AppState>,
}

impl Server {
    pub fn start() -> Self {
        Self::start_with(|_| {})
    }

    pub fn start_with(edit: impl FnOnce(&mut Config)) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut config = Config {
            data_dir: dir.path().to_path_buf(),
            api_token: Some(TOKEN.into()),
            ..Config::default()
        };
        edit(&mut config);
        let state = AppState::new(App::open(config).unwrap(), TOKEN.into());
        let app = router(state.clone());
        let (tx, rx) = std::sync::mpsc::channel();
        std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                tx.send(listener.local_addr().unwrap()).unwrap();
                axum::serve(listener, app).await.unwrap();
            });
        });
        let addr = rx.recv().unwrap();
        Self {
            base: format!("http://{addr}"),
            dir,
            state,
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    /// Sends a request with the right token; returns status and JSON body.
    pub fn call(&self, method: &str, path: &str, body: Option<&Value>) -> (u16, Value) {
        self.call_as(method, path, body, Some(TOKEN))
    }

    pub fn call_as(&self, method: &str, path: &str, body: Option<&Value>, token: Option<&str>) -> (u16, Value) {
        let mut request = ureq::request(method, &self.url(path));
        if let Some(token) = token {
            request = request.set("Authorization", &format!("Bearer {token}"));
        }
        let result = match body {
            Some(b) => request.send_json(b.clone()),
            None => request.call(),
        };
        let response = match result {
            Ok(r) => r,
            Err(ureq::Error::Status(_, r)) => r,
            Err(e) => panic!("{method} {path}: {e}"),
        };
        let status = response.status();
        let text = response.into_string().unwrap();
        let value = if text.is_empty() { Value::Null } else { serde_json::from_str(&text).unwrap_or(Value::String(text)) };
        (status, value)
    }

    pub fn ok(&self, method: &str, path: &str, body: Option<&Value>) -> Value {
        let (status, value) = self.call(method, path, body);
        assert!((200..300).contains(&status), "{method} {path} -> {status}: {value}");
        value
    }

    /// Opens the event stream, optionally resuming after `last_id`.
    pub fn events(&self, session_id: &str, last_id: Option<u64>) -> SseReader {
        let agent = ureq::AgentBuilder::new().timeout_read(Duration::from_secs(30)).build();
        let mut request = agent
            .get(&self.url(&format!("/sessions/{session_id}/events")))
            .set("Authorization", &format!("Bearer {TOKEN}"));
        if let Some(id) = last_id {
            request = request.set("Last-Event-ID", &id.to_string());
        }
        let response = request.call().unwrap();
        assert_eq!(response.status(), 200);
        assert!(response.header("content-type").unwrap().starts_with("text/event-stream"));
        SseReader {
            reader: BufReader::new(response.into_reader()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SseMessage {
    pub id: u64,
    pub event: String,
    pub data: Value,
}

pub struct SseReader {
    reader: BufReader<Box<dyn Read + Send + Sync + 'static>>,
}

impl SseReader {
    pub fn next(&mut self) -> SseMessage {
        let (mut id, mut event, mut data) = (None, None, String::new());
        loop {
            let mut line = String::new();
            let n = self.reader.read_line(&mut line).unwrap();
            assert!(n > 0, "stream closed");
            let line = line.trim_end_matches(['\r', '\n']);
            if line.is_empty() {
                if let (Some(id), Some(event)) = (id, event.clone()) {
                    return SseMessage {
                        id,
                        event,
                        data: serde_json::from_str(&data).unwrap(),
                    };
                }
                continue;
            }
            if line.starts_with(':') {
                continue;
            }
            let (field, value) = line.split_once(':').unwrap_or((line, ""));
            let value = value.strip_prefix(' ').unwrap_or(value);
            match field {
                "id" => id = Some(value.parse().unwrap()),
                "event" => event = Some(value.to_string()),
                "data" => data.push_str(value),
                _ => {}
            }
        }
    }

    pub fn take(&mut self, n: usize) -> Vec<SseMessage> {
        (0..n).map(|_| self.next()).collect()
    }
}
