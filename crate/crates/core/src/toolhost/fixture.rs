//! Mock Outlook/OneDrive environment used by the fixture bindings.

use std::collections::BTreeMap;
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use chrono::{DateTime, Datelike, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::filter::parse_filter;
use super::ToolError;

/// Marker embedded in every generated attachment payload. Its presence in
/// LLM-visible text means a raw payload leaked into context.
pub const PAYLOAD_SENTINEL: &str = "CODEMEM-PAYLOAD-SENTINEL";

/// Default generated attachment size in bytes.
pub const DEFAULT_PAYLOAD_BYTES: usize = 1024;

/// Literal company name that must be resolved from attachment metadata.
pub const CODEWORD: &str = "codeword";

mod base64_bytes {
    use super::BASE64;
    use base64::Engine as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&BASE64.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        BASE64.decode(text).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureAttachment {
    pub filename: String,
    pub content_type: String,
    /// Declared company, or the literal `codeword`.
    pub company: String,
    /// Carries `real_company` exactly when `company` is `codeword`.
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    #[serde(rename = "content_base64", with = "base64_bytes")]
    pub content: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureEmail {
    pub id: String,
    pub from_address: String,
    pub received_at: DateTime<Utc>,
    pub subject: String,
    pub has_attachments: bool,
    #[serde(default)]
    pub attachments: Vec<FixtureAttachment>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    /// Clock exposed to sandboxed scripts so date arithmetic is reproducible.
    pub now: DateTime<Utc>,
    pub emails: Vec<FixtureEmail>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, String> {
        let scenario: Scenario = serde_json::from_str(text).map_err(|e| e.to_string())?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<(), String> {
        let mut ids = std::collections::HashSet::new();
        for e in &self.emails {
            if !ids.insert(e.id.as_str()) {
                return Err(format!("duplicate email id `{}`", e.id));
            }
            if e.has_attachments == e.attachments.is_empty() {
                return Err(format!(
                    "email `{}`: has_attachments disagrees with its attachment list",
                    e.id
                ));
            }
            for a in &e.attachments {
                let has_real = a.metadata.contains_key("real_company");
                if (a.company == CODEWORD) != has_real {
                    return Err(format!(
                        "email `{}`: `real_company` metadata must be present exactly for codeword attachments",
                        e.id
                    ));
                }
            }
        }
        Ok(())
    }

    /// The seven-email Outlook/OneDrive case study with 1 KiB payloads.
    pub fn case_study() -> Self {
        Self::case_study_with_payload(DEFAULT_PAYLOAD_BYTES)
    }

    /// The case study with every attachment payload padded to `bytes`.
    ///
    /// | id | sender          | attachments              | company   |
    /// |----|-----------------|--------------------------|-----------|
    /// | e1 | external        | PDF                      | Acme      |
    /// | e2 | `@agentr.dev`   | PDF                      | AgentR    |
    /// | e3 | external        | XLSX                     | codeword (Globex) |
    /// | e4 | external        | PDF + XLSX               | Initech   |
    /// | e5 | `@agentr.dev`   | none                     |           |
    /// | e6 | external        | PDF                      | Umbrella  |
    /// | e7 | external        | DOCX                     | Hooli     |
    ///
    /// A correct run excludes e2, e5 and e7 and uploads one file for each of
    /// e1, e3, e4 and e6.
    pub fn case_study_with_payload(bytes: usize) -> Self {
        let at = |d: u32, h: u32, m: u32| Utc.with_ymd_and_hms(2025, 12, d, h, m, 0).unwrap();
        let att = |email: &str, filename: &str, company: &str| {
            let content_type = match filename.rsplit('.').next() {
                Some("pdf") => "application/pdf",
                Some("xlsx") => {
                    "application/vnd.openxmlformats-officedocument.spreadsheetml.sheet"
                }
                Some("docx") => {
                    "application/vnd.openxmlformats-officedocument.wordprocessingml.document"
                }
                _ => "application/octet-stream",
            };
            let mut metadata = BTreeMap::new();
            if company == CODEWORD {
                metadata.insert("real_company".to_string(), "Globex".to_string());
            }
            FixtureAttachment {
                filename: filename.into(),
                content_type: content_type.into(),
                company: company.into(),
                metadata,
                content: payload(email, filename, bytes),
            }
        };
        let email = |id: &str, from: &str, received_at, subject: &str, attachments: Vec<_>| {
            FixtureEmail {
                id: id.into(),
                from_address: from.into(),
                received_at,
                subject: subject.into(),
                has_attachments: !Vec::is_empty(&attachments),
                attachments,
            }
        };
        Scenario {
            name: "case_study".into(),
            now: at(20, 12, 0),
            emails: vec![
                email("e1", "billing@acme.example", at(18, 9, 15), "December invoice",
                    vec![att("e1", "acme_invoice.pdf", "Acme")]),
                email("e2", "finance@agentr.dev", at(17, 16, 40), "Internal expense report",
                    vec![att("e2", "expenses_q4.pdf", "AgentR")]),
                email("e3", "reports@partner.example", at(16, 11, 5), "Quarterly figures",
                    vec![att("e3", "figures_q4.xlsx", CODEWORD)]),
                email("e4", "accounts@initech.example", at(14, 8, 30), "Contract and pricing",
                    vec![att("e4", "contract.pdf", "Initech"), att("e4", "pricing.xlsx", "Initech")]),
                email("e5", "team@agentr.dev", at(12, 10, 0), "Standup notes", vec![]),
                email("e6", "orders@umbrella.example", at(10, 14, 20), "Purchase order 1182",
                    vec![att("e6", "po_1182.pdf", "Umbrella")]),
                email("e7", "people@hooli.example", at(8, 9, 0), "Offer letter draft",
                    vec![att("e7", "offer_letter.docx", "Hooli")]),
            ],
        }
    }

    pub fn email(&self, id: &str) -> Option<&FixtureEmail> {
        self.emails.iter().find(|e| e.id == id)
    }

    /// Which email an uploaded blob came from, by exact content match.
    pub fn source_of(&self, content: &[u8]) -> Option<(&FixtureEmail, &FixtureAttachment)> {
        self.emails.iter().find_map(|e| {
            e.attachments
                .iter()
                .find(|a| a.content == content)
                .map(|a| (e, a))
        })
    }
}

/// Deterministic payload: a format-ish header, the sentinel, then filler.
pub fn payload(email_id: &str, filename: &str, bytes: usize) -> Vec<u8> {
    let header = match filename.rsplit('.').next() {
        Some("pdf") => "%PDF-1.7\n",
        _ => "PK\u{3}\u{4}",
    };
    let mut out = format!("{header}{PAYLOAD_SENTINEL}:{email_id}:{filename}\n").into_bytes();
    let filler = b"0123456789abcdefghijklmnopqrstuvwxyz";
    let mut i = 0;
    while out.len() < bytes {
        out.push(filler[i % filler.len()]);
        i += 1;
    }
    out
}

/// Per-session mutable fixture state.
#[derive(Debug, Clone)]
pub struct FixtureState {
    pub scenario: Arc<Scenario>,
    pub drive: BTreeMap<String, Vec<u8>>,
}

impl FixtureState {
    pub fn new(scenario: Arc<Scenario>) -> Self {
        Self {
            scenario,
            drive: BTreeMap::new(),
        }
    }

    pub fn reset(&mut self) {
        self.drive.clear();
    }

    pub fn month_name(&self) -> &'static str {
        const MONTHS: [&str; 12] = [
            "January", "February", "March", "April", "May", "June", "July", "August",
            "September", "October", "November", "December",
        ];
        MONTHS[self.scenario.now.month0() as usize]
    }

    /// Dispatches one of the built-in fixture handlers.
    pub fn handle(&mut self, handler: &str, args: &Value) -> Result<Value, ToolError> {
        match handler {
            "outlook.list_emails" => self.list_emails(args),
            "outlook.get_attachment" => self.get_attachment(args),
            "onedrive.upload_file" => self.upload_file(args),
            "onedrive.list_files" => self.list_files(args),
            other => Err(ToolError::binding("unknown_handler", format!("no fixture handler `{other}`"))),
        }
    }

    pub fn list_emails(&self, args: &Value) -> Result<Value, ToolError> {
        let filter_text = optional_str(args, "filter")?.unwrap_or("");
        let filter = parse_filter(filter_text)
            .map_err(|e| ToolError::binding("filter_parse_error", e.to_string()))?;
        let mut hits: Vec<&FixtureEmail> = self
            .scenario
            .emails
            .iter()
            .filter(|e| filter.matches(e.received_at, e.has_attachments))
            .collect();
        hits.sort_by(|a, b| b.received_at.cmp(&a.received_at).then(a.id.cmp(&b.id)));
        Ok(Value::Array(
            hits.into_iter()
                .map(|e| {
                    let attachments: Vec<Value> = e
                        .attachments
                        .iter()
                        .enumerate()
                        .map(|(i, a)| {
                            json!({"index": i, "filename": a.filename,
                                   "content_type": a.content_type, "size": a.content.len()})
                        })
                        .collect();
                    json!({
                        "id": e.id,
                        "from": e.from_address,
                        "received_at": e.received_at.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
                        "subject": e.subject,
                        "has_attachments": e.has_attachments,
                        "attachments": attachments,
                    })
                })
                .collect(),
        ))
    }

    pub fn get_attachment(&self, args: &Value) -> Result<Value, ToolError> {
        let id = required_str(args, "email_id")?;
        let index = match args.get("index") {
            None | Some(Value::Null) => 0,
            Some(v) => v
                .as_u64()
                .ok_or_else(|| ToolError::bad_args("`index` must be a nonnegative integer"))?
                as usize,
        };
        let email = self
            .scenario
            .email(id)
            .ok_or_else(|| ToolError::binding("unknown_email", format!("no email `{id}`")))?;
        if email.attachments.is_empty() {
            return Err(ToolError::binding("no_attachment", format!("email `{id}` has no attachments")));
        }
        let a = email.attachments.get(index).ok_or_else(|| {
            ToolError::binding("no_attachment", format!("email `{id}` has no attachment {index}"))
        })?;
        Ok(json!({
            "email_id": id,
            "index": index,
            "filename": a.filename,
            "content_type": a.content_type,
            "company": a.company,
            "metadata": a.metadata,
            "size": a.content.len(),
            "content": BASE64.encode(&a.content),
        }))
    }

    pub fn upload_file(&mut self, args: &Value) -> Result<Value, ToolError> {
        let path = required_str(args, "path")?;
        if path.is_empty() || path.ends_with('/') || path.split('/').any(str::is_empty) {
            return Err(ToolError::bad_args(format!(
                "`path` must be a nonempty `/`-separated file path, got {path:?}"
            )));
        }
        let content = required_str(args, "content")?;
        let bytes = match optional_str(args, "encoding")?.unwrap_or("base64") {
            "base64" => BASE64
                .decode(content)
                .map_err(|e| ToolError::bad_args(format!("`content` is not base64: {e}")))?,
            "utf8" | "utf-8" | "text" => content.as_bytes().to_vec(),
            other => return Err(ToolError::bad_args(format!("unknown encoding `{other}`"))),
        };
        let written = bytes.len();
        self.drive.insert(path.to_string(), bytes);
        Ok(json!({"path": path, "bytes_written": written}))
    }

    pub fn list_files(&self, args: &Value) -> Result<Value, ToolError> {
        let prefix = optional_str(args, "prefix")?.unwrap_or("");
        Ok(Value::Array(
            self.drive
                .iter()
                .filter(|(p, _)| p.starts_with(prefix))
                .map(|(p, b)| json!({"path": p, "size": b.len()}))
                .collect(),
        ))
    }
}

fn required_str<'a>(args: &'a Value, key: &str) -> Result<&'a str, ToolError> {
    optional_str(args, key)?.ok_or_else(|| ToolError::bad_args(format!("missing `{key}`")))
}

fn optional_str<'a>(args: &'a Value, key: &str) -> Result<Option<&'a str>, ToolError> {
    match args.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(_) => Err(ToolError::bad_args(format!("`{key}` must be a string"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state() -> FixtureState {
        FixtureState::new(Arc::new(Scenario::case_study()))
    }

    #[test]
    fn case_study_contract() {
        let s = Scenario::case_study();
        s.validate().unwrap();
        assert_eq!(s.emails.len(), 7);
        let internal = s.emails.iter().filter(|e| e.from_address.ends_with("@agentr.dev"));
        assert_eq!(internal.count(), 2);
        let qualifying = |e: &&FixtureEmail| {
            e.attachments
                .iter()
                .any(|a| a.filename.ends_with(".pdf") || a.filename.ends_with(".xlsx"))
        };
        assert_eq!(s.emails.iter().filter(|e| !qualifying(e)).count(), 2);
        let attachment_free: Vec<_> = s.emails.iter().filter(|e| !e.has_attachments).collect();
        assert_eq!(attachment_free.len(), 1);
    }

    #[test]
    fn has_attachments_filter_brute_force() {
        let st = state();
        let got = st.list_emails(&json!({"filter": "hasAttachments eq true"})).unwrap();
        let expected: Vec<&str> = {
            let mut v: Vec<_> = st.scenario.emails.iter().filter(|e| !e.attachments.is_empty()).collect();
            v.sort_by(|a, b| b.received_at.cmp(&a.received_at));
            v.into_iter().map(|e| e.id.as_str()).collect()
        };
        let ids: Vec<&str> = got.as_array().unwrap().iter().map(|e| e["id"].as_str().unwrap()).collect();
        assert_eq!(ids.len(), 6);
        assert_eq!(ids, expected);
        assert!(got[0].get("content").is_none());
    }

    #[test]
    fn late_cutoff_is_empty_and_bad_field_errors() {
        let st = state();
        let got = st.list_emails(&json!({"filter": "receivedDateTime >= 2026-01-01T00:00:00Z"})).unwrap();
        assert_eq!(got, json!([]));
        let err = st.list_emails(&json!({"filter": "subject eq x"})).unwrap_err();
        assert_eq!(err.kind(), "filter_parse_error");
        assert!(err.to_string().contains("subject"));
    }

    #[test]
    fn attachments() {
        let st = state();
        let got = st.get_attachment(&json!({"email_id": "e1"})).unwrap();
        let bytes = BASE64.decode(got["content"].as_str().unwrap()).unwrap();
        assert_eq!(bytes.len(), st.scenario.email("e1").unwrap().attachments[0].content.len());
        assert_eq!(st.get_attachment(&json!({"email_id": "e5"})).unwrap_err().kind(), "no_attachment");
        assert_eq!(st.get_attachment(&json!({"email_id": "e99"})).unwrap_err().kind(), "unknown_email");
        let codeword = st.get_attachment(&json!({"email_id": "e3"})).unwrap();
        assert_eq!(codeword["company"], CODEWORD);
        assert_eq!(codeword["metadata"]["real_company"], "Globex");
        let second = st.get_attachment(&json!({"email_id": "e4", "index": 1})).unwrap();
        assert_eq!(second["filename"], "pricing.xlsx");
    }

    #[test]
    fn uploads() {
        let mut st = state();
        let ten = BASE64.encode(b"0123456789");
        let got = st
            .upload_file(&json!({"path": "Email Attachments December/Acme/a.pdf", "content": ten}))
            .unwrap();
        assert_eq!(got["bytes_written"], 10);
        st.upload_file(&json!({"path": "Email Attachments December/Acme/a.pdf", "content": "abc", "encoding": "utf8"}))
            .unwrap();
        assert_eq!(st.drive.len(), 1);
        assert_eq!(st.drive["Email Attachments December/Acme/a.pdf"], b"abc");
        for bad in ["", "folder/", "a//b"] {
            let err = st.upload_file(&json!({"path": bad, "content": ten})).unwrap_err();
            assert_eq!(err.kind(), "bad_args", "{bad}");
        }
    }

    #[test]
    fn payload_size_and_sentinel() {
        let big = Scenario::case_study_with_payload(1 << 20);
        let a = &big.email("e1").unwrap().attachments[0];
        assert_eq!(a.content.len(), 1 << 20);
        assert!(String::from_utf8_lossy(&a.content).contains(PAYLOAD_SENTINEL));
        assert_eq!(big.source_of(&a.content).unwrap().0.id, "e1");
    }

    #[test]
    fn scenario_json_validation() {
        let mut s = Scenario::case_study();
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(Scenario::from_json(&text).unwrap(), s);
        s.emails[0].has_attachments = false;
        assert!(Scenario::from_json(&serde_json::to_string(&s).unwrap()).is_err());
    }
}
