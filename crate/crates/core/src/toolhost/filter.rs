//! The email filter grammar accepted by `outlook__list_emails`:
//!
//! ```text
//! filter    := conjunct ( "and" conjunct )*
//! conjunct  := "receivedDateTime" ">=" timestamp
//!            | "hasAttachments" "eq" ("true" | "false")
//! ```
//!
//! Timestamps are ISO-8601; values without an offset are read as UTC.

use chrono::{DateTime, NaiveDate, NaiveDateTime, Utc};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("filter parse error at `{token}`: {reason}")]
pub struct FilterParseError {
    pub token: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Predicate {
    ReceivedSince(DateTime<Utc>),
    HasAttachments(bool),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EmailFilter {
    pub predicates: Vec<Predicate>,
}

impl EmailFilter {
    pub fn matches(&self, received_at: DateTime<Utc>, has_attachments: bool) -> bool {
        self.predicates.iter().all(|p| match p {
            Predicate::ReceivedSince(cutoff) => received_at >= *cutoff,
            Predicate::HasAttachments(want) => has_attachments == *want,
        })
    }
}

fn err(token: &str, reason: &str) -> FilterParseError {
    FilterParseError {
        token: token.to_string(),
        reason: reason.to_string(),
    }
}

/// Splits on the keyword `and` surrounded by whitespace, case-insensitively.
fn split_conjuncts(text: &str) -> Vec<&str> {
    let lower = text.to_ascii_lowercase();
    let bytes = lower.as_bytes();
    let mut parts = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i + 3 <= bytes.len() {
        let before_ws = i > 0 && bytes[i - 1].is_ascii_whitespace();
        let after_ws = i + 3 < bytes.len() && bytes[i + 3].is_ascii_whitespace();
        if before_ws && after_ws && &lower[i..i + 3] == "and" {
            parts.push(&text[start..i]);
            start = i + 3;
            i += 3;
        } else {
            i += 1;
        }
    }
    parts.push(&text[start..]);
    parts
}

pub fn parse_timestamp(text: &str) -> Option<DateTime<Utc>> {
    let text = text.trim().trim_matches(|c| c == '\'' || c == '"');
    if let Ok(t) = DateTime::parse_from_rfc3339(text) {
        return Some(t.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%d %H:%M:%S%.f%:z", "%Y-%m-%d %H:%M:%S%.f%z"] {
        if let Ok(t) = DateTime::parse_from_str(text, fmt) {
            return Some(t.with_timezone(&Utc));
        }
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(text, fmt) {
            return Some(t.and_utc());
        }
    }
    NaiveDate::parse_from_str(text, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|t| t.and_utc())
}

pub fn parse_filter(text: &str) -> Result<EmailFilter, FilterParseError> {
    if text.trim().is_empty() {
        return Ok(EmailFilter::default());
    }
    let mut predicates = Vec::new();
    for conjunct in split_conjuncts(text) {
        let conjunct = conjunct.trim();
        let (field, rest) = conjunct
            .split_once(char::is_whitespace)
            .ok_or_else(|| err(conjunct, "expected `<field> <operator> <value>`"))?;
        let rest = rest.trim_start();
        let (op, value) = rest
            .split_once(char::is_whitespace)
            .map(|(o, v)| (o, v.trim()))
            .ok_or_else(|| err(rest, "expected an operator and a value"))?;
        match field {
            "receivedDateTime" => {
                if op != ">=" {
                    return Err(err(op, "receivedDateTime only supports `>=`"));
                }
                let at = parse_timestamp(value)
                    .ok_or_else(|| err(value, "not an ISO-8601 timestamp"))?;
                predicates.push(Predicate::ReceivedSince(at));
            }
            "hasAttachments" => {
                if op != "eq" {
                    return Err(err(op, "hasAttachments only supports `eq`"));
                }
                let want = match value {
                    "true" => true,
                    "false" => false,
                    other => return Err(err(other, "expected `true` or `false`")),
                };
                predicates.push(Predicate::HasAttachments(want));
            }
            other => return Err(err(other, "unsupported field")),
        }
    }
    Ok(EmailFilter { predicates })
}
