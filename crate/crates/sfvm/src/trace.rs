//! JSON-lines traces.

use std::path::Path;

use sfvm_core::sim::{validate, TraceEvent};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TraceFileError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
}

/// Parses and validates a trace. Blank lines are skipped; errors carry the
/// 1-based line number.
pub fn parse_trace(text: &str) -> Result<Vec<TraceEvent>, TraceFileError> {
    let mut events = Vec::new();
    let mut lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let ev: TraceEvent = serde_json::from_str(raw).map_err(|e| TraceFileError::Line {
            line: i + 1,
            message: e.to_string(),
        })?;
        events.push(ev);
        lines.push(i + 1);
    }
    validate(&events).map_err(|e| TraceFileError::Line {
        line: lines.get(e.line.saturating_sub(1)).copied().unwrap_or(e.line),
        message: e.message,
    })?;
    Ok(events)
}

pub fn load_trace(path: &Path) -> Result<Vec<TraceEvent>, TraceFileError> {
    let text = std::fs::read_to_string(path).map_err(|source| TraceFileError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_trace(&text)
}

pub fn to_jsonl(events: &[TraceEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("events serialize"));
        out.push('\n');
    }
    out
}
