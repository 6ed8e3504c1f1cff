//! JSON-lines streams with a leading schema record.

use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const SCHEMA_KEY: &str = "schema";

/// First record of every file this crate writes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaHeader {
    pub schema: String,
    pub version: u32,
}

impl SchemaHeader {
    pub fn new(schema: &str, version: u32) -> Self {
        Self {
            schema: schema.to_string(),
            version,
        }
    }
}

/// One parsed line: 1-based line number and either the record or the reason
/// it could not be parsed.
#[derive(Debug)]
pub struct JsonlLine<T> {
    pub line: usize,
    pub record: Result<T, String>,
}

/// Write a header followed by one JSON document per record.
pub fn write_jsonl<T: Serialize>(w: &mut impl Write, header: &SchemaHeader, records: &[T]) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, header)?;
    w.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Parse a stream, skipping blank lines and a leading schema record.
/// Returns the header (if present) and per-line results; malformed lines do
/// not stop the stream.
pub fn read_jsonl<T: DeserializeOwned>(r: impl BufRead) -> std::io::Result<(Option<SchemaHeader>, Vec<JsonlLine<T>>)> {
    let mut header = None;
    let mut out = Vec::new();
    let mut first = true;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if first {
            first = false;
            if let Ok(v) = serde_json::from_str::<serde_json::Value>(&line) {
                if v.get(SCHEMA_KEY).is_some() {
                    if let Ok(h) = serde_json::from_value(v) {
                        header = Some(h);
                        continue;
                    }
                }
            }
        }
        out.push(JsonlLine {
            line: i + 1,
            record: serde_json::from_str(&line).map_err(|e| e.to_string()),
        });
    }
    Ok((header, out))
}
