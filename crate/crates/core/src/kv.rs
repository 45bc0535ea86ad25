//! Line-oriented `key=value` text used for HTTP bodies and checkpoint headers.
//!
//! A document is a sequence of records separated by blank lines. Within a value,
//! backslash, newline and carriage return are written as `\\`, `\n` and `\r`.

use crate::error::{Error, Result};

/// One record: ordered key/value pairs. Keys may repeat only across records.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Record {
    pub fields: Vec<(String, String)>,
}

impl Record {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.push(key, value);
        self
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.fields.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Parse(format!("missing key `{key}`")))
    }

    pub fn parse_field<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::Parse(format!("key `{key}`: cannot parse {raw:?}")))
    }
}

fn valid_key(k: &str) -> bool {
    !k.is_empty()
        && k
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.'))
}

fn escape(v: &str) -> String {
    let mut out = String::with_capacity(v.len());
    for ch in v.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(v: &str, line: usize) -> Result<String> {
    let mut out = String::with_capacity(v.len());
    let mut chars = v.chars();
    while let Some(ch) = chars.next() {
        if ch != '\\' {
            out.push(ch);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            other => {
                return Err(Error::Parse(format!("line {line}: bad escape \\{}", other.unwrap_or(' '))));
            }
        }
    }
    Ok(out)
}

pub fn encode(records: &[Record]) -> String {
    let mut out = String::new();
    for (i, r) in records.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for (k, v) in &r.fields {
            debug_assert!(valid_key(k), "invalid key {k:?}");
            out.push_str(k);
            out.push('=');
            out.push_str(&escape(v));
            out.push('\n');
        }
    }
    out
}

pub fn encode_one(record: &Record) -> String {
    encode(std::slice::from_ref(record))
}

/// Parses a document. Lines starting with `#` are comments.
pub fn decode(text: &str) -> Result<Vec<Record>> {
    let mut records = Vec::new();
    let mut current = Record::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            if !current.fields.is_empty() {
                records.push(std::mem::take(&mut current));
            }
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected key=value", n + 1)))?;
        let k = k.trim();
        if !valid_key(k) {
            return Err(Error::Parse(format!("line {}: invalid key {k:?}", n + 1)));
        }
        if current.get(k).is_some() {
            return Err(Error::Parse(format!("line {}: duplicate key `{k}`", n + 1)));
        }
        current.fields.push((k.to_string(), unescape(v, n + 1)?));
    }
    if !current.fields.is_empty() {
        records.push(current);
    }
    Ok(records)
}

/// Parses a document that must contain exactly one record.
pub fn decode_one(text: &str) -> Result<Record> {
    let mut records = decode(text)?;
    match records.len() {
        1 => Ok(records.remove(0)),
        n => Err(Error::Parse(format!("expected one record, found {n}"))),
    }
}
