//! Plain-text `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Keys are dotted, with the first
//! segment naming the section (`data.`, `model.`, `train.`) when several
//! configs share one file.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KvEntry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvFile {
    pub origin: String,
    pub entries: Vec<KvEntry>,
}

impl KvFile {
    pub fn parse(text: &str, origin: &str) -> Result<KvFile> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::parse(
                    origin,
                    i + 1,
                    format!("expected 'key = value', got '{line}'"),
                )
            })?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::parse(origin, i + 1, "empty key"));
            }
            if entries.iter().any(|e: &KvEntry| e.key == key) {
                return Err(Error::parse(
                    origin,
                    i + 1,
                    format!("duplicate key '{key}'"),
                ));
            }
            entries.push(KvEntry {
                key: key.to_string(),
                value: v.trim().to_string(),
                line: i + 1,
            });
        }
        Ok(KvFile {
            origin: origin.to_string(),
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<KvFile> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        KvFile::parse(&text, &path.display().to_string())
    }

    /// Entries under `section.`, with the prefix stripped.
    pub fn section(&self, section: &str) -> Vec<KvEntry> {
        let prefix = format!("{section}.");
        self.entries
            .iter()
            .filter_map(|e| {
                e.key.strip_prefix(&prefix).map(|k| KvEntry {
                    key: k.to_string(),
                    value: e.value.clone(),
                    line: e.line,
                })
            })
            .collect()
    }

    /// Rejects keys outside the given sections.
    pub fn check_sections(&self, sections: &[&str]) -> Result<()> {
        for e in &self.entries {
            let head = e.key.split('.').next().unwrap_or("");
            if !sections.contains(&head) || !e.key.contains('.') {
                return Err(Error::parse(
                    &self.origin,
                    e.line,
                    format!("key '{}' is not under any of {sections:?}", e.key),
                ));
            }
        }
        Ok(())
    }
}

/// Parses a value, reporting the key and line on failure.
pub fn parse_value<V: FromStr>(e: &KvEntry, origin: &str) -> Result<V>
where
    V::Err: Display,
{
    e.value
        .parse()
        .map_err(|err| Error::parse(origin, e.line, format!("{}: '{}': {err}", e.key, e.value)))
}

pub fn parse_bool(e: &KvEntry, origin: &str) -> Result<bool> {
    match e.value.as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        v => Err(Error::parse(
            origin,
            e.line,
            format!("{}: expected a boolean, got '{v}'", e.key),
        )),
    }
}

pub fn unknown_key(e: &KvEntry, origin: &str) -> Error {
    Error::parse(origin, e.line, format!("unknown key '{}'", e.key))
}
