//! Plain-text `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys must be unique
//! and every key must be consumed by the reader; leftovers are reported as
//! unknown keys.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{MagicError, Result};

#[derive(Debug, Default)]
pub struct KvFile {
    entries: BTreeMap<String, String>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .or_else(|| line.split_once(':'))
                .ok_or_else(|| {
                    MagicError::config(format!("line {}: expected key = value", lineno + 1))
                })?;
            let key = k.trim().to_string();
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(MagicError::config(format!("duplicate key '{key}'")));
            }
        }
        Ok(KvFile { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MagicError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn take_str(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| MagicError::config(format!("bad value '{v}' for key '{key}'"))),
        }
    }

    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.take(key)?.unwrap_or(default))
    }

    /// Fails if any key was not consumed.
    pub fn finish(self) -> Result<()> {
        if let Some(k) = self.entries.keys().next() {
            return Err(MagicError::config(format!("unknown key '{k}'")));
        }
        Ok(())
    }
}

pub fn parse_bool(v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(MagicError::config(format!("bad boolean '{v}'"))),
    }
}
