//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are consumed
//! by the typed configs; anything left over is reported as unknown.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvConfig {
    entries: BTreeMap<String, (usize, String)>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::config(format!("line {}: empty key", n + 1)));
            }
            if entries
                .insert(key.to_string(), (n + 1, value.trim().to_string()))
                .is_some()
            {
                return Err(Error::config(format!(
                    "line {}: duplicate key `{key}`",
                    n + 1
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Removes and parses `key`.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|_| {
                Error::config(format!("line {line}: invalid value `{v}` for `{key}`"))
            }),
        }
    }

    /// Overwrites `slot` when `key` is present.
    pub fn take_into<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Fails if any key was never consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((key, (line, _))) => {
                Err(Error::config(format!("line {line}: unknown key `{key}`")))
            }
        }
    }
}
