//! `key = value` text: one pair per line, `#` starts a comment.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{CliError, CliResult};

/// Parsed pairs; every key must be consumed before [`Pairs::finish`].
#[derive(Debug)]
pub struct Pairs<'p> {
    path: &'p Path,
    values: BTreeMap<String, String>,
}

impl<'p> Pairs<'p> {
    pub fn parse(text: &str, path: &'p Path) -> CliResult<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::format(path, format!("line {}: expected `key = value`", i + 1)))?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(CliError::format(path, format!("line {}: empty key", i + 1)));
            }
            if values.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(CliError::format(path, format!("line {}: duplicate key `{key}`", i + 1)));
            }
        }
        Ok(Pairs { path, values })
    }

    pub fn take_str(&mut self, key: &str) -> Option<String> {
        self.values.remove(key)
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> CliResult<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| CliError::format(self.path, format!("`{key} = {v}`: {e}"))),
        }
    }

    pub fn require<T: FromStr>(&mut self, key: &str) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        self.take(key)?
            .ok_or_else(|| CliError::format(self.path, format!("missing key `{key}`")))
    }

    /// Fails on any key nobody asked for.
    pub fn finish(self) -> CliResult<()> {
        match self.values.keys().next() {
            None => Ok(()),
            Some(k) => Err(CliError::format(self.path, format!("unknown key `{k}`"))),
        }
    }
}
