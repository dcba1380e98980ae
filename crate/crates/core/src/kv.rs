//! Plain-text `key = value` config files.
//!
//! One pair per line; `#` starts a comment; blank lines are ignored. Keys
//! are unique. Values are taken verbatim after trimming.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct KvFile {
    source: PathBuf,
    values: BTreeMap<String, (usize, String)>,
}

impl KvFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, source: &Path) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: source.into(),
                line: i + 1,
                message: format!("expected `key = value`, got {line:?}"),
            })?;
            let key = key.trim().to_string();
            if values.insert(key.clone(), (i + 1, value.trim().to_string())).is_some() {
                return Err(Error::Parse {
                    path: source.into(),
                    line: i + 1,
                    message: format!("duplicate key {key:?}"),
                });
            }
        }
        Ok(Self {
            source: source.into(),
            values,
        })
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|(_, v)| v.as_str())
    }

    /// Parses `key` if present.
    pub fn get<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|e: T::Err| Error::Parse {
                path: self.source.clone(),
                line: *line,
                message: format!("{key}: {e}"),
            }),
        }
    }

    /// Overwrites `slot` with the parsed value when `key` is present.
    pub fn set<T>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T: FromStr,
        T::Err: Display,
    {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Overwrites `slot` with a comma-separated list of exactly `N` values
    /// when `key` is present.
    pub fn set_array<T, const N: usize>(&self, key: &str, slot: &mut [T; N]) -> Result<()>
    where
        T: FromStr,
        T::Err: Display,
    {
        let Some((line, raw)) = self.values.get(key) else {
            return Ok(());
        };
        let err = |message: String| Error::Parse {
            path: self.source.clone(),
            line: *line,
            message: format!("{key}: {message}"),
        };
        let items: Vec<T> = raw
            .split(',')
            .map(|p| p.trim().parse::<T>().map_err(|e| err(e.to_string())))
            .collect::<Result<_>>()?;
        let n = items.len();
        *slot = items
            .try_into()
            .map_err(|_| err(format!("expected {N} comma-separated values, got {n}")))?;
        Ok(())
    }

    /// Keys starting with `prefix.`, with the prefix removed.
    pub fn section(&self, prefix: &str) -> KvFile {
        let head = format!("{prefix}.");
        KvFile {
            source: self.source.clone(),
            values: self
                .values
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&head).map(|rest| (rest.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Fails on the first key not accepted by `known`.
    pub fn reject_unknown(&self, known: impl Fn(&str) -> bool) -> Result<()> {
        match self.values.iter().find(|(k, _)| !known(k)) {
            None => Ok(()),
            Some((k, (line, _))) => Err(Error::Parse {
                path: self.source.clone(),
                line: *line,
                message: format!("unknown key {k:?}"),
            }),
        }
    }
}

/// Builds a `key = value` document in insertion order.
#[derive(Debug, Default)]
pub struct KvWriter {
    out: String,
}

impl KvWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn comment(&mut self, text: &str) -> &mut Self {
        self.out.push_str("# ");
        self.out.push_str(text);
        self.out.push('\n');
        self
    }

    pub fn pair(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.out.push_str(&format!("{key} = {value}\n"));
        self
    }

    pub fn finish(&mut self) -> String {
        std::mem::take(&mut self.out)
    }
}
