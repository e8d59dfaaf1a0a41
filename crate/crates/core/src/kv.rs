//! Flat `key=value` text used for config files and the config echo embedded
//! in dataset and checkpoint headers.
//!
//! Files may group keys under `[section]` headers; a key `size` under
//! `[model]` is stored as `model.size`. Blank lines and `#` comments are
//! ignored.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Result, SvioError};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = Self::new();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_owned();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                SvioError::Parameter(format!("line {}: expected key=value, got `{line}`", lineno + 1))
            })?;
            let key = if section.is_empty() {
                k.trim().to_owned()
            } else {
                format!("{section}.{}", k.trim())
            };
            map.entries.insert(key, v.trim().to_owned());
        }
        Ok(map)
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Later entries win.
    pub fn merge(&mut self, other: &KvMap) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    /// Overwrites `slot` when `key` is present.
    pub fn apply<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(raw) = self.entries.get(key) {
            *slot = raw
                .parse()
                .map_err(|e| SvioError::Parameter(format!("`{key}` = `{raw}`: {e}")))?;
        }
        Ok(())
    }

    /// Keys under `prefix.` that are not in `known`.
    pub fn unknown_keys(&self, known: &[String]) -> Vec<String> {
        self.entries
            .keys()
            .filter(|k| !known.contains(k))
            .cloned()
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_prefix_keys() {
        let kv = KvMap::parse("# c\nseed = 3\n[model]\nhidden= 32\n\n[train]\nlr=0.001\n").unwrap();
        assert_eq!(kv.get_str("seed"), Some("3"));
        assert_eq!(kv.get_str("model.hidden"), Some("32"));
        assert_eq!(kv.get_str("train.lr"), Some("0.001"));
        let reparsed = KvMap::parse(&kv.to_text()).unwrap();
        assert_eq!(reparsed, kv);
    }

    #[test]
    fn apply_reports_bad_values() {
        let kv = KvMap::parse("x=abc").unwrap();
        let mut v = 1usize;
        assert!(kv.apply("x", &mut v).is_err());
        let mut untouched = 5usize;
        kv.apply("missing", &mut untouched).unwrap();
        assert_eq!(untouched, 5);
    }

    #[test]
    fn rejects_lines_without_equals() {
        assert!(KvMap::parse("[a]\njunk\n").is_err());
    }
}
