//! Flat `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Every key must be consumed by
//! the reader; [`KvConfig::finish`] reports anything left over.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{LelError, Result};

#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    entries: BTreeMap<String, (String, usize)>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| LelError::Config(format!("line {}: expected `key = value`, got {raw:?}", i + 1)))?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(LelError::Config(format!("line {}: empty key", i + 1)));
            }
            if entries.insert(key.clone(), (v.trim().to_string(), i + 1)).is_some() {
                return Err(LelError::Config(format!("line {}: duplicate key `{key}`", i + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LelError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), (value.to_string(), 0));
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Removes and parses `key`.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((v, line)) => v
                .parse()
                .map(Some)
                .map_err(|e| LelError::Config(format!("line {line}: `{key}` = {v:?}: {e}"))),
        }
    }

    /// Removes `key` and assigns its parsed value to `slot` when present.
    pub fn take_into<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Comma-separated list.
    pub fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((v, line)) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|e| LelError::Config(format!("line {line}: `{key}` item {s:?}: {e}")))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// Fails on any key nobody consumed.
    pub fn finish(self) -> Result<()> {
        if self.entries.is_empty() {
            return Ok(());
        }
        let keys: Vec<String> = self
            .entries
            .iter()
            .map(|(k, (_, line))| {
                if *line > 0 {
                    format!("{k} (line {line})")
                } else {
                    k.clone()
                }
            })
            .collect();
        Err(LelError::Config(format!("unknown keys: {}", keys.join(", "))))
    }
}

/// Renders `(key, value)` pairs in the same format [`KvConfig::parse`] reads.
pub fn render(pairs: &[(&str, String)]) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(v);
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_values() {
        let mut c = KvConfig::parse("# header\nepochs = 30  # short\n\nlr=3e-4\nlist = 1, 2,3\n").unwrap();
        assert_eq!(c.take::<usize>("epochs").unwrap(), Some(30));
        assert_eq!(c.take::<f64>("lr").unwrap(), Some(3e-4));
        assert_eq!(c.take_list::<u32>("list").unwrap(), Some(vec![1, 2, 3]));
        assert_eq!(c.take::<f64>("missing").unwrap(), None);
        c.finish().unwrap();
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        let c = KvConfig::parse("epochs = 3\nbogus = 1\n").unwrap();
        let mut c2 = c.clone();
        c2.take::<usize>("epochs").unwrap();
        let err = c2.finish().unwrap_err().to_string();
        assert!(err.contains("bogus") && err.contains("line 2"));
        assert!(KvConfig::parse("a = 1\na = 2\n").is_err());
        assert!(KvConfig::parse("no equals sign\n").is_err());
        let mut c3 = KvConfig::parse("epochs = many\n").unwrap();
        assert!(c3.take::<usize>("epochs").is_err());
    }

    #[test]
    fn render_round_trips() {
        let text = render(&[("a", "1".into()), ("b", "x y".into())]);
        let mut c = KvConfig::parse(&text).unwrap();
        assert_eq!(c.take::<u8>("a").unwrap(), Some(1));
        assert_eq!(c.take::<String>("b").unwrap().as_deref(), Some("x y"));
    }
}
