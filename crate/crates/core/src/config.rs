//! `key = value` text files with `#` comments.

use crate::error::{Error, Result};
use indexmap::IndexMap;
use std::path::Path;
use std::str::FromStr;

/// Parsed entries, consumed key by key so leftovers can be reported.
#[derive(Debug)]
pub struct KvFile {
    source: String,
    entries: IndexMap<String, (String, usize)>,
}

impl KvFile {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut entries = IndexMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                path: source.to_string(),
                line: line_no,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config {
                    path: source.to_string(),
                    line: line_no,
                    msg: "empty key".into(),
                });
            }
            if entries.insert(k.to_string(), (v.to_string(), line_no)).is_some() {
                return Err(Error::Config {
                    path: source.to_string(),
                    line: line_no,
                    msg: format!("duplicate key `{k}`"),
                });
            }
        }
        Ok(KvFile {
            source: source.to_string(),
            entries,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    fn err(&self, line: usize, msg: String) -> Error {
        Error::Config {
            path: self.source.clone(),
            line,
            msg,
        }
    }

    /// Remove and parse `key`, leaving `slot` untouched when absent.
    pub fn take<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some((v, line)) = self.entries.shift_remove(key) {
            *slot = v
                .parse()
                .map_err(|e| self.err(line, format!("bad value for `{key}`: {e}")))?;
        }
        Ok(())
    }

    pub fn take_with<T>(&mut self, key: &str, slot: &mut T, f: impl FnOnce(&str) -> Result<T>) -> Result<()> {
        if let Some((v, line)) = self.entries.shift_remove(key) {
            *slot = f(&v).map_err(|e| self.err(line, format!("bad value for `{key}`: {e}")))?;
        }
        Ok(())
    }

    /// Comma-separated list.
    pub fn take_list<T: FromStr>(&mut self, key: &str, slot: &mut Vec<T>) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        self.take_with(key, slot, |v| parse_list(v))
    }

    /// Fails on any key not consumed by a `take*` call.
    pub fn finish(self) -> Result<()> {
        match self.entries.first() {
            Some((k, (_, line))) => Err(self.err(*line, format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }
}

pub fn parse_list<T: FromStr>(v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| Error::invalid(format!("`{s}`: {e}"))))
        .collect()
}

/// Accepts `true/false`, `yes/no`, `1/0`.
pub fn parse_bool(v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::invalid(format!("`{v}` is not a boolean"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_lists() {
        let mut kv = KvFile::parse("# header\nseed = 3  # trailing\n\nscales = 0.5, 1.0\n", "t").unwrap();
        let mut seed = 0u64;
        let mut scales: Vec<f32> = vec![];
        kv.take("seed", &mut seed).unwrap();
        kv.take_list("scales", &mut scales).unwrap();
        kv.finish().unwrap();
        assert_eq!(seed, 3);
        assert_eq!(scales, vec![0.5, 1.0]);
    }

    #[test]
    fn unknown_and_duplicate_keys_fail() {
        let kv = KvFile::parse("a = 1\n", "t").unwrap();
        let err = kv.finish().unwrap_err().to_string();
        assert!(err.contains("unknown key `a`") && err.contains("line 1"), "{err}");
        assert!(KvFile::parse("a = 1\na = 2\n", "t").is_err());
        assert!(KvFile::parse("just words\n", "t").is_err());
    }

    #[test]
    fn bad_value_reports_line() {
        let mut kv = KvFile::parse("\nseed = x\n", "cfg").unwrap();
        let mut seed = 0u64;
        let err = kv.take("seed", &mut seed).unwrap_err().to_string();
        assert!(err.starts_with("cfg: line 2"), "{err}");
    }
}
