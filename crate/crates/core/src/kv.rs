//! Flat `key = value` text files with `#` comments.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::{Error, Result};

/// Parsed key-value file. Keys keep the line they were read from so that
/// conversion errors can point back into the file.
#[derive(Debug, Clone, Default)]
pub struct KvFile {
    path: PathBuf,
    entries: BTreeMap<String, (usize, String)>,
}

impl KvFile {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(path, &text)
    }

    pub fn parse(path: impl Into<PathBuf>, text: &str) -> Result<Self> {
        let path = path.into();
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::parse(
                    &path,
                    i + 1,
                    format!("expected `key = value`, got `{line}`"),
                ));
            };
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::parse(&path, i + 1, "empty key"));
            }
            if entries.insert(key.clone(), (i + 1, value.trim().to_string())).is_some() {
                return Err(Error::parse(&path, i + 1, format!("duplicate key `{key}`")));
            }
        }
        Ok(Self { path, entries })
    }

    /// Replaces values with `PREFIX_KEY` environment variables where present.
    /// Keys are upper-cased and `-`/`.` become `_`.
    pub fn apply_env_overrides(&mut self, prefix: &str, known_keys: &[&str]) {
        for key in known_keys {
            let var = format!("{prefix}{}", key.to_ascii_uppercase().replace(['-', '.'], "_"));
            if let Ok(value) = std::env::var(&var) {
                self.entries.insert((*key).to_string(), (0, value));
            }
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, value)) => value
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::parse(&self.path, *line, format!("cannot parse value `{value}` for `{key}`"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Comma-separated list of values.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        let Some((line, value)) = self.entries.get(key) else {
            return Ok(None);
        };
        value
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<T>()
                    .map_err(|_| Error::parse(&self.path, *line, format!("cannot parse list item `{s}` for `{key}`")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    pub fn line_of(&self, key: &str) -> usize {
        self.entries.get(key).map(|(l, _)| *l).unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let kv = KvFile::parse("x", "# header\n a = 1.5 # trailing\n\nb=2, 3,4\n").unwrap();
        assert_eq!(kv.get::<f64>("a").unwrap(), Some(1.5));
        assert_eq!(kv.get_list::<u32>("b").unwrap(), Some(vec![2, 3, 4]));
        assert_eq!(kv.get::<f64>("missing").unwrap(), None);
    }

    #[test]
    fn reports_line_numbers() {
        let err = KvFile::parse("cfg", "a = 1\nnot a pair\n").unwrap_err();
        assert!(err.to_string().contains("cfg:2"), "{err}");
        let kv = KvFile::parse("cfg", "a = 1\nb = x\n").unwrap();
        let err = kv.get::<f64>("b").unwrap_err();
        assert!(err.to_string().contains("cfg:2"), "{err}");
    }

    #[test]
    fn rejects_duplicates() {
        assert!(KvFile::parse("cfg", "a = 1\na = 2\n").is_err());
    }
}
