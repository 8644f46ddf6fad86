//! Sectioned text format shared by the operator and model files.
//!
//! ```text
//! # comment
//! [name]
//! key = value
//! 1.0 2.0 3.0
//! ```
//!
//! Inside a section, `key = value` lines are metadata and every other
//! non-empty line is a row of whitespace-separated numbers. A matrix section
//! may carry `scale = <factor>`, which multiplies every entry on load.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::{Error, Result};

#[derive(Debug, Clone)]
pub(crate) struct Section {
    pub name: String,
    pub line: usize,
    pub entries: Vec<(usize, String, String)>,
    pub rows: Vec<(usize, Vec<f64>)>,
}

#[derive(Debug, Clone)]
pub(crate) struct SectionFile {
    pub path: PathBuf,
    pub sections: Vec<Section>,
}

impl SectionFile {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(path, &text)
    }

    pub fn parse(path: impl Into<PathBuf>, text: &str) -> Result<Self> {
        let path = path.into();
        let mut sections: Vec<Section> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                if sections.iter().any(|s| s.name == name) {
                    return Err(Error::parse(&path, i + 1, format!("duplicate section [{name}]")));
                }
                sections.push(Section {
                    name: name.trim().to_string(),
                    line: i + 1,
                    entries: Vec::new(),
                    rows: Vec::new(),
                });
                continue;
            }
            let Some(current) = sections.last_mut() else {
                return Err(Error::parse(&path, i + 1, "content before the first [section]"));
            };
            if let Some((k, v)) = line.split_once('=') {
                current
                    .entries
                    .push((i + 1, k.trim().to_string(), v.trim().to_string()));
            } else {
                let row = line
                    .split_whitespace()
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::parse(&path, i + 1, format!("malformed numeric row `{line}`")))?;
                current.rows.push((i + 1, row));
            }
        }
        Ok(Self { path, sections })
    }

    pub fn section(&self, name: &str) -> Result<&Section> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::parse(&self.path, 0, format!("missing section [{name}]")))
    }

    pub fn optional(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn err(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::parse(&self.path, line, msg)
    }

    pub fn raw<'a>(&self, section: &'a Section, key: &str) -> Result<(usize, &'a str)> {
        section
            .entries
            .iter()
            .find(|(_, k, _)| k == key)
            .map(|(l, _, v)| (*l, v.as_str()))
            .ok_or_else(|| self.err(section.line, format!("[{}] lacks `{key}`", section.name)))
    }

    pub fn value<T: std::str::FromStr>(&self, section: &Section, key: &str) -> Result<T> {
        let (line, v) = self.raw(section, key)?;
        v.parse()
            .map_err(|_| self.err(line, format!("cannot parse `{key} = {v}`")))
    }

    pub fn list<T: std::str::FromStr>(&self, section: &Section, key: &str) -> Result<Vec<T>> {
        let (line, v) = self.raw(section, key)?;
        v.split_whitespace()
            .map(|t| {
                t.parse()
                    .map_err(|_| self.err(line, format!("cannot parse `{t}` in `{key}`")))
            })
            .collect()
    }

    /// Reads a `rows x cols` matrix from a section's numeric rows, applying
    /// an optional `scale` entry.
    pub fn matrix(&self, section: &Section, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        if section.rows.len() != rows && !(cols == 0 && section.rows.is_empty()) {
            return Err(self.err(
                section.line,
                format!("[{}] has {} rows, expected {rows}", section.name, section.rows.len()),
            ));
        }
        let scale = match section.entries.iter().find(|(_, k, _)| k == "scale") {
            Some(_) => self.value::<f64>(section, "scale")?,
            None => 1.0,
        };
        let mut m = DMatrix::zeros(rows, cols);
        for (i, (line, row)) in section.rows.iter().enumerate() {
            if row.len() != cols {
                return Err(self.err(*line, format!("row has {} values, expected {cols}", row.len())));
            }
            for (j, v) in row.iter().enumerate() {
                m[(i, j)] = scale * v;
            }
        }
        Ok(m)
    }
}

pub(crate) fn write_matrix(out: &mut String, name: &str, m: &DMatrix<f64>) {
    let _ = writeln!(out, "[{name}]");
    for row in m.row_iter() {
        let items: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(out, "{}", items.join(" "));
    }
}

pub(crate) fn join<T: std::fmt::Display>(values: impl IntoIterator<Item = T>) -> String {
    values.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

pub(crate) fn join_exp<'a>(values: impl IntoIterator<Item = &'a f64>) -> String {
    values
        .into_iter()
        .map(|v| format!("{v:e}"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_scale() {
        let text = "# hdr\n[meta]\nr = 2\n[M]\nscale = 10\n1 2\n3 4\n";
        let f = SectionFile::parse("f", text).unwrap();
        let meta = f.section("meta").unwrap();
        assert_eq!(f.value::<usize>(meta, "r").unwrap(), 2);
        let m = f.matrix(f.section("M").unwrap(), 2, 2).unwrap();
        assert_eq!(m[(1, 0)], 30.0);
        assert!(f.section("X").is_err());
        assert!(f.matrix(f.section("M").unwrap(), 3, 2).is_err());
    }

    #[test]
    fn rejects_bad_rows() {
        assert!(SectionFile::parse("f", "[a]\n1 x\n").is_err());
        assert!(SectionFile::parse("f", "1 2\n").is_err());
        assert!(SectionFile::parse("f", "[a]\n[a]\n").is_err());
    }
}
