//! Line-oriented `key<TAB>value` reports.
//!
//! The first line is always `schema=1`. Keys are unique and keep their
//! insertion order; floats are written in the shortest form that parses
//! back to the same bits.

use crate::error::{Error, Result};

pub const SCHEMA_LINE: &str = "schema=1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics {
    entries: Vec<(String, String)>,
}

impl Metrics {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append or replace a key.
    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        let key = key.into();
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key, value)),
        }
        self
    }

    pub fn set_list(&mut self, key: impl Into<String>, values: &[f64]) -> &mut Self {
        let joined: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        self.set(key, joined.join(","))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Format(format!("report is missing key `{key}`")))
    }

    pub fn parse_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::Format(format!("report key `{key}` has unparseable value {raw:?}")))
    }

    pub fn parse_list(&self, key: &str) -> Result<Vec<f64>> {
        let raw = self.require(key)?;
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|v| v.parse().map_err(|_| Error::Format(format!("report key `{key}` has bad list entry {v:?}"))))
            .collect()
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn render(&self) -> String {
        let mut out = String::from(SCHEMA_LINE);
        out.push('\n');
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push('\t');
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(SCHEMA_LINE) {
            return Err(Error::Format(format!("report must start with `{SCHEMA_LINE}`")));
        }
        let mut m = Metrics::new();
        for (i, line) in lines.enumerate() {
            let (k, v) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("report line {} has no tab", i + 2)))?;
            if m.get(k).is_some() {
                return Err(Error::Format(format!("report key `{k}` repeats")));
            }
            m.entries.push((k.to_string(), v.to_string()));
        }
        Ok(m)
    }
}
