//! Flat `key = value` text configuration.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! # comment
//! section.key = value
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. Keys are dotted
//! identifiers; values run to the end of the line with surrounding
//! whitespace trimmed. A key may appear at most once. Consumers remove the
//! keys they understand and call [`KvDoc::finish`], which rejects leftovers.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct KvDoc {
    entries: BTreeMap<String, (String, usize)>,
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && key.split('.').all(|part| {
            !part.is_empty()
                && part
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        })
}

impl KvDoc {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {line_no}: expected `key = value`, got {line:?}"
                ))
            })?;
            let key = key.trim();
            if !valid_key(key) {
                return Err(Error::Config(format!(
                    "line {line_no}: invalid key {key:?}"
                )));
            }
            if entries
                .insert(key.to_string(), (value.trim().to_string(), line_no))
                .is_some()
            {
                return Err(Error::Config(format!(
                    "line {line_no}: duplicate key {key}"
                )));
            }
        }
        Ok(KvDoc { entries })
    }

    pub fn from_pairs<K: Into<String>, V: Into<String>>(
        pairs: impl IntoIterator<Item = (K, V)>,
    ) -> Self {
        KvDoc {
            entries: pairs
                .into_iter()
                .map(|(k, v)| (k.into(), (v.into(), 0)))
                .collect(),
        }
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn take_raw(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|(v, _)| v)
    }

    /// Removes and parses `key`, if present.
    pub fn take<T>(&mut self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((v, line)) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| Error::Config(format!("line {line}: bad value {v:?} for {key}: {e}"))),
        }
    }

    /// Overwrites `slot` when `key` is present.
    pub fn take_into<T>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T: FromStr,
        T::Err: Display,
    {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Errors on any key no consumer claimed.
    pub fn finish(self) -> Result<()> {
        match self.entries.iter().next() {
            None => Ok(()),
            Some((k, (_, line))) => {
                let others = self.entries.len() - 1;
                let more = if others > 0 {
                    format!(" (and {others} more)")
                } else {
                    String::new()
                };
                Err(Error::Config(format!("line {line}: unknown key {k}{more}")))
            }
        }
    }
}

/// Renders `(key, value)` pairs in the grammar above.
pub fn render(pairs: &[(String, String)]) -> String {
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
    fn parses_and_rejects_leftovers() {
        let mut doc = KvDoc::parse("# hi\n\nmodel.embed_dim = 32\ntrain.lr0=0.5\n").unwrap();
        assert_eq!(doc.take::<usize>("model.embed_dim").unwrap(), Some(32));
        let err = doc.finish().unwrap_err().to_string();
        assert!(err.contains("train.lr0"), "{err}");
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = KvDoc::parse("a = 1\nnot a pair\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        let err = KvDoc::parse("a = 1\na = 2\n").unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
        let mut doc = KvDoc::parse("\n\nx.y = abc\n").unwrap();
        let err = doc.take::<f64>("x.y").unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn invalid_keys() {
        assert!(KvDoc::parse("a..b = 1").is_err());
        assert!(KvDoc::parse(" = 1").is_err());
        assert!(KvDoc::parse("a b = 1").is_err());
    }
}
