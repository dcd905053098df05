//! `key = value` configuration text. Blank lines and `#` comments are
//! ignored.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::{BenchError, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, (u64, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (k, raw) in text.lines().enumerate() {
            let line_no = k as u64 + 1;
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| BenchError::Parse {
                line: line_no,
                message: format!("expected 'key = value', found '{line}'"),
            })?;
            let key = key.trim().to_string();
            if entries.insert(key.clone(), (line_no, value.trim().to_string())).is_some() {
                return Err(BenchError::Parse {
                    line: line_no,
                    message: format!("duplicate key '{key}'"),
                });
            }
        }
        Ok(Self { entries })
    }

    /// Parsed value of `key`, or `None` if absent.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|_| BenchError::Parse {
                line: *line,
                message: format!("bad value '{v}' for '{key}'"),
            }),
        }
    }

    /// Errors on the first key not in `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        match self.entries.iter().find(|(k, _)| !known.contains(&k.as_str())) {
            Some((k, (line, _))) => Err(BenchError::Parse {
                line: *line,
                message: format!("unknown key '{k}'"),
            }),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_reports() {
        let kv = KeyValues::parse("# comment\n targets = 4 \n\nnoise=0.5 # trailing\n").unwrap();
        assert_eq!(kv.get::<usize>("targets").unwrap(), Some(4));
        assert_eq!(kv.get::<f64>("noise").unwrap(), Some(0.5));
        assert_eq!(kv.get::<f64>("missing").unwrap(), None);
        assert!(matches!(kv.get::<usize>("noise"), Err(BenchError::Parse { line: 4, .. })));
        assert!(matches!(kv.check_known(&["targets"]), Err(BenchError::Parse { line: 4, .. })));
        assert!(matches!(KeyValues::parse("a = 1\nb\n"), Err(BenchError::Parse { line: 2, .. })));
        assert!(matches!(KeyValues::parse("a = 1\na = 2\n"), Err(BenchError::Parse { line: 2, .. })));
    }
}
