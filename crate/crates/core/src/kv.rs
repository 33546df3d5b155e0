//! Flat `key=value` configuration files, shared by the agent config,
//! simulator scenarios and experiment specs.

use std::collections::BTreeMap;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KvError {
    #[error("line {line}: expected `key=value`, got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("invalid value {value:?} for `{key}`")]
    InvalidValue { key: String, value: String },
}

/// Parsed flat config. `#` starts a comment line; blank lines are skipped.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvFile {
    entries: BTreeMap<String, String>,
}

impl KvFile {
    pub fn parse(source: &str) -> Result<Self, KvError> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in source.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(KvError::Malformed {
                    line: idx + 1,
                    text: raw.to_string(),
                });
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(KvError::Malformed {
                    line: idx + 1,
                    text: raw.to_string(),
                });
            }
            if entries
                .insert(key.to_string(), value.trim().to_string())
                .is_some()
            {
                return Err(KvError::Duplicate {
                    line: idx + 1,
                    key: key.to_string(),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Parse `key` as `T` if present.
    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>, KvError> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| KvError::InvalidValue {
                key: key.to_string(),
                value: v.clone(),
            }),
        }
    }

    /// Fails on the first key not in `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<(), KvError> {
        match self.entries.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(KvError::UnknownKey(k.clone())),
            None => Ok(()),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_trims() {
        let kv = KvFile::parse("# c\n\nport = 4231\nname=a=b\n").unwrap();
        assert_eq!(kv.get("port"), Some("4231"));
        assert_eq!(kv.get("name"), Some("a=b"));
        assert_eq!(kv.parsed::<u16>("port").unwrap(), Some(4231));
    }

    #[test]
    fn rejects_garbage_and_duplicates() {
        assert!(matches!(
            KvFile::parse("novalue"),
            Err(KvError::Malformed { line: 1, .. })
        ));
        assert!(matches!(
            KvFile::parse("a=1\na=2"),
            Err(KvError::Duplicate { line: 2, .. })
        ));
        let kv = KvFile::parse("x=1").unwrap();
        assert_eq!(kv.check_keys(&["y"]), Err(KvError::UnknownKey("x".into())));
        assert!(kv.parsed::<u8>("x").is_ok());
        let kv = KvFile::parse("x=oops").unwrap();
        assert!(kv.parsed::<u8>("x").is_err());
    }
}
