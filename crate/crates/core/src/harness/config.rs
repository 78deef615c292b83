use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Plain `key = value` settings. Blank lines and `#` comments are ignored;
/// later assignments override earlier ones.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValues {
    values: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("config line {}: expected key=value, got '{line}'", i + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::invalid(format!("config line {}: empty key", i + 1)));
            }
            kv.set(k, v.trim());
        }
        Ok(kv)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.raw(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::invalid(format!("config key '{key}': cannot parse '{v}'")))
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        self.raw(key)
            .map(|v| {
                v.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse()
                            .map_err(|_| Error::invalid(format!("config key '{key}': cannot parse item '{s}'")))
                    })
                    .collect()
            })
            .transpose()
    }

    /// Fails on any key outside `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        let known: BTreeSet<&str> = known.iter().copied().collect();
        match self.values.keys().find(|k| !known.contains(k.as_str())) {
            Some(k) => Err(Error::invalid(format!("unknown config key '{k}'"))),
            None => Ok(()),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Sorted `key=value` lines.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Hex SHA-256 of [`KeyValues::to_text`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let kv = KeyValues::parse("# header\n a = 1 \n\nb=x,y # trailing\na=2\n").unwrap();
        assert_eq!(kv.get::<u32>("a").unwrap(), Some(2));
        assert_eq!(kv.get_list::<String>("b").unwrap().unwrap(), vec!["x", "y"]);
        assert_eq!(kv.get_or("missing", 7u8).unwrap(), 7);
        assert!(kv.get::<u32>("b").is_err());
        assert!(kv.check_known(&["a"]).is_err());
        assert!(kv.check_known(&["a", "b"]).is_ok());
        assert!(KeyValues::parse("novalue\n").is_err());
    }

    #[test]
    fn hash_ignores_order_and_formatting() {
        let a = KeyValues::parse("x=1\ny=2\n").unwrap();
        let b = KeyValues::parse("y = 2\n# c\nx= 1").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        assert_ne!(a.hash(), KeyValues::parse("x=1\ny=3").unwrap().hash());
    }
}
