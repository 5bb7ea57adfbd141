//! `key=value` configuration files: UTF-8 text, one pair per line, `#`
//! comments and blank lines ignored. Later occurrences of a key override
//! earlier ones.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected key=value, got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("key {key}: cannot parse {value:?} as {expected}")]
    BadValue { key: String, value: String, expected: &'static str },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Parsed key=value map with typed accessors.
#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Malformed { line: i + 1, text: raw.to_string() });
            };
            entries.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    /// Rejects keys outside the allowed set (catches typos early).
    pub fn ensure_known(&self, allowed: &[&str]) -> Result<(), ConfigError> {
        for key in self.entries.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey(key.clone()));
            }
        }
        Ok(())
    }

    fn parsed<T: std::str::FromStr>(
        &self,
        key: &str,
        expected: &'static str,
    ) -> Result<Option<T>, ConfigError> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: v.clone(),
                expected,
            }),
        }
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>, ConfigError> {
        self.parsed(key, "unsigned integer")
    }

    pub fn get_u64(&self, key: &str) -> Result<Option<u64>, ConfigError> {
        self.parsed(key, "unsigned integer")
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>, ConfigError> {
        self.parsed(key, "real number")
    }

    pub fn get_bool(&self, key: &str) -> Result<Option<bool>, ConfigError> {
        match self.entries.get(key).map(|s| s.as_str()) {
            None => Ok(None),
            Some("true") | Some("1") => Ok(Some(true)),
            Some("false") | Some("0") => Ok(Some(false)),
            Some(v) => Err(ConfigError::BadValue {
                key: key.to_string(),
                value: v.to_string(),
                expected: "true/false",
            }),
        }
    }

    /// Overwrites `target` when the key is present.
    pub fn apply_usize(&self, key: &str, target: &mut usize) -> Result<(), ConfigError> {
        if let Some(v) = self.get_usize(key)? {
            *target = v;
        }
        Ok(())
    }

    pub fn apply_u64(&self, key: &str, target: &mut u64) -> Result<(), ConfigError> {
        if let Some(v) = self.get_u64(key)? {
            *target = v;
        }
        Ok(())
    }

    pub fn apply_f64(&self, key: &str, target: &mut f64) -> Result<(), ConfigError> {
        if let Some(v) = self.get_f64(key)? {
            *target = v;
        }
        Ok(())
    }

    pub fn apply_bool(&self, key: &str, target: &mut bool) -> Result<(), ConfigError> {
        if let Some(v) = self.get_bool(key)? {
            *target = v;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_blanks_and_overrides() {
        let text = "# comment\n\n a = 1 \nb=2.5\na=3\nflag=true\n";
        let cfg = KvConfig::parse(text).unwrap();
        assert_eq!(cfg.get_usize("a").unwrap(), Some(3));
        assert_eq!(cfg.get_f64("b").unwrap(), Some(2.5));
        assert_eq!(cfg.get_bool("flag").unwrap(), Some(true));
        assert_eq!(cfg.get_usize("missing").unwrap(), None);
    }

    #[test]
    fn malformed_and_bad_values_are_rejected() {
        assert!(matches!(
            KvConfig::parse("just text"),
            Err(ConfigError::Malformed { line: 1, .. })
        ));
        let cfg = KvConfig::parse("x=abc").unwrap();
        assert!(matches!(cfg.get_usize("x"), Err(ConfigError::BadValue { .. })));
    }

    #[test]
    fn unknown_keys_detected() {
        let cfg = KvConfig::parse("alpha=0.5\ntypo_key=1").unwrap();
        assert!(cfg.ensure_known(&["alpha"]).is_err());
        assert!(cfg.ensure_known(&["alpha", "typo_key"]).is_ok());
    }
}
