//! Flat `key = value` configuration files: one pair per line, `#` comment
//! lines, blank lines ignored. Duplicate keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct KvConfig {
    path: PathBuf,
    map: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse_file(path: &Path) -> Result<KvConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        KvConfig::parse_str(&text, path)
    }

    pub fn parse_str(text: &str, path: &Path) -> Result<KvConfig> {
        let mut map = BTreeMap::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::parse(
                    path,
                    format!("line {}: expected 'key = value', got '{raw}'", ln + 1),
                ));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(Error::parse(path, format!("line {}: empty key", ln + 1)));
            }
            if map.insert(key.clone(), value).is_some() {
                return Err(Error::parse(
                    path,
                    format!("line {}: duplicate key '{key}'", ln + 1),
                ));
            }
        }
        Ok(KvConfig {
            path: path.to_path_buf(),
            map,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|k| k.as_str())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|v| v.as_str())
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.map.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|e| {
                Error::parse(&self.path, format!("key '{key}': cannot parse '{raw}': {e}"))
            }),
        }
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    pub fn get_opt_usize(&self, key: &str) -> Result<Option<usize>> {
        self.parsed(key)
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.map.get(key) {
            None => Ok(default),
            Some(raw) => match raw.as_str() {
                "true" => Ok(true),
                "false" => Ok(false),
                other => Err(Error::parse(
                    &self.path,
                    format!("key '{key}': expected true or false, got '{other}'"),
                )),
            },
        }
    }

    pub fn get_string(&self, key: &str, default: &str) -> String {
        self.map
            .get(key)
            .cloned()
            .unwrap_or_else(|| default.to_string())
    }

    /// Comma-separated list of unsigned integers.
    pub fn get_usize_list(&self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.map.get(key) {
            None => Ok(default.to_vec()),
            Some(raw) => raw
                .split(',')
                .map(|tok| {
                    tok.trim().parse::<usize>().map_err(|e| {
                        Error::parse(
                            &self.path,
                            format!("key '{key}': cannot parse '{tok}': {e}"),
                        )
                    })
                })
                .collect(),
        }
    }

    /// Fails if the file contains keys outside `known` (typo guard).
    pub fn reject_unknown_keys(&self, known: &[&str]) -> Result<()> {
        for key in self.map.keys() {
            if !known.contains(&key.as_str()) {
                return Err(Error::parse(&self.path, format!("unknown key '{key}'")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<KvConfig> {
        KvConfig::parse_str(text, Path::new("test.cfg"))
    }

    #[test]
    fn parses_pairs_comments_and_blanks() {
        let cfg = parse("# comment\n\nepochs = 20\nlr=0.1\nname = toy run\n").unwrap();
        assert_eq!(cfg.get_usize("epochs", 0).unwrap(), 20);
        assert_eq!(cfg.get_f64("lr", 0.0).unwrap(), 0.1);
        assert_eq!(cfg.get_string("name", ""), "toy run");
        assert_eq!(cfg.get_usize("missing", 7).unwrap(), 7);
    }

    #[test]
    fn rejects_malformed_lines_and_duplicates() {
        assert!(parse("just words\n").is_err());
        assert!(parse("a = 1\na = 2\n").is_err());
        assert!(parse("= 3\n").is_err());
    }

    #[test]
    fn typed_errors_name_key() {
        let cfg = parse("epochs = soon\n").unwrap();
        let err = cfg.get_usize("epochs", 0).unwrap_err();
        assert!(err.to_string().contains("epochs"), "{err}");
    }

    #[test]
    fn lists_and_unknown_keys() {
        let cfg = parse("channels = 16, 32,64\n").unwrap();
        assert_eq!(
            cfg.get_usize_list("channels", &[]).unwrap(),
            vec![16, 32, 64]
        );
        assert!(cfg.reject_unknown_keys(&["channels"]).is_ok());
        assert!(cfg.reject_unknown_keys(&["other"]).is_err());
    }
}
