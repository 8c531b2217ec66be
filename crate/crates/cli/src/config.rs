//! Line-oriented `key = value` run configuration with dotted section
//! prefixes, `#` comments, command-line overrides, and strict unknown-key
//! rejection.
//!
//! Every getter records the key it resolved and the final value (default or
//! explicit), so a run can write a complete resolved snapshot next to its
//! outputs and reject keys no command ever read.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rf_core::{Error, Result};

#[derive(Debug, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    resolved: RefCell<BTreeMap<String, String>>,
    accessed: RefCell<BTreeSet<String>>,
}

fn parse_line(line: &str, source: &str, lineno: usize) -> Result<Option<(String, String)>> {
    let trimmed = line.trim();
    if trimmed.is_empty() || trimmed.starts_with('#') {
        return Ok(None);
    }
    let (key, value) = trimmed.split_once('=').ok_or_else(|| {
        Error::config(format!("{source}:{}: expected `key = value`", lineno + 1))
    })?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::config(format!("{source}:{}: empty key", lineno + 1)));
    }
    Ok(Some((key.to_string(), value.trim().to_string())))
}

impl RunConfig {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Parses config text; later occurrences of a key override earlier ones.
    pub fn from_text(text: &str, source: &str) -> Result<Self> {
        let mut cfg = Self::empty();
        cfg.merge_text(text, source)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_text(&text, &path.display().to_string())
    }

    pub fn merge_text(&mut self, text: &str, source: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            if let Some((k, v)) = parse_line(line, source, lineno)? {
                self.values.insert(k, v);
            }
        }
        Ok(())
    }

    /// Applies `--set key=value` overrides.
    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<()> {
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::config(format!("--set `{s}` is not key=value")))?;
            self.values.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    fn record(&self, key: &str, value: &str) {
        self.accessed.borrow_mut().insert(key.to_string());
        self.resolved
            .borrow_mut()
            .insert(key.to_string(), value.to_string());
    }

    /// Required string value.
    pub fn require_str(&self, key: &str) -> Result<String> {
        match self.values.get(key) {
            Some(v) => {
                self.record(key, v);
                Ok(v.clone())
            }
            None => Err(Error::config(format!("missing required key `{key}`"))),
        }
    }

    pub fn get_str(&self, key: &str, default: &str) -> String {
        let v = self
            .values
            .get(key)
            .cloned()
            .unwrap_or_else(|| default.to_string());
        self.record(key, &v);
        v
    }

    pub fn get_path(&self, key: &str) -> Result<PathBuf> {
        Ok(PathBuf::from(self.require_str(key)?))
    }

    pub fn get_opt_path(&self, key: &str) -> Option<PathBuf> {
        let v = self.values.get(key).cloned();
        if let Some(v) = &v {
            self.record(key, v);
        }
        v.map(PathBuf::from)
    }

    fn parse_with<T>(&self, key: &str, raw: &str, what: &str) -> Result<T>
    where
        T: std::str::FromStr,
    {
        raw.parse::<T>()
            .map_err(|_| Error::config(format!("key `{key}`: `{raw}` is not a valid {what}")))
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        let raw = self.get_str(key, &default.to_string());
        self.parse_with(key, &raw, "integer")
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        let raw = self.get_str(key, &default.to_string());
        self.parse_with(key, &raw, "integer")
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        let raw = self.get_str(key, &default.to_string());
        self.parse_with(key, &raw, "number")
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        let raw = self.get_str(key, if default { "true" } else { "false" });
        match raw.as_str() {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(Error::config(format!(
                "key `{key}`: `{other}` is not a boolean"
            ))),
        }
    }

    /// Comma-separated list; empty string or "none" yields an empty list.
    pub fn get_list(&self, key: &str, default: &str) -> Vec<String> {
        let raw = self.get_str(key, default);
        if raw.is_empty() || raw == "none" {
            return Vec::new();
        }
        raw.split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect()
    }

    /// Fails if the config carries keys no getter consumed.
    pub fn reject_unknown(&self) -> Result<()> {
        let accessed = self.accessed.borrow();
        let unknown: Vec<&String> = self
            .values
            .keys()
            .filter(|k| !accessed.contains(*k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::config(format!(
                "unknown config keys: {}",
                unknown
                    .iter()
                    .map(|s| s.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            )))
        }
    }

    /// The resolved `key = value` snapshot (defaults included), sorted.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.resolved.borrow().iter() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_sections_and_overrides() {
        let text = "# a comment\nmodel.variant = RF-OA\nrun.seed = 7\n\ntrain.lr = 1e-3\n";
        let mut cfg = RunConfig::from_text(text, "test").unwrap();
        cfg.apply_overrides(&["run.seed=9".to_string()]).unwrap();
        assert_eq!(cfg.get_str("model.variant", "baseline"), "RF-OA");
        assert_eq!(cfg.get_u64("run.seed", 0).unwrap(), 9);
        assert_eq!(cfg.get_f64("train.lr", 0.0).unwrap(), 1e-3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let cfg = RunConfig::from_text("model.variant = RF-O\nbogus.key = 1\n", "test").unwrap();
        let _ = cfg.get_str("model.variant", "baseline");
        assert!(matches!(cfg.reject_unknown(), Err(Error::Config(_))));
    }

    #[test]
    fn snapshot_contains_defaults() {
        let cfg = RunConfig::from_text("run.seed = 5\n", "test").unwrap();
        let _ = cfg.get_u64("run.seed", 0).unwrap();
        let _ = cfg.get_str("model.variant", "baseline");
        let snap = cfg.snapshot();
        assert!(snap.contains("run.seed = 5"));
        assert!(snap.contains("model.variant = baseline"));
    }

    #[test]
    fn malformed_lines_error_with_location() {
        let err = RunConfig::from_text("model.variant RF-O\n", "cfg").unwrap_err();
        assert!(format!("{err}").contains("cfg:1"));
    }

    #[test]
    fn lists_parse_and_none_is_empty() {
        let cfg = RunConfig::from_text("eval.corruptions = gaussian, impulse\n", "t").unwrap();
        assert_eq!(
            cfg.get_list("eval.corruptions", ""),
            vec!["gaussian".to_string(), "impulse".to_string()]
        );
        let cfg2 = RunConfig::from_text("eval.corruptions = none\n", "t").unwrap();
        assert!(cfg2.get_list("eval.corruptions", "").is_empty());
    }
}
