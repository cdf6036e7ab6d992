//! key=value config files with `#` comments.
//!
//! Keys mirror the long flag names one-to-one; flags override file values.
//! Unknown keys are rejected after a command has consumed everything it
//! understands.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use longcse::error::{Error, Result};

#[derive(Debug, Default)]
pub struct ConfigMap {
    values: BTreeMap<String, String>,
    consumed: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl ConfigMap {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: lineno + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            let key = key.trim().to_string();
            if values.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: format!("duplicate key {key:?}"),
                });
            }
        }
        Ok(ConfigMap {
            values,
            consumed: Default::default(),
        })
    }

    /// Typed lookup; records the key as known even when absent.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.consumed.borrow_mut().insert(key.to_string());
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|e| {
                Error::Config(format!("config key {key}: cannot parse {raw:?}: {e}"))
            }),
        }
    }

    /// Errors on any key no `get` ever asked about.
    pub fn reject_unknown(&self) -> Result<()> {
        let consumed = self.consumed.borrow();
        let unknown: Vec<&String> = self
            .values
            .keys()
            .filter(|k| !consumed.contains(*k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "unknown config key(s): {}",
                unknown
                    .iter()
                    .map(|s| s.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            )))
        }
    }
}

/// `flag.or(config value).unwrap_or(default)` with typed parsing.
pub fn resolve<T: FromStr + Clone>(
    flag: Option<T>,
    file: &ConfigMap,
    key: &str,
    default: T,
) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    Ok(flag.or(file.get::<T>(key)?).unwrap_or(default))
}

/// Like [`resolve`] but without a default; absence is a config error.
pub fn resolve_required<T: FromStr + Clone>(
    flag: Option<T>,
    file: &ConfigMap,
    key: &str,
) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    flag.or(file.get::<T>(key)?)
        .ok_or_else(|| Error::Config(format!("missing required flag --{key}")))
}
