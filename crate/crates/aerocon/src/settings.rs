//! Configuration files: TOML with `[section]` headers plus `section.key=value`
//! overrides from the command line.

use std::path::Path;

use aerocon_core::config::Config;
use serde::Deserialize;

use crate::error::{self, AppError, Result};

/// Parses a TOML document into a validated configuration. Unknown sections
/// and keys are rejected.
pub fn from_toml(text: &str) -> Result<Config> {
    let cfg: Config = toml::from_str(text).map_err(|e| AppError::Config(e.to_string()))?;
    cfg.validate().map_err(|e| AppError::Config(e.to_string()))?;
    Ok(cfg)
}

/// The fully resolved configuration as TOML; parses back to an equal value.
pub fn to_toml(cfg: &Config) -> String {
    toml::to_string(cfg).expect("configuration serializes")
}

/// Parses the value of an override. Anything that is not a TOML value is
/// taken as a bare string, so `--set augment.strategy=independent` works.
fn override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies one `section.key=value` override to a raw document.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| AppError::Config(format!("override {spec:?} is not section.key=value")))?;
    let (section, key) = path
        .trim()
        .split_once('.')
        .ok_or_else(|| AppError::Config(format!("override key {path:?} is not section.key")))?;
    let table = doc
        .entry(section)
        .or_insert_with(|| toml::Value::Table(toml::Table::new()))
        .as_table_mut()
        .ok_or_else(|| AppError::Config(format!("{section} is not a section")))?;
    table.insert(key.to_string(), override_value(raw.trim()));
    Ok(())
}

/// Merges the sections of `top` into `base`, key by key.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (section, value) in top {
        match (base.get_mut(&section), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => b.extend(t),
            (_, value) => {
                base.insert(section, value);
            }
        }
    }
}

/// `base`, then the optional file, then each override in order.
pub fn resolve_from(base: &Config, file: Option<&Path>, overrides: &[String]) -> Result<Config> {
    let mut doc = toml::Table::try_from(base).map_err(|e| AppError::Config(e.to_string()))?;
    if let Some(p) = file {
        let top = error::read_text(p)?
            .parse::<toml::Table>()
            .map_err(|e| AppError::Config(format!("{}: {e}", p.display())))?;
        merge(&mut doc, top);
    }
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let cfg = Config::deserialize(doc).map_err(|e| AppError::Config(e.to_string()))?;
    cfg.validate().map_err(|e| AppError::Config(e.to_string()))?;
    Ok(cfg)
}

/// Defaults, then the optional file, then each override in order.
pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Config> {
    resolve_from(&Config::default(), file, overrides)
}
