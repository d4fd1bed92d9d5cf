//! `--set section.field=value` overrides applied to a run config.

use anyhow::{anyhow, bail, Context, Result};
use sonocc::config::RunConfig;
use toml::Value;

/// Parses the right-hand side as a TOML literal, falling back to a string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        node = match node {
            Value::Table(t) => {
                if last {
                    t.insert(part.to_string(), value);
                    return Ok(());
                }
                t.entry(part.to_string()).or_insert_with(|| Value::Table(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part.parse().with_context(|| format!("`{part}` in `{path}` is not an array index"))?;
                let len = items.len();
                let slot = items.get_mut(idx).ok_or_else(|| anyhow!("index {idx} in `{path}` is out of range ({len})"))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => bail!("`{path}`: cannot descend into a scalar at `{part}`"),
        };
    }
    unreachable!("path has at least one segment")
}

/// Applies `key=value` assignments. The result is not validated.
pub fn apply(cfg: &RunConfig, assignments: &[String]) -> Result<RunConfig> {
    if assignments.is_empty() {
        return Ok(cfg.clone());
    }
    let mut root = Value::try_from(cfg).context("config cannot be represented as TOML")?;
    for a in assignments {
        let (key, raw) = a.split_once('=').ok_or_else(|| anyhow!("override `{a}` must look like key=value"))?;
        let key = key.trim();
        if key.is_empty() {
            bail!("override `{a}` has an empty key");
        }
        set_path(&mut root, key, parse_value(raw.trim()))?;
    }
    root.try_into().map_err(|e: toml::de::Error| anyhow!("invalid override: {}", e.message()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_and_indexed_fields() {
        let cfg = RunConfig::desk();
        let out = apply(
            &cfg,
            &["train.iterations=12".into(), "trajectories.1.frames=3".into(), "name=quick".into(), "scalar=\"f64\"".into()],
        )
        .unwrap();
        assert_eq!(out.train.iterations, 12);
        assert_eq!(out.trajectories[1].frames, 3);
        assert_eq!(out.name, "quick");
        assert_eq!(out.scalar, sonocc::config::ScalarKind::F64);
    }

    #[test]
    fn bad_overrides_are_reported() {
        let cfg = RunConfig::desk();
        assert!(apply(&cfg, &["train.iterations".into()]).is_err());
        assert!(apply(&cfg, &["train.iterations=abc".into()]).is_err());
        assert!(apply(&cfg, &["train.bogus=1".into()]).is_err());
        assert!(apply(&cfg, &["trajectories.9.frames=1".into()]).is_err());
    }
}
