use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use csat_core::config::RunConfig;
use toml::{Table, Value};

/// Preset, then the TOML file layered on top key by key.
pub fn load(preset: &str, file: Option<&Path>) -> Result<RunConfig> {
    let base = RunConfig::preset(preset)?;
    let Some(path) = file else {
        base.validate()?;
        return Ok(base);
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading --config {}", path.display()))?;
    let overrides: Table = toml::from_str(&text).with_context(|| format!("parsing --config {}", path.display()))?;
    let Value::Table(mut merged) = Value::try_from(&base)? else {
        bail!("preset did not serialize to a table");
    };
    merge(&mut merged, overrides);
    let cfg: RunConfig = Value::Table(merged)
        .try_into()
        .with_context(|| format!("--config {}", path.display()))?;
    cfg.validate().with_context(|| format!("--config {}", path.display()))?;
    Ok(cfg)
}

fn merge(base: &mut Table, over: Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(Value::Table(b)), Value::Table(o)) if !is_tagged(&o) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Tagged enums (like the activation) are replaced whole rather than merged.
fn is_tagged(t: &Table) -> bool {
    t.contains_key("kind")
}

pub fn to_toml(cfg: &RunConfig) -> Result<String> {
    Ok(toml::to_string_pretty(cfg)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_override() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "n_clusters = 4\n[sat]\nmax_iters = 3\n").unwrap();
        let cfg = load("desk", Some(&path)).unwrap();
        assert_eq!(cfg.n_clusters, 4);
        assert_eq!(cfg.sat.max_iters, 3);
        assert_eq!(cfg.sat.lr_sd, RunConfig::desk().sat.lr_sd);
    }

    #[test]
    fn round_trip_and_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, to_toml(&RunConfig::paper()).unwrap()).unwrap();
        assert_eq!(load("desk", Some(&path)).unwrap(), RunConfig::paper());
        fs::write(&path, "n_clustrs = 4\n").unwrap();
        assert!(load("desk", Some(&path)).is_err());
    }
}
