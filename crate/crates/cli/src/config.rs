//! Run configuration: a base profile, an optional TOML file layered on top,
//! then `key=value` overrides addressed by dotted path.

use std::path::Path;

use anyhow::{bail, Context, Result};
use craft_core::pipeline::RunConfig;
use toml::{Table, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Profile {
    /// Small settings that run the default stream in seconds.
    #[default]
    Desk,
    /// Full-size hyperparameters.
    Full,
}

impl Profile {
    pub fn base(self) -> RunConfig {
        match self {
            Profile::Desk => RunConfig::desk(),
            Profile::Full => RunConfig::default(),
        }
    }
}

fn merge(dst: &mut Table, src: Table) {
    for (k, v) in src {
        match (dst.get_mut(&k), v) {
            (Some(Value::Table(d)), Value::Table(s)) => merge(d, s),
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
}

fn parse_value(raw: &str) -> Value {
    // bare words such as mode names are strings; anything else is TOML
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(root: &mut Table, path: &str, value: Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    let (last, parents) = keys.split_last().context("empty override key")?;
    let mut cur = root;
    for k in parents {
        cur = match cur.get_mut(*k) {
            Some(Value::Table(t)) => t,
            Some(_) => bail!("`{k}` in `{path}` is not a table"),
            None => bail!("unknown config key `{path}`"),
        };
    }
    if !cur.contains_key(*last) {
        bail!("unknown config key `{path}`");
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn to_table(cfg: &RunConfig) -> Result<Table> {
    match Value::try_from(cfg)? {
        Value::Table(t) => Ok(t),
        _ => bail!("configuration did not serialize to a table"),
    }
}

/// Resolve profile, file and overrides into a validated configuration.
pub fn resolve(profile: Profile, file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut table = to_table(&profile.base())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let user: Table = text.parse().with_context(|| format!("parsing {}", path.display()))?;
        merge(&mut table, user);
    }
    for o in overrides {
        let (k, v) = o.split_once('=').with_context(|| format!("override `{o}` is not key=value"))?;
        set_path(&mut table, k.trim(), parse_value(v.trim()))?;
    }
    let cfg: RunConfig = Value::Table(table).try_into().context("invalid configuration")?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn to_toml(cfg: &RunConfig) -> Result<String> {
    Ok(toml::to_string(&to_table(cfg)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_round_trips_through_toml() {
        let cfg = Profile::Desk.base();
        let text = to_toml(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_apply_by_path() {
        let cfg = resolve(
            Profile::Desk,
            None,
            &["router.delta=0.25".into(), "mode=all-in-one".into(), "seeds.data=7".into()],
        )
        .unwrap();
        assert_eq!(cfg.router.delta, 0.25);
        assert_eq!(cfg.mode, craft_core::pipeline::Mode::AllInOne);
        assert_eq!(cfg.seeds.data, 7);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(resolve(Profile::Desk, None, &["router.deltaa=1".into()]).is_err());
        assert!(resolve(Profile::Desk, None, &["train.beta".into()]).is_err());
        assert!(resolve(Profile::Desk, None, &["train.epochs=0".into()]).is_err());
    }
}
