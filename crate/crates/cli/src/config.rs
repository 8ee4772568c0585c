//! Run configuration: a TOML file with `[model]` and `[train]` tables,
//! optionally edited by `key=value` overrides from the command line.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sparse_transformer::model::ModelConfig;
use sparse_transformer::training::TrainConfig;
use toml::{Table, Value};

/// Small strided model used when no config file is given.
pub const BUNDLED_SMALL: &str = include_str!("../configs/small.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn bundled_small() -> Self {
        Self::parse(BUNDLED_SMALL, &[]).expect("bundled config parses")
    }

    /// Reads `path` (or the bundled config when `None`) and applies
    /// overrides such as `train.peak_lr=1e-3` or `model.pattern.kind="fixed"`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading {}", p.display()))?;
                Self::parse(&text, overrides).with_context(|| format!("in {}", p.display()))
            }
            None => Self::parse(BUNDLED_SMALL, overrides),
        }
    }

    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: Table = toml::from_str(text)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table.try_into()?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let Some((key, raw)) = spec.split_once('=') else {
        bail!("override '{spec}' is not key=value");
    };
    let value = parse_value(raw.trim());
    let path: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = path.split_last().expect("split yields one part");
    let mut node = table;
    for part in parents {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        node = match entry {
            Value::Table(t) => t,
            _ => bail!("override '{spec}': '{part}' is not a table"),
        };
    }
    node.insert(last.to_string(), value);
    Ok(())
}

/// A TOML value, or a bare string when `raw` is not valid TOML.
fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}
