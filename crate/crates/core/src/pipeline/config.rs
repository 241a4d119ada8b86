//! Pipeline settings: a TOML file plus `HYDROCLEAN_` environment overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detect::{MuiBand, QuantParams, SpikeParams};
use crate::ingestion::JoinTier;
use crate::integrity::ConflictPolicy;
use crate::repair::MuiSearch;

use super::PipelineError;

pub const ENV_PREFIX: &str = "HYDROCLEAN_";

/// Environment names under the prefix that are not settings.
const RESERVED: [&str; 3] = ["CONFIG", "CRASH", "LOG"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    pub amid: PathBuf,
    pub mind: PathBuf,
    pub bild: PathBuf,
}

impl Default for Inputs {
    fn default() -> Self {
        Inputs { amid: "amid.csv".into(), mind: "mind.csv".into(), bild: "bild.csv".into() }
    }
}

impl Inputs {
    /// The three standard file names inside `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        let d = Inputs::default();
        Inputs { amid: dir.join(d.amid), mind: dir.join(d.mind), bild: dir.join(d.bild) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PeakConfig {
    pub windows: Vec<i64>,
    pub top_k: usize,
    pub compensate_gaps: bool,
}

impl Default for PeakConfig {
    fn default() -> Self {
        PeakConfig { windows: vec![24, 168], top_k: 100, compensate_gaps: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub store: PathBuf,
    pub inputs: Inputs,
    pub join_tier: JoinTier,
    pub conflict_policy: ConflictPolicy,
    pub spikes: SpikeParams,
    pub quantized: QuantParams,
    pub mui: MuiBand,
    pub search: MuiSearch,
    pub peaks: PeakConfig,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            store: "hydroclean-store".into(),
            inputs: Inputs::default(),
            join_tier: JoinTier::ManualPartial,
            conflict_policy: ConflictPolicy::default(),
            spikes: SpikeParams::default(),
            quantized: QuantParams::default(),
            mui: MuiBand::default(),
            search: MuiSearch::default(),
            peaks: PeakConfig::default(),
            threads: 0,
        }
    }
}

impl Config {
    /// Reads `path` (if any), then applies overrides from the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self, PipelineError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_parts(&text, std::env::vars())
    }

    /// `text` is TOML; `env` holds `(name, value)` pairs, of which only
    /// `HYDROCLEAN_*` names are used. `__` separates nested keys, so
    /// `HYDROCLEAN_SPIKES__THETA=12` sets `spikes.theta`.
    pub fn from_parts(text: &str, env: impl IntoIterator<Item = (String, String)>) -> Result<Self, PipelineError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?;
        let mut vars: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        vars.sort();
        for (name, value) in vars {
            let rest = &name[ENV_PREFIX.len()..];
            if RESERVED.iter().any(|r| rest == *r || rest.starts_with(&format!("{r}_"))) {
                continue;
            }
            let path: Vec<String> = rest.split("__").map(|s| s.to_ascii_lowercase()).collect();
            set_path(&mut table, &path, parse_scalar(&value))?;
        }
        let cfg: Config =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if !self.mui.is_valid() {
            return bad("mui.clean_below must be below mui.dirty_above");
        }
        if self.peaks.windows.iter().any(|w| *w < 1) || self.peaks.top_k == 0 {
            return bad("peak windows and top_k must be positive");
        }
        if self.search.factors.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return bad("search factors must be positive");
        }
        if !(self.spikes.theta > 1.0) {
            return bad("spikes.theta must exceed 1");
        }
        Ok(())
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<(), PipelineError> {
    let (last, parents) = path.split_last().ok_or_else(|| PipelineError::Config("empty override name".into()))?;
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| PipelineError::Config(format!("`{p}` is not a table")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}
