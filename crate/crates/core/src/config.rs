//! Experiment configuration: one TOML file plus dotted-key overrides.
//!
//! ```toml
//! seed = 7
//! [data]
//! patch_size = 64
//! [weak.radii]
//! lo = 3
//! hi = 15
//! [train]
//! max_steps = 600
//! ablation.no_self_sup = true
//! ```
//!
//! Precedence is override > file > built-in default. The root `seed` is
//! copied into the corpus and training seeds; every random stream derives
//! from those.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::synthgen::CorpusConfig;
use crate::trainer::TrainConfig;
use crate::weaklabel::WeakConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: CorpusConfig,
    pub weak: WeakConfig,
    pub train: TrainConfig,
}

/// Parses `a.b.c=value`. The value is read as a TOML literal and falls back
/// to a bare string, so `train.lr_seg=3e-4` and `name=foo` both work.
pub fn parse_override(s: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = s.split_once('=').ok_or_else(|| Error::Config(format!("override `{s}` is not of the form key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(|p| p.trim().to_string()).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override `{s}` has an empty key segment")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((path, value))
}

fn set_path(table: &mut Table, path: &[String], value: Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.clone()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{}` is not a table", path.join("."))))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Builds a config from TOML text (possibly empty) and overrides.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: Table = text.parse().map_err(|e| Error::Config(format!("config: {e}")))?;
        for o in overrides {
            let (path, value) = parse_override(o)?;
            set_path(&mut table, &path, value)?;
        }
        let mut cfg: Self = table.try_into().map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.data.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.weak.radii.validate()?;
        self.train.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config: {e}")))
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:x}", Sha256::digest(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let c = ExperimentConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn overrides_beat_file_values() {
        let text = "seed = 3\n[train]\nlr_seg = 0.01\nbatch_size = 4\n";
        let c = ExperimentConfig::from_toml_str(text, &["train.lr_seg=5e-4".into(), "train.ablation.no_os_d=true".into()]).unwrap();
        assert_eq!(c.train.lr_seg, 5e-4);
        assert_eq!(c.train.batch_size, 4);
        assert!(c.train.ablation.no_os_d);
        assert_eq!((c.seed, c.data.seed, c.train.seed), (3, 3, 3));
        assert_eq!(c.train.n_critic, TrainConfig::default().n_critic);
    }

    #[test]
    fn shipped_desk_config_loads() {
        let c = ExperimentConfig::from_toml_str(include_str!("../../../configs/desk.toml"), &[]).unwrap();
        assert_eq!((c.data.patch_size, c.train.r3, c.train.k), (64, 8, Some(10)));
        assert_eq!(c.weak.radii, c.train.radii);
        assert_eq!(c.train.weights.adv, 1e-3);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(ExperimentConfig::from_toml_str("[train]\nlr = 1\n", &[]), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml_str("", &["train.batch_size=0".into()]), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml_str("", &["seed".into()]), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml_str("", &["seed.x=1".into()]), Err(Error::Config(_))));
    }

    #[test]
    fn round_trips_through_toml() {
        let c = ExperimentConfig::from_toml_str("", &["data.patch_size=64".into(), "train.k=10".into()]).unwrap();
        let back = ExperimentConfig::from_toml_str(&c.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let other = ExperimentConfig::from_toml_str("", &["train.k=11".into()]).unwrap();
        assert_ne!(other.hash(), c.hash());
    }

    #[test]
    fn bare_words_become_strings() {
        let (path, v) = parse_override("a.b = hello").unwrap();
        assert_eq!(path, ["a", "b"]);
        assert_eq!(v, Value::String("hello".into()));
        assert_eq!(parse_override("x=[1, 2]").unwrap().1, Value::Array(vec![Value::Integer(1), Value::Integer(2)]));
    }
}
