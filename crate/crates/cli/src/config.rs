use std::fs;
use std::path::{Path, PathBuf};

use gmail_core::data::WorldConfig;
use gmail_core::train::TrainConfig;
use serde::Deserialize;
use serde_json::{Map, Value};

use crate::Failure;

pub const SEED_ENV: &str = "GMAIL_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
pub enum Profile {
    #[serde(rename = "paper-defaults")]
    PaperDefaults,
    #[default]
    #[serde(rename = "desk")]
    Desk,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    profile: Profile,
    #[serde(default)]
    world: WorldConfig,
    /// Field overrides on top of the profile's training config.
    #[serde(default)]
    train: Map<String, Value>,
    out_dir: Option<PathBuf>,
}

/// Everything a command needs, resolved from the config file, the profile
/// and the environment.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub profile: Profile,
    pub world: WorldConfig,
    pub train: TrainConfig,
    pub out_dir: Option<PathBuf>,
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, Failure> {
        let raw: RawConfig =
            serde_json::from_str(text).map_err(|e| Failure::config(format!("config: {e}")))?;
        let base = match raw.profile {
            Profile::PaperDefaults => TrainConfig::paper_defaults(),
            Profile::Desk => TrainConfig::desk(),
        };
        let mut value = serde_json::to_value(&base).map_err(|e| Failure::config(e.to_string()))?;
        merge(&mut value, Value::Object(raw.train));
        let train: TrainConfig = serde_json::from_value(value)
            .map_err(|e| Failure::config(format!("config.train: {e}")))?;
        let mut cfg = Self {
            profile: raw.profile,
            world: raw.world,
            train,
            out_dir: raw.out_dir,
        };
        if let Ok(s) = std::env::var(SEED_ENV) {
            let seed: u64 = s
                .trim()
                .parse()
                .map_err(|_| Failure::config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
            log::info!("{SEED_ENV}={seed} overrides the config seeds");
            cfg.world.seed = seed;
            cfg.train.seed = seed;
        }
        cfg.world.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::io(format!("reading {}: {e}", path.display())))?;
        let cfg = Self::parse(&text)?;
        log::info!(
            "{}: profile {:?}, world seed {}, train seed {}",
            path.display(),
            cfg.profile,
            cfg.world.seed,
            cfg.train.seed
        );
        Ok(cfg)
    }

    pub fn out_dir(&self, flag: Option<&Path>) -> Result<PathBuf, Failure> {
        flag.map(Path::to_path_buf)
            .or_else(|| self.out_dir.clone())
            .ok_or_else(|| Failure::config("no output directory: pass --out or set out_dir".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_with_nested_override() {
        let cfg = RunConfig::parse(
            r#"{"profile": "desk", "train": {"lr": 0.002, "steps": {"align": 10}}, "world": {"n_concepts": 4}}"#,
        )
        .unwrap();
        assert_eq!(cfg.train.lr, 0.002);
        assert_eq!(cfg.train.steps.align, 10);
        assert_eq!(cfg.train.steps.pretrain, 500);
        assert_eq!(cfg.world.n_concepts, 4);
        assert_eq!(cfg.world.real_dim, 64);
    }

    #[test]
    fn paper_profile_defaults() {
        let cfg = RunConfig::parse(r#"{"profile": "paper-defaults"}"#).unwrap();
        assert_eq!(cfg.train, TrainConfig::paper_defaults());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            r#"{"profile": "desk", "bogus": 1}"#,
            r#"{"train": {"learning_rate": 0.1}}"#,
            r#"{"train": {"steps": {"phase_b": 3}}}"#,
            r#"{"world": {"concepts": 3}}"#,
            r#"{"profile": "huge"}"#,
        ] {
            let err = RunConfig::parse(text).unwrap_err();
            assert_eq!(err.code, 2, "{text}");
        }
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let err = RunConfig::parse(r#"{"world": {"n_concepts": 1}}"#).unwrap_err();
        assert_eq!(err.code, 2);
        assert!(err.message.contains("n_concepts"), "{}", err.message);
        let err = RunConfig::parse(r#"{"train": {"temperature": -1.0}}"#).unwrap_err();
        assert_eq!(err.code, 2);
    }
}
