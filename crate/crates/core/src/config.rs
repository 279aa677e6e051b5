//! One JSON document configures a whole run. Every section and key is
//! optional and falls back to its default; unknown keys are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::net::NetConfig;
use crate::train::TrainConfig;

/// File name of the resolved config written next to run outputs.
pub const ECHO_FILE: &str = "config.resolved.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Parses and validates; errors name the offending key path.
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config { path: if path == "." { "<root>".into() } else { path }, reason: e.into_inner().to_string() }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        self.eval
            .check()
            .map_err(|(k, reason)| Error::Config { path: format!("eval.{k}"), reason })?;
        if self.data.image_size != self.net.image_size {
            return Err(Error::Config {
                path: "net.image_size".into(),
                reason: format!("{} differs from data.image_size {}", self.net.image_size, self.data.image_size),
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the fully resolved config into `dir`.
    pub fn write_echo(&self, dir: &Path) -> Result<()> {
        let path = dir.join(ECHO_FILE);
        std::fs::write(&path, self.to_json() + "\n").map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_all_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.net.image_size, cfg.data.image_size);
    }

    #[test]
    fn errors_carry_key_paths() {
        let path = |s: &str| match RunConfig::from_json(s) {
            Err(Error::Config { path, .. }) => path,
            other => panic!("{other:?}"),
        };
        assert_eq!(path(r#"{"train":{"margin":-1}}"#), "train.margin");
        assert_eq!(path(r#"{"train":{"weights":{"w_zz":1}}}"#), "train.weights.w_zz");
        assert_eq!(path(r#"{"net":{"embedding_dim":"big"}}"#), "net.embedding_dim");
        assert_eq!(path(r#"{"nope":1}"#), "nope");
        assert_eq!(path("3"), "<root>");
        assert_eq!(path(r#"{"net":{"image_size":32}}"#), "net.image_size");
        assert_eq!(path(r#"{"eval":{"ranks":[]}}"#), "eval.ranks");
    }

    #[test]
    fn resolved_echo_round_trips() {
        let cfg = RunConfig::from_json(r#"{"train":{"margin":0.7,"weights":{"w_tv":0.1}},"data":{"image_size":32},"net":{"image_size":32,"backbone_stages":3}}"#).unwrap();
        let dir = tempfile::tempdir().unwrap();
        cfg.write_echo(dir.path()).unwrap();
        assert_eq!(RunConfig::load(&dir.path().join(ECHO_FILE)).unwrap(), cfg);
    }
}
