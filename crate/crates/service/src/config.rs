//! Service configuration: a TOML file, then `DLENG_*` environment
//! variables, then command-line flags, each layer overriding the previous.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use dleng::pipeline::LoopConfig;
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    /// Scenario bundle written by `dleng gen`.
    pub data_dir: PathBuf,
    /// Where the served state is persisted; created on first start.
    pub state_dir: PathBuf,
    #[serde(rename = "loop")]
    pub loop_config: LoopConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            data_dir: PathBuf::from("data"),
            state_dir: PathBuf::from("state"),
            loop_config: LoopConfig::default(),
        }
    }
}

/// Environment variables read by [`ServiceConfig::apply_env`].
pub const ENV_VARS: [&str; 6] = [
    "DLENG_BIND",
    "DLENG_DATA_DIR",
    "DLENG_STATE_DIR",
    "DLENG_TAU",
    "DLENG_LAMBDA",
    "DLENG_SEED",
];

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self, ServiceError> {
        toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Applies overrides from `lookup`, normally `std::env::var`.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ServiceError> {
        fn parse<T: std::str::FromStr>(name: &str, value: &str) -> Result<T, ServiceError> {
            value
                .parse()
                .map_err(|_| ServiceError::Config(format!("{name}: cannot parse {value:?}")))
        }
        if let Some(v) = lookup("DLENG_BIND") {
            self.bind = parse("DLENG_BIND", &v)?;
        }
        if let Some(v) = lookup("DLENG_DATA_DIR") {
            self.data_dir = PathBuf::from(v);
        }
        if let Some(v) = lookup("DLENG_STATE_DIR") {
            self.state_dir = PathBuf::from(v);
        }
        if let Some(v) = lookup("DLENG_TAU") {
            self.loop_config.detect.tau = parse("DLENG_TAU", &v)?;
        }
        if let Some(v) = lookup("DLENG_LAMBDA") {
            self.loop_config.continual.lambda = parse("DLENG_LAMBDA", &v)?;
        }
        if let Some(v) = lookup("DLENG_SEED") {
            self.loop_config.seed = parse("DLENG_SEED", &v)?;
        }
        Ok(())
    }

    pub fn apply_process_env(&mut self) -> Result<(), ServiceError> {
        self.apply_env(|k| std::env::var(k).ok())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_overrides_file() {
        let mut c = ServiceConfig::from_toml(
            "bind = \"0.0.0.0:9000\"\nstate_dir = \"/tmp/s\"\n[loop.detect]\ntau = 1.5\n",
        )
        .unwrap();
        assert_eq!(c.loop_config.detect.tau, 1.5);
        c.apply_env(|k| match k {
            "DLENG_TAU" => Some("2.5".into()),
            "DLENG_SEED" => Some("9".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(c.bind.port(), 9000);
        assert_eq!(c.state_dir, PathBuf::from("/tmp/s"));
        assert_eq!(c.loop_config.detect.tau, 2.5);
        assert_eq!(c.loop_config.seed, 9);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ServiceConfig::from_toml("bnd = \"x\"").is_err());
        assert!(ServiceConfig::from_toml("[loop]\nqueryn = 3").is_err());
    }

    #[test]
    fn bad_env_value_rejected() {
        let mut c = ServiceConfig::default();
        assert!(c.apply_env(|k| (k == "DLENG_TAU").then(|| "abc".to_string())).is_err());
    }

    #[test]
    fn default_round_trips_through_toml() {
        let c = ServiceConfig::default();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(ServiceConfig::from_toml(&text).unwrap(), c);
    }
}
