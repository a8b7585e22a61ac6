//! Service configuration. Precedence, highest first: command-line flag,
//! `OWNLINK_*` environment variable, config file, built-in default.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use ownlink_core::protocol::SystemConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{origin}: {message}")]
    Invalid { origin: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ports {
    pub http: u16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    pub custodians: Vec<String>,
    pub chaff_ratio: f64,
    pub k_default: usize,
    pub seed: u64,
    pub ports: Ports,
    pub bind: String,
    #[serde(default)]
    pub unique_key: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            custodians: vec!["custodian".into()],
            chaff_ratio: 0.5,
            k_default: 5,
            seed: 0,
            ports: Ports { http: 7878 },
            bind: "127.0.0.1".into(),
            unique_key: None,
        }
    }
}

impl ServiceConfig {
    pub fn system_config(&self) -> SystemConfig {
        let names: Vec<&str> = self.custodians.iter().map(String::as_str).collect();
        let mut c = SystemConfig::new(&names, self.seed);
        c.chaff_ratio = self.chaff_ratio;
        c.k_default = self.k_default;
        c.unique_key = self.unique_key.clone();
        c
    }

    fn validate(self) -> Result<Self, ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid { origin: "config".into(), message: m.into() });
        if self.custodians.is_empty() {
            return bad("at least one custodian is required");
        }
        if !(0.0..1.0).contains(&self.chaff_ratio) {
            return bad("chaff_ratio must be in [0, 1)");
        }
        Ok(self)
    }
}

/// Values given on the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub custodians: Option<Vec<String>>,
    pub chaff_ratio: Option<f64>,
    pub k_default: Option<usize>,
    pub seed: Option<u64>,
    pub port: Option<u16>,
    pub bind: Option<String>,
}

impl Overrides {
    fn apply(&self, v: &mut Map<String, Value>) {
        if let Some(c) = &self.custodians {
            v.insert("custodians".into(), c.clone().into());
        }
        if let Some(x) = self.chaff_ratio {
            v.insert("chaff_ratio".into(), x.into());
        }
        if let Some(x) = self.k_default {
            v.insert("k_default".into(), x.into());
        }
        if let Some(x) = self.seed {
            v.insert("seed".into(), x.into());
        }
        if let Some(x) = self.port {
            v.insert("ports".into(), serde_json::json!({ "http": x }));
        }
        if let Some(x) = &self.bind {
            v.insert("bind".into(), x.clone().into());
        }
    }
}

fn env_overrides(env: &dyn Fn(&str) -> Option<String>) -> Result<Overrides, ConfigError> {
    fn num<T: std::str::FromStr>(env: &dyn Fn(&str) -> Option<String>, key: &str) -> Result<Option<T>, ConfigError> {
        env(key)
            .map(|s| {
                s.trim().parse().map_err(|_| ConfigError::Invalid { origin: key.into(), message: format!("cannot parse {s:?}") })
            })
            .transpose()
    }
    Ok(Overrides {
        custodians: env("OWNLINK_CUSTODIANS").map(|s| s.split(',').map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect()),
        chaff_ratio: num(env, "OWNLINK_CHAFF_RATIO")?,
        k_default: num(env, "OWNLINK_K_DEFAULT")?,
        seed: num(env, "OWNLINK_SEED")?,
        port: num(env, "OWNLINK_PORT")?,
        bind: env("OWNLINK_BIND"),
    })
}

/// Resolves the layered configuration. `env` is injected for testability.
pub fn load(
    file: Option<&Path>,
    env: &dyn Fn(&str) -> Option<String>,
    flags: &Overrides,
) -> Result<ServiceConfig, ConfigError> {
    let Value::Object(mut merged) = serde_json::to_value(ServiceConfig::default()).expect("default serializes") else {
        unreachable!()
    };
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let parsed: Value = serde_json::from_str(&text).map_err(|e| ConfigError::Invalid {
            origin: format!("{}:{}", path.display(), e.line()),
            message: e.to_string(),
        })?;
        let Value::Object(obj) = parsed else {
            return Err(ConfigError::Invalid { origin: path.display().to_string(), message: "expected a JSON object".into() });
        };
        for (k, v) in obj {
            merged.insert(k, v);
        }
    }
    env_overrides(env)?.apply(&mut merged);
    flags.apply(&mut merged);
    let config: ServiceConfig = serde_json::from_value(Value::Object(merged))
        .map_err(|e| ConfigError::Invalid { origin: "config".into(), message: e.to_string() })?;
    config.validate()
}
