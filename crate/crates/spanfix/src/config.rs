//! TOML configuration with environment overrides.
//!
//! Precedence is CLI flag > environment > file > built-in default. Relative
//! paths are resolved against the directory of the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;
use spanfix_client::{GenParams, RetryPolicy};
use spanfix_core::run::DetectorRef;
use spanfix_core::scoring::{BucketConfig, PenaltyWeights};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid value for {key}: {message}")]
    Invalid { key: String, message: String },
    #[error("{key}: path {path} does not exist")]
    MissingPath { key: String, path: PathBuf },
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    Openai,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockFallback {
    Synthesize,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub base_url: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub max_in_flight: usize,
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub stop: Vec<String>,
    /// JSONL of `{"id", "reply"}` records replayed by the mock backend.
    pub mock_replies: Option<PathBuf>,
    pub mock_fallback: MockFallback,
    pub audit_log: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        let gen = GenParams::default();
        Self {
            kind: BackendKind::Mock,
            base_url: "http://127.0.0.1:8000/v1".into(),
            api_key_env: None,
            timeout_secs: 60.0,
            max_retries: 3,
            max_in_flight: 4,
            model_id: gen.model_id,
            temperature: gen.temperature,
            max_tokens: gen.max_tokens,
            stop: gen.stop,
            mock_replies: None,
            mock_fallback: MockFallback::Synthesize,
            audit_log: None,
        }
    }
}

impl BackendConfig {
    pub fn gen_params(&self) -> GenParams {
        GenParams {
            model_id: self.model_id.clone(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            stop: self.stop.clone(),
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    pub fn retry(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            ..RetryPolicy::default()
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 {
            return Err(invalid("backend.timeout_secs", "must be > 0"));
        }
        if self.max_in_flight == 0 {
            return Err(invalid("backend.max_in_flight", "must be >= 1"));
        }
        self.gen_params().validate().map_err(|m| invalid("backend", m))
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    pub cuts: [f64; 4],
    pub minor: f64,
    pub major: f64,
    pub critical: f64,
    pub cap: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        let w = PenaltyWeights::default();
        Self {
            cuts: BucketConfig::default().cuts,
            minor: w.minor,
            major: w.major,
            critical: w.critical,
            cap: w.cap,
        }
    }
}

impl ScoringConfig {
    pub fn buckets(&self) -> Result<BucketConfig, ConfigError> {
        BucketConfig::new(self.cuts).map_err(|e| invalid("scoring.cuts", e.to_string()))
    }

    pub fn weights(&self) -> Result<PenaltyWeights, ConfigError> {
        let w = PenaltyWeights {
            minor: self.minor,
            major: self.major,
            critical: self.critical,
            cap: self.cap,
        };
        w.validate().map_err(|e| invalid("scoring", e.to_string()))?;
        Ok(w)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub k: usize,
    pub use_reference: bool,
    /// Extra or overriding language-code → name entries.
    pub language_names: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub cache_dir: Option<PathBuf>,
    pub demo_bank: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorersConfig {
    /// Referenceless QE endpoint used for routing and win rates.
    pub qe_endpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    pub cors_origin: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            cors_origin: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub backend: BackendConfig,
    pub detector: Option<DetectorRef>,
    pub scoring: ScoringConfig,
    pub prompt: PromptConfig,
    pub paths: PathsConfig,
    pub scorers: ScorersConfig,
    pub service: ServiceConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 1,
            backend: BackendConfig::default(),
            detector: None,
            scoring: ScoringConfig::default(),
            prompt: PromptConfig::default(),
            paths: PathsConfig::default(),
            scorers: ScorersConfig::default(),
            service: ServiceConfig::default(),
        }
    }
}

/// Environment variables read by [`Config::apply_env`].
pub const ENV_VARS: &[&str] = &[
    "SPANFIX_SEED",
    "SPANFIX_BACKEND",
    "SPANFIX_BASE_URL",
    "SPANFIX_MODEL_ID",
    "SPANFIX_MAX_IN_FLIGHT",
    "SPANFIX_MAX_RETRIES",
    "SPANFIX_TIMEOUT_SECS",
    "SPANFIX_CACHE_DIR",
    "SPANFIX_DEMO_BANK",
    "SPANFIX_QE_ENDPOINT",
];

fn parse_env<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| invalid(key, e.to_string()))
}

impl Config {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Loads `path` (or defaults when `None`), applies environment overrides
    /// from `env`, resolves relative paths and validates.
    pub fn load(path: Option<&Path>, env: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        let (mut config, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.to_path_buf(),
                    source,
                })?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (Self::from_toml(&text, p)?, base)
            }
            None => (Self::default(), PathBuf::new()),
        };
        config.resolve_paths(&base);
        config.apply_env(env)?;
        config.validate()?;
        Ok(config)
    }

    pub fn apply_env(&mut self, env: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        for &key in ENV_VARS {
            let Some(value) = env(key) else { continue };
            match key {
                "SPANFIX_SEED" => self.seed = parse_env(key, &value)?,
                "SPANFIX_BACKEND" => {
                    self.backend.kind = match value.as_str() {
                        "mock" => BackendKind::Mock,
                        "openai" => BackendKind::Openai,
                        other => return Err(invalid(key, format!("unknown backend {other:?}"))),
                    }
                }
                "SPANFIX_BASE_URL" => self.backend.base_url = value,
                "SPANFIX_MODEL_ID" => self.backend.model_id = value,
                "SPANFIX_MAX_IN_FLIGHT" => self.backend.max_in_flight = parse_env(key, &value)?,
                "SPANFIX_MAX_RETRIES" => self.backend.max_retries = parse_env(key, &value)?,
                "SPANFIX_TIMEOUT_SECS" => self.backend.timeout_secs = parse_env(key, &value)?,
                "SPANFIX_CACHE_DIR" => self.paths.cache_dir = Some(PathBuf::from(value)),
                "SPANFIX_DEMO_BANK" => self.paths.demo_bank = Some(PathBuf::from(value)),
                "SPANFIX_QE_ENDPOINT" => self.scorers.qe_endpoint = Some(value),
                _ => {}
            }
        }
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.paths.cache_dir);
        fix(&mut self.paths.demo_bank);
        fix(&mut self.paths.dataset);
        fix(&mut self.backend.mock_replies);
        fix(&mut self.backend.audit_log);
        if let Some(DetectorRef::HumanFile { path }) = &mut self.detector {
            let p = Path::new(path.as_str());
            if p.is_relative() {
                *path = base.join(p).to_string_lossy().into_owned();
            }
        }
    }

    /// Checks values and that every input path exists.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.backend.validate()?;
        self.scoring.buckets()?;
        self.scoring.weights()?;
        if ![0, 1, 5].contains(&self.prompt.k) {
            return Err(invalid("prompt.k", format!("must be 0, 1 or 5, got {}", self.prompt.k)));
        }
        let must_exist = [
            ("paths.demo_bank", self.paths.demo_bank.as_deref()),
            ("paths.dataset", self.paths.dataset.as_deref()),
            ("backend.mock_replies", self.backend.mock_replies.as_deref()),
        ];
        for (key, path) in must_exist {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(ConfigError::MissingPath {
                        key: key.into(),
                        path: p.to_path_buf(),
                    });
                }
            }
        }
        match &self.detector {
            Some(DetectorRef::HumanFile { path }) if !Path::new(path).exists() => {
                return Err(ConfigError::MissingPath {
                    key: "detector.path".into(),
                    path: PathBuf::from(path),
                })
            }
            Some(DetectorRef::QeService { endpoint, .. }) if endpoint.is_empty() => {
                return Err(invalid("detector.endpoint", "qe_service requires an endpoint"))
            }
            _ => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_env(_: &str) -> Option<String> {
        None
    }

    #[test]
    fn defaults_are_valid() {
        let c = Config::load(None, no_env).unwrap();
        assert_eq!(c.backend.kind, BackendKind::Mock);
        assert_eq!(c.backend.temperature, 0.0);
        assert_eq!(c.prompt.k, 0);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = Config::from_toml("seed = 1\nbogus = 2\n", Path::new("c.toml")).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err = Config::from_toml("[backend]\nmodel = \"x\"\n", Path::new("c.toml")).unwrap_err();
        assert!(err.to_string().contains("model"), "{err}");
    }

    #[test]
    fn env_overrides_file() {
        let mut c = Config::from_toml("seed = 3\n[backend]\nmodel_id = \"file\"\n", Path::new("c.toml")).unwrap();
        c.apply_env(|k| match k {
            "SPANFIX_SEED" => Some("9".into()),
            "SPANFIX_MODEL_ID" => Some("env".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!((c.seed, c.backend.model_id.as_str()), (9, "env"));
        assert!(c.apply_env(|k| (k == "SPANFIX_SEED").then(|| "x".to_string())).is_err());
    }

    #[test]
    fn detector_table_parses() {
        let c = Config::from_toml(
            "[detector]\nkind = \"qe_service\"\nendpoint = \"http://h/score\"\nuse_reference = true\n",
            Path::new("c.toml"),
        )
        .unwrap();
        assert_eq!(
            c.detector,
            Some(DetectorRef::QeService {
                endpoint: "http://h/score".into(),
                use_reference: true
            })
        );
    }

    #[test]
    fn bad_values_rejected() {
        let mut c = Config::default();
        c.prompt.k = 3;
        assert!(c.validate().is_err());
        let mut c = Config::default();
        c.scoring.cuts = [0.5, 0.4, 0.8, 0.9];
        assert!(c.validate().is_err());
        let mut c = Config::default();
        c.paths.demo_bank = Some("/nonexistent/demos.jsonl".into());
        assert!(matches!(c.validate(), Err(ConfigError::MissingPath { .. })));
    }
}
