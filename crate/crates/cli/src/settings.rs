use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use exemplar_core::backend::{Backend, BackendConfig, CachedBackend, HttpBackend, MockBackend, ScoreMode, SimulatedLatency};
use exemplar_core::prompting::PromptTemplate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{usage, GlobalArgs};

pub const ENV_BASE_URL: &str = "BACKEND_BASE_URL";
pub const ENV_API_KEY: &str = "BACKEND_API_KEY";

const DEFAULT_OUT_DIR: &str = "out";
const DEFAULT_PARALLEL: usize = 4;

/// Virtual clock of the CLI's mock backend.
pub const MOCK_LATENCY: SimulatedLatency = SimulatedLatency {
    base: Duration::from_millis(20),
    per_token: Duration::from_millis(1),
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Mock,
}

/// Contents of a `--config` file; every field optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub backend: Option<BackendKind>,
    pub base_url: Option<String>,
    pub model_name: Option<String>,
    pub api_key: Option<String>,
    pub template: Option<PathBuf>,
    pub seed: Option<u64>,
    pub parallel: Option<usize>,
    pub cache: Option<PathBuf>,
    pub mock_table: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub request_timeout_secs: Option<f64>,
    pub max_retries: Option<u32>,
    pub score_mode: Option<ScoreMode>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))
    }
}

/// Fully resolved options of one run.
#[derive(Debug, Clone, Serialize)]
pub struct Settings {
    pub backend: BackendKind,
    /// `api_key` is never serialized.
    #[serde(serialize_with = "redacted")]
    pub backend_config: BackendConfig,
    pub template_path: Option<PathBuf>,
    pub template: PromptTemplate,
    pub seed: u64,
    pub mock_table: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub keep_going: bool,
}

fn redacted<S: serde::Serializer>(c: &BackendConfig, s: S) -> std::result::Result<S::Ok, S::Error> {
    let mut c = c.clone();
    c.api_key = c.api_key.map(|_| "<set>".to_string());
    c.serialize(s)
}

impl Settings {
    /// Layers flags over environment over config file over defaults. `env`
    /// is a lookup so tests need not touch the process environment.
    pub fn resolve(flags: &GlobalArgs, env: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let file = match &flags.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        let defaults = BackendConfig::default();
        let backend = flags.backend.or(file.backend).unwrap_or(BackendKind::Http);
        let parallel = flags.parallel.or(file.parallel).unwrap_or(DEFAULT_PARALLEL);
        if parallel == 0 {
            return Err(usage("--parallel must be at least 1"));
        }
        let backend_config = BackendConfig {
            base_url: flags
                .base_url
                .clone()
                .or_else(|| env(ENV_BASE_URL))
                .or(file.base_url)
                .unwrap_or(defaults.base_url),
            model_name: flags.model_name.clone().or(file.model_name).unwrap_or(defaults.model_name),
            api_key: env(ENV_API_KEY).or(file.api_key),
            request_timeout: file
                .request_timeout_secs
                .map(Duration::from_secs_f64)
                .unwrap_or(defaults.request_timeout),
            max_in_flight: parallel,
            max_retries: file.max_retries.unwrap_or(defaults.max_retries),
            cache_path: flags.cache.clone().or(file.cache),
            score_mode: file.score_mode.unwrap_or(defaults.score_mode),
            ..defaults
        };
        let template_path = flags.template.clone().or(file.template);
        let template = match &template_path {
            Some(p) => PromptTemplate::load(p).with_context(|| format!("loading template {}", p.display()))?,
            None => PromptTemplate::default(),
        };
        Ok(Settings {
            backend,
            backend_config,
            template_path,
            template,
            seed: flags.seed.or(file.seed).unwrap_or(0),
            mock_table: flags.mock_table.clone().or(file.mock_table),
            out_dir: flags.out_dir.clone().or(file.out_dir).unwrap_or_else(|| DEFAULT_OUT_DIR.into()),
            keep_going: flags.keep_going,
        })
    }

    /// sha256 of the resolved settings, secrets excluded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("settings serialize");
        hex::encode(Sha256::digest(&json))
    }

    pub fn build_backend(&self) -> Result<Box<dyn Backend>> {
        let inner: Box<dyn Backend> = match self.backend {
            BackendKind::Mock => {
                let mut mock = MockBackend::new()
                    .with_hashed_scores()
                    .with_latency(MOCK_LATENCY)
                    .with_max_in_flight(self.backend_config.max_in_flight);
                if let Some(table) = &self.mock_table {
                    mock = mock.with_table_file(table).with_context(|| format!("loading {}", table.display()))?;
                }
                Box::new(mock)
            }
            BackendKind::Http => {
                if self.mock_table.is_some() {
                    return Err(usage("--mock-table needs --backend mock"));
                }
                Box::new(HttpBackend::new(self.backend_config.clone())?)
            }
        };
        Ok(match &self.backend_config.cache_path {
            Some(path) => Box::new(
                CachedBackend::open(inner, path).with_context(|| format!("opening cache {}", path.display()))?,
            ),
            None => inner,
        })
    }
}
