use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, ValueEnum};
use phyreward::judge::{CachedBackend, ChatBackend, JudgeClient, JudgeConfig};

use crate::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum JudgeKind {
    /// Deterministic rule-based stub; no network.
    Offline,
    /// OpenAI-compatible chat endpoint.
    Live,
}

#[derive(Debug, Args)]
pub struct JudgeArgs {
    #[arg(long, value_enum, default_value_t = JudgeKind::Offline)]
    pub judge: JudgeKind,
    /// TOML file with judge settings; flags below override it.
    #[arg(long)]
    pub judge_config: Option<PathBuf>,
    /// Base URL of the judge server. The bearer token is read from the
    /// variable named by `api_key_env` (JUDGE_API_KEY by default).
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Jury size (odd).
    #[arg(long)]
    pub n_judges: Option<usize>,
    /// Directory for cached judge replies (live judge only).
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
}

impl JudgeArgs {
    pub fn config(&self) -> CliResult<JudgeConfig> {
        let mut cfg = match &self.judge_config {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                toml::from_str(&text)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
            }
            None => JudgeConfig::default(),
        };
        if let Some(e) = &self.endpoint {
            cfg.endpoint_url = e.clone();
        }
        if let Some(m) = &self.model {
            cfg.model_name = m.clone();
        }
        if let Some(n) = self.n_judges {
            cfg.n_judges = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn client(&self) -> CliResult<JudgeClient> {
        let cfg = self.config()?;
        match self.judge {
            JudgeKind::Offline => {
                if self.cache_dir.is_some() {
                    log::warn!("--cache-dir has no effect with the offline judge");
                }
                Ok(JudgeClient::offline(cfg)?)
            }
            JudgeKind::Live => {
                let http = cfg.http_backend()?;
                log::info!("judge {} at {}", cfg.model_name, http.url());
                let backend: Arc<dyn ChatBackend> = match &self.cache_dir {
                    Some(dir) => Arc::new(CachedBackend::new(http, dir)?),
                    None => Arc::new(http),
                };
                Ok(JudgeClient::new(backend, cfg)?)
            }
        }
    }
}
