//! Engine configuration: a flat TOML document plus environment overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

pub const DATA_DIR_ENV: &str = "PAIRKB_DATA_DIR";
pub use pairkb_core::providers::ENCODER_URL_ENV;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// Where relative knowledge-base paths are looked up, and what `serve` scans.
    pub data_dir: Option<PathBuf>,
    /// Pair-strategy weight when a command does not pass one.
    pub default_w: f64,
    pub exact_threshold: usize,
    pub overfetch: usize,
    /// Clustered-index defaults; `n_clusters` falls back to `sqrt(N)`.
    pub n_clusters: Option<usize>,
    pub n_probe: Option<usize>,
    pub encoder_url: Option<String>,
    pub captioner_url: Option<String>,
    pub provider_timeout_ms: u64,
    pub max_in_flight: usize,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            default_w: pairkb_core::retrieval::DEFAULT_WEIGHT,
            exact_threshold: pairkb_core::retrieval::DEFAULT_EXACT_THRESHOLD,
            overfetch: pairkb_core::retrieval::DEFAULT_OVERFETCH,
            n_clusters: None,
            n_probe: None,
            encoder_url: None,
            captioner_url: None,
            provider_timeout_ms: 30_000,
            max_in_flight: 8,
            seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(text).context("invalid config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` if given, then applies environment overrides.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                Self::parse(&text)?
            }
            None => Self::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok());
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) {
        if let Some(dir) = var(DATA_DIR_ENV).filter(|s| !s.is_empty()) {
            self.data_dir = Some(dir.into());
        }
        if let Some(url) = var(ENCODER_URL_ENV).filter(|s| !s.is_empty()) {
            self.encoder_url = Some(url);
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if !(0.0..=1.0).contains(&self.default_w) {
            bail!("default_w = {} is outside [0, 1]", self.default_w);
        }
        if self.overfetch == 0 {
            bail!("overfetch must be at least 1");
        }
        if self.n_clusters == Some(0) {
            bail!("n_clusters must be at least 1");
        }
        if self.n_probe == Some(0) {
            bail!("n_probe must be at least 1");
        }
        if let (Some(c), Some(p)) = (self.n_clusters, self.n_probe) {
            if p > c {
                bail!("n_probe {p} exceeds n_clusters {c}");
            }
        }
        if self.max_in_flight == 0 {
            bail!("max_in_flight must be at least 1");
        }
        Ok(())
    }

    /// `path` as given if it exists, otherwise under `data_dir`.
    pub fn resolve(&self, path: &Path) -> PathBuf {
        match &self.data_dir {
            Some(dir) if path.is_relative() && !path.exists() => dir.join(path),
            _ => path.to_path_buf(),
        }
    }

    pub fn provider_timeout(&self) -> std::time::Duration {
        std::time::Duration::from_millis(self.provider_timeout_ms)
    }
}
