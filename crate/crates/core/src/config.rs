//! Declarative run configuration (TOML).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{EmbedSpec, TextGenSpec};
use crate::ingest::{BenchmarkFormat, DEFAULT_SAMPLE_ROWS};
use crate::paragen::GenConfig;
use crate::semantic::FilterConfig;
use crate::sqlexec::ExecLimits;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub name: String,
    pub path: String,
    pub format: BenchmarkFormat,
    #[serde(default)]
    pub release_tag: Option<String>,
    #[serde(default = "default_sample_rows")]
    pub sample_rows: usize,
}

fn default_sample_rows() -> usize {
    DEFAULT_SAMPLE_ROWS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParseSpec {
    /// Directory of `*.conllu` files covering the paraphrase sets.
    pub dir: String,
}

/// An evaluated NL2SQL model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(flatten)]
    pub client: TextGenSpec,
    #[serde(default)]
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_resamples")]
    pub bootstrap_resamples: usize,
    pub cache_dir: String,
    pub output_dir: String,
    #[serde(default)]
    pub workers: Option<usize>,
    /// Re-send model requests whose failure is recorded in the cache.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub retry_failed_calls: bool,
    /// Ranks for which length and Jaccard histograms are emitted.
    #[serde(default = "default_report_ranks")]
    pub report_ranks: Vec<usize>,
    pub benchmark: BenchmarkSpec,
    pub parses: ParseSpec,
    pub generator: TextGenSpec,
    #[serde(default)]
    pub generation: GenConfig,
    pub models: Vec<ModelSpec>,
    pub embedder: EmbedSpec,
    pub filter: FilterConfig,
    #[serde(default)]
    pub execution: ExecLimits,
    /// Directory relative paths resolve against; the config file's parent.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_resamples() -> usize {
    100
}

fn default_report_ranks() -> Vec<usize> {
    vec![1, 5, 10]
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config: RunConfig = toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        config.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut config: RunConfig = toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: base_dir.join("<inline>"),
            source,
        })?;
        config.base_dir = base_dir.to_path_buf();
        config.validate()?;
        Ok(config)
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        self.base_dir.join(p)
    }

    pub fn benchmark_dir(&self) -> PathBuf {
        self.resolve(&self.benchmark.path)
    }

    pub fn parse_dir(&self) -> PathBuf {
        self.resolve(&self.parses.dir)
    }

    pub fn cache_path(&self) -> PathBuf {
        self.resolve(&self.cache_dir)
    }

    pub fn output_path(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.bootstrap_resamples == 0 {
            return invalid("bootstrap_resamples must be at least 1".into());
        }
        if self.models.is_empty() {
            return invalid("at least one [[models]] entry is required".into());
        }
        let mut ids: Vec<&str> = self.models.iter().map(|m| m.client.model_id()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return invalid(format!("model_id {} is listed twice", w[0]));
        }
        if self.workers == Some(0) {
            return invalid("workers must be at least 1".into());
        }
        if self.report_ranks.contains(&0) {
            return invalid("report_ranks start at 1".into());
        }
        self.generation
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.filter
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.execution.timeout_secs.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater)
            || self.execution.row_cap == 0
        {
            return invalid("execution limits must be positive".into());
        }
        for (what, p) in [
            ("benchmark.path", self.benchmark_dir()),
            ("parses.dir", self.parse_dir()),
        ] {
            if !p.is_dir() {
                return invalid(format!("{what} {} is not a directory", p.display()));
            }
        }
        let mut scripts: Vec<(&str, &str)> = Vec::new();
        for spec in std::iter::once(&self.generator).chain(self.models.iter().map(|m| &m.client)) {
            if let TextGenSpec::Scripted { model_id, script } = spec {
                scripts.push((model_id, script));
            }
        }
        if let EmbedSpec::Fixture { model_id, path } = &self.embedder {
            scripts.push((model_id, path));
        }
        for (model_id, p) in scripts {
            if !self.resolve(p).is_file() {
                return invalid(format!("{model_id}: file {p} does not exist"));
            }
        }
        Ok(())
    }
}
