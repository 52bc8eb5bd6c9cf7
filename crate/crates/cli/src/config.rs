use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use asag_core::embeddings::{EmbeddingBackend, HashedBagOfWords, MockEmbedder, DEFAULT_MOCK_DIMENSION};
use asag_core::llm::openai::{DEFAULT_API_KEY_ENV, DEFAULT_BASE_URL, DEFAULT_EMBEDDING_MODEL};
use asag_core::llm::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::Invalid;

pub const CONVENTIONAL_PATH: &str = "asag.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedderKind {
    Openai,
    HashedBow,
    Mock,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSettings {
    pub backend: EmbedderKind,
    pub model: String,
    /// Vector length for the offline embedders.
    pub dimension: usize,
}

impl Default for EmbeddingSettings {
    fn default() -> Self {
        Self {
            backend: EmbedderKind::Openai,
            model: DEFAULT_EMBEDDING_MODEL.into(),
            dimension: DEFAULT_MOCK_DIMENSION,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub base_url: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub embedding: EmbeddingSettings,
    pub price_table: Option<PathBuf>,
    pub template_id: String,
    pub cache_dir: PathBuf,
    pub parallelism: usize,
    pub model: ModelConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            base_url: DEFAULT_BASE_URL.into(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            embedding: EmbeddingSettings::default(),
            price_table: None,
            template_id: asag_core::prompting::DEFAULT_TEMPLATE_ID.into(),
            cache_dir: PathBuf::from(".asag-cache"),
            parallelism: asag_core::engine::DEFAULT_PARALLELISM,
            model: ModelConfig::default(),
        }
    }
}

impl AppConfig {
    /// Loads `explicit`, or the conventional file when present, or defaults.
    pub fn load(explicit: Option<&Path>) -> Result<Self> {
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None if Path::new(CONVENTIONAL_PATH).exists() => PathBuf::from(CONVENTIONAL_PATH),
            None => return Ok(Self::default()),
        };
        let text = std::fs::read_to_string(&path).map_err(|e| Invalid(format!("config {}: {e}", path.display())))?;
        let config: Self =
            serde_json::from_str(&text).map_err(|e| Invalid(format!("config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(p) = &self.price_table {
            if !p.is_file() {
                bail!(Invalid(format!("price table {} does not exist", p.display())));
            }
        }
        if self.parallelism == 0 {
            bail!(Invalid("parallelism must be positive".into()));
        }
        if self.embedding.dimension == 0 {
            bail!(Invalid("embedding dimension must be positive".into()));
        }
        self.model.validate().map_err(Invalid)?;
        Ok(())
    }

    pub fn prices(&self) -> Result<asag_core::llm::PriceTable> {
        match &self.price_table {
            Some(p) => asag_core::llm::PriceTable::load(p).map_err(|e| Invalid(e).into()),
            None => Ok(Default::default()),
        }
    }

    /// Embedder for a run. Mock runs never get a network embedder.
    pub fn embedder(&self, mock: bool) -> Result<Box<dyn EmbeddingBackend>> {
        let dim = self.embedding.dimension;
        Ok(match (self.embedding.backend, mock) {
            (EmbedderKind::HashedBow, _) => Box::new(HashedBagOfWords::new(dim)),
            (EmbedderKind::Mock, _) | (EmbedderKind::Openai, true) => Box::new(MockEmbedder::new(dim)),
            (EmbedderKind::Openai, false) => {
                let key = asag_core::llm::openai::api_key_from_env(&self.api_key_env)
                    .context("cannot create the embedding client")?;
                Box::new(asag_core::llm::openai::OpenAiEmbedder::new(
                    self.base_url.clone(),
                    key,
                    self.embedding.model.clone(),
                    self.model.request_timeout(),
                ))
            }
        })
    }
}
