//! Pipeline configuration: a TOML file, environment overrides and CLI flags.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use qappp_core::answering::{DEFAULT_SAMPLES, DEFAULT_SAMPLE_TEMPERATURE};
use qappp_core::evaluation::{standard_subsets, PredictorSet, DEFAULT_FORMULA, DEFAULT_SEED};
use qappp_core::scoring::{CaseMode, MonthWindow, PageviewsConfig};
use qappp_core::semantics::{EmbedError, Embedding, EmbeddingProvider, HashingEmbedder, HttpEmbedder};
use qappp_core::ModelConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path}: {message}")]
    Syntax { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: PathBuf,
    pub templates: PathBuf,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_formula")]
    pub formula: String,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_threshold")]
    pub category_threshold: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// L2 penalty for the main fit and the ablation fits.
    #[serde(default)]
    pub ridge: f64,
    #[serde(default)]
    pub case_mode: CaseMode,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
    #[serde(default)]
    pub popularity: PopularityConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
    #[serde(default)]
    pub models: Vec<ModelConfig>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("qappp-out")
}
fn default_formula() -> String {
    DEFAULT_FORMULA.to_string()
}
fn default_test_fraction() -> f64 {
    0.2
}
fn default_threshold() -> f64 {
    0.1
}
fn default_seed() -> u64 {
    DEFAULT_SEED
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub k: usize,
    pub temperature: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            k: DEFAULT_SAMPLES,
            temperature: DEFAULT_SAMPLE_TEMPERATURE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "provider", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EmbeddingConfig {
    Hashing {
        #[serde(default = "default_dimension")]
        dimension: usize,
    },
    Http {
        url: String,
        model: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        api_key: Option<String>,
        #[serde(default = "default_batch")]
        batch_size: usize,
    },
}

fn default_dimension() -> usize {
    HashingEmbedder::DEFAULT_DIMENSION
}
fn default_batch() -> usize {
    64
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig::Hashing {
            dimension: default_dimension(),
        }
    }
}

/// The configured embedding provider.
pub enum Embedder {
    Hashing(HashingEmbedder),
    Http(HttpEmbedder),
}

impl EmbeddingProvider for Embedder {
    fn id(&self) -> &str {
        match self {
            Embedder::Hashing(e) => e.id(),
            Embedder::Http(e) => e.id(),
        }
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Embedding>, EmbedError> {
        match self {
            Embedder::Hashing(e) => e.embed_batch(texts),
            Embedder::Http(e) => e.embed_batch(texts),
        }
    }
}

impl EmbeddingConfig {
    pub fn build(&self) -> Embedder {
        match self {
            EmbeddingConfig::Hashing { dimension } => Embedder::Hashing(HashingEmbedder::new(*dimension)),
            EmbeddingConfig::Http {
                url,
                model,
                api_key,
                batch_size,
            } => {
                let mut e = HttpEmbedder::new(url.clone(), model.clone());
                e.api_key = api_key.clone();
                e.batch_size = *batch_size;
                Embedder::Http(e)
            }
        }
    }

    /// Provider identity without credentials.
    fn identity(&self) -> serde_json::Value {
        match self {
            EmbeddingConfig::Hashing { dimension } => {
                serde_json::json!({"provider": "hashing", "dimension": dimension})
            }
            EmbeddingConfig::Http { url, model, .. } => {
                serde_json::json!({"provider": "http", "url": url, "model": model})
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PopularityConfig {
    /// Length of the page view window in months.
    pub months: u32,
    /// Last month of the window as `YYYY-MM`. Defaults to the month before
    /// the current one, which makes fetched values depend on the run date.
    pub end_month: Option<String>,
    #[serde(flatten)]
    pub client: PageviewsConfig,
}

impl Default for PopularityConfig {
    fn default() -> Self {
        PopularityConfig {
            months: 12,
            end_month: None,
            client: PageviewsConfig::default(),
        }
    }
}

impl PopularityConfig {
    pub fn window(&self) -> Result<MonthWindow, ConfigError> {
        match &self.end_month {
            None => Ok(MonthWindow::trailing_from_now(self.months)),
            Some(text) => {
                let first = NaiveDate::parse_from_str(&format!("{text}-01"), "%Y-%m-%d")
                    .map_err(|_| ConfigError::Invalid(format!("popularity.end_month must be YYYY-MM, got {text:?}")))?;
                let next = first
                    .checked_add_months(chrono::Months::new(1))
                    .ok_or_else(|| ConfigError::Invalid("popularity.end_month out of range".into()))?;
                Ok(MonthWindow::trailing(self.months, next))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    pub n_bins: usize,
    pub central_mass: f64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            n_bins: 15,
            central_mass: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Predictor subsets such as `"SPop,SCons,Cert"`.
    pub subsets: Vec<String>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            subsets: standard_subsets()
                .iter()
                .map(|s| s.0.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(","))
                .collect(),
        }
    }
}

impl AblationConfig {
    pub fn predictor_sets(&self) -> Result<Vec<PredictorSet>, ConfigError> {
        self.subsets
            .iter()
            .map(|s| PredictorSet::parse(s).map_err(|e| ConfigError::Invalid(format!("ablation subset {s:?}: {e}"))))
            .collect()
    }
}

/// Flag values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub formula: Option<String>,
    pub threshold: Option<f64>,
    pub test_fraction: Option<f64>,
}

/// Environment variable name suffix for a model id: uppercase, with every
/// non-alphanumeric character replaced by `_`.
pub fn env_suffix(model_id: &str) -> String {
    model_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_uppercase()
            } else {
                '_'
            }
        })
        .collect()
}

impl PipelineConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Syntax {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Reads a config file, resolves relative paths against its directory,
    /// applies process environment overrides and validates.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Unreadable {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::from_toml(&text, path)?;
        config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        config.apply_env(|k| std::env::var(k).ok());
        config.apply_overrides(overrides);
        config.validate()?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset);
        fix(&mut self.templates);
        fix(&mut self.output_dir);
        for m in &mut self.models {
            if let Some(p) = &mut m.canned_path {
                fix(p);
            }
        }
    }

    /// Recognized variables:
    /// `QAPPP_ENDPOINT_<ID>`, `QAPPP_API_KEY_<ID>`, `QAPPP_API_KEY` (all
    /// models without a per-model key), `QAPPP_EMBEDDING_URL`,
    /// `QAPPP_EMBEDDING_API_KEY` and `QAPPP_PAGEVIEWS_URL`. `<ID>` is
    /// [`env_suffix`] of the model id.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        let global_key = lookup("QAPPP_API_KEY");
        for m in &mut self.models {
            let id = env_suffix(&m.model_id);
            if let Some(url) = lookup(&format!("QAPPP_ENDPOINT_{id}")) {
                m.endpoint_url = url;
            }
            if let Some(key) = lookup(&format!("QAPPP_API_KEY_{id}")).or_else(|| global_key.clone()) {
                m.api_key = Some(key);
            }
        }
        if let EmbeddingConfig::Http { url, api_key, .. } = &mut self.embedding {
            if let Some(v) = lookup("QAPPP_EMBEDDING_URL") {
                *url = v;
            }
            if let Some(v) = lookup("QAPPP_EMBEDDING_API_KEY") {
                *api_key = Some(v);
            }
        }
        if let Some(v) = lookup("QAPPP_PAGEVIEWS_URL") {
            self.popularity.client.base_url = v;
        }
    }

    pub fn apply_overrides(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.formula {
            self.formula = v.clone();
        }
        if let Some(v) = o.threshold {
            self.category_threshold = v;
        }
        if let Some(v) = o.test_fraction {
            self.test_fraction = v;
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!("test_fraction must lie in (0, 1), got {}", self.test_fraction));
        }
        if !(0.0..1.0).contains(&self.category_threshold) {
            return bad(format!(
                "category_threshold must lie in [0, 1), got {}",
                self.category_threshold
            ));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return bad("ridge must be nonnegative".into());
        }
        if self.sampling.k < 2 {
            return bad("sampling.k must be at least 2".into());
        }
        if !(self.sampling.temperature > 0.0 && self.sampling.temperature.is_finite()) {
            return bad("sampling.temperature must be positive".into());
        }
        if self.diagnostics.n_bins == 0
            || !(self.diagnostics.central_mass > 0.0 && self.diagnostics.central_mass <= 1.0)
        {
            return bad("diagnostics needs n_bins >= 1 and central_mass in (0, 1]".into());
        }
        if self.popularity.months == 0 {
            return bad("popularity.months must be positive".into());
        }
        self.popularity.window()?;
        self.ablation.predictor_sets()?;
        if self.models.is_empty() {
            return bad("at least one [[models]] entry is required".into());
        }
        let mut ids = BTreeSet::new();
        for m in &self.models {
            let id = &m.model_id;
            if id.is_empty()
                || !id.chars().all(|c| c.is_ascii_alphanumeric() || "._-".contains(c))
                || id.starts_with('.')
            {
                return bad(format!(
                    "model_id {id:?} must be non-empty and use only letters, digits, `.`, `_`, `-`"
                ));
            }
            if !ids.insert(id) {
                return bad(format!("duplicate model_id {id:?}"));
            }
            m.validate()
                .map_err(|e| ConfigError::Invalid(format!("model {id}: {e}")))?;
        }
        Ok(())
    }

    /// Embedding settings that change feature values.
    pub fn embedding_identity(&self) -> serde_json::Value {
        self.embedding.identity()
    }
}
