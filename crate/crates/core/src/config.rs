//! Pipeline configuration: one JSON file carrying every threshold, the
//! backends and the provider selections. Secrets (endpoint tokens) come
//! from environment variables named in the file, never from the file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::DEFAULT_MATCH_THRESHOLD;
use crate::extraction::{DEFAULT_RELATION_OCCURRENCE_NUMBER, DEFAULT_RELATION_PROBABILITY};
use crate::gateway::{BackendKind, RetryPolicy, DEFAULT_GENERATIVE_SCORE, DEFAULT_TOP_K};
use crate::postprocess::{Linkage, DEFAULT_GROUPING_SIMILARITY, DEFAULT_MIN_SCORE};
use crate::prompting::{Exemplar, PromptStyle, StyleKind};

pub const DEFAULT_THRESHOLD_PREPROCESSING: f64 = 0.8;
pub const DEFAULT_THRESHOLD_NOTES_IDENTIFICATION: f64 = 0.8;
pub const DEFAULT_MIN_WORDS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BackendSource {
    /// Offline replay of a JSON script.
    Fixture { script: PathBuf },
    /// A model service speaking the `/generate` or `/qa` protocol.
    Http {
        url: String,
        kind: BackendKind,
        /// Environment variable holding a bearer token.
        #[serde(default)]
        token_env: Option<String>,
        #[serde(default = "default_max_tokens")]
        max_tokens: u32,
        #[serde(default)]
        temperature: f64,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: u64,
    },
}

fn default_max_tokens() -> u32 {
    256
}

fn default_timeout_secs() -> u64 {
    60
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub name: String,
    #[serde(flatten)]
    pub source: BackendSource,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SimilaritySource {
    /// Built-in hashed character-trigram embedding.
    #[default]
    Trigram,
    /// `POST /embed` on a model service.
    Http {
        url: String,
        #[serde(default)]
        token_env: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum NerSource {
    #[default]
    None,
    /// JSON `{"mentions": [...]}`; every occurrence is a span.
    Lexicon { path: PathBuf },
    /// `POST /ner` on a model service.
    Http {
        url: String,
        #[serde(default)]
        token_env: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub threshold_preprocessing: f64,
    pub threshold_notes_identification: f64,
    pub relation_occurrence_number: usize,
    pub relation_probability: f64,
    pub postprocess_min_score: f64,
    pub grouping_similarity: f64,
    pub grouping_linkage: Linkage,
    pub min_words: usize,
    pub match_threshold: f64,
    pub top_k: usize,
    pub retry: RetryPolicy,
    pub concurrency: usize,
    pub default_generative_score: f64,
    pub style: StyleKind,
    /// Exemplars for the few-shot style.
    pub exemplars: Vec<Exemplar>,
    pub diseases: Vec<String>,
    pub backends: Vec<BackendConfig>,
    pub default_backend: Option<String>,
    pub similarity: SimilaritySource,
    pub ner: NerSource,
    /// JSON alias table; without one every disease stands for itself.
    pub aliases: Option<PathBuf>,
    /// Replacement question templates.
    pub templates: Option<PathBuf>,
    pub stopwords: Option<PathBuf>,
    pub refusals: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            threshold_preprocessing: DEFAULT_THRESHOLD_PREPROCESSING,
            threshold_notes_identification: DEFAULT_THRESHOLD_NOTES_IDENTIFICATION,
            relation_occurrence_number: DEFAULT_RELATION_OCCURRENCE_NUMBER,
            relation_probability: DEFAULT_RELATION_PROBABILITY,
            postprocess_min_score: DEFAULT_MIN_SCORE,
            grouping_similarity: DEFAULT_GROUPING_SIMILARITY,
            grouping_linkage: Linkage::Single,
            min_words: DEFAULT_MIN_WORDS,
            match_threshold: DEFAULT_MATCH_THRESHOLD,
            top_k: DEFAULT_TOP_K,
            retry: RetryPolicy::default(),
            concurrency: 4,
            default_generative_score: DEFAULT_GENERATIVE_SCORE,
            style: StyleKind::Guided,
            exemplars: Vec::new(),
            diseases: Vec::new(),
            backends: Vec::new(),
            default_backend: None,
            similarity: SimilaritySource::default(),
            ner: NerSource::default(),
            aliases: None,
            templates: None,
            stopwords: None,
            refusals: None,
        }
    }
}

fn field_err(field: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn check_unit(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(field_err(field, format!("must be in [0,1], got {v}")))
    }
}

impl PipelineConfig {
    /// Parse JSON without validating.
    pub fn from_json(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| field_err(&unknown_field(&e.to_string()), e.to_string()))
    }

    /// Read, resolve relative paths against the file's directory, and
    /// validate.
    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&raw)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.aliases, &mut self.templates, &mut self.stopwords, &mut self.refusals]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        if let NerSource::Lexicon { path } = &mut self.ner {
            fix(path);
        }
        for b in &mut self.backends {
            if let BackendSource::Fixture { script } = &mut b.source {
                fix(script);
            }
        }
    }

    /// Field-level checks; the error names the first offending field.
    pub fn validate(&self) -> Result<()> {
        check_unit("threshold_preprocessing", self.threshold_preprocessing)?;
        check_unit("threshold_notes_identification", self.threshold_notes_identification)?;
        check_unit("relation_probability", self.relation_probability)?;
        check_unit("postprocess_min_score", self.postprocess_min_score)?;
        check_unit("grouping_similarity", self.grouping_similarity)?;
        check_unit("match_threshold", self.match_threshold)?;
        check_unit("default_generative_score", self.default_generative_score)?;
        if self.top_k == 0 {
            return Err(field_err("top_k", "must be at least 1"));
        }
        if self.concurrency == 0 {
            return Err(field_err("concurrency", "must be at least 1"));
        }
        if self.style == StyleKind::Few && self.exemplars.is_empty() {
            return Err(field_err("exemplars", "the few-shot style needs at least one exemplar"));
        }
        if self.diseases.iter().any(|d| d.trim().is_empty()) {
            return Err(field_err("diseases", "disease names must be non-empty"));
        }
        let mut names = std::collections::BTreeSet::new();
        for b in &self.backends {
            if b.name.trim().is_empty() {
                return Err(field_err("backends", "backend name must be non-empty"));
            }
            if !names.insert(b.name.as_str()) {
                return Err(field_err("backends", format!("duplicate backend name `{}`", b.name)));
            }
        }
        if let Some(d) = &self.default_backend {
            if !names.contains(d.as_str()) {
                return Err(field_err("default_backend", format!("no backend named `{d}`")));
            }
        }
        Ok(())
    }

    pub fn prompt_style(&self) -> PromptStyle {
        match self.style {
            StyleKind::Zero => PromptStyle::ZeroShot,
            StyleKind::Few => PromptStyle::FewShot {
                exemplars: self.exemplars.clone(),
            },
            StyleKind::Instruct => PromptStyle::Instruct,
            StyleKind::Guided => PromptStyle::Guided,
        }
    }

    /// The named backend, else the default one, else the only one.
    pub fn backend(&self, name: Option<&str>) -> Result<&BackendConfig> {
        let wanted = name.or(self.default_backend.as_deref());
        match wanted {
            Some(n) => self
                .backends
                .iter()
                .find(|b| b.name == n)
                .ok_or_else(|| field_err("backends", format!("no backend named `{n}`"))),
            None => match self.backends.as_slice() {
                [only] => Ok(only),
                [] => Err(field_err("backends", "no backend configured")),
                _ => Err(field_err("default_backend", "several backends configured; pick one")),
            },
        }
    }

    /// Hex SHA-256 of the canonical JSON form; identifies the settings a
    /// run used.
    pub fn fingerprint(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }
}

/// Best-effort field name from a serde error message.
fn unknown_field(msg: &str) -> String {
    msg.split('`')
        .nth(1)
        .filter(|_| msg.contains("unknown field") || msg.contains("missing field"))
        .unwrap_or("<config>")
        .to_string()
}
