//! HTTP clients for the model service: `/generate`, `/qa`, `/embed`, `/ner`.
//!
//! All calls are blocking JSON POSTs. A bearer token, when configured, is
//! sent on every request and never logged.

use std::marker::PhantomData;
use std::time::Duration;

use reqwest::blocking::Client;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{Answer, BackendError, BackendKind, BackendReply, FailureKind, ModelBackend};
use crate::prompting::Prompt;
use crate::scalar::Scalar;
use crate::similarity::{EmbeddingVector, SimilarityProvider};
use crate::terminology::{NerProvider, NerSpan};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

/// Connection settings shared by every endpoint client.
#[derive(Clone)]
pub struct Endpoint {
    base_url: String,
    token: Option<String>,
    client: Client,
}

impl std::fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Endpoint")
            .field("base_url", &self.base_url)
            .field("token", &self.token.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl Endpoint {
    pub fn new(base_url: &str, token: Option<String>, timeout: Duration) -> Result<Self> {
        let client = Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::provider(base_url, e))?;
        Ok(Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            token,
            client,
        })
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    /// POST `body` to `path`; returns the raw response body and its decoding.
    fn post<B: Serialize, R: DeserializeOwned>(
        &self,
        path: &str,
        body: &B,
    ) -> std::result::Result<(String, R), BackendError> {
        let mut req = self.client.post(format!("{}{path}", self.base_url)).json(body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(transport_error)?;
        let status = resp.status();
        let raw = resp.text().map_err(transport_error)?;
        if !status.is_success() {
            return Err(BackendError::new(
                FailureKind::Http(status.as_u16()),
                format!("{path} returned {status}"),
            ));
        }
        let parsed = serde_json::from_str(&raw)
            .map_err(|e| BackendError::new(FailureKind::Protocol, format!("{path}: bad response body: {e}")))?;
        Ok((raw, parsed))
    }
}

fn transport_error(e: reqwest::Error) -> BackendError {
    let kind = if e.is_timeout() {
        FailureKind::Timeout
    } else {
        FailureKind::Transport
    };
    BackendError::new(kind, e.without_url().to_string())
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
}

#[derive(Deserialize)]
struct GenerateResponse {
    text: String,
    #[serde(default)]
    token_logprobs: Option<Vec<f64>>,
}

/// Generative model behind `POST /generate`.
#[derive(Debug, Clone)]
pub struct HttpGenerative {
    name: String,
    endpoint: Endpoint,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl HttpGenerative {
    pub fn new(name: &str, endpoint: Endpoint) -> Self {
        Self {
            name: name.to_string(),
            endpoint,
            max_tokens: 256,
            temperature: 0.0,
        }
    }
}

impl ModelBackend for HttpGenerative {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Generative
    }

    fn call(&self, prompt: &Prompt) -> std::result::Result<BackendReply, BackendError> {
        let body = GenerateRequest {
            prompt: &prompt.text,
            max_tokens: self.max_tokens,
            temperature: self.temperature,
        };
        let (_, resp): (_, GenerateResponse) = self.endpoint.post("/generate", &body)?;
        Ok(BackendReply::Generated {
            raw: resp.text.clone(),
            text: resp.text,
            token_logprobs: resp.token_logprobs,
        })
    }
}

#[derive(Serialize)]
struct QaRequest<'a> {
    question: &'a str,
    context: &'a str,
    top_k: usize,
}

#[derive(Deserialize)]
struct QaResponse {
    answers: Vec<Answer>,
}

/// Extractive QA model behind `POST /qa`.
#[derive(Debug, Clone)]
pub struct HttpExtractiveQa {
    name: String,
    endpoint: Endpoint,
    pub top_k: usize,
}

impl HttpExtractiveQa {
    pub fn new(name: &str, endpoint: Endpoint, top_k: usize) -> Self {
        Self {
            name: name.to_string(),
            endpoint,
            top_k,
        }
    }
}

impl ModelBackend for HttpExtractiveQa {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> BackendKind {
        BackendKind::ExtractiveQa
    }

    fn call(&self, prompt: &Prompt) -> std::result::Result<BackendReply, BackendError> {
        let body = QaRequest {
            question: &prompt.question,
            context: &prompt.context,
            top_k: self.top_k,
        };
        let (raw, resp): (_, QaResponse) = self.endpoint.post("/qa", &body)?;
        Ok(BackendReply::Spans {
            raw,
            answers: resp.answers,
        })
    }
}

#[derive(Serialize)]
struct TextRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vector: Vec<f64>,
}

#[derive(Deserialize)]
struct NerResponse {
    spans: Vec<NerSpan>,
}

/// Embedding model behind `POST /embed`.
#[derive(Debug, Clone)]
pub struct RemoteEmbedder<T = f64> {
    endpoint: Endpoint,
    _scalar: PhantomData<fn() -> T>,
}

impl<T> RemoteEmbedder<T> {
    pub fn new(endpoint: Endpoint) -> Self {
        Self {
            endpoint,
            _scalar: PhantomData,
        }
    }
}

impl<T: Scalar> SimilarityProvider<T> for RemoteEmbedder<T> {
    fn name(&self) -> &str {
        "remote-embed"
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector<T>> {
        if text.trim().is_empty() {
            return Err(Error::EmptyText(self.name().to_string()));
        }
        let (_, resp): (_, EmbedResponse) = self
            .endpoint
            .post("/embed", &TextRequest { text })
            .map_err(|e| Error::provider(self.name(), e))?;
        EmbeddingVector::new(resp.vector.into_iter().map(T::from_f64_lossy).collect())
    }
}

/// NER model behind `POST /ner`.
#[derive(Debug, Clone)]
pub struct RemoteNer {
    endpoint: Endpoint,
}

impl RemoteNer {
    pub fn new(endpoint: Endpoint) -> Self {
        Self { endpoint }
    }
}

impl NerProvider for RemoteNer {
    fn name(&self) -> &str {
        "remote-ner"
    }

    fn extract(&self, text: &str) -> Result<Vec<NerSpan>> {
        let (_, resp): (_, NerResponse) = self
            .endpoint
            .post("/ner", &TextRequest { text })
            .map_err(|e| Error::provider(self.name(), e))?;
        Ok(resp.spans)
    }
}
