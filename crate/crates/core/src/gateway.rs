//! Uniform query interface over model backends and classification of their
//! responses.
//!
//! A backend call either fails at the transport level (retried, then
//! surfaced as an error) or returns content, which is always turned into a
//! [`QueryRecord`]. Unusable content becomes [`Parsed::Unstructured`]; it is
//! never retried.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postprocess::Lexicon;
use crate::prompting::{EntityCategory, Prompt, StyleKind};

pub const DEFAULT_GENERATIVE_SCORE: f64 = 0.5;
pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Returns spans of the supplied context with scores.
    ExtractiveQa,
    /// Returns free text.
    Generative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum Parsed {
    Answers { answers: Vec<Answer> },
    DontKnow,
    Unstructured,
}

impl Parsed {
    pub fn answers(&self) -> &[Answer] {
        match self {
            Parsed::Answers { answers } => answers,
            _ => &[],
        }
    }

    pub fn class(&self) -> &'static str {
        match self {
            Parsed::Answers { .. } => "answers",
            Parsed::DontKnow => "dont_know",
            Parsed::Unstructured => "unstructured",
        }
    }
}

/// One successful backend call and what was made of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: String,
    pub backend: String,
    pub disease: String,
    pub category: EntityCategory,
    pub note_id: String,
    pub question_id: String,
    pub prompt: Prompt,
    pub raw_response: String,
    pub parsed: Parsed,
    pub latency_ms: f64,
    pub attempts: u32,
}

/// What a backend returned, before classification. `raw` is the response
/// body as received.
#[derive(Debug, Clone, PartialEq)]
pub enum BackendReply {
    Generated {
        raw: String,
        text: String,
        token_logprobs: Option<Vec<f64>>,
    },
    Spans {
        raw: String,
        answers: Vec<Answer>,
    },
}

impl BackendReply {
    pub fn raw(&self) -> &str {
        match self {
            BackendReply::Generated { raw, .. } | BackendReply::Spans { raw, .. } => raw,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    Timeout,
    Transport,
    Http(u16),
    Protocol,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendError {
    pub kind: FailureKind,
    pub message: String,
}

impl BackendError {
    pub fn new(kind: FailureKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn retryable(&self) -> bool {
        match self.kind {
            FailureKind::Timeout | FailureKind::Transport => true,
            FailureKind::Http(code) => code == 408 || code == 429 || code >= 500,
            FailureKind::Protocol => false,
        }
    }
}

impl fmt::Display for BackendError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.kind, self.message)
    }
}

/// A model behind query access. Implementations do not retry; timeouts are
/// reported as [`FailureKind::Timeout`].
pub trait ModelBackend: Send + Sync {
    fn name(&self) -> &str;

    fn kind(&self) -> BackendKind;

    fn call(&self, prompt: &Prompt) -> std::result::Result<BackendReply, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay_ms: 250,
            max_delay_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u64.checked_shl(retry).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

/// `exp(mean log-prob)` clamped to [0,1], or `default` when no usable
/// log-probs were reported.
pub fn derive_score(token_logprobs: Option<&[f64]>, default: f64) -> f64 {
    match token_logprobs {
        Some(lp) if !lp.is_empty() && lp.iter().all(|v| v.is_finite()) => {
            let mean = lp.iter().sum::<f64>() / lp.len() as f64;
            mean.exp().clamp(0.0, 1.0)
        }
        _ => default,
    }
}

fn label_key(label: &str) -> String {
    label
        .trim()
        .trim_matches(|c| c == '*' || c == '[' || c == ']' || c == '#')
        .trim()
        .to_lowercase()
        .replace('_', " ")
}

fn category_of_label(label: &str) -> Option<EntityCategory> {
    let key = label_key(label);
    if key.is_empty() {
        return None;
    }
    EntityCategory::ALL.into_iter().find(|c| {
        c.label_synonyms()
            .iter()
            .any(|s| s.replace('_', " ") == key)
    })
}

/// Split `"label: rest"` when `label` names a category.
fn answer_line(line: &str) -> Option<(EntityCategory, &str)> {
    let (label, rest) = line.split_once(':')?;
    Some((category_of_label(label)?, rest))
}

fn is_header(line: &str) -> bool {
    line.trim_start_matches('#').trim().eq_ignore_ascii_case("response")
        && line.starts_with('#')
}

fn looks_like_placeholder(entity: &str) -> bool {
    let upper = entity.to_uppercase();
    upper.contains("[ENTITY") || (entity.starts_with('[') && entity.ends_with(']'))
}

fn clean_entity(e: &str) -> &str {
    e.trim()
        .trim_end_matches(['.', '…', ';'])
        .trim()
}

/// Classify a response to a guided prompt.
///
/// The expected shape is an optional `### Response` header followed by one
/// line `label: entity, entity, ...` whose label names `expected` (synonyms
/// accepted, repeated `label:` prefixes stripped). Lines that are refusal
/// variations may accompany the answer line. A response consisting only of
/// refusals is `DontKnow`; everything else (template echoes, placeholders,
/// other labels, extra prose) is `Unstructured`. Never fails.
pub fn parse_guided_response(raw: &str, expected: EntityCategory, score: f64, lexicon: &Lexicon) -> Parsed {
    let mut answer_lines = Vec::new();
    let mut refusals = 0usize;
    for line in raw.lines().map(str::trim) {
        if line.is_empty() || is_header(line) {
            continue;
        }
        if let Some(found) = answer_line(line) {
            answer_lines.push(found);
        } else if lexicon.is_refusal(line) {
            refusals += 1;
        } else {
            return Parsed::Unstructured;
        }
    }
    let (category, mut rest) = match answer_lines.as_slice() {
        [] if refusals > 0 => return Parsed::DontKnow,
        [one] => *one,
        _ => return Parsed::Unstructured,
    };
    if category != expected {
        return Parsed::Unstructured;
    }
    while let Some((c, tail)) = answer_line(rest) {
        if c != expected {
            return Parsed::Unstructured;
        }
        rest = tail;
    }
    if lexicon.is_refusal(rest) {
        return Parsed::DontKnow;
    }
    let mut answers = Vec::new();
    for entity in rest.split(',').map(clean_entity) {
        if entity.is_empty() {
            continue;
        }
        if looks_like_placeholder(entity) {
            return Parsed::Unstructured;
        }
        answers.push(Answer {
            text: entity.to_string(),
            score,
        });
    }
    if answers.is_empty() {
        Parsed::Unstructured
    } else {
        Parsed::Answers { answers }
    }
}

fn bullet_item(line: &str) -> Option<&str> {
    ["- ", "* ", "• "]
        .iter()
        .find_map(|b| line.strip_prefix(b))
        .map(str::trim)
}

/// Classify a generative response to a non-guided prompt: one line is one
/// answer, a bulleted list is one answer per item, a refusal is `DontKnow`,
/// anything longer is `Unstructured`.
pub fn parse_free_response(raw: &str, score: f64, lexicon: &Lexicon) -> Parsed {
    let lines: Vec<&str> = raw.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    if lines.is_empty() {
        return Parsed::Unstructured;
    }
    if lexicon.is_refusal(&lines.join(" ")) {
        return Parsed::DontKnow;
    }
    let texts: Vec<&str> = if lines.len() == 1 && bullet_item(lines[0]).is_none() {
        vec![clean_entity(lines[0])]
    } else if let Some(items) = lines.iter().map(|l| bullet_item(l)).collect::<Option<Vec<_>>>() {
        items.into_iter().map(clean_entity).collect()
    } else {
        return Parsed::Unstructured;
    };
    let answers: Vec<Answer> = texts
        .into_iter()
        .filter(|t| !t.is_empty())
        .map(|t| Answer {
            text: t.to_string(),
            score,
        })
        .collect();
    if answers.is_empty() {
        Parsed::Unstructured
    } else {
        Parsed::Answers { answers }
    }
}

/// Extractive spans must be non-empty substrings of the context with
/// scores in [0,1]; any violation makes the whole reply `Unstructured`.
pub fn check_spans(answers: &[Answer], context: &str) -> Parsed {
    let answers: Vec<Answer> = answers
        .iter()
        .filter(|a| !a.text.trim().is_empty())
        .cloned()
        .collect();
    if answers.is_empty() {
        return Parsed::DontKnow;
    }
    let valid = answers
        .iter()
        .all(|a| context.contains(a.text.as_str()) && (0.0..=1.0).contains(&a.score));
    if valid {
        Parsed::Answers { answers }
    } else {
        Parsed::Unstructured
    }
}

/// A backend plus the policies used to call it.
#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn ModelBackend>,
    pub retry: RetryPolicy,
    pub default_score: f64,
    pub concurrency: usize,
    pub lexicon: Lexicon,
}

/// A query whose retries were exhausted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryFailure {
    pub prompt_id: String,
    pub disease: String,
    pub category: EntityCategory,
    pub note_id: String,
    pub question_id: String,
    pub attempts: u32,
    pub error: String,
}

impl Gateway {
    pub fn new(backend: Arc<dyn ModelBackend>) -> Self {
        Self {
            backend,
            retry: RetryPolicy::default(),
            default_score: DEFAULT_GENERATIVE_SCORE,
            concurrency: 1,
            lexicon: Lexicon::default(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_concurrency(mut self, n: usize) -> Self {
        self.concurrency = n.max(1);
        self
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    pub fn backend_kind(&self) -> BackendKind {
        self.backend.kind()
    }

    fn classify(&self, prompt: &Prompt, reply: &BackendReply) -> Parsed {
        match reply {
            BackendReply::Spans { answers, .. } => check_spans(answers, &prompt.context),
            BackendReply::Generated {
                text,
                token_logprobs,
                ..
            } => {
                let score = derive_score(token_logprobs.as_deref(), self.default_score);
                if prompt.style == StyleKind::Guided {
                    parse_guided_response(text, prompt.category, score, &self.lexicon)
                } else {
                    parse_free_response(text, score, &self.lexicon)
                }
            }
        }
    }

    fn attempt(&self, prompt: &Prompt) -> std::result::Result<(QueryRecord, u32), (BackendError, u32)> {
        let started = Instant::now();
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.backend.call(prompt) {
                Ok(reply) => {
                    let parsed = self.classify(prompt, &reply);
                    let record = QueryRecord {
                        id: prompt.id(),
                        backend: self.backend.name().to_string(),
                        disease: prompt.disease.clone(),
                        category: prompt.category,
                        note_id: prompt.note_id.clone(),
                        question_id: prompt.question_id.clone(),
                        prompt: prompt.clone(),
                        raw_response: reply.raw().to_string(),
                        parsed,
                        latency_ms: started.elapsed().as_secs_f64() * 1e3,
                        attempts,
                    };
                    return Ok((record, attempts));
                }
                Err(e) if e.retryable() && attempts <= self.retry.max_retries => {
                    log::debug!("{} attempt {attempts} failed: {e}; retrying", self.backend.name());
                    thread::sleep(self.retry.delay(attempts - 1));
                }
                Err(e) => return Err((e, attempts)),
            }
        }
    }

    /// Send one prompt with bounded retries on transport failures.
    pub fn query(&self, prompt: &Prompt) -> Result<QueryRecord> {
        self.attempt(prompt)
            .map(|(r, _)| r)
            .map_err(|(e, attempts)| Error::Backend {
                backend: self.backend.name().to_string(),
                prompt_id: prompt.id(),
                reason: format!("{e} after {attempts} attempt(s)"),
            })
    }

    /// Query every prompt with up to `concurrency` calls in flight. Results
    /// come back in input order; `on_record` sees each success as it lands.
    pub fn query_all<F>(&self, prompts: &[Prompt], on_record: F) -> Vec<std::result::Result<QueryRecord, QueryFailure>>
    where
        F: Fn(&QueryRecord) + Sync,
    {
        let slots: Vec<Mutex<Option<std::result::Result<QueryRecord, QueryFailure>>>> =
            prompts.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.concurrency.clamp(1, prompts.len().max(1));
        thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(prompt) = prompts.get(i) else { break };
                    let outcome = match self.attempt(prompt) {
                        Ok((record, _)) => {
                            on_record(&record);
                            Ok(record)
                        }
                        Err((e, attempts)) => {
                            log::warn!("query {} failed: {e}", prompt.id());
                            Err(QueryFailure {
                                prompt_id: prompt.id(),
                                disease: prompt.disease.clone(),
                                category: prompt.category,
                                note_id: prompt.note_id.clone(),
                                question_id: prompt.question_id.clone(),
                                attempts,
                                error: e.to_string(),
                            })
                        }
                    };
                    *slots[i].lock().unwrap() = Some(outcome);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().unwrap().expect("every prompt is visited"))
            .collect()
    }
}

/// Scripted reply of the fixture backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedReply {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answers: Option<Vec<Answer>>,
    /// `"timeout"` or `"transport"`: this reply always fails.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// The first `fail_first` uses of this reply time out.
    #[serde(default)]
    pub fail_first: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    /// Every string must occur in the prompt text.
    pub contains: Vec<String>,
    pub reply: ScriptedReply,
}

/// JSON script driving [`FixtureBackend`].
///
/// Lookup order: `by_hash` (hex SHA-256 of the prompt text), first matching
/// `rules` entry, `sequence` by call ordinal, then `default`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Script {
    #[serde(default = "default_fixture_name")]
    pub name: String,
    #[serde(default = "default_fixture_kind")]
    pub kind: BackendKind,
    #[serde(default)]
    pub by_hash: HashMap<String, ScriptedReply>,
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
    #[serde(default)]
    pub sequence: Vec<ScriptedReply>,
    #[serde(default)]
    pub default: Option<ScriptedReply>,
}

fn default_fixture_name() -> String {
    "fixture".to_string()
}

fn default_fixture_kind() -> BackendKind {
    BackendKind::Generative
}

/// Offline backend replaying a [`Script`].
#[derive(Debug)]
pub struct FixtureBackend {
    script: Script,
    calls: AtomicUsize,
    uses: Mutex<HashMap<String, usize>>,
}

impl FixtureBackend {
    pub fn new(script: Script) -> Self {
        Self {
            script,
            calls: AtomicUsize::new(0),
            uses: Mutex::new(HashMap::new()),
        }
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Ok(Self::new(serde_json::from_str(json)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&raw)
    }

    /// Report under `name` instead of the script's own name.
    pub fn named(mut self, name: &str) -> Self {
        self.script.name = name.to_string();
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn lookup(&self, prompt: &Prompt, ordinal: usize) -> Option<(String, &ScriptedReply)> {
        let hash = prompt.text_hash();
        if let Some(r) = self.script.by_hash.get(&hash) {
            return Some((format!("hash:{hash}:{}", prompt.id()), r));
        }
        if let Some((i, rule)) = self
            .script
            .rules
            .iter()
            .enumerate()
            .find(|(_, r)| r.contains.iter().all(|c| prompt.text.contains(c.as_str())))
        {
            return Some((format!("rule:{i}:{}", prompt.id()), &rule.reply));
        }
        if let Some(r) = self.script.sequence.get(ordinal) {
            return Some((format!("seq:{ordinal}"), r));
        }
        self.script
            .default
            .as_ref()
            .map(|r| (format!("default:{}", prompt.id()), r))
    }
}

impl ModelBackend for FixtureBackend {
    fn name(&self) -> &str {
        &self.script.name
    }

    fn kind(&self) -> BackendKind {
        self.script.kind
    }

    fn call(&self, prompt: &Prompt) -> std::result::Result<BackendReply, BackendError> {
        let ordinal = self.calls.fetch_add(1, Ordering::SeqCst);
        let (key, reply) = self
            .lookup(prompt, ordinal)
            .ok_or_else(|| BackendError::new(FailureKind::Protocol, "no scripted reply for prompt"))?;
        let used = {
            let mut uses = self.uses.lock().unwrap();
            let n = uses.entry(key).or_insert(0);
            *n += 1;
            *n
        };
        if used <= reply.fail_first {
            return Err(BackendError::new(FailureKind::Timeout, "scripted timeout"));
        }
        match reply.error.as_deref() {
            Some("timeout") => return Err(BackendError::new(FailureKind::Timeout, "scripted timeout")),
            Some(other) => return Err(BackendError::new(FailureKind::Transport, other.to_string())),
            None => {}
        }
        match (self.script.kind, &reply.answers, &reply.text) {
            (BackendKind::ExtractiveQa, Some(answers), _) => Ok(BackendReply::Spans {
                raw: serde_json::json!({ "answers": answers }).to_string(),
                answers: answers.clone(),
            }),
            (BackendKind::Generative, _, Some(text)) => Ok(BackendReply::Generated {
                raw: text.clone(),
                text: text.clone(),
                token_logprobs: reply.token_logprobs.clone(),
            }),
            _ => Err(BackendError::new(
                FailureKind::Protocol,
                "scripted reply does not fit the backend kind",
            )),
        }
    }
}
