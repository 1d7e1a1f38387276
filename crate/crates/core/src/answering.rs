//! Answer collection: prompt rendering, first-sentence truncation, completion
//! clients and a resumable on-disk answer store.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::dataset::QuestionRecord;
use crate::net::{self, NetError, RetryPolicy};
use crate::par;

/// Prompt format for decoder-only models.
pub const DECODER_TEMPLATE: &str = "Question:{question}\nAnswer:";
pub const QUESTION_SLOT: &str = "{question}";
/// Config spelling of [`PromptTemplate::Identity`].
pub const IDENTITY_MARKER: &str = "identity";

pub const DEFAULT_SAMPLES: usize = 10;
pub const DEFAULT_SAMPLE_TEMPERATURE: f64 = 0.5;

#[derive(Debug, Error)]
pub enum AnswerError {
    #[error("prompt template must contain `{{question}}` exactly once: {0:?}")]
    MalformedTemplate(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("endpoint unavailable for `{question_id}`: {message}")]
    EndpointUnavailable { question_id: String, message: String },
    #[error("endpoint rejected `{question_id}` with HTTP {status}: {body}")]
    Rejected {
        question_id: String,
        status: u16,
        body: String,
    },
    #[error("malformed response for `{question_id}`: {message}")]
    MalformedResponse { question_id: String, message: String },
    #[error("answer store {path}: {message}")]
    Store { path: PathBuf, message: String },
}

/// How the question is turned into a prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PromptTemplate {
    /// The question is submitted as-is.
    Identity,
    /// Text with exactly one `{question}` slot.
    Slot(String),
}

impl PromptTemplate {
    pub fn parse(text: &str) -> Result<Self, AnswerError> {
        if text == IDENTITY_MARKER {
            return Ok(PromptTemplate::Identity);
        }
        if text.matches(QUESTION_SLOT).count() != 1 {
            return Err(AnswerError::MalformedTemplate(text.to_string()));
        }
        Ok(PromptTemplate::Slot(text.to_string()))
    }

    pub fn decoder() -> Self {
        PromptTemplate::Slot(DECODER_TEMPLATE.to_string())
    }

    pub fn as_config_str(&self) -> &str {
        match self {
            PromptTemplate::Identity => IDENTITY_MARKER,
            PromptTemplate::Slot(s) => s,
        }
    }
}

impl Serialize for PromptTemplate {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_config_str())
    }
}

impl<'de> Deserialize<'de> for PromptTemplate {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        PromptTemplate::parse(&s).map_err(serde::de::Error::custom)
    }
}

pub fn render_prompt(question: &str, template: &PromptTemplate) -> Result<String, AnswerError> {
    match template {
        PromptTemplate::Identity => Ok(question.to_string()),
        PromptTemplate::Slot(t) => {
            if t.matches(QUESTION_SLOT).count() != 1 {
                return Err(AnswerError::MalformedTemplate(t.clone()));
            }
            Ok(t.replacen(QUESTION_SLOT, question, 1))
        }
    }
}

/// Keeps the text up to and including the first `.`, `!` or `?` that is
/// followed by whitespace or the end of the text. Abbreviations such as "Dr."
/// end the sentence too.
pub fn truncate_first_sentence(text: &str) -> String {
    let text = text.trim();
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            match chars.peek() {
                None => return text.to_string(),
                Some((_, next)) if next.is_whitespace() => return text[..i + c.len_utf8()].to_string(),
                _ => {}
            }
        }
    }
    text.to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Greedy,
    Sample,
}

/// What to request per question.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    /// Temperature 0, one answer.
    Greedy,
    Sample {
        k: usize,
        temperature: f64,
    },
}

impl Decoding {
    pub fn default_sampling() -> Self {
        Decoding::Sample {
            k: DEFAULT_SAMPLES,
            temperature: DEFAULT_SAMPLE_TEMPERATURE,
        }
    }

    pub fn mode(&self) -> Mode {
        match self {
            Decoding::Greedy => Mode::Greedy,
            Decoding::Sample { .. } => Mode::Sample,
        }
    }

    pub fn k(&self) -> usize {
        match *self {
            Decoding::Greedy => 1,
            Decoding::Sample { k, .. } => k,
        }
    }

    pub fn temperature(&self) -> f64 {
        match *self {
            Decoding::Greedy => 0.0,
            Decoding::Sample { temperature, .. } => temperature,
        }
    }
}

/// One generation for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub question_id: String,
    pub model_id: String,
    pub mode: Mode,
    pub sample_index: usize,
    pub temperature: f64,
    pub raw_text: String,
    pub truncated_text: String,
}

impl AnswerRecord {
    pub fn key(&self) -> AnswerKey {
        AnswerKey {
            model_id: self.model_id.clone(),
            question_id: self.question_id.clone(),
            mode: self.mode,
            sample_index: self.sample_index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AnswerKey {
    pub model_id: String,
    pub question_id: String,
    pub mode: Mode,
    pub sample_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ApiStyle {
    /// HTTP completion endpoint (OpenAI-compatible field names by default).
    #[default]
    Completions,
    /// Answers read from a local fixture file; no network.
    Canned,
}

/// JSON field names used on the wire.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WireFormat {
    pub model_field: String,
    pub prompt_field: String,
    pub temperature_field: String,
    pub max_tokens_field: String,
    pub n_field: String,
    /// Omitted from requests when `None`.
    pub seed_field: Option<String>,
    /// Array of generations in the response.
    pub choices_field: String,
    /// Text field of each generation.
    pub text_field: String,
}

impl Default for WireFormat {
    fn default() -> Self {
        WireFormat {
            model_field: "model".into(),
            prompt_field: "prompt".into(),
            temperature_field: "temperature".into(),
            max_tokens_field: "max_tokens".into(),
            n_field: "n".into(),
            seed_field: Some("seed".into()),
            choices_field: "choices".into(),
            text_field: "text".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub model_id: String,
    #[serde(default)]
    pub endpoint_url: String,
    #[serde(default)]
    pub api_style: ApiStyle,
    #[serde(default = "PromptTemplate::decoder")]
    pub prompt_template: PromptTemplate,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: u32,
    /// Seconds.
    #[serde(default = "default_timeout")]
    pub request_timeout: u64,
    #[serde(default = "default_parallel")]
    pub max_parallel: usize,
    #[serde(default = "default_retries")]
    pub retry_limit: u32,
    #[serde(default = "default_backoff")]
    pub retry_backoff_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key: Option<String>,
    /// Fixture file for [`ApiStyle::Canned`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub canned_path: Option<PathBuf>,
    #[serde(default)]
    pub wire: WireFormat,
}

fn default_max_new_tokens() -> u32 {
    32
}
fn default_timeout() -> u64 {
    60
}
fn default_parallel() -> usize {
    4
}
fn default_retries() -> u32 {
    3
}
fn default_backoff() -> u64 {
    500
}

impl ModelConfig {
    pub fn new(model_id: impl Into<String>, endpoint_url: impl Into<String>) -> Self {
        ModelConfig {
            model_id: model_id.into(),
            endpoint_url: endpoint_url.into(),
            api_style: ApiStyle::Completions,
            prompt_template: PromptTemplate::decoder(),
            max_new_tokens: default_max_new_tokens(),
            request_timeout: default_timeout(),
            max_parallel: default_parallel(),
            retry_limit: default_retries(),
            retry_backoff_ms: default_backoff(),
            api_key: None,
            canned_path: None,
            wire: WireFormat::default(),
        }
    }

    pub fn validate(&self) -> Result<(), AnswerError> {
        if self.max_parallel == 0 {
            return Err(AnswerError::InvalidRequest("max_parallel must be at least 1".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(AnswerError::InvalidRequest("max_new_tokens must be positive".into()));
        }
        if let PromptTemplate::Slot(t) = &self.prompt_template {
            PromptTemplate::parse(t)?;
        }
        Ok(())
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            timeout: Duration::from_secs(self.request_timeout.max(1)),
            retry_limit: self.retry_limit,
            initial_backoff: Duration::from_millis(self.retry_backoff_ms),
        }
    }
}

/// A request for `n` generations of one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest<'a> {
    pub question_id: &'a str,
    pub prompt: &'a str,
    pub temperature: f64,
    pub max_tokens: u32,
    pub n: usize,
    /// Sample indices the generations will be stored under.
    pub sample_indices: &'a [usize],
    pub seed: Option<u64>,
}

/// Produces generations for a prompt.
pub trait Completer: Send + Sync {
    /// Returns exactly `request.n` texts.
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<Vec<String>, AnswerError>;
}

/// Completion-style HTTP endpoint.
#[derive(Debug, Clone)]
pub struct HttpCompleter {
    pub model_id: String,
    pub url: String,
    pub api_key: Option<String>,
    pub wire: WireFormat,
    pub policy: RetryPolicy,
}

impl HttpCompleter {
    pub fn from_config(config: &ModelConfig) -> Self {
        HttpCompleter {
            model_id: config.model_id.clone(),
            url: config.endpoint_url.clone(),
            api_key: config.api_key.clone(),
            wire: config.wire.clone(),
            policy: config.retry_policy(),
        }
    }

    pub fn request_body(&self, r: &CompletionRequest<'_>) -> Value {
        let w = &self.wire;
        let mut body = Map::new();
        body.insert(w.model_field.clone(), Value::from(self.model_id.clone()));
        body.insert(w.prompt_field.clone(), Value::from(r.prompt));
        body.insert(w.temperature_field.clone(), Value::from(r.temperature));
        body.insert(w.max_tokens_field.clone(), Value::from(r.max_tokens));
        body.insert(w.n_field.clone(), Value::from(r.n));
        if let (Some(field), Some(seed)) = (&w.seed_field, r.seed) {
            body.insert(field.clone(), Value::from(seed));
        }
        Value::Object(body)
    }

    pub fn parse_response(&self, question_id: &str, value: &Value, n: usize) -> Result<Vec<String>, AnswerError> {
        let malformed = |message: String| AnswerError::MalformedResponse {
            question_id: question_id.to_string(),
            message,
        };
        let choices = value
            .get(&self.wire.choices_field)
            .and_then(Value::as_array)
            .ok_or_else(|| malformed(format!("missing `{}` array", self.wire.choices_field)))?;
        let texts: Vec<String> = choices
            .iter()
            .map(|c| {
                c.get(&self.wire.text_field)
                    .and_then(Value::as_str)
                    .map(str::to_string)
                    .ok_or_else(|| malformed(format!("choice without `{}`", self.wire.text_field)))
            })
            .collect::<Result<_, _>>()?;
        if texts.len() < n {
            return Err(malformed(format!("expected {n} generations, got {}", texts.len())));
        }
        Ok(texts.into_iter().take(n).collect())
    }
}

impl Completer for HttpCompleter {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<Vec<String>, AnswerError> {
        let body = self.request_body(request);
        let qid = request.question_id.to_string();
        let value = net::post_json(&self.url, &body, self.api_key.as_deref(), &self.policy).map_err(|e| match e {
            NetError::Unavailable { .. } => AnswerError::EndpointUnavailable {
                question_id: qid.clone(),
                message: e.to_string(),
            },
            NetError::Status { code, body } => AnswerError::Rejected {
                question_id: qid.clone(),
                status: code,
                body,
            },
            NetError::Malformed(m) => AnswerError::MalformedResponse {
                question_id: qid.clone(),
                message: m,
            },
        })?;
        self.parse_response(request.question_id, &value, request.n)
    }
}

/// Fixture answers for one question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CannedAnswer {
    pub question_id: String,
    pub greedy: String,
    #[serde(default)]
    pub samples: Vec<String>,
}

/// Serves answers from a JSONL file of [`CannedAnswer`]s, keyed by question id.
/// Temperature 0 returns the greedy answer; otherwise the sample at each
/// requested index.
#[derive(Debug, Clone, Default)]
pub struct CannedCompleter {
    answers: HashMap<String, CannedAnswer>,
}

impl CannedCompleter {
    pub fn new(answers: impl IntoIterator<Item = CannedAnswer>) -> Self {
        CannedCompleter {
            answers: answers.into_iter().map(|a| (a.question_id.clone(), a)).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, AnswerError> {
        let store_err = |message: String| AnswerError::Store {
            path: path.to_path_buf(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| store_err(e.to_string()))?;
        let mut answers = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            answers.push(serde_json::from_str(line).map_err(|e| store_err(format!("line {}: {e}", i + 1)))?);
        }
        Ok(Self::new(answers))
    }
}

impl Completer for CannedCompleter {
    fn complete(&self, r: &CompletionRequest<'_>) -> Result<Vec<String>, AnswerError> {
        let entry = self
            .answers
            .get(r.question_id)
            .ok_or_else(|| AnswerError::MalformedResponse {
                question_id: r.question_id.to_string(),
                message: "no canned answer".into(),
            })?;
        if r.temperature == 0.0 {
            return Ok(vec![entry.greedy.clone(); r.n]);
        }
        r.sample_indices
            .iter()
            .map(|&i| {
                entry
                    .samples
                    .get(i)
                    .cloned()
                    .ok_or_else(|| AnswerError::MalformedResponse {
                        question_id: r.question_id.to_string(),
                        message: format!("no canned sample {i}"),
                    })
            })
            .collect()
    }
}

/// Builds the completer a model config asks for.
pub fn completer_for(config: &ModelConfig) -> Result<Box<dyn Completer>, AnswerError> {
    match config.api_style {
        ApiStyle::Completions => Ok(Box::new(HttpCompleter::from_config(config))),
        ApiStyle::Canned => {
            let path = config
                .canned_path
                .as_ref()
                .ok_or_else(|| AnswerError::InvalidRequest("canned api_style needs canned_path".into()))?;
            Ok(Box::new(CannedCompleter::load(path)?))
        }
    }
}

/// Line-delimited JSON store of [`AnswerRecord`]s. Appends are serialized and
/// flushed one record at a time, so an interrupted run keeps everything that
/// completed.
pub struct AnswerStore {
    path: PathBuf,
    records: Mutex<BTreeMap<AnswerKey, AnswerRecord>>,
    file: Mutex<File>,
}

impl AnswerStore {
    pub fn open(path: &Path) -> Result<Self, AnswerError> {
        let store_err = |message: String| AnswerError::Store {
            path: path.to_path_buf(),
            message,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| store_err(e.to_string()))?;
        }
        let mut records = BTreeMap::new();
        let mut keep_len = None;
        if path.exists() {
            let bytes = fs::read(path).map_err(|e| store_err(e.to_string()))?;
            let torn = !bytes.is_empty() && !bytes.ends_with(b"\n");
            if torn {
                keep_len = Some(bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1) as u64);
            }
            let complete = &bytes[..keep_len.map_or(bytes.len(), |l| l as usize)];
            if torn {
                log::warn!("{}: dropping torn final line", path.display());
            }
            for line in BufReader::new(complete).lines() {
                let line = line.map_err(|e| store_err(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<AnswerRecord>(&line) {
                    Ok(r) => {
                        records.insert(r.key(), r);
                    }
                    Err(e) => return Err(store_err(e.to_string())),
                }
            }
        }
        if let Some(len) = keep_len {
            // cut the partial record so later appends start on a clean line
            let f = OpenOptions::new()
                .write(true)
                .open(path)
                .map_err(|e| store_err(e.to_string()))?;
            f.set_len(len).map_err(|e| store_err(e.to_string()))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| store_err(e.to_string()))?;
        Ok(AnswerStore {
            path: path.to_path_buf(),
            records: Mutex::new(records),
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn contains(&self, key: &AnswerKey) -> bool {
        self.records.lock().expect("store poisoned").contains_key(key)
    }

    pub fn get(&self, key: &AnswerKey) -> Option<AnswerRecord> {
        self.records.lock().expect("store poisoned").get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.records.lock().expect("store poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All records in key order.
    pub fn records(&self) -> Vec<AnswerRecord> {
        self.records.lock().expect("store poisoned").values().cloned().collect()
    }

    pub fn append(&self, batch: &[AnswerRecord]) -> Result<(), AnswerError> {
        let mut buf = Vec::new();
        for r in batch {
            serde_json::to_writer(&mut buf, r).expect("answer record serializes");
            buf.push(b'\n');
        }
        let mut f = self.file.lock().expect("store file poisoned");
        f.write_all(&buf)
            .and_then(|_| f.flush())
            .map_err(|e| AnswerError::Store {
                path: self.path.clone(),
                message: e.to_string(),
            })?;
        let mut recs = self.records.lock().expect("store poisoned");
        for r in batch {
            recs.insert(r.key(), r.clone());
        }
        Ok(())
    }
}

/// Deterministic per-question seed derived from the run seed.
pub fn question_seed(seed: u64, question_id: &str) -> u64 {
    crate::semantics::fnv1a64(question_id.as_bytes()) ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

struct Job<'a> {
    question: &'a QuestionRecord,
    missing: Vec<usize>,
}

/// Collects answers for `questions`, skipping `(question, sample_index)` pairs
/// already in `store`. New answers are appended to the store as they arrive.
/// Returns every answer for `questions`, ordered by question then sample
/// index.
pub fn collect_answers(
    questions: &[QuestionRecord],
    config: &ModelConfig,
    decoding: Decoding,
    completer: &dyn Completer,
    store: &AnswerStore,
    seed: u64,
) -> Result<Vec<AnswerRecord>, AnswerError> {
    config.validate()?;
    let (k, temperature) = (decoding.k(), decoding.temperature());
    if k == 0 {
        return Err(AnswerError::InvalidRequest("k must be positive".into()));
    }
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(AnswerError::InvalidRequest("temperature must be nonnegative".into()));
    }
    let mode = decoding.mode();
    let key = |qid: &str, i: usize| AnswerKey {
        model_id: config.model_id.clone(),
        question_id: qid.to_string(),
        mode,
        sample_index: i,
    };

    let mut seen = HashSet::new();
    let jobs: Vec<Job<'_>> = questions
        .iter()
        .filter(|q| seen.insert(q.id.as_str()))
        .filter_map(|q| {
            let missing: Vec<usize> = (0..k).filter(|&i| !store.contains(&key(&q.id, i))).collect();
            (!missing.is_empty()).then_some(Job { question: q, missing })
        })
        .collect();

    let results = par::bounded_try_map(&jobs, config.max_parallel, |job| {
        let prompt = render_prompt(&job.question.question, &config.prompt_template)?;
        let request = CompletionRequest {
            question_id: &job.question.id,
            prompt: &prompt,
            temperature,
            max_tokens: config.max_new_tokens,
            n: job.missing.len(),
            sample_indices: &job.missing,
            seed: (mode == Mode::Sample).then(|| question_seed(seed, &job.question.id)),
        };
        let texts = completer.complete(&request)?;
        if texts.len() != job.missing.len() {
            return Err(AnswerError::MalformedResponse {
                question_id: job.question.id.clone(),
                message: format!("expected {} generations, got {}", job.missing.len(), texts.len()),
            });
        }
        let batch: Vec<AnswerRecord> = job
            .missing
            .iter()
            .zip(texts)
            .map(|(&i, raw)| AnswerRecord {
                question_id: job.question.id.clone(),
                model_id: config.model_id.clone(),
                mode,
                sample_index: i,
                temperature,
                truncated_text: truncate_first_sentence(&raw),
                raw_text: raw,
            })
            .collect();
        store.append(&batch)
    });
    if let Some(err) = results.into_iter().flatten().find_map(Result::err) {
        return Err(err);
    }

    let mut out = Vec::with_capacity(questions.len() * k);
    for q in questions {
        for i in 0..k {
            if let Some(r) = store.get(&key(&q.id, i)) {
                out.push(r);
            }
        }
    }
    Ok(out)
}
