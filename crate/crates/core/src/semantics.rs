//! Embedding providers, the internal-similarity metric and the consistency /
//! certainty features derived from it.
//!
//! `int_sim` of a multiset of texts is the mean pairwise cosine similarity of
//! their embeddings, each cosine clamped at 0 so the result lies in `[0, 1]`.
//! Semantic consistency applies it to the greedy answers of a question and its
//! paraphrases; certainty applies it to temperature-sampled answers of the
//! question alone.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::answering::{AnswerRecord, Mode};
use crate::dataset::QuestionRecord;
use crate::net::{self, NetError, RetryPolicy};
use crate::par::{self, Execution};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("provider returned {got} vectors for {expected} texts")]
    CountMismatch { expected: usize, got: usize },
    #[error("provider returned a non-finite or zero vector")]
    InvalidVector,
    #[error("embedding cache {path}: {message}")]
    Cache { path: PathBuf, message: String },
}

#[derive(Debug, Error)]
pub enum SemanticsError {
    #[error("int_sim needs at least two texts, got {0}")]
    TooFewTexts(usize),
    #[error("question `{question_id}` is missing answers for: {}", missing.join(", "))]
    IncompleteAnswerSet { question_id: String, missing: Vec<String> },
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// A unit-norm embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Wraps `values` without normalizing them.
    pub fn new(values: Vec<f64>) -> Self {
        Embedding(values)
    }

    /// Scales `values` to unit L2 norm.
    pub fn normalized(mut values: Vec<f64>) -> Result<Self, EmbedError> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(EmbedError::InvalidVector);
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Ok(Embedding(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Cosine similarity. Identical vectors give exactly 1.0.
pub fn cosine(a: &Embedding, b: &Embedding) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.0.iter().zip(&b.0) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    // sqrt(x * x) == x exactly, so a == b yields dot / na == 1.0
    dot / (na * nb).sqrt()
}

/// Cosine clamped to `[0, 1]`.
pub fn clamped_cosine(a: &Embedding, b: &Embedding) -> f64 {
    cosine(a, b).clamp(0.0, 1.0)
}

/// Turns texts into vectors of a fixed dimension.
pub trait EmbeddingProvider: Send + Sync {
    /// Stable identifier used as the cache key namespace.
    fn id(&self) -> &str;
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Embedding>, EmbedError>;
}

/// Embeds `texts`, checking that one vector comes back per text and that all
/// vectors share a dimension.
pub fn embed(texts: &[String], provider: &dyn EmbeddingProvider) -> Result<Vec<Embedding>, EmbedError> {
    let out = provider.embed_batch(texts)?;
    if out.len() != texts.len() {
        return Err(EmbedError::CountMismatch {
            expected: texts.len(),
            got: out.len(),
        });
    }
    if let Some(first) = out.first() {
        let d = first.dim();
        if let Some(bad) = out.iter().find(|e| e.dim() != d) {
            return Err(EmbedError::DimensionMismatch {
                expected: d,
                got: bad.dim(),
            });
        }
    }
    Ok(out)
}

/// Offline embedder: character trigram hashing.
///
/// The text is framed as `^text$`; each character trigram of the framed
/// string (or the whole framed string when it is shorter than three
/// characters) is hashed with 64-bit FNV-1a over its UTF-8 bytes and counted in
/// bucket `hash % dimension`. The count vector is L2-normalized. Text is used
/// as given, so callers normalize case beforehand.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dimension: usize,
    id: String,
}

impl HashingEmbedder {
    pub const DEFAULT_DIMENSION: usize = 256;

    pub fn new(dimension: usize) -> Self {
        let dimension = dimension.max(1);
        HashingEmbedder {
            dimension,
            id: format!("hashing-trigram-{dimension}"),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn embed_one(&self, text: &str) -> Embedding {
        let framed: Vec<char> = std::iter::once('^')
            .chain(text.chars())
            .chain(std::iter::once('$'))
            .collect();
        let mut counts = vec![0.0f64; self.dimension];
        let mut buf = String::new();
        let mut add = |gram: &[char]| {
            buf.clear();
            buf.extend(gram);
            counts[(fnv1a64(buf.as_bytes()) % self.dimension as u64) as usize] += 1.0;
        };
        if framed.len() < 3 {
            add(&framed);
        } else {
            framed.windows(3).for_each(&mut add);
        }
        Embedding::normalized(counts).expect("at least one trigram is counted")
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new(Self::DEFAULT_DIMENSION)
    }
}

impl EmbeddingProvider for HashingEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Embedding>, EmbedError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Embedding endpoint client: `POST {model, input: [..]}`.
///
/// Accepts a bare array of vectors, `{"embeddings": [..]}` or the
/// `{"data": [{"embedding": [..]}]}` layout. Vectors are L2-normalized.
#[derive(Debug, Clone)]
pub struct HttpEmbedder {
    pub url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub batch_size: usize,
    pub policy: RetryPolicy,
    id: String,
}

impl HttpEmbedder {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        let model = model.into();
        HttpEmbedder {
            url: url.into(),
            id: format!("http-{model}"),
            model,
            api_key: None,
            batch_size: 64,
            policy: RetryPolicy {
                timeout: Duration::from_secs(60),
                ..RetryPolicy::default()
            },
        }
    }

    fn parse(value: Value) -> Result<Vec<Vec<f64>>, EmbedError> {
        let list = match value {
            Value::Array(a) => a,
            Value::Object(mut o) => match (o.remove("embeddings"), o.remove("data")) {
                (Some(Value::Array(a)), _) => a,
                (_, Some(Value::Array(a))) => a
                    .into_iter()
                    .map(|mut item| item.get_mut("embedding").map(Value::take).unwrap_or(Value::Null))
                    .collect(),
                _ => return Err(EmbedError::ProviderUnavailable("unrecognized response layout".into())),
            },
            _ => return Err(EmbedError::ProviderUnavailable("unrecognized response layout".into())),
        };
        list.into_iter()
            .map(|v| {
                serde_json::from_value::<Vec<f64>>(v)
                    .map_err(|e| EmbedError::ProviderUnavailable(format!("bad vector: {e}")))
            })
            .collect()
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Embedding>, EmbedError> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.batch_size.max(1)) {
            let body = json!({ "model": self.model, "input": chunk });
            let value = net::post_json(&self.url, &body, self.api_key.as_deref(), &self.policy)
                .map_err(|e: NetError| EmbedError::ProviderUnavailable(e.to_string()))?;
            let vectors = Self::parse(value)?;
            if vectors.len() != chunk.len() {
                return Err(EmbedError::CountMismatch {
                    expected: chunk.len(),
                    got: vectors.len(),
                });
            }
            for v in vectors {
                out.push(Embedding::normalized(v)?);
            }
        }
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    provider_id: String,
    dimension: usize,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    text: String,
    vector: Embedding,
}

/// Memoizes another provider by text, optionally persisted to a JSONL file
/// whose first line records the provider id and dimension.
pub struct CachedEmbedder<P> {
    inner: P,
    memory: Mutex<HashMap<String, Embedding>>,
    file: Option<(PathBuf, Mutex<File>)>,
    dimension: Mutex<Option<usize>>,
}

impl<P: EmbeddingProvider> CachedEmbedder<P> {
    pub fn in_memory(inner: P) -> Self {
        CachedEmbedder {
            inner,
            memory: Mutex::new(HashMap::new()),
            file: None,
            dimension: Mutex::new(None),
        }
    }

    /// Opens (or creates) a cache file. A file written by a different provider
    /// is rejected.
    pub fn with_file(inner: P, path: &Path) -> Result<Self, EmbedError> {
        let cache_err = |message: String| EmbedError::Cache {
            path: path.to_path_buf(),
            message,
        };
        let mut memory = HashMap::new();
        let mut dimension = None;
        let mut needs_header = true;
        if path.exists() {
            let f = File::open(path).map_err(|e| cache_err(e.to_string()))?;
            let mut lines = BufReader::new(f).lines();
            if let Some(first) = lines.next() {
                let first = first.map_err(|e| cache_err(e.to_string()))?;
                let header: CacheHeader =
                    serde_json::from_str(&first).map_err(|e| cache_err(format!("bad header: {e}")))?;
                if header.provider_id != inner.id() {
                    return Err(cache_err(format!(
                        "written by provider `{}`, not `{}`",
                        header.provider_id,
                        inner.id()
                    )));
                }
                dimension = Some(header.dimension);
                needs_header = false;
                for line in lines {
                    let line = line.map_err(|e| cache_err(e.to_string()))?;
                    // a torn final line from an interrupted run is dropped
                    if let Ok(entry) = serde_json::from_str::<CacheLine>(&line) {
                        memory.insert(entry.text, entry.vector);
                    }
                }
            }
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| cache_err(e.to_string()))?;
        if !needs_header {
            // keep appended lines on their own line after a torn write
            let len = file.metadata().map_err(|e| cache_err(e.to_string()))?.len();
            if len > 0
                && !std::fs::read(path)
                    .map_err(|e| cache_err(e.to_string()))?
                    .ends_with(b"\n")
            {
                file.write_all(b"\n").map_err(|e| cache_err(e.to_string()))?;
            }
        }
        Ok(CachedEmbedder {
            inner,
            memory: Mutex::new(memory),
            file: Some((path.to_path_buf(), Mutex::new(file))),
            dimension: Mutex::new(if needs_header { None } else { dimension }),
        })
    }

    pub fn len(&self) -> usize {
        self.memory.lock().expect("cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn persist(&self, fresh: &[(String, Embedding)]) -> Result<(), EmbedError> {
        let Some((path, file)) = &self.file else {
            return Ok(());
        };
        let cache_err = |e: std::io::Error| EmbedError::Cache {
            path: path.clone(),
            message: e.to_string(),
        };
        let mut f = file.lock().expect("cache file poisoned");
        let mut dim = self.dimension.lock().expect("cache poisoned");
        let mut buf = Vec::new();
        if dim.is_none() {
            if let Some((_, e)) = fresh.first() {
                let header = CacheHeader {
                    provider_id: self.inner.id().to_string(),
                    dimension: e.dim(),
                };
                serde_json::to_writer(&mut buf, &header).expect("header serializes");
                buf.push(b'\n');
                *dim = Some(e.dim());
            }
        }
        for (text, vector) in fresh {
            serde_json::to_writer(
                &mut buf,
                &CacheLine {
                    text: text.clone(),
                    vector: vector.clone(),
                },
            )
            .expect("cache line serializes");
            buf.push(b'\n');
        }
        f.write_all(&buf).map_err(cache_err)?;
        f.flush().map_err(cache_err)
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for CachedEmbedder<P> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Embedding>, EmbedError> {
        let misses: Vec<String> = {
            let mem = self.memory.lock().expect("cache poisoned");
            let mut seen = HashSet::new();
            texts
                .iter()
                .filter(|t| !mem.contains_key(*t) && seen.insert(t.as_str()))
                .cloned()
                .collect()
        };
        if !misses.is_empty() {
            let fresh = embed(&misses, &self.inner)?;
            let expected = *self.dimension.lock().expect("cache poisoned");
            if let (Some(d), Some(e)) = (expected, fresh.first()) {
                if e.dim() != d {
                    return Err(EmbedError::DimensionMismatch {
                        expected: d,
                        got: e.dim(),
                    });
                }
            }
            let pairs: Vec<(String, Embedding)> = misses.into_iter().zip(fresh).collect();
            self.persist(&pairs)?;
            self.memory.lock().expect("cache poisoned").extend(pairs);
        }
        let mem = self.memory.lock().expect("cache poisoned");
        Ok(texts.iter().map(|t| mem[t].clone()).collect())
    }
}

/// Mean pairwise clamped cosine over precomputed embeddings.
pub fn int_sim_vectors(vectors: &[&Embedding]) -> Result<f64, SemanticsError> {
    let n = vectors.len();
    if n < 2 {
        return Err(SemanticsError::TooFewTexts(n));
    }
    let mut total = 0.0;
    for i in 0..n - 1 {
        for j in i + 1..n {
            total += clamped_cosine(vectors[i], vectors[j]);
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    Ok((total / pairs).clamp(0.0, 1.0))
}

/// Internal similarity of a multiset of texts under `provider`.
pub fn int_sim(texts: &[String], provider: &dyn EmbeddingProvider) -> Result<f64, SemanticsError> {
    if texts.len() < 2 {
        return Err(SemanticsError::TooFewTexts(texts.len()));
    }
    let vectors = embed(texts, provider)?;
    let refs: Vec<&Embedding> = vectors.iter().collect();
    int_sim_vectors(&refs)
}

/// Answer normalization applied before embedding.
pub fn normalize_answer(text: &str) -> String {
    text.trim().to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyFeatures {
    pub question_id: String,
    pub scons: f64,
    pub cert: f64,
}

/// Normalized answer texts feeding one question's features.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerSets {
    pub question_id: String,
    /// Greedy answers to the question and each of its paraphrases.
    pub greedy: Vec<String>,
    /// Sampled answers to the question, by sample index.
    pub samples: Vec<String>,
}

/// Lookup of answers by question id.
#[derive(Debug, Default)]
pub struct AnswerIndex<'a> {
    greedy: HashMap<&'a str, &'a AnswerRecord>,
    samples: HashMap<(&'a str, usize), &'a AnswerRecord>,
}

impl<'a> AnswerIndex<'a> {
    pub fn new(answers: impl IntoIterator<Item = &'a AnswerRecord>) -> Self {
        let mut idx = AnswerIndex::default();
        for a in answers {
            match a.mode {
                Mode::Greedy => {
                    idx.greedy.insert(a.question_id.as_str(), a);
                }
                Mode::Sample => {
                    idx.samples.insert((a.question_id.as_str(), a.sample_index), a);
                }
            }
        }
        idx
    }

    pub fn greedy(&self, question_id: &str) -> Option<&'a AnswerRecord> {
        self.greedy.get(question_id).copied()
    }

    pub fn sample(&self, question_id: &str, index: usize) -> Option<&'a AnswerRecord> {
        self.samples.get(&(question_id, index)).copied()
    }

    /// Collects the greedy answers of `original` and `paraphrase_ids` and
    /// samples `0..k` of `original`.
    pub fn answer_sets(
        &self,
        original: &QuestionRecord,
        paraphrase_ids: &[&str],
        k: usize,
    ) -> Result<AnswerSets, SemanticsError> {
        let mut missing = Vec::new();
        let mut greedy = Vec::with_capacity(1 + paraphrase_ids.len());
        for id in std::iter::once(original.id.as_str()).chain(paraphrase_ids.iter().copied()) {
            match self.greedy(id) {
                Some(a) => greedy.push(normalize_answer(&a.truncated_text)),
                None => missing.push(format!("{id} (greedy)")),
            }
        }
        let mut samples = Vec::with_capacity(k);
        for i in 0..k {
            match self.sample(&original.id, i) {
                Some(a) => samples.push(normalize_answer(&a.truncated_text)),
                None => missing.push(format!("{} (sample {i})", original.id)),
            }
        }
        if !missing.is_empty() {
            return Err(SemanticsError::IncompleteAnswerSet {
                question_id: original.id.clone(),
                missing,
            });
        }
        if greedy.len() < 2 {
            return Err(SemanticsError::TooFewTexts(greedy.len()));
        }
        if samples.len() < 2 {
            return Err(SemanticsError::TooFewTexts(samples.len()));
        }
        Ok(AnswerSets {
            question_id: original.id.clone(),
            greedy,
            samples,
        })
    }
}

/// SCons and Cert for one original question.
///
/// `paraphrase_answers` must hold greedy answers for the original and every id
/// in `paraphrase_ids`; `sampled_answers` must hold samples `0..k` of the
/// original.
pub fn consistency_features(
    original: &QuestionRecord,
    paraphrase_ids: &[&str],
    paraphrase_answers: &[AnswerRecord],
    sampled_answers: &[AnswerRecord],
    k: usize,
    provider: &dyn EmbeddingProvider,
) -> Result<ConsistencyFeatures, SemanticsError> {
    let index = AnswerIndex::new(paraphrase_answers.iter().chain(sampled_answers));
    let sets = index.answer_sets(original, paraphrase_ids, k)?;
    let mut out = consistency_batch(std::slice::from_ref(&sets), provider, Execution::Sequential)?;
    Ok(out.remove(0))
}

/// Features for many questions. All distinct texts are embedded in a single
/// provider call; the per-question similarity loops run under `exec`.
pub fn consistency_batch(
    sets: &[AnswerSets],
    provider: &dyn EmbeddingProvider,
    exec: Execution,
) -> Result<Vec<ConsistencyFeatures>, SemanticsError> {
    let mut unique: Vec<String> = Vec::new();
    let mut seen = HashSet::new();
    for s in sets {
        for t in s.greedy.iter().chain(&s.samples) {
            if seen.insert(t.as_str()) {
                unique.push(t.clone());
            }
        }
    }
    let vectors = if unique.is_empty() {
        Vec::new()
    } else {
        embed(&unique, provider)?
    };
    let lookup: HashMap<&str, &Embedding> = unique.iter().map(String::as_str).zip(vectors.iter()).collect();

    let results = par::map(exec, sets, |s| {
        let g: Vec<&Embedding> = s.greedy.iter().map(|t| lookup[t.as_str()]).collect();
        let c: Vec<&Embedding> = s.samples.iter().map(|t| lookup[t.as_str()]).collect();
        Ok(ConsistencyFeatures {
            question_id: s.question_id.clone(),
            scons: int_sim_vectors(&g)?,
            cert: int_sim_vectors(&c)?,
        })
    });
    results.into_iter().collect()
}
