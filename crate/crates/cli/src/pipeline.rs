//! Stage orchestration: prerequisites, manifests, locking and artifacts.
//!
//! Layout of the output directory:
//!
//! ```text
//! questions.jsonl  counts.json  quality.json           expand
//! answers/<model>.jsonl                                answer
//! features/<model>.csv                                 featurize
//! models/<model>/fit_report.json coefficients.csv
//!                wald.csv eval.json                    fit
//! models/<model>/ablation.csv ablation.json            ablate
//! models/<model>/diagnostics.csv kde.csv               diagnose
//! report.json  report.md                               report
//! manifests/<stage>.json
//! cache/                                               embeddings, page views
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use qappp_core::answering::{collect_answers, completer_for, AnswerError, AnswerRecord, Decoding};
use qappp_core::dataset::{
    count_report, expand_templates, load_dataset, paraphrase_quality, read_questions, write_questions, CountReport,
    DatasetError, QualityReport,
};
use qappp_core::evaluation::{
    binned_diagnostics, category_means, filter_categories, fit_and_evaluate, kde_summary, run_ablation, write_bins_csv,
    write_kde_csv, AblationReport, EvalError, EvalReport, CATEGORY, RESPONSE,
};
use qappp_core::formula::{Column, DesignEncoding, FormulaError, Frame};
use qappp_core::glm::{coefficient_table, model_stats, wald_term_tests, FitOptions, GlmError};
use qappp_core::scoring::{fetch_popularity, is_correct, PageviewsClient, PopularityFeature, ScoringError};
use qappp_core::semantics::{
    consistency_batch, AnswerIndex, CachedEmbedder, EmbedError, EmbeddingProvider, SemanticsError,
};
use qappp_core::{AnswerStore, Execution, QuestionRecord, TemplateSet};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, PipelineConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, clap::ValueEnum)]
pub enum Stage {
    Expand,
    Answer,
    Featurize,
    Fit,
    Ablate,
    Diagnose,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Expand,
        Stage::Answer,
        Stage::Featurize,
        Stage::Fit,
        Stage::Ablate,
        Stage::Diagnose,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Expand => "expand",
            Stage::Answer => "answer",
            Stage::Featurize => "featurize",
            Stage::Fit => "fit",
            Stage::Ablate => "ablate",
            Stage::Diagnose => "diagnose",
            Stage::Report => "report",
        }
    }

    pub fn prerequisites(self) -> &'static [Stage] {
        match self {
            Stage::Expand => &[],
            Stage::Answer => &[Stage::Expand],
            Stage::Featurize => &[Stage::Expand, Stage::Answer],
            Stage::Fit | Stage::Ablate | Stage::Diagnose => &[Stage::Featurize],
            Stage::Report => &[Stage::Expand, Stage::Fit, Stage::Ablate, Stage::Diagnose],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("stage `{stage}` needs `{prerequisite}` to have completed first")]
    MissingPrerequisite { stage: Stage, prerequisite: Stage },
    #[error("stage `{stage}` has a manifest from different inputs ({}); rerun with --force", reasons.join("; "))]
    StaleManifest { stage: Stage, reasons: Vec<String> },
    #[error("output directory is locked by another run ({0}); remove the file if no run is active")]
    Locked(PathBuf),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Answer(#[from] AnswerError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Semantics(#[from] SemanticsError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Formula(#[from] FormulaError),
    #[error(transparent)]
    Glm(#[from] GlmError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {message}")]
    Artifact { path: PathBuf, message: String },
    #[error("model `{model}`: {source}")]
    Model {
        model: String,
        #[source]
        source: Box<PipelineError>,
    },
}

impl PipelineError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::MissingPrerequisite { .. } => 3,
            PipelineError::StaleManifest { .. } => 4,
            PipelineError::Locked(_) => 5,
            PipelineError::Config(_) => 2,
            PipelineError::Model { source, .. } => source.exit_code(),
            _ => 1,
        }
    }

    fn in_model(model: &str) -> impl FnOnce(PipelineError) -> PipelineError + '_ {
        move |e| PipelineError::Model {
            model: model.to_string(),
            source: Box::new(e),
        }
    }
}

fn artifact_err(path: &Path, e: impl fmt::Display) -> PipelineError {
    PipelineError::Artifact {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    UpToDate,
}

/// What a completed stage consumed and produced. Paths of files inside the
/// output directory are relative to it; external inputs use a label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn digest_file(path: &Path) -> Result<String, PipelineError> {
    fs::read(path)
        .map(|b| sha256_hex(&b))
        .map_err(|e| artifact_err(path, e))
}

/// Hash of a JSON value. serde_json maps are ordered, so equal values hash
/// equally.
fn hash_value(v: &Value) -> String {
    sha256_hex(&serde_json::to_vec(v).expect("json serializes"))
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| artifact_err(dir, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact");
    let tmp = dir.join(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(|e| artifact_err(&tmp, e))?;
    f.write_all(bytes)
        .and_then(|_| f.sync_all())
        .map_err(|e| artifact_err(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| artifact_err(path, e))
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("artifact serializes");
    v.push(b'\n');
    v
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let bytes = fs::read(path).map_err(|e| artifact_err(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| artifact_err(path, e))
}

/// Exclusive lock on an output directory, released on drop.
struct Lock(PathBuf);

impl Lock {
    fn acquire(dir: &Path) -> Result<Self, PipelineError> {
        let path = dir.join(".qappp.lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Lock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PipelineError::Locked(path)),
            Err(e) => Err(artifact_err(&path, e)),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Collects a stage's artifacts: each is written atomically and digested.
struct Outputs<'a> {
    root: &'a Path,
    digests: BTreeMap<String, String>,
}

impl<'a> Outputs<'a> {
    fn new(root: &'a Path) -> Self {
        Outputs {
            root,
            digests: BTreeMap::new(),
        }
    }

    fn put(&mut self, rel: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        write_atomic(&self.root.join(rel), bytes)?;
        self.digests.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }
}

/// Paths of artifacts inside the output directory.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub const QUESTIONS: &'static str = "questions.jsonl";
    pub const COUNTS: &'static str = "counts.json";
    pub const QUALITY: &'static str = "quality.json";
    pub const REPORT_JSON: &'static str = "report.json";
    pub const REPORT_MD: &'static str = "report.md";

    pub fn new(root: &Path) -> Self {
        Layout {
            root: root.to_path_buf(),
        }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn answers(model: &str) -> String {
        format!("answers/{model}.jsonl")
    }

    pub fn features(model: &str) -> String {
        format!("features/{model}.csv")
    }

    pub fn model_file(model: &str, file: &str) -> String {
        format!("models/{model}/{file}")
    }

    pub fn manifest(&self, stage: Stage) -> PathBuf {
        self.root.join("manifests").join(format!("{}.json", stage.name()))
    }

    fn cache(&self, file: &str) -> PathBuf {
        self.root.join("cache").join(file)
    }
}

fn read_manifest(layout: &Layout, stage: Stage) -> Result<Option<Manifest>, PipelineError> {
    let path = layout.manifest(stage);
    if !path.exists() {
        return Ok(None);
    }
    read_json(&path).map(Some)
}

/// True when every output listed in the manifest exists with its recorded
/// digest.
fn outputs_intact(layout: &Layout, m: &Manifest) -> bool {
    m.outputs
        .iter()
        .all(|(rel, digest)| fs::read(layout.path(rel)).is_ok_and(|b| &sha256_hex(&b) == digest))
}

/// The config hash and input digests a stage would record right now.
fn stage_inputs(
    stage: Stage,
    c: &PipelineConfig,
    layout: &Layout,
) -> Result<(String, BTreeMap<String, String>), PipelineError> {
    let mut inputs = BTreeMap::new();
    let internal = |inputs: &mut BTreeMap<String, String>, rel: String| -> Result<(), PipelineError> {
        inputs.insert(rel.clone(), digest_file(&layout.path(&rel))?);
        Ok(())
    };
    let models: Vec<&str> = c.models.iter().map(|m| m.model_id.as_str()).collect();
    let relevant = match stage {
        Stage::Expand => {
            inputs.insert("dataset".into(), digest_file(&c.dataset)?);
            inputs.insert("templates".into(), digest_file(&c.templates)?);
            json!({ "embedding": c.embedding_identity() })
        }
        Stage::Answer => {
            internal(&mut inputs, Layout::QUESTIONS.into())?;
            let mut per_model = Vec::new();
            for m in &c.models {
                if let Some(p) = &m.canned_path {
                    inputs.insert(format!("canned/{}", m.model_id), digest_file(p)?);
                }
                per_model.push(json!({
                    "model_id": m.model_id,
                    "endpoint_url": m.endpoint_url,
                    "api_style": m.api_style,
                    "prompt_template": m.prompt_template,
                    "max_new_tokens": m.max_new_tokens,
                    "wire": m.wire,
                }));
            }
            json!({ "models": per_model, "sampling": c.sampling, "seed": c.seed })
        }
        Stage::Featurize => {
            internal(&mut inputs, Layout::QUESTIONS.into())?;
            for m in &models {
                internal(&mut inputs, Layout::answers(m))?;
            }
            let questions = read_questions(&layout.path(Layout::QUESTIONS))?;
            // the page view settings matter only when something must be fetched
            let popularity = if questions.iter().any(|q| q.is_original && q.s_pop.is_none()) {
                let p = &c.popularity;
                json!({
                    "window": p.window()?.key(),
                    "project": p.client.project,
                    "access": p.client.access,
                    "agent": p.client.agent,
                })
            } else {
                Value::Null
            };
            json!({
                "models": models,
                "case_mode": c.case_mode,
                "embedding": c.embedding_identity(),
                "k": c.sampling.k,
                "popularity": popularity,
            })
        }
        Stage::Fit | Stage::Ablate | Stage::Diagnose => {
            for m in &models {
                internal(&mut inputs, Layout::features(m))?;
            }
            match stage {
                Stage::Fit => json!({
                    "models": models,
                    "formula": c.formula,
                    "test_fraction": c.test_fraction,
                    "category_threshold": c.category_threshold,
                    "seed": c.seed,
                    "ridge": c.ridge,
                }),
                Stage::Ablate => json!({
                    "models": models,
                    "subsets": c.ablation.subsets,
                    "test_fraction": c.test_fraction,
                    "category_threshold": c.category_threshold,
                    "seed": c.seed,
                    "ridge": c.ridge,
                }),
                _ => json!({ "models": models, "diagnostics": c.diagnostics }),
            }
        }
        Stage::Report => {
            internal(&mut inputs, Layout::COUNTS.into())?;
            internal(&mut inputs, Layout::QUALITY.into())?;
            for m in &models {
                for f in ["fit_report.json", "eval.json", "ablation.json"] {
                    internal(&mut inputs, Layout::model_file(m, f))?;
                }
            }
            json!({ "models": models })
        }
    };
    Ok((
        hash_value(&json!({ "stage": stage.name(), "config": relevant })),
        inputs,
    ))
}

fn stale_reasons(old: &Manifest, hash: &str, inputs: &BTreeMap<String, String>) -> Vec<String> {
    let mut reasons = Vec::new();
    if old.config_hash != hash {
        reasons.push("configuration changed".into());
    }
    for (k, v) in inputs {
        match old.inputs.get(k) {
            None => reasons.push(format!("new input {k}")),
            Some(o) if o != v => reasons.push(format!("{k} changed")),
            _ => {}
        }
    }
    for k in old.inputs.keys().filter(|k| !inputs.contains_key(*k)) {
        reasons.push(format!("input {k} removed"));
    }
    reasons
}

/// Runs one stage against `config`.
///
/// Returns [`Outcome::UpToDate`] without touching anything when the stage's
/// manifest matches the current config and inputs and its outputs are intact.
/// A manifest from different config or inputs is an error unless `force`.
pub fn run_stage(stage: Stage, config: &PipelineConfig, force: bool) -> Result<Outcome, PipelineError> {
    config.validate()?;
    let layout = Layout::new(&config.output_dir);
    fs::create_dir_all(&layout.root).map_err(|e| artifact_err(&layout.root, e))?;
    let _lock = Lock::acquire(&layout.root)?;

    for &pre in stage.prerequisites() {
        match read_manifest(&layout, pre)? {
            Some(m) if outputs_intact(&layout, &m) => {}
            _ => {
                return Err(PipelineError::MissingPrerequisite {
                    stage,
                    prerequisite: pre,
                })
            }
        }
    }

    let (config_hash, inputs) = stage_inputs(stage, config, &layout)?;
    let previous = read_manifest(&layout, stage)?;
    if let Some(old) = &previous {
        let reasons = stale_reasons(old, &config_hash, &inputs);
        if reasons.is_empty() && outputs_intact(&layout, old) {
            log::info!("{stage}: up to date");
            return Ok(Outcome::UpToDate);
        }
        if !reasons.is_empty() && !force {
            return Err(PipelineError::StaleManifest { stage, reasons });
        }
    }

    let mut out = Outputs::new(&layout.root);
    let identity = hash_value(&json!({ "config": config_hash, "inputs": inputs }));
    match stage {
        Stage::Expand => expand(config, &layout, &mut out)?,
        Stage::Answer => answer(config, &layout, &identity, &mut out)?,
        Stage::Featurize => featurize(config, &layout, &mut out)?,
        Stage::Fit => fit(config, &layout, &mut out)?,
        Stage::Ablate => ablate(config, &layout, &mut out)?,
        Stage::Diagnose => diagnose(config, &layout, &mut out)?,
        Stage::Report => report(config, &layout, &mut out)?,
    }
    let manifest = Manifest {
        stage: stage.name().into(),
        config_hash,
        inputs,
        outputs: out.digests,
    };
    write_atomic(&layout.manifest(stage), &json_bytes(&manifest))?;
    log::info!("{stage}: done");
    Ok(Outcome::Ran)
}

/// Runs every stage in order, forcing none.
pub fn run_all(config: &PipelineConfig) -> Result<(), PipelineError> {
    for stage in Stage::ALL {
        run_stage(stage, config, false)?;
    }
    Ok(())
}

fn embedder(
    config: &PipelineConfig,
    layout: &Layout,
) -> Result<CachedEmbedder<crate::config::Embedder>, PipelineError> {
    let inner = config.embedding.build();
    let file: String = inner
        .id()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect();
    let path = layout.cache(&format!("embeddings-{file}.jsonl"));
    fs::create_dir_all(path.parent().expect("cache dir")).map_err(|e| artifact_err(&path, e))?;
    Ok(CachedEmbedder::with_file(inner, &path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountsArtifact {
    #[serde(flatten)]
    pub report: CountReport,
    /// Categories whose totals are not `(1 + alternatives) * originals`.
    pub flagged: Vec<String>,
}

fn expand(config: &PipelineConfig, layout: &Layout, out: &mut Outputs<'_>) -> Result<(), PipelineError> {
    let originals = load_dataset(&config.dataset)?;
    let templates = TemplateSet::load(&config.templates)?;
    let expanded = expand_templates(&originals, &templates)?;
    let counts = count_report(&expanded)?;
    for cat in counts.flagged() {
        log::warn!("category `{cat}` has non-uniform paraphrase counts");
    }
    let quality = paraphrase_quality(&expanded, &embedder(config, layout)?)?;

    let mut buf = Vec::new();
    write_questions(&mut buf, &expanded).map_err(|e| artifact_err(&layout.path(Layout::QUESTIONS), e))?;
    out.put(Layout::QUESTIONS, &buf)?;
    let flagged = counts.flagged().into_iter().map(str::to_string).collect();
    out.put(
        Layout::COUNTS,
        &json_bytes(&CountsArtifact {
            report: counts,
            flagged,
        }),
    )?;
    out.put(Layout::QUALITY, &json_bytes(&quality))?;
    log::info!("expand: {} originals, {} questions", originals.len(), expanded.len());
    Ok(())
}

fn answer(
    config: &PipelineConfig,
    layout: &Layout,
    identity: &str,
    out: &mut Outputs<'_>,
) -> Result<(), PipelineError> {
    let questions = read_questions(&layout.path(Layout::QUESTIONS))?;
    let originals: Vec<QuestionRecord> = questions.iter().filter(|q| q.is_original).cloned().collect();

    // Stores are resumed only by a run with the same config and inputs.
    let marker = layout.root.join("answers").join(".identity");
    if fs::read_to_string(&marker).ok().as_deref() != Some(identity) {
        for m in &config.models {
            let p = layout.path(&Layout::answers(&m.model_id));
            if p.exists() {
                log::info!(
                    "answer: discarding {} collected under another configuration",
                    p.display()
                );
                fs::remove_file(&p).map_err(|e| artifact_err(&p, e))?;
            }
        }
        write_atomic(&marker, identity.as_bytes())?;
    }

    let sampling = Decoding::Sample {
        k: config.sampling.k,
        temperature: config.sampling.temperature,
    };
    for m in &config.models {
        let rel = Layout::answers(&m.model_id);
        let path = layout.path(&rel);
        let records = (|| -> Result<Vec<AnswerRecord>, PipelineError> {
            let store = AnswerStore::open(&path)?;
            let completer = completer_for(m)?;
            collect_answers(&questions, m, Decoding::Greedy, completer.as_ref(), &store, config.seed)?;
            collect_answers(&originals, m, sampling, completer.as_ref(), &store, config.seed)?;
            Ok(store.records())
        })()
        .map_err(PipelineError::in_model(&m.model_id))?;
        // canonical order, so reruns are byte-identical whatever the arrival order
        let mut buf = Vec::new();
        for r in &records {
            serde_json::to_writer(&mut buf, r).expect("answer serializes");
            buf.push(b'\n');
        }
        out.put(&rel, &buf)?;
        log::info!("answer: {} records for {}", records.len(), m.model_id);
    }
    Ok(())
}

fn read_answers(path: &Path) -> Result<Vec<AnswerRecord>, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| artifact_err(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| artifact_err(path, e)))
        .collect()
}

/// Feature CSV column names.
pub const FEATURE_COLUMNS: [&str; 6] = ["question_id", "category", "log_spop", "scons", "cert", "correct"];

fn featurize(config: &PipelineConfig, layout: &Layout, out: &mut Outputs<'_>) -> Result<(), PipelineError> {
    let questions = read_questions(&layout.path(Layout::QUESTIONS))?;
    let originals: Vec<&QuestionRecord> = questions.iter().filter(|q| q.is_original).collect();
    let mut children: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for q in questions.iter().filter(|q| !q.is_original) {
        children.entry(q.parent_id.as_str()).or_default().push(q.id.as_str());
    }

    let missing: Vec<String> = {
        let mut s: Vec<String> = originals
            .iter()
            .filter(|q| q.s_pop.is_none())
            .map(|q| q.subject.clone())
            .collect();
        s.sort();
        s.dedup();
        s
    };
    let client = if missing.is_empty() {
        None
    } else {
        let path = layout.cache("popularity.json");
        fs::create_dir_all(path.parent().expect("cache dir")).map_err(|e| artifact_err(&path, e))?;
        let c =
            PageviewsClient::new(config.popularity.client.clone(), config.popularity.window()?).with_cache(&path)?;
        log::info!("featurize: fetching page views for {} subjects", missing.len());
        c.fetch_all(&missing)?;
        Some(c)
    };
    let log_spop: Vec<f64> = originals
        .iter()
        .map(|q| {
            let views = fetch_popularity(q.s_pop, &q.subject, client.as_ref())?;
            Ok(PopularityFeature::new(q.id.clone(), views)?.log_spop)
        })
        .collect::<Result<_, PipelineError>>()?;

    let provider = embedder(config, layout)?;
    for m in &config.models {
        let rel = Layout::features(&m.model_id);
        let frame = (|| -> Result<Frame, PipelineError> {
            let answers = read_answers(&layout.path(&Layout::answers(&m.model_id)))?;
            let index = AnswerIndex::new(&answers);
            let mut sets = Vec::with_capacity(originals.len());
            let mut correct = Vec::with_capacity(originals.len());
            for q in &originals {
                let kids = children.get(q.id.as_str()).map_or(&[][..], Vec::as_slice);
                sets.push(index.answer_sets(q, kids, config.sampling.k)?);
                let greedy = index.greedy(&q.id).expect("answer_sets checked the greedy answer");
                correct.push(f64::from(u8::from(is_correct(
                    &greedy.truncated_text,
                    &q.gold_answers,
                    config.case_mode,
                )?)));
            }
            let feats = consistency_batch(&sets, &provider, Execution::default())?;
            Ok(Frame::new()
                .with_categorical("question_id", originals.iter().map(|q| q.id.clone()).collect())?
                .with_categorical("category", originals.iter().map(|q| q.category.clone()).collect())?
                .with_numeric("log_spop", log_spop.clone())?
                .with_numeric("scons", feats.iter().map(|f| f.scons).collect())?
                .with_numeric("cert", feats.iter().map(|f| f.cert).collect())?
                .with_numeric("correct", correct)?)
        })()
        .map_err(PipelineError::in_model(&m.model_id))?;
        let mut buf = Vec::new();
        frame.write_csv(&mut buf)?;
        out.put(&rel, &buf)?;
        log::info!("featurize: {} rows for {}", frame.n_rows(), m.model_id);
    }
    Ok(())
}

/// Reads a features CSV into a frame named for formulas: `QCat`, `log_SPop`,
/// `SCons`, `Cert`, `correct`.
pub fn load_features(path: &Path) -> Result<Frame, PipelineError> {
    let raw = Frame::read_csv(path, &["question_id", "category"])?;
    for col in FEATURE_COLUMNS {
        if raw.column(col).is_none() {
            return Err(artifact_err(path, format!("missing column `{col}`")));
        }
    }
    let num = |name: &str| raw.numeric(name).map(<[f64]>::to_vec);
    Ok(Frame::new()
        .with_column(CATEGORY, Column::Categorical(raw.categorical("category")?.to_vec()))?
        .with_numeric("log_SPop", num("log_spop")?)?
        .with_numeric("SCons", num("scons")?)?
        .with_numeric("Cert", num("cert")?)?
        .with_numeric(RESPONSE, num("correct")?)?)
}

/// Everything about the main fit except the coefficient tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub model_id: String,
    pub formula: String,
    pub seed: u64,
    pub test_fraction: f64,
    pub ridge: f64,
    pub n_obs: usize,
    pub n_params: usize,
    pub converged: bool,
    pub n_iterations: usize,
    pub gradient_inf_norm: f64,
    pub loglik: f64,
    pub loglik_null: f64,
    pub mcfadden_r2: f64,
    pub aic: f64,
    pub column_names: Vec<String>,
    pub encoding: DesignEncoding,
}

/// Held-out evaluation on all categories and on categories whose mean
/// correctness exceeds the threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalArtifact {
    pub all: EvalReport,
    pub category_threshold: f64,
    pub category_correctness: BTreeMap<String, f64>,
    pub kept_categories: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filtered: Option<EvalReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filtered_error: Option<String>,
}

fn fit_options(config: &PipelineConfig) -> FitOptions {
    FitOptions {
        ridge: config.ridge,
        ..FitOptions::default()
    }
}

fn csv_bytes(path: &str, write: impl FnOnce(&mut Vec<u8>) -> Result<(), String>) -> Result<Vec<u8>, PipelineError> {
    let mut buf = Vec::new();
    write(&mut buf).map_err(|e| artifact_err(Path::new(path), e))?;
    Ok(buf)
}

fn fit(config: &PipelineConfig, layout: &Layout, out: &mut Outputs<'_>) -> Result<(), PipelineError> {
    let opts = fit_options(config);
    for m in &config.models {
        let id = m.model_id.as_str();
        let artifacts = (|| -> Result<Vec<(String, Vec<u8>)>, PipelineError> {
            let frame = load_features(&layout.path(&Layout::features(id)))?;
            let run = fit_and_evaluate(&frame, &config.formula, config.test_fraction, config.seed, &opts)?;
            let stats = model_stats(&run.fit)?;
            let coefficients = coefficient_table(&run.fit, &run.design)?;
            let wald = wald_term_tests(&run.fit, &run.design)?;
            if !run.fit.converged {
                log::warn!("fit: {id} did not converge");
            }
            let report = FitReport {
                model_id: id.to_string(),
                formula: run.ast.to_string(),
                seed: config.seed,
                test_fraction: config.test_fraction,
                ridge: config.ridge,
                n_obs: run.fit.n_obs,
                n_params: run.fit.n_params,
                converged: run.fit.converged,
                n_iterations: run.fit.n_iterations,
                gradient_inf_norm: run.fit.gradient_inf_norm,
                loglik: run.fit.loglik,
                loglik_null: run.fit.loglik_null.expect("null model is fitted"),
                mcfadden_r2: stats.mcfadden_r2,
                aic: stats.aic,
                column_names: run.fit.column_names.clone(),
                encoding: run.design.encoding.clone(),
            };

            let means = category_means(&frame)?;
            let filtered_frame = filter_categories(&frame, config.category_threshold)?;
            let kept: Vec<String> = means
                .iter()
                .filter(|(_, &v)| v > config.category_threshold)
                .map(|(k, _)| k.clone())
                .collect();
            let (filtered, filtered_error) = match fit_and_evaluate(
                &filtered_frame,
                &config.formula,
                config.test_fraction,
                config.seed,
                &opts,
            ) {
                Ok(r) => (Some(r.eval), None),
                Err(e) => {
                    log::warn!("fit: {id}: filtered evaluation failed: {e}");
                    (None, Some(e.to_string()))
                }
            };
            let eval = EvalArtifact {
                all: run.eval.clone(),
                category_threshold: config.category_threshold,
                category_correctness: means,
                kept_categories: kept,
                filtered,
                filtered_error,
            };
            let coef_rel = Layout::model_file(id, "coefficients.csv");
            let wald_rel = Layout::model_file(id, "wald.csv");
            Ok(vec![
                (Layout::model_file(id, "fit_report.json"), json_bytes(&report)),
                (
                    coef_rel.clone(),
                    csv_bytes(&coef_rel, |b| coefficients.write_csv(b).map_err(|e| e.to_string()))?,
                ),
                (
                    wald_rel.clone(),
                    csv_bytes(&wald_rel, |b| wald.write_csv(b).map_err(|e| e.to_string()))?,
                ),
                (Layout::model_file(id, "eval.json"), json_bytes(&eval)),
            ])
        })()
        .map_err(PipelineError::in_model(id))?;
        for (rel, bytes) in artifacts {
            out.put(&rel, &bytes)?;
        }
        log::info!("fit: {id} done");
    }
    Ok(())
}

fn ablate(config: &PipelineConfig, layout: &Layout, out: &mut Outputs<'_>) -> Result<(), PipelineError> {
    let subsets = config.ablation.predictor_sets()?;
    let opts = fit_options(config);
    for m in &config.models {
        let id = m.model_id.as_str();
        let report = (|| -> Result<AblationReport, PipelineError> {
            let frame = load_features(&layout.path(&Layout::features(id)))?;
            let filtered = filter_categories(&frame, config.category_threshold)?;
            Ok(run_ablation(
                &filtered,
                &subsets,
                config.test_fraction,
                config.seed,
                &opts,
            )?)
        })()
        .map_err(PipelineError::in_model(id))?;
        let csv_rel = Layout::model_file(id, "ablation.csv");
        let bytes = csv_bytes(&csv_rel, |b| report.write_csv(b).map_err(|e| e.to_string()))?;
        out.put(&csv_rel, &bytes)?;
        out.put(&Layout::model_file(id, "ablation.json"), &json_bytes(&report))?;
    }
    Ok(())
}

/// Numeric variables covered by the diagnostics.
pub const DIAGNOSTIC_VARIABLES: [&str; 3] = ["log_SPop", "SCons", "Cert"];

fn diagnose(config: &PipelineConfig, layout: &Layout, out: &mut Outputs<'_>) -> Result<(), PipelineError> {
    let d = &config.diagnostics;
    for m in &config.models {
        let id = m.model_id.as_str();
        let (bins, kdes) = (|| -> Result<_, PipelineError> {
            let frame = load_features(&layout.path(&Layout::features(id)))?;
            let mut bins = Vec::new();
            let mut kdes = Vec::new();
            for var in DIAGNOSTIC_VARIABLES {
                bins.push(binned_diagnostics(&frame, var, d.n_bins, d.central_mass)?);
                match kde_summary(&frame, var) {
                    Ok(k) => kdes.push(k),
                    Err(EvalError::DegenerateSample { category, variable }) => {
                        log::warn!("diagnose: {id}: no density for {variable}, constant within `{category}`");
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            Ok((bins, kdes))
        })()
        .map_err(PipelineError::in_model(id))?;
        let bins_rel = Layout::model_file(id, "diagnostics.csv");
        let kde_rel = Layout::model_file(id, "kde.csv");
        let b = csv_bytes(&bins_rel, |buf| write_bins_csv(&bins, buf).map_err(|e| e.to_string()))?;
        let k = csv_bytes(&kde_rel, |buf| write_kde_csv(&kdes, buf).map_err(|e| e.to_string()))?;
        out.put(&bins_rel, &b)?;
        out.put(&kde_rel, &k)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub fit: FitReport,
    pub eval: EvalArtifact,
    pub ablation: AblationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub counts: CountsArtifact,
    pub paraphrase_quality: BTreeMap<String, f64>,
    pub paraphrase_quality_overall: f64,
    pub models: BTreeMap<String, ModelSummary>,
}

fn report(config: &PipelineConfig, layout: &Layout, out: &mut Outputs<'_>) -> Result<(), PipelineError> {
    let counts: CountsArtifact = read_json(&layout.path(Layout::COUNTS))?;
    let quality: QualityReport = read_json(&layout.path(Layout::QUALITY))?;
    let mut models = BTreeMap::new();
    for m in &config.models {
        let id = m.model_id.as_str();
        models.insert(
            id.to_string(),
            ModelSummary {
                fit: read_json(&layout.path(&Layout::model_file(id, "fit_report.json")))?,
                eval: read_json(&layout.path(&Layout::model_file(id, "eval.json")))?,
                ablation: read_json(&layout.path(&Layout::model_file(id, "ablation.json")))?,
            },
        );
    }
    let report = Report {
        counts,
        paraphrase_quality: quality.per_category,
        paraphrase_quality_overall: quality.overall,
        models,
    };
    out.put(Layout::REPORT_JSON, &json_bytes(&report))?;
    out.put(Layout::REPORT_MD, render_markdown(&report).as_bytes())?;
    Ok(())
}

fn signed(v: f64) -> String {
    format!("{v:+.2}")
}

/// Human-readable summary of a [`Report`].
pub fn render_markdown(r: &Report) -> String {
    let mut s = String::from("# QA performance prediction report\n\n## Questions\n\n");
    s.push_str(
        "| category | originals | paraphrases each | total | paraphrase similarity |\n|---|---:|---:|---:|---:|\n",
    );
    for (cat, c) in &r.counts.report.categories {
        let q = r
            .paraphrase_quality
            .get(cat)
            .map_or(String::from("-"), |v| format!("{v:.3}"));
        let mark = if c.consistent { "" } else { " (flagged)" };
        s.push_str(&format!(
            "| {cat}{mark} | {} | {} | {} | {q} |\n",
            c.n_originals, c.n_alternatives, c.n_total
        ));
    }
    s.push_str(&format!(
        "| total | | | {} | {:.3} |\n",
        r.counts.report.grand_total, r.paraphrase_quality_overall
    ));

    s.push_str("\n## Performance prediction\n\n");
    s.push_str("| model | McFadden R² | AIC | accuracy | baseline | improvement % | filtered accuracy | filtered baseline | filtered improvement % |\n");
    s.push_str("|---|---:|---:|---:|---:|---:|---:|---:|---:|\n");
    for (id, m) in &r.models {
        let e = &m.eval.all;
        let (fa, fb, fi) = match &m.eval.filtered {
            Some(f) => (
                format!("{:.3}", f.test_accuracy),
                format!("{:.3}", f.majority_baseline),
                signed(f.relative_improvement_pct),
            ),
            None => ("-".into(), "-".into(), "-".into()),
        };
        s.push_str(&format!(
            "| {id} | {:.3} | {:.1} | {:.3} | {:.3} | {} | {fa} | {fb} | {fi} |\n",
            m.fit.mcfadden_r2,
            m.fit.aic,
            e.test_accuracy,
            e.majority_baseline,
            signed(e.relative_improvement_pct)
        ));
    }

    for (id, m) in &r.models {
        s.push_str(&format!(
            "\n### Ablation: {id}\n\nCategories with correctness above {}.\n\n",
            m.eval.category_threshold
        ));
        s.push_str("| predictors | McFadden R² | accuracy | baseline | improvement % |\n|---|---:|---:|---:|---:|\n");
        for row in &m.ablation.rows {
            s.push_str(&format!(
                "| {} | {:.3} | {:.3} | {:.3} | {} |\n",
                row.predictors,
                row.mcfadden_r2,
                row.test_accuracy,
                row.majority_baseline,
                signed(row.relative_improvement_pct)
            ));
        }
    }
    s
}
