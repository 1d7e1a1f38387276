//! Reference-less performance prediction for factual question answering.
//!
//! The pipeline expands questions through per-category paraphrase templates,
//! collects model answers, turns them into semantic-consistency, certainty and
//! popularity features, and fits a logistic regression with category
//! interactions that predicts whether a model answers a question correctly.
//!
//! Data-parallel loops (IRLS row chunks, per-question feature batches, ablation
//! fits) run on rayon when the `parallel` feature is enabled and fall back to
//! sequential loops otherwise. See [`par::Execution`].

pub mod answering;
pub mod dataset;
pub mod evaluation;
pub mod formula;
pub mod glm;
pub mod net;
pub mod par;
pub mod scoring;
pub mod semantics;

pub use answering::{AnswerRecord, AnswerStore, Mode, ModelConfig};
pub use dataset::{CountReport, QuestionRecord, TemplateSet};
pub use evaluation::{AblationReport, DiagnosticBins, EvalReport};
pub use formula::{DesignMatrix, FormulaAst, Frame};
pub use glm::{CoefficientTable, FitOptions, FitResult, WaldTable};
pub use par::Execution;
pub use semantics::{Embedding, EmbeddingProvider, HashingEmbedder};
