//! Question sets, paraphrase-template expansion and paraphrase quality.
//!
//! Datasets are line-delimited JSON, one [`QuestionRecord`] per line. Template
//! files are a JSON object mapping each category to an ordered array of
//! templates, each holding exactly one `<subject>` placeholder.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::semantics::{self, EmbedError, EmbeddingProvider};

pub const SUBJECT_PLACEHOLDER: &str = "<subject>";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    UnreadableFile {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: invalid JSON: {message}")]
    InvalidJson { line: usize, message: String },
    #[error("line {line}: missing field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: field `{field}` {reason}")]
    InvalidField {
        line: usize,
        field: &'static str,
        reason: String,
    },
    #[error("line {line}: gold_answers is missing or empty")]
    EmptyGoldAnswers { line: usize },
    #[error("no templates for category `{0}`")]
    UnknownCategory(String),
    #[error("template must contain `<subject>` exactly once: {0:?}")]
    MalformedTemplate(String),
    #[error("record `{0}` is not an original question")]
    NotOriginal(String),
    #[error("paraphrase `{0}` points to a missing original")]
    OrphanParaphrase(String),
    #[error("question `{0}` has no paraphrases")]
    NoParaphrases(String),
    #[error(transparent)]
    Embedding(#[from] EmbedError),
}

/// One question: an original from the source set or one of its paraphrases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    pub category: String,
    pub subject: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    /// Mean monthly page views of the subject. `None` means it has to be
    /// fetched before featurization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_pop: Option<u64>,
    pub is_original: bool,
    pub parent_id: String,
}

impl QuestionRecord {
    pub fn original(
        id: impl Into<String>,
        category: impl Into<String>,
        subject: impl Into<String>,
        question: impl Into<String>,
        gold_answers: Vec<String>,
        s_pop: Option<u64>,
    ) -> Self {
        let id = id.into();
        QuestionRecord {
            parent_id: id.clone(),
            id,
            category: category.into(),
            subject: subject.into(),
            question: question.into(),
            gold_answers,
            s_pop,
            is_original: true,
        }
    }
}

/// Per-category paraphrase templates.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TemplateSet(pub BTreeMap<String, Vec<String>>);

impl TemplateSet {
    pub fn new(map: BTreeMap<String, Vec<String>>) -> Result<Self, DatasetError> {
        let set = TemplateSet(map);
        set.validate()?;
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(|source| DatasetError::UnreadableFile {
            path: path.to_path_buf(),
            source,
        })?;
        let map: BTreeMap<String, Vec<String>> =
            serde_json::from_str(&text).map_err(|e| DatasetError::InvalidJson {
                line: e.line(),
                message: e.to_string(),
            })?;
        Self::new(map)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        for t in self.0.values().flatten() {
            if t.matches(SUBJECT_PLACEHOLDER).count() != 1 {
                return Err(DatasetError::MalformedTemplate(t.clone()));
            }
        }
        Ok(())
    }

    pub fn get(&self, category: &str) -> Option<&[String]> {
        self.0.get(category).map(Vec::as_slice)
    }
}

fn required_str(
    obj: &serde_json::Map<String, Value>,
    line: usize,
    field: &'static str,
) -> Result<String, DatasetError> {
    match obj.get(field) {
        None | Some(Value::Null) => Err(DatasetError::MissingField { line, field }),
        Some(Value::String(s)) if s.trim().is_empty() => Err(DatasetError::InvalidField {
            line,
            field,
            reason: "is empty".into(),
        }),
        Some(Value::String(s)) => Ok(s.clone()),
        // ids are sometimes numeric in exported data
        Some(Value::Number(n)) if field == "id" => Ok(n.to_string()),
        Some(_) => Err(DatasetError::InvalidField {
            line,
            field,
            reason: "must be a string".into(),
        }),
    }
}

fn parse_record(line_no: usize, text: &str) -> Result<QuestionRecord, DatasetError> {
    let value: Value = serde_json::from_str(text).map_err(|e| DatasetError::InvalidJson {
        line: line_no,
        message: e.to_string(),
    })?;
    let Value::Object(obj) = value else {
        return Err(DatasetError::InvalidJson {
            line: line_no,
            message: "expected a JSON object".into(),
        });
    };
    let id = required_str(&obj, line_no, "id")?;
    let category = required_str(&obj, line_no, "category")?;
    let subject = required_str(&obj, line_no, "subject")?;
    let question = required_str(&obj, line_no, "question")?;

    let gold_answers: Vec<String> = match obj.get("gold_answers") {
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| match v {
                Value::String(s) => Ok(s.clone()),
                _ => Err(DatasetError::InvalidField {
                    line: line_no,
                    field: "gold_answers",
                    reason: "must contain only strings".into(),
                }),
            })
            .collect::<Result<_, _>>()?,
        Some(Value::Null) | None => Vec::new(),
        Some(_) => {
            return Err(DatasetError::InvalidField {
                line: line_no,
                field: "gold_answers",
                reason: "must be an array".into(),
            })
        }
    };
    if gold_answers.iter().all(|g| g.trim().is_empty()) {
        return Err(DatasetError::EmptyGoldAnswers { line: line_no });
    }

    let s_pop = match obj.get("s_pop") {
        None | Some(Value::Null) => None,
        Some(v) => Some(v.as_u64().ok_or_else(|| DatasetError::InvalidField {
            line: line_no,
            field: "s_pop",
            reason: "must be a nonnegative integer".into(),
        })?),
    };

    Ok(QuestionRecord::original(
        id,
        category,
        subject,
        question,
        gold_answers,
        s_pop,
    ))
}

/// Loads original questions from a line-delimited JSON file, in file order.
/// Blank lines are skipped; error line numbers are 1-based.
pub fn load_dataset(path: &Path) -> Result<Vec<QuestionRecord>, DatasetError> {
    let unreadable = |source| DatasetError::UnreadableFile {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::open(path).map_err(unreadable)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(unreadable)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(i + 1, &line)?);
    }
    Ok(out)
}

/// Reads an expanded question file written by [`write_questions`].
pub fn read_questions(path: &Path) -> Result<Vec<QuestionRecord>, DatasetError> {
    let unreadable = |source| DatasetError::UnreadableFile {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::open(path).map_err(unreadable)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(unreadable)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: QuestionRecord = serde_json::from_str(&line).map_err(|e| DatasetError::InvalidJson {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_questions<W: Write>(mut w: W, records: &[QuestionRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Expands each original into itself followed by one paraphrase per template
/// of its category. Paraphrase ids are `<parent_id>#<template_index>`.
pub fn expand_templates(
    originals: &[QuestionRecord],
    templates: &TemplateSet,
) -> Result<Vec<QuestionRecord>, DatasetError> {
    templates.validate()?;
    let extra: usize = originals
        .iter()
        .map(|q| templates.get(&q.category).map_or(0, <[String]>::len))
        .sum();
    let mut out = Vec::with_capacity(originals.len() + extra);
    for q in originals {
        if !q.is_original {
            return Err(DatasetError::NotOriginal(q.id.clone()));
        }
        let list = match templates.get(&q.category) {
            Some(list) if !list.is_empty() => list,
            _ => return Err(DatasetError::UnknownCategory(q.category.clone())),
        };
        out.push(q.clone());
        for (i, template) in list.iter().enumerate() {
            out.push(QuestionRecord {
                id: format!("{}#{}", q.id, i),
                question: template.replacen(SUBJECT_PLACEHOLDER, &q.subject, 1),
                is_original: false,
                parent_id: q.id.clone(),
                ..q.clone()
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCount {
    pub n_originals: usize,
    /// Paraphrases per original (the largest count when they differ).
    pub n_alternatives: usize,
    pub n_total: usize,
    /// True when every original has the same number of paraphrases and
    /// `n_total == (1 + n_alternatives) * n_originals`.
    pub consistent: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountReport {
    pub categories: BTreeMap<String, CategoryCount>,
    pub grand_total: usize,
}

impl CountReport {
    pub fn flagged(&self) -> Vec<&str> {
        self.categories
            .iter()
            .filter(|(_, c)| !c.consistent)
            .map(|(k, _)| k.as_str())
            .collect()
    }
}

/// Per-category question counts of an expanded dataset.
pub fn count_report(dataset: &[QuestionRecord]) -> Result<CountReport, DatasetError> {
    let mut per_original: HashMap<&str, usize> = HashMap::new();
    for q in dataset.iter().filter(|q| q.is_original) {
        per_original.insert(q.id.as_str(), 0);
    }
    for q in dataset.iter().filter(|q| !q.is_original) {
        match per_original.get_mut(q.parent_id.as_str()) {
            Some(n) => *n += 1,
            None => return Err(DatasetError::OrphanParaphrase(q.id.clone())),
        }
    }

    // (originals, min alternatives, max alternatives, total)
    let mut acc: BTreeMap<&str, (usize, usize, usize, usize)> = BTreeMap::new();
    for q in dataset {
        let e = acc.entry(q.category.as_str()).or_insert((0, usize::MAX, 0, 0));
        e.3 += 1;
        if q.is_original {
            let n_alt = per_original[q.id.as_str()];
            e.0 += 1;
            e.1 = e.1.min(n_alt);
            e.2 = e.2.max(n_alt);
        }
    }

    let mut categories = BTreeMap::new();
    let mut grand_total = 0;
    for (cat, (n_orig, min_alt, max_alt, total)) in acc {
        let uniform = n_orig > 0 && min_alt == max_alt;
        categories.insert(
            cat.to_string(),
            CategoryCount {
                n_originals: n_orig,
                n_alternatives: max_alt,
                n_total: total,
                consistent: uniform && total == (1 + max_alt) * n_orig,
            },
        );
        grand_total += total;
    }
    Ok(CountReport {
        categories,
        grand_total,
    })
}

/// A published per-category row: originals, alternatives and printed total.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublishedCount {
    pub category: String,
    pub n_originals: usize,
    pub n_alternatives: usize,
    pub n_total: usize,
}

/// A disagreement between observed counts and a published table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountDiscrepancy {
    pub category: String,
    pub field: &'static str,
    pub published: usize,
    pub observed: usize,
}

/// Compares a report with published rows. Besides field-by-field differences,
/// a published row whose total disagrees with `(1 + alternatives) * originals`
/// is reported under the field `formula_total`.
pub fn compare_counts(report: &CountReport, published: &[PublishedCount]) -> Vec<CountDiscrepancy> {
    let mut out = Vec::new();
    for row in published {
        let formula = (1 + row.n_alternatives) * row.n_originals;
        if formula != row.n_total {
            out.push(CountDiscrepancy {
                category: row.category.clone(),
                field: "formula_total",
                published: row.n_total,
                observed: formula,
            });
        }
        let Some(obs) = report.categories.get(&row.category) else {
            out.push(CountDiscrepancy {
                category: row.category.clone(),
                field: "n_total",
                published: row.n_total,
                observed: 0,
            });
            continue;
        };
        for (field, p, o) in [
            ("n_originals", row.n_originals, obs.n_originals),
            ("n_alternatives", row.n_alternatives, obs.n_alternatives),
            ("n_total", row.n_total, obs.n_total),
        ] {
            if p != o {
                out.push(CountDiscrepancy {
                    category: row.category.clone(),
                    field,
                    published: p,
                    observed: o,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub per_question: BTreeMap<String, f64>,
    pub per_category: BTreeMap<String, f64>,
    /// Unweighted mean over categories.
    pub overall: f64,
}

/// Mean cosine similarity between each paraphrase and its original, averaged
/// within question, then within category, then across categories.
pub fn paraphrase_quality(
    dataset: &[QuestionRecord],
    embedder: &dyn EmbeddingProvider,
) -> Result<QualityReport, DatasetError> {
    let mut texts: Vec<String> = Vec::new();
    let mut seen = HashSet::new();
    for q in dataset {
        if seen.insert(q.question.as_str()) {
            texts.push(q.question.clone());
        }
    }
    let vectors = if texts.is_empty() {
        Vec::new()
    } else {
        semantics::embed(&texts, embedder)?
    };
    let lookup: HashMap<&str, &semantics::Embedding> = texts.iter().map(String::as_str).zip(vectors.iter()).collect();

    let mut children: BTreeMap<&str, Vec<&QuestionRecord>> = BTreeMap::new();
    for q in dataset.iter().filter(|q| !q.is_original) {
        children.entry(q.parent_id.as_str()).or_default().push(q);
    }

    let mut per_question = BTreeMap::new();
    let mut by_category: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for q in dataset.iter().filter(|q| q.is_original) {
        let kids = children
            .get(q.id.as_str())
            .filter(|k| !k.is_empty())
            .ok_or_else(|| DatasetError::NoParaphrases(q.id.clone()))?;
        let base = lookup[q.question.as_str()];
        let score = kids
            .iter()
            .map(|p| semantics::clamped_cosine(base, lookup[p.question.as_str()]))
            .sum::<f64>()
            / kids.len() as f64;
        per_question.insert(q.id.clone(), score);
        by_category.entry(q.category.as_str()).or_default().push(score);
    }

    let per_category: BTreeMap<String, f64> = by_category
        .into_iter()
        .map(|(c, v)| (c.to_string(), v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    let overall = if per_category.is_empty() {
        0.0
    } else {
        per_category.values().sum::<f64>() / per_category.len() as f64
    };
    Ok(QualityReport {
        per_question,
        per_category,
        overall,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semantics::{Embedding, HashingEmbedder};

    fn occupation_templates() -> TemplateSet {
        let mut m = BTreeMap::new();
        m.insert(
            "occupation".to_string(),
            vec![
                "What is the occupation of <subject>?".to_string(),
                "What kind of work does <subject> do?".to_string(),
                "What does <subject> earn a living as?".to_string(),
                "What job does <subject> do?".to_string(),
                "What is <subject>'s job?".to_string(),
            ],
        );
        TemplateSet::new(m).unwrap()
    }

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_a_record() {
        let f = write_tmp(
            r#"{"id":"q1","category":"occupation","subject":"Stevie Cameron","question":"What is Stevie Cameron's occupation?","gold_answers":["journalist"],"s_pop":1200}
"#,
        );
        let recs = load_dataset(f.path()).unwrap();
        assert_eq!(recs.len(), 1);
        assert!(recs[0].is_original);
        assert_eq!(recs[0].parent_id, "q1");
        assert_eq!(recs[0].s_pop, Some(1200));
        assert_eq!(recs[0].gold_answers, vec!["journalist"]);
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let f = write_tmp("");
        assert!(load_dataset(f.path()).unwrap().is_empty());
    }

    #[test]
    fn missing_gold_answers_names_line() {
        let f = write_tmp(r#"{"id":"q1","category":"c","subject":"s","question":"q?"}"#);
        match load_dataset(f.path()) {
            Err(DatasetError::EmptyGoldAnswers { line }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_field_names_line() {
        let f = write_tmp(
            "{\"id\":\"q1\",\"category\":\"c\",\"subject\":\"s\",\"question\":\"q?\",\"gold_answers\":[\"a\"]}\n\n{\"id\":\"q2\",\"subject\":\"s\",\"question\":\"q?\",\"gold_answers\":[\"a\"]}\n",
        );
        match load_dataset(f.path()) {
            Err(DatasetError::MissingField { line, field }) => {
                assert_eq!(line, 3);
                assert_eq!(field, "category");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unreadable_file() {
        assert!(matches!(
            load_dataset(Path::new("/nonexistent/qs.jsonl")),
            Err(DatasetError::UnreadableFile { .. })
        ));
    }

    #[test]
    fn expands_occupation_templates() {
        let q = QuestionRecord::original(
            "q7",
            "occupation",
            "Shozaburo Nakamura",
            "What is Shozaburo Nakamura's occupation?",
            vec!["politician".into()],
            Some(300),
        );
        let out = expand_templates(std::slice::from_ref(&q), &occupation_templates()).unwrap();
        assert_eq!(out.len(), 6);
        assert_eq!(out[0], q);
        let texts: Vec<&str> = out[1..].iter().map(|r| r.question.as_str()).collect();
        assert!(texts.contains(&"What is the occupation of Shozaburo Nakamura?"));
        assert!(texts.contains(&"What job does Shozaburo Nakamura do?"));
        for (i, p) in out[1..].iter().enumerate() {
            assert_eq!(p.id, format!("q7#{i}"));
            assert_eq!(p.parent_id, "q7");
            assert!(!p.is_original);
            assert_eq!(p.s_pop, Some(300));
            assert_eq!(p.gold_answers, q.gold_answers);
        }
    }

    #[test]
    fn unknown_or_empty_category_rejected() {
        let q = QuestionRecord::original("q", "color", "x", "q?", vec!["a".into()], None);
        assert!(matches!(
            expand_templates(std::slice::from_ref(&q), &occupation_templates()),
            Err(DatasetError::UnknownCategory(c)) if c == "color"
        ));
        let mut m = BTreeMap::new();
        m.insert("color".to_string(), vec![]);
        assert!(matches!(
            expand_templates(&[q], &TemplateSet(m)),
            Err(DatasetError::UnknownCategory(_))
        ));
    }

    #[test]
    fn malformed_template_rejected() {
        let mut m = BTreeMap::new();
        m.insert("c".to_string(), vec!["<subject> and <subject>?".to_string()]);
        assert!(matches!(TemplateSet::new(m), Err(DatasetError::MalformedTemplate(_))));
        let mut m = BTreeMap::new();
        m.insert("c".to_string(), vec!["no placeholder".to_string()]);
        assert!(matches!(TemplateSet::new(m), Err(DatasetError::MalformedTemplate(_))));
    }

    #[test]
    fn director_row_total() {
        let templates: Vec<String> = (0..10).map(|i| format!("T{i} <subject>?")).collect();
        let mut m = BTreeMap::new();
        m.insert("director".to_string(), templates);
        let set = TemplateSet::new(m).unwrap();
        let originals: Vec<QuestionRecord> = (0..1999)
            .map(|i| {
                QuestionRecord::original(
                    format!("d{i}"),
                    "director",
                    format!("Film {i}"),
                    "Who?",
                    vec!["x".into()],
                    Some(5),
                )
            })
            .collect();
        let out = expand_templates(&originals, &set).unwrap();
        assert_eq!(out.len(), 21989);
        let report = count_report(&out).unwrap();
        let row = &report.categories["director"];
        assert_eq!((row.n_originals, row.n_alternatives, row.n_total), (1999, 10, 21989));
        assert!(row.consistent);
    }

    #[test]
    fn count_report_identity_and_orphans() {
        let q = QuestionRecord::original("a", "capital", "X", "q?", vec!["y".into()], None);
        let r = count_report(std::slice::from_ref(&q)).unwrap();
        assert_eq!(r.categories["capital"].n_total, 1);
        assert_eq!(r.grand_total, 1);

        let orphan = QuestionRecord {
            id: "z#0".into(),
            is_original: false,
            parent_id: "z".into(),
            ..q
        };
        assert!(matches!(count_report(&[orphan]), Err(DatasetError::OrphanParaphrase(id)) if id == "z#0"));
    }

    #[test]
    fn uneven_paraphrase_counts_are_flagged() {
        let a = QuestionRecord::original("a", "c", "A", "qa?", vec!["y".into()], None);
        let b = QuestionRecord::original("b", "c", "B", "qb?", vec!["y".into()], None);
        let pa = QuestionRecord {
            id: "a#0".into(),
            is_original: false,
            ..a.clone()
        };
        let r = count_report(&[a, pa, b]).unwrap();
        assert_eq!(r.flagged(), vec!["c"]);
    }

    #[test]
    fn compare_flags_formula_mismatch() {
        let q = QuestionRecord::original("a", "author", "A", "q?", vec!["y".into()], None);
        let report = count_report(&[q]).unwrap();
        let d = compare_counts(
            &report,
            &[PublishedCount {
                category: "author".into(),
                n_originals: 1,
                n_alternatives: 0,
                n_total: 1,
            }],
        );
        assert!(d.is_empty());
    }

    struct Fixed(Vec<(String, Vec<f64>)>);
    impl EmbeddingProvider for Fixed {
        fn id(&self) -> &str {
            "fixed"
        }
        fn embed_batch(&self, texts: &[String]) -> Result<Vec<Embedding>, EmbedError> {
            Ok(texts
                .iter()
                .map(|t| {
                    let v = &self.0.iter().find(|(k, _)| k == t).unwrap().1;
                    Embedding::new(v.clone())
                })
                .collect())
        }
    }

    #[test]
    fn quality_is_mean_of_cosines() {
        // cosines 0.8 and 0.9 against the unit vector e1
        let s08 = (1.0f64 - 0.64).sqrt();
        let s09 = (1.0f64 - 0.81).sqrt();
        let emb = Fixed(vec![
            ("orig".into(), vec![1.0, 0.0]),
            ("p1".into(), vec![0.8, s08]),
            ("p2".into(), vec![0.9, s09]),
        ]);
        let q = QuestionRecord::original("q", "c", "s", "orig", vec!["a".into()], None);
        let mk = |id: &str, text: &str| QuestionRecord {
            id: id.into(),
            question: text.into(),
            is_original: false,
            ..q.clone()
        };
        let data = vec![q.clone(), mk("q#0", "p1"), mk("q#1", "p2")];
        let r = paraphrase_quality(&data, &emb).unwrap();
        assert!((r.per_question["q"] - 0.85).abs() < 1e-12);
        assert!((r.overall - 0.85).abs() < 1e-12);
    }

    #[test]
    fn identical_paraphrases_score_one() {
        let mut m = BTreeMap::new();
        m.insert("c".to_string(), vec!["<subject>".to_string(), "<subject>".to_string()]);
        let set = TemplateSet::new(m).unwrap();
        let originals: Vec<QuestionRecord> = ["alpha", "beta gamma"]
            .iter()
            .map(|s| QuestionRecord::original(*s, "c", *s, *s, vec!["a".into()], None))
            .collect();
        let data = expand_templates(&originals, &set).unwrap();
        let r = paraphrase_quality(&data, &HashingEmbedder::default()).unwrap();
        assert_eq!(r.overall, 1.0);
    }

    #[test]
    fn quality_requires_paraphrases() {
        let q = QuestionRecord::original("q", "c", "s", "orig", vec!["a".into()], None);
        assert!(matches!(
            paraphrase_quality(&[q], &HashingEmbedder::default()),
            Err(DatasetError::NoParaphrases(_))
        ));
    }
}
