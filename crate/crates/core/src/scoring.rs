//! Correctness judgments and subject popularity.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use chrono::{Datelike, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{self, NetError, RetryPolicy};
use crate::par;

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("gold answer list is empty")]
    EmptyGoldAnswers,
    #[error("popularity must be at least 1 for the log transform (question `{0}`)")]
    NonPositivePopularity(String),
    #[error("no page views for article `{0}`")]
    ArticleNotFound(String),
    #[error("page view endpoint unavailable: {0}")]
    EndpointUnavailable(String),
    #[error("popularity cache {path}: {message}")]
    Cache { path: PathBuf, message: String },
}

/// Case handling for [`is_correct`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseMode {
    #[default]
    Fold,
    Strict,
}

/// True iff some gold answer (whitespace-trimmed, case-folded unless `Strict`)
/// occurs as a substring of the generated text. Blank gold entries are ignored.
pub fn is_correct(generated: &str, gold_answers: &[String], case: CaseMode) -> Result<bool, ScoringError> {
    let fold = |s: &str| match case {
        CaseMode::Fold => s.trim().to_lowercase(),
        CaseMode::Strict => s.trim().to_string(),
    };
    let golds: Vec<String> = gold_answers.iter().map(|g| fold(g)).filter(|g| !g.is_empty()).collect();
    if golds.is_empty() {
        return Err(ScoringError::EmptyGoldAnswers);
    }
    let hay = fold(generated);
    Ok(golds.iter().any(|g| hay.contains(g.as_str())))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectnessRow {
    pub question_id: String,
    pub category: String,
    pub correct: u8,
}

/// Mean correctness per category, weighted by row counts.
pub fn category_correctness(rows: &[CorrectnessRow]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry(r.category.as_str()).or_default();
        e.0 += u64::from(r.correct.min(1));
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(c, (k, n))| (c.to_string(), k as f64 / n as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopularityFeature {
    pub question_id: String,
    pub s_pop: u64,
    pub log_spop: f64,
}

impl PopularityFeature {
    pub fn new(question_id: impl Into<String>, s_pop: u64) -> Result<Self, ScoringError> {
        let question_id = question_id.into();
        if s_pop < 1 {
            return Err(ScoringError::NonPositivePopularity(question_id));
        }
        Ok(PopularityFeature {
            question_id,
            s_pop,
            log_spop: (s_pop as f64).ln(),
        })
    }
}

/// Mean of a monthly view series, rounded, floored at 1.
pub fn mean_monthly_views(series: &[u64]) -> Option<u64> {
    if series.is_empty() {
        return None;
    }
    let mean = series.iter().map(|&v| v as f64).sum::<f64>() / series.len() as f64;
    Some((mean.round() as u64).max(1))
}

/// Inclusive range of calendar months.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MonthWindow {
    pub start: (i32, u32),
    pub end: (i32, u32),
}

impl MonthWindow {
    /// The `months` complete months before the month containing `today`.
    pub fn trailing(months: u32, today: NaiveDate) -> Self {
        let months = months.max(1) as i32;
        let current = today.year() * 12 + today.month0() as i32;
        let end = current - 1;
        let start = end - (months - 1);
        let ym = |i: i32| (i.div_euclid(12), i.rem_euclid(12) as u32 + 1);
        MonthWindow {
            start: ym(start),
            end: ym(end),
        }
    }

    pub fn trailing_from_now(months: u32) -> Self {
        Self::trailing(months, Utc::now().date_naive())
    }

    pub fn start_stamp(&self) -> String {
        format!("{:04}{:02}0100", self.start.0, self.start.1)
    }

    pub fn end_stamp(&self) -> String {
        let (y, m) = self.end;
        let next = if m == 12 {
            NaiveDate::from_ymd_opt(y + 1, 1, 1)
        } else {
            NaiveDate::from_ymd_opt(y, m + 1, 1)
        }
        .expect("valid month");
        let last = next.pred_opt().expect("valid date");
        format!("{:04}{:02}{:02}00", y, m, last.day())
    }

    pub fn key(&self) -> String {
        format!(
            "{:04}-{:02}..{:04}-{:02}",
            self.start.0, self.start.1, self.end.0, self.end.1
        )
    }
}

/// Subject string to article title: spaces become underscores, nothing else
/// is rewritten.
pub fn article_title(subject: &str) -> String {
    subject.trim().replace(' ', "_")
}

fn encode_path_segment(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        match b {
            b'A'..=b'Z'
            | b'a'..=b'z'
            | b'0'..=b'9'
            | b'-'
            | b'_'
            | b'.'
            | b'~'
            | b'('
            | b')'
            | b','
            | b'\''
            | b'!'
            | b'*'
            | b':' => out.push(b as char),
            _ => out.push_str(&format!("%{b:02X}")),
        }
    }
    out
}

/// Per-article monthly page views from the Wikimedia REST API.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PageviewsConfig {
    pub base_url: String,
    pub project: String,
    pub access: String,
    pub agent: String,
    pub user_agent: String,
    pub timeout_secs: u64,
    pub retry_limit: u32,
    pub retry_backoff_ms: u64,
    pub max_parallel: usize,
}

impl Default for PageviewsConfig {
    fn default() -> Self {
        PageviewsConfig {
            base_url: "https://wikimedia.org/api/rest_v1".into(),
            project: "en.wikipedia".into(),
            access: "all-access".into(),
            agent: "all-agents".into(),
            user_agent: "qappp/0.1 (QA performance prediction research)".into(),
            timeout_secs: 30,
            retry_limit: 3,
            retry_backoff_ms: 500,
            max_parallel: 4,
        }
    }
}

pub struct PageviewsClient {
    config: PageviewsConfig,
    window: MonthWindow,
    cache: Mutex<BTreeMap<String, u64>>,
    cache_path: Option<PathBuf>,
}

impl PageviewsClient {
    pub fn new(config: PageviewsConfig, window: MonthWindow) -> Self {
        PageviewsClient {
            config,
            window,
            cache: Mutex::new(BTreeMap::new()),
            cache_path: None,
        }
    }

    /// Uses a JSON cache file keyed by `subject|window`.
    pub fn with_cache(mut self, path: &Path) -> Result<Self, ScoringError> {
        if path.exists() {
            let text = fs::read_to_string(path).map_err(|e| ScoringError::Cache {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
            let map: BTreeMap<String, u64> = serde_json::from_str(&text).map_err(|e| ScoringError::Cache {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
            self.cache = Mutex::new(map);
        }
        self.cache_path = Some(path.to_path_buf());
        Ok(self)
    }

    pub fn url_for(&self, subject: &str) -> String {
        let c = &self.config;
        format!(
            "{}/metrics/pageviews/per-article/{}/{}/{}/{}/monthly/{}/{}",
            c.base_url.trim_end_matches('/'),
            c.project,
            c.access,
            c.agent,
            encode_path_segment(&article_title(subject)),
            self.window.start_stamp(),
            self.window.end_stamp()
        )
    }

    fn cache_key(&self, subject: &str) -> String {
        format!("{}|{}", subject, self.window.key())
    }

    /// Mean monthly views of `subject` over the window.
    pub fn fetch(&self, subject: &str) -> Result<u64, ScoringError> {
        let key = self.cache_key(subject);
        if let Some(&v) = self.cache.lock().expect("cache poisoned").get(&key) {
            return Ok(v);
        }
        let policy = RetryPolicy {
            timeout: Duration::from_secs(self.config.timeout_secs.max(1)),
            retry_limit: self.config.retry_limit,
            initial_backoff: Duration::from_millis(self.config.retry_backoff_ms),
        };
        let value = match net::get_json(&self.url_for(subject), &self.config.user_agent, &policy) {
            Ok(v) => v,
            Err(NetError::Status { code: 404, .. }) => return Err(ScoringError::ArticleNotFound(subject.to_string())),
            Err(e) => return Err(ScoringError::EndpointUnavailable(e.to_string())),
        };
        let series: Vec<u64> = value
            .get("items")
            .and_then(|v| v.as_array())
            .map(|items| {
                items
                    .iter()
                    .filter_map(|i| i.get("views").and_then(|v| v.as_u64()))
                    .collect()
            })
            .unwrap_or_default();
        let views = mean_monthly_views(&series).ok_or_else(|| ScoringError::ArticleNotFound(subject.to_string()))?;
        self.cache.lock().expect("cache poisoned").insert(key, views);
        Ok(views)
    }

    /// Fetches many subjects with at most `max_parallel` requests in flight.
    /// Results already obtained are kept in the cache even if one fails.
    pub fn fetch_all(&self, subjects: &[String]) -> Result<BTreeMap<String, u64>, ScoringError> {
        let results = par::bounded_try_map(subjects, self.config.max_parallel, |s| {
            self.fetch(s).map(|v| (s.clone(), v))
        });
        self.save()?;
        let mut out = BTreeMap::new();
        for r in results.into_iter().flatten() {
            let (s, v) = r?;
            out.insert(s, v);
        }
        Ok(out)
    }

    pub fn save(&self) -> Result<(), ScoringError> {
        let Some(path) = &self.cache_path else {
            return Ok(());
        };
        let text = serde_json::to_string_pretty(&*self.cache.lock().expect("cache poisoned")).expect("map serializes");
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, text)
            .and_then(|_| fs::rename(&tmp, path))
            .map_err(|e| ScoringError::Cache {
                path: path.clone(),
                message: e.to_string(),
            })
    }
}

/// Popularity for a record: the dataset value when present, else fetched.
pub fn fetch_popularity(
    s_pop: Option<u64>,
    subject: &str,
    client: Option<&PageviewsClient>,
) -> Result<u64, ScoringError> {
    match (s_pop, client) {
        (Some(v), _) => Ok(v),
        (None, Some(c)) => c.fetch(subject),
        (None, None) => Err(ScoringError::EndpointUnavailable(format!(
            "no popularity for `{subject}` and no page view client configured"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gold(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn substring_match() {
        assert!(is_correct("film director", &gold(&["director"]), CaseMode::Fold).unwrap());
        assert!(!is_correct("Paris", &gold(&["Baton Rouge"]), CaseMode::Fold).unwrap());
        assert!(is_correct("cotonou", &gold(&["Cotonou"]), CaseMode::Fold).unwrap());
        assert!(!is_correct("cotonou", &gold(&["Cotonou"]), CaseMode::Strict).unwrap());
        assert!(is_correct("x", &gold(&["  X "]), CaseMode::Fold).unwrap());
        assert!(matches!(
            is_correct("x", &[], CaseMode::Fold),
            Err(ScoringError::EmptyGoldAnswers)
        ));
        assert!(matches!(
            is_correct("x", &gold(&[" "]), CaseMode::Fold),
            Err(ScoringError::EmptyGoldAnswers)
        ));
    }

    #[test]
    fn category_means() {
        let rows: Vec<CorrectnessRow> = [("a", 1), ("a", 1), ("a", 0), ("a", 0), ("b", 1)]
            .iter()
            .enumerate()
            .map(|(i, (c, k))| CorrectnessRow {
                question_id: i.to_string(),
                category: c.to_string(),
                correct: *k,
            })
            .collect();
        let m = category_correctness(&rows);
        assert_eq!(m["a"], 0.5);
        assert_eq!(m["b"], 1.0);
    }

    #[test]
    fn popularity_transform() {
        assert_eq!(PopularityFeature::new("q", 1).unwrap().log_spop, 0.0);
        assert!((PopularityFeature::new("q", 2).unwrap().log_spop - 2f64.ln()).abs() < 1e-15);
        assert!(PopularityFeature::new("q", 0).is_err());
        assert_eq!(mean_monthly_views(&[900, 1100, 1000]), Some(1000));
        assert_eq!(mean_monthly_views(&[0, 0]), Some(1));
        assert_eq!(mean_monthly_views(&[]), None);
    }

    #[test]
    fn dataset_popularity_skips_network() {
        assert_eq!(fetch_popularity(Some(1200), "Stevie Cameron", None).unwrap(), 1200);
    }

    #[test]
    fn window_and_url() {
        let w = MonthWindow::trailing(12, NaiveDate::from_ymd_opt(2024, 3, 15).unwrap());
        assert_eq!(w.start, (2023, 3));
        assert_eq!(w.end, (2024, 2));
        assert_eq!(w.start_stamp(), "2023030100");
        assert_eq!(w.end_stamp(), "2024022900");
        let c = PageviewsClient::new(PageviewsConfig::default(), w);
        assert_eq!(
            c.url_for("Stevie Cameron"),
            "https://wikimedia.org/api/rest_v1/metrics/pageviews/per-article/en.wikipedia/all-access/all-agents/Stevie_Cameron/monthly/2023030100/2024022900"
        );
        assert!(c.url_for("AC/DC").contains("/AC%2FDC/"));
        let jan = MonthWindow::trailing(1, NaiveDate::from_ymd_opt(2024, 1, 2).unwrap());
        assert_eq!((jan.start, jan.end), ((2023, 12), (2023, 12)));
    }
}
