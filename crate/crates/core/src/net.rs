//! Blocking JSON-over-HTTP with bounded retries and exponential backoff.

use std::thread;
use std::time::Duration;

use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub timeout: Duration,
    /// Retries after the first attempt.
    pub retry_limit: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            timeout: Duration::from_secs(60),
            retry_limit: 3,
            initial_backoff: Duration::from_millis(500),
        }
    }
}

#[derive(Debug)]
pub enum NetError {
    /// Transport failures, 5xx or 429 on every attempt.
    Unavailable { attempts: u32, message: String },
    /// A non-retryable HTTP status.
    Status { code: u16, body: String },
    /// The body was not JSON.
    Malformed(String),
}

impl std::fmt::Display for NetError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NetError::Unavailable { attempts, message } => {
                write!(f, "unavailable after {attempts} attempts: {message}")
            }
            NetError::Status { code, body } => write!(f, "HTTP {code}: {body}"),
            NetError::Malformed(m) => write!(f, "malformed response: {m}"),
        }
    }
}

fn agent(policy: &RetryPolicy) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(policy.timeout))
        .http_status_as_error(false)
        .build()
        .into()
}

enum Attempt {
    Done(Value),
    Retry(String),
    Fail(NetError),
}

fn classify(result: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> Attempt {
    let mut resp = match result {
        Ok(r) => r,
        Err(e) => return Attempt::Retry(e.to_string()),
    };
    let code = resp.status().as_u16();
    let body = match resp.body_mut().read_to_string() {
        Ok(b) => b,
        Err(e) => return Attempt::Retry(e.to_string()),
    };
    if code == 429 || code >= 500 {
        return Attempt::Retry(format!("HTTP {code}"));
    }
    if !(200..300).contains(&code) {
        return Attempt::Fail(NetError::Status { code, body });
    }
    match serde_json::from_str(&body) {
        Ok(v) => Attempt::Done(v),
        Err(e) => Attempt::Fail(NetError::Malformed(e.to_string())),
    }
}

fn with_retries(policy: &RetryPolicy, mut attempt: impl FnMut() -> Attempt) -> Result<Value, NetError> {
    let mut backoff = policy.initial_backoff;
    let mut last = String::new();
    for n in 0..=policy.retry_limit {
        if n > 0 {
            log::debug!("retrying in {backoff:?}: {last}");
            thread::sleep(backoff);
            backoff = backoff.saturating_mul(2);
        }
        match attempt() {
            Attempt::Done(v) => return Ok(v),
            Attempt::Fail(e) => return Err(e),
            Attempt::Retry(m) => last = m,
        }
    }
    Err(NetError::Unavailable {
        attempts: policy.retry_limit + 1,
        message: last,
    })
}

pub fn post_json(url: &str, body: &Value, bearer: Option<&str>, policy: &RetryPolicy) -> Result<Value, NetError> {
    let agent = agent(policy);
    let payload = body.to_string();
    with_retries(policy, || {
        let mut req = agent.post(url).header("Content-Type", "application/json");
        if let Some(token) = bearer {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        classify(req.send(payload.as_str()))
    })
}

pub fn get_json(url: &str, user_agent: &str, policy: &RetryPolicy) -> Result<Value, NetError> {
    let agent = agent(policy);
    with_retries(policy, || {
        classify(
            agent
                .get(url)
                .header("User-Agent", user_agent)
                .header("Accept", "application/json")
                .call(),
        )
    })
}
