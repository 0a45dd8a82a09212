use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::backend::{ChatBackend, ChatRequest};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetryPolicy {
    /// Total attempts per request, including the first.
    pub max_attempts: usize,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_delay_ms: 500,
            max_delay_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based): doubling from the base,
    /// capped at the maximum.
    pub fn delay(&self, retry: usize) -> Duration {
        let factor = 1u64.checked_shl(retry.min(63) as u32).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }

    /// Runs `attempt` until it succeeds, a non-retryable error occurs, or
    /// the attempts are used up. `sleep` is called between attempts.
    pub fn run<T>(
        &self,
        mut attempt: impl FnMut() -> std::result::Result<T, Failure>,
        mut sleep: impl FnMut(Duration),
    ) -> Result<T> {
        let attempts = self.max_attempts.max(1);
        let mut last = String::new();
        for i in 0..attempts {
            match attempt() {
                Ok(v) => return Ok(v),
                Err(Failure::Fatal(msg)) => return Err(Error::Backend(msg)),
                Err(Failure::Retryable(msg)) => last = msg,
            }
            if i + 1 < attempts {
                sleep(self.delay(i));
            }
        }
        Err(Error::Backend(format!("gave up after {attempts} attempts: {last}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Failure {
    Retryable(String),
    Fatal(String),
}

/// Chat-completions client: POSTs `{model, messages, temperature, top_p}`
/// and reads `choices[0].message.content`.
pub struct HttpBackend {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    agent: ureq::Agent,
}

impl fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpBackend")
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("retry", &self.retry)
            .finish()
    }
}

impl HttpBackend {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        retry: RetryPolicy,
    ) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key,
            retry,
            agent,
        }
    }

    pub fn body(&self, request: &ChatRequest) -> Value {
        json!({
            "model": self.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "top_p": request.top_p,
        })
    }

    fn attempt(&self, body: &Value) -> std::result::Result<String, Failure> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| match e {
            ureq::Error::StatusCode(code) if code == 429 || code >= 500 => Failure::Retryable(format!("HTTP {code}")),
            ureq::Error::StatusCode(code) => Failure::Fatal(format!("HTTP {code}")),
            other => Failure::Retryable(other.to_string()),
        })?;
        let value: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| Failure::Retryable(format!("unreadable response: {e}")))?;
        extract_content(&value).ok_or_else(|| Failure::Fatal("response has no choices[0].message.content".into()))
    }
}

pub fn extract_content(response: &Value) -> Option<String> {
    response
        .get("choices")?
        .get(0)?
        .get("message")?
        .get("content")?
        .as_str()
        .map(str::to_owned)
}

impl ChatBackend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let body = self.body(request);
        self.retry.run(|| self.attempt(&body), std::thread::sleep)
    }
}
