//! Blocking HTTP clients for the scoring, detection, feature and completion services.

use std::thread::sleep;
use std::time::Duration;

use lemon_core::annotate::{CompletionClient, LlmError};
use lemon_core::curate::{DetBox, FrameScorer, RegionDetector};
use lemon_core::embed::FeatureExtractor;
use serde::Deserialize;
use serde_json::{json, Value};
use thiserror::Error;

pub const LLM_TOKEN_ENV: &str = "LEMON_LLM_TOKEN";

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{url} unreachable after {attempts} attempts: {last}")]
    Unreachable { url: String, attempts: u32, last: String },
    #[error("{url} answered {status}")]
    Status { url: String, status: u16 },
    #[error("{url} sent an unusable body: {message}")]
    BadBody { url: String, message: String },
}

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub timeout: Duration,
    /// Attempts after the first.
    pub retries: u32,
    pub backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            timeout: Duration::from_secs(30),
            retries: 3,
            backoff: Duration::from_millis(200),
        }
    }
}

enum Body<'a> {
    Bytes(&'a [u8]),
    Json(&'a Value),
}

/// One service URL with timeout, retry with exponential backoff, and optional bearer token.
#[derive(Clone)]
pub struct HttpService {
    agent: ureq::Agent,
    url: String,
    policy: RetryPolicy,
    token: Option<String>,
}

impl HttpService {
    pub fn new(url: impl Into<String>, policy: RetryPolicy) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(policy.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpService {
            agent,
            url: url.into(),
            policy,
            token: None,
        }
    }

    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.token = token;
        self
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    fn post(&self, body: Body<'_>) -> Result<Value, ServiceError> {
        let mut last = String::new();
        let attempts = self.policy.retries + 1;
        for attempt in 0..attempts {
            if attempt > 0 {
                sleep(self.policy.backoff * 2u32.saturating_pow(attempt - 1));
            }
            let mut req = self.agent.post(&self.url);
            if let Some(t) = &self.token {
                req = req.header("Authorization", &format!("Bearer {t}"));
            }
            let sent = match body {
                Body::Bytes(b) => req.header("Content-Type", "application/octet-stream").send(b),
                Body::Json(v) => req.send_json(v),
            };
            match sent {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if status == 429 || status >= 500 {
                        last = format!("status {status}");
                        continue;
                    }
                    if status >= 400 {
                        return Err(ServiceError::Status {
                            url: self.url.clone(),
                            status,
                        });
                    }
                    return resp.body_mut().read_json::<Value>().map_err(|e| ServiceError::BadBody {
                        url: self.url.clone(),
                        message: e.to_string(),
                    });
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(ServiceError::Unreachable {
            url: self.url.clone(),
            attempts,
            last,
        })
    }

    pub fn post_bytes(&self, bytes: &[u8]) -> Result<Value, ServiceError> {
        self.post(Body::Bytes(bytes))
    }

    pub fn post_json(&self, body: &Value) -> Result<Value, ServiceError> {
        self.post(Body::Json(body))
    }

    fn bad(&self, message: impl Into<String>) -> ServiceError {
        ServiceError::BadBody {
            url: self.url.clone(),
            message: message.into(),
        }
    }
}

/// Joins a base URL and a route, tolerating a trailing slash or an already-present route.
pub fn route(base: &str, path: &str) -> String {
    let base = base.trim_end_matches('/');
    if base.ends_with(path) {
        base.to_string()
    } else {
        format!("{base}{path}")
    }
}

/// `POST /score` with image bytes, answering `{p_surgical}`.
pub struct HttpScorer(pub HttpService);

impl HttpScorer {
    pub fn new(base: &str, policy: RetryPolicy) -> Self {
        HttpScorer(HttpService::new(route(base, "/score"), policy))
    }
}

impl FrameScorer for HttpScorer {
    fn score(&self, image: &[u8]) -> Result<f64, String> {
        let v = self.0.post_bytes(image).map_err(|e| e.to_string())?;
        let p = v
            .get("p_surgical")
            .and_then(Value::as_f64)
            .ok_or_else(|| self.0.bad("missing p_surgical").to_string())?;
        if !(0.0..=1.0).contains(&p) {
            return Err(self.0.bad(format!("p_surgical {p} outside [0, 1]")).to_string());
        }
        Ok(p)
    }
}

/// `POST /detect` with image bytes, answering `{boxes: [{x, y, w, h, conf}]}`.
pub struct HttpDetector(pub HttpService);

impl HttpDetector {
    pub fn new(base: &str, policy: RetryPolicy) -> Self {
        HttpDetector(HttpService::new(route(base, "/detect"), policy))
    }
}

#[derive(Deserialize)]
struct DetectBody {
    boxes: Vec<DetBox>,
}

impl RegionDetector for HttpDetector {
    fn detect(&self, image: &[u8]) -> Result<Vec<DetBox>, String> {
        let v = self.0.post_bytes(image).map_err(|e| e.to_string())?;
        serde_json::from_value::<DetectBody>(v)
            .map(|b| b.boxes)
            .map_err(|e| self.0.bad(e.to_string()).to_string())
    }
}

/// `POST /embed` with image bytes, answering a float array or `{embedding: [...]}`.
pub struct HttpFeatures(pub HttpService);

impl HttpFeatures {
    pub fn new(base: &str, policy: RetryPolicy) -> Self {
        HttpFeatures(HttpService::new(route(base, "/embed"), policy))
    }
}

impl FeatureExtractor for HttpFeatures {
    fn embed(&self, image: &[u8]) -> Result<Vec<f64>, String> {
        let v = self.0.post_bytes(image).map_err(|e| e.to_string())?;
        let arr = v.get("embedding").unwrap_or(&v);
        serde_json::from_value::<Vec<f64>>(arr.clone()).map_err(|e| self.0.bad(e.to_string()).to_string())
    }
}

/// Completion endpoint: sends `{model, prompt}` and reads `completion`, `text`,
/// or the first choice of an OpenAI-style body.
pub struct HttpCompletion {
    service: HttpService,
    model: String,
}

impl HttpCompletion {
    pub fn new(url: &str, model: impl Into<String>, token: Option<String>, policy: RetryPolicy) -> Self {
        HttpCompletion {
            service: HttpService::new(url, policy).with_token(token),
            model: model.into(),
        }
    }
}

pub fn completion_text(v: &Value) -> Option<String> {
    let direct = ["completion", "text", "response"].iter().find_map(|k| v.get(*k)?.as_str());
    let choice = || {
        let c = v.get("choices")?.get(0)?;
        c.get("text")
            .and_then(Value::as_str)
            .or_else(|| c.get("message")?.get("content")?.as_str())
    };
    direct.or_else(choice).map(str::to_owned)
}

impl CompletionClient for HttpCompletion {
    fn model(&self) -> &str {
        &self.model
    }

    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        let body = json!({"model": self.model, "prompt": prompt});
        match self.service.post_json(&body) {
            Ok(v) => completion_text(&v).ok_or_else(|| LlmError::BadResponse("no completion text".into())),
            Err(ServiceError::BadBody { message, .. }) => Err(LlmError::BadResponse(message)),
            Err(e) => Err(LlmError::Unreachable(e.to_string())),
        }
    }
}

/// Downloads `url` to `path`, with the same retry policy.
pub fn download(url: &str, path: &std::path::Path, policy: &RetryPolicy) -> Result<(), ServiceError> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(policy.timeout.max(Duration::from_secs(600))))
        .http_status_as_error(false)
        .build()
        .into();
    let mut last = String::new();
    for attempt in 0..=policy.retries {
        if attempt > 0 {
            sleep(policy.backoff * 2u32.saturating_pow(attempt - 1));
        }
        match agent.get(url).call() {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                if status == 429 || status >= 500 {
                    last = format!("status {status}");
                    continue;
                }
                if status >= 400 {
                    return Err(ServiceError::Status { url: url.into(), status });
                }
                let bytes = resp
                    .body_mut()
                    .with_config()
                    .limit(u64::MAX)
                    .read_to_vec()
                    .map_err(|e| ServiceError::BadBody {
                        url: url.into(),
                        message: e.to_string(),
                    })?;
                let tmp = path.with_extension("download");
                std::fs::write(&tmp, &bytes)
                    .and_then(|_| std::fs::rename(&tmp, path))
                    .map_err(|e| ServiceError::BadBody {
                        url: url.into(),
                        message: e.to_string(),
                    })?;
                return Ok(());
            }
            Err(e) => last = e.to_string(),
        }
    }
    Err(ServiceError::Unreachable {
        url: url.into(),
        attempts: policy.retries + 1,
        last,
    })
}
