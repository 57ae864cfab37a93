use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tracing::{debug, warn};

use crate::error::{Error, Result};

use super::{ChatBackend, ChatRequest, ChatResponse, DiskCache, InflightLimiter, Usage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryConfig {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
    /// Each delay is scaled by a uniform factor in `[1 - jitter, 1 + jitter]`.
    pub jitter: f64,
}

impl Default for RetryConfig {
    fn default() -> Self {
        RetryConfig {
            max_attempts: 4,
            base_backoff_ms: 500,
            jitter: 0.2,
        }
    }
}

impl RetryConfig {
    /// Nominal (jitter-free) delay after failed attempt `attempt` (1-based).
    pub fn nominal_delay_ms(&self, attempt: u32) -> u64 {
        self.base_backoff_ms
            .saturating_mul(1u64 << (attempt.saturating_sub(1)).min(30))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub base_url: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub max_inflight: usize,
    pub retry: RetryConfig,
    pub cache_dir: Option<PathBuf>,
    pub timeout_s: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            base_url: "http://127.0.0.1:8000/v1".into(),
            api_key_env: "FAILFORGE_API_KEY".into(),
            max_inflight: 8,
            retry: RetryConfig::default(),
            cache_dir: None,
            timeout_s: 120,
        }
    }
}

impl GatewayConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_inflight < 1 {
            return Err(Error::Config("gateway.max_inflight must be >= 1".into()));
        }
        if self.retry.max_attempts < 1 {
            return Err(Error::Config("gateway.retry.max_attempts must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.retry.jitter) {
            return Err(Error::Config("gateway.retry.jitter must be in [0, 1)".into()));
        }
        if self.timeout_s == 0 {
            return Err(Error::Config("gateway.timeout_s must be positive".into()));
        }
        Ok(())
    }
}

type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

/// HTTP chat-completion client. Cheap to clone; clones share the limiter.
#[derive(Clone)]
pub struct Gateway {
    cfg: GatewayConfig,
    agent: ureq::Agent,
    limiter: InflightLimiter,
    cache: Option<DiskCache>,
    api_key: Option<String>,
    sleeper: Sleeper,
}

enum AttemptError {
    Fatal { status: u16, message: String },
    Retryable { status: u16, message: String },
    Timeout,
}

impl Gateway {
    pub fn new(cfg: GatewayConfig) -> Result<Self> {
        cfg.validate()?;
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(cfg.timeout_s))
            .build();
        let cache = cfg.cache_dir.as_ref().map(DiskCache::new).transpose()?;
        let api_key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty());
        Ok(Gateway {
            limiter: InflightLimiter::new(cfg.max_inflight),
            cfg,
            agent,
            cache,
            api_key,
            sleeper: Arc::new(std::thread::sleep),
        })
    }

    /// Replaces the backoff sleep, e.g. to record the schedule in tests.
    pub fn with_sleeper(mut self, sleeper: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleeper = Arc::new(sleeper);
        self
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.cfg
    }

    pub fn limiter(&self) -> &InflightLimiter {
        &self.limiter
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{path}", self.cfg.base_url.trim_end_matches('/'))
    }

    fn backoff_delay(&self, attempt: u32) -> Duration {
        let nominal = self.cfg.retry.nominal_delay_ms(attempt) as f64;
        let jitter = self.cfg.retry.jitter;
        let factor = if jitter > 0.0 {
            1.0 + rand::rng().random_range(-jitter..=jitter)
        } else {
            1.0
        };
        Duration::from_millis((nominal * factor).round() as u64)
    }

    fn send_once(&self, body: &str) -> std::result::Result<(String, u16), AttemptError> {
        let _permit = self.limiter.acquire();
        let mut request = self
            .agent
            .post(&self.url("chat/completions"))
            .set("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            request = request.set("Authorization", &format!("Bearer {key}"));
        }
        match request.send_string(body) {
            Ok(resp) => {
                let status = resp.status();
                resp.into_string()
                    .map(|text| (text, status))
                    .map_err(|e| AttemptError::Retryable {
                        status: 0,
                        message: format!("reading body: {e}"),
                    })
            }
            Err(ureq::Error::Status(status, resp)) => {
                let message = resp.into_string().unwrap_or_default();
                if status == 429 || status >= 500 {
                    Err(AttemptError::Retryable { status, message })
                } else {
                    Err(AttemptError::Fatal { status, message })
                }
            }
            Err(ureq::Error::Transport(t)) => {
                if is_timeout(&t) {
                    Err(AttemptError::Timeout)
                } else {
                    Err(AttemptError::Retryable {
                        status: 0,
                        message: t.to_string(),
                    })
                }
            }
        }
    }
}

fn is_timeout(t: &ureq::Transport) -> bool {
    let mut source: Option<&(dyn std::error::Error + 'static)> = std::error::Error::source(t);
    while let Some(err) = source {
        if let Some(io) = err.downcast_ref::<std::io::Error>() {
            if matches!(io.kind(), std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock) {
                return true;
            }
        }
        source = err.source();
    }
    t.to_string().contains("timed out")
}

/// Extracts the first choice's text and usage from a completion body.
pub(crate) fn parse_completion(body: &str) -> Option<(String, Option<Usage>)> {
    let v: Value = serde_json::from_str(body).ok()?;
    let content = &v["choices"][0]["message"]["content"];
    let text = match content {
        Value::String(s) => s.clone(),
        // Some servers return content as a list of parts.
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p["text"].as_str())
            .collect::<Vec<_>>()
            .join(""),
        _ => return None,
    };
    let usage = serde_json::from_value(v["usage"].clone()).ok();
    Some((text, usage))
}

impl ChatBackend for Gateway {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse> {
        let key = req.cache_key();
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(&key)) {
            debug!(key = %key, "cache hit");
            return Ok(hit);
        }

        let body = req.wire_body().to_string();
        let max_attempts = self.cfg.retry.max_attempts;
        let mut backoff_ms = Vec::new();
        let mut last = AttemptError::Timeout;
        for attempt in 1..=max_attempts {
            match self.send_once(&body) {
                Ok((text, status)) => {
                    let Some((text, usage)) = parse_completion(&text) else {
                        return Err(Error::Gateway {
                            status,
                            attempts: attempt,
                            message: "malformed completion body".into(),
                        });
                    };
                    let response = ChatResponse {
                        text,
                        usage,
                        attempts: attempt,
                        cached: false,
                        backoff_ms,
                    };
                    if let Some(cache) = &self.cache {
                        cache.put(&key, &response)?;
                    }
                    return Ok(response);
                }
                Err(AttemptError::Fatal { status, message }) => {
                    return Err(Error::Gateway {
                        status,
                        attempts: attempt,
                        message,
                    });
                }
                Err(err) => {
                    if let AttemptError::Retryable { status, message } = &err {
                        warn!(attempt, status, %message, "retryable gateway failure");
                    }
                    last = err;
                }
            }
            if attempt < max_attempts {
                let delay = self.backoff_delay(attempt);
                backoff_ms.push(delay.as_millis() as u64);
                (self.sleeper)(delay);
            }
        }
        Err(match last {
            AttemptError::Timeout => Error::Timeout { attempts: max_attempts },
            AttemptError::Retryable { status, message } | AttemptError::Fatal { status, message } => Error::Gateway {
                status,
                attempts: max_attempts,
                message,
            },
        })
    }

    fn probe(&self) -> bool {
        let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs(2)).build();
        match agent.get(&self.url("models")).call() {
            Ok(_) | Err(ureq::Error::Status(..)) => true,
            Err(ureq::Error::Transport(_)) => false,
        }
    }
}
