use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::{
    canonical_request, fingerprint_value, AssetStore, ChatClient, EndpointLimiter, GatewayError, ModelEndpoint,
    ModelResponse, TokenUsage, TEMPERATURE,
};
use crate::promptkit::{PromptBundle, Segment};

/// Raw HTTP exchange result.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    #[error("request timed out")]
    Timeout,
    #[error("connection failed: {0}")]
    Connect(String),
    #[error("{0}")]
    Other(String),
}

/// One POST of a JSON body. Swappable for fault injection.
pub trait HttpTransport: Send + Sync {
    fn post_json(&self, url: &str, bearer: &str, body: &str) -> Result<HttpReply, TransportError>;
}

impl<T: HttpTransport + ?Sized> HttpTransport for std::sync::Arc<T> {
    fn post_json(&self, url: &str, bearer: &str, body: &str) -> Result<HttpReply, TransportError> {
        (**self).post_json(url, bearer, body)
    }
}

/// Blocking reqwest transport.
#[derive(Debug, Clone)]
pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new(timeout: Duration) -> Result<Self, TransportError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| TransportError::Other(e.to_string()))?;
        Ok(ReqwestTransport { client })
    }
}

impl HttpTransport for ReqwestTransport {
    fn post_json(&self, url: &str, bearer: &str, body: &str) -> Result<HttpReply, TransportError> {
        let resp = self
            .client
            .post(url)
            .bearer_auth(bearer)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body.to_string())
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    TransportError::Timeout
                } else if e.is_connect() {
                    TransportError::Connect(e.to_string())
                } else {
                    TransportError::Other(e.to_string())
                }
            })?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| TransportError::Other(e.to_string()))?;
        Ok(HttpReply { status, body })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 5,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based): base · 2^retry, capped.
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry.min(31)).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

type CredentialSource = Box<dyn Fn(&str) -> Option<String> + Send + Sync>;

/// Client for OpenAI-compatible chat-completions endpoints.
pub struct HttpClient {
    transport: Box<dyn HttpTransport>,
    assets: AssetStore,
    retry: RetryPolicy,
    limiter: EndpointLimiter,
    max_payload_bytes: usize,
    credentials: CredentialSource,
}

impl HttpClient {
    pub fn new(transport: Box<dyn HttpTransport>, assets: AssetStore) -> Self {
        HttpClient {
            transport,
            assets,
            retry: RetryPolicy::default(),
            limiter: EndpointLimiter::default(),
            max_payload_bytes: 20 * 1024 * 1024,
            credentials: Box::new(|name| std::env::var(name).ok().filter(|v| !v.is_empty())),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_limiter(mut self, limiter: EndpointLimiter) -> Self {
        self.limiter = limiter;
        self
    }

    pub fn with_max_payload(mut self, bytes: usize) -> Self {
        self.max_payload_bytes = bytes;
        self
    }

    /// Replaces the environment lookup used to resolve credentials.
    pub fn with_credentials(mut self, source: impl Fn(&str) -> Option<String> + Send + Sync + 'static) -> Self {
        self.credentials = Box::new(source);
        self
    }

    fn wire_body(&self, endpoint: &ModelEndpoint, bundle: &PromptBundle) -> Result<String, GatewayError> {
        let mut parts = Vec::with_capacity(bundle.messages.len());
        for seg in &bundle.messages {
            match seg {
                Segment::Text { text, .. } => parts.push(json!({"type": "text", "text": text})),
                Segment::ImageSlot { image, .. } => parts.push(json!({
                    "type": "image_url",
                    "image_url": {"url": self.assets.data_url(&image.path)?},
                })),
            }
        }
        let body = json!({
            "model": endpoint.model_name(),
            "temperature": TEMPERATURE,
            "max_tokens": endpoint.max_output_tokens,
            "messages": [
                {"role": "system", "content": bundle.system},
                {"role": "user", "content": parts},
            ],
        });
        Ok(body.to_string())
    }
}

fn decode(endpoint: &ModelEndpoint, body: &str) -> Result<(String, Option<TokenUsage>), GatewayError> {
    let bad = |message: String| GatewayError::Decode {
        endpoint: endpoint.id.clone(),
        message,
    };
    let v: Value = serde_json::from_str(body).map_err(|e| bad(e.to_string()))?;
    let choice = &v["choices"][0]["message"];
    // A refusal or an empty message is passed through as text; it fails
    // CoT parsing downstream like any other unusable answer.
    let text = match &choice["content"] {
        Value::String(s) => s.clone(),
        Value::Null => choice["refusal"].as_str().unwrap_or_default().to_string(),
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p["text"].as_str())
            .collect::<Vec<_>>()
            .join(""),
        other => return Err(bad(format!("unexpected content {other}"))),
    };
    if v["choices"].as_array().is_none_or(Vec::is_empty) {
        return Err(bad("no choices".into()));
    }
    let usage = v.get("usage").and_then(|u| serde_json::from_value(u.clone()).ok());
    Ok((text, usage))
}

fn retryable(status: u16) -> bool {
    status == 408 || status == 429 || (500..600).contains(&status)
}

impl ChatClient for HttpClient {
    fn complete(&self, endpoint: &ModelEndpoint, bundle: &PromptBundle) -> Result<ModelResponse, GatewayError> {
        let key = (self.credentials)(&endpoint.api_key_env)
            .ok_or_else(|| GatewayError::MissingCredential(endpoint.api_key_env.clone()))?;
        let fingerprint = fingerprint_value(&canonical_request(endpoint, bundle, &self.assets)?);
        let body = self.wire_body(endpoint, bundle)?;
        if body.len() > self.max_payload_bytes {
            return Err(GatewayError::PayloadTooLarge {
                bytes: body.len(),
                limit: self.max_payload_bytes,
            });
        }
        let url = format!("{}/chat/completions", endpoint.base_url.trim_end_matches('/'));

        let _permit = self.limiter.acquire(&endpoint.id);
        let start = Instant::now();
        let mut attempt = 0u32;
        loop {
            let last = match self.transport.post_json(&url, &key, &body) {
                Ok(reply) if (200..300).contains(&reply.status) => {
                    let (raw_text, usage) = decode(endpoint, &reply.body)?;
                    return Ok(ModelResponse {
                        raw_text,
                        latency_ms: start.elapsed().as_millis() as u64,
                        usage,
                        endpoint_id: endpoint.id.clone(),
                        fingerprint,
                    });
                }
                Ok(reply) if reply.status == 401 || reply.status == 403 => {
                    return Err(GatewayError::Auth {
                        endpoint: endpoint.id.clone(),
                        status: reply.status,
                    });
                }
                Ok(reply) if reply.status == 413 => {
                    return Err(GatewayError::PayloadTooLarge {
                        bytes: body.len(),
                        limit: self.max_payload_bytes,
                    });
                }
                Ok(reply) if retryable(reply.status) => format!("HTTP {}", reply.status),
                Ok(reply) => {
                    return Err(GatewayError::Http {
                        endpoint: endpoint.id.clone(),
                        status: reply.status,
                        body: reply.body,
                    });
                }
                Err(e @ (TransportError::Timeout | TransportError::Connect(_))) => e.to_string(),
                Err(e) => {
                    return Err(GatewayError::RetriesExhausted {
                        endpoint: endpoint.id.clone(),
                        attempts: attempt + 1,
                        last: e.to_string(),
                    });
                }
            };
            if attempt >= self.retry.max_retries {
                return Err(GatewayError::RetriesExhausted {
                    endpoint: endpoint.id.clone(),
                    attempts: attempt + 1,
                    last,
                });
            }
            let delay = self.retry.delay(attempt);
            log::warn!("{}: {last}; retrying in {delay:?}", endpoint.id);
            std::thread::sleep(delay);
            attempt += 1;
        }
    }
}
