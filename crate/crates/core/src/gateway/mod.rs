//! Chat-completion gateway.
//!
//! All model traffic goes through [`ChatClient`]. Implementations:
//!
//! - [`HttpClient`]: OpenAI-compatible endpoints, bounded retries with
//!   exponential backoff, per-endpoint concurrency limit.
//! - [`ReplayClient`]: fixture store keyed by request fingerprint, in strict
//!   replay or record mode.
//! - [`SimulatedModel`]: a scripted grader with a configurable accuracy,
//!   used to record synthetic fixture sets.
//!
//! Requests are always sent with temperature 0.

mod assets;
mod http;
mod limiter;
mod parse;
mod replay;
mod sim;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::fsutil::sha256_hex;
use crate::promptkit::{PromptBundle, Segment};

pub use assets::AssetStore;
pub use http::{HttpClient, HttpReply, HttpTransport, ReqwestTransport, RetryPolicy, TransportError};
pub use limiter::{EndpointLimiter, Permit};
pub use parse::parse_cot;
pub use replay::{replay_complete, Fixture, FixtureStore, ReplayClient, ReplayMode};
pub use sim::{SimBehaviour, SimulatedModel};

/// Sampling temperature for every pipeline call.
pub const TEMPERATURE: f64 = 0.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEndpoint {
    /// Identifier used in runs and reports, e.g. `gpt-5-chat`.
    pub id: String,
    /// Model name sent on the wire; defaults to `id`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default = "default_base_url")]
    pub base_url: String,
    /// Environment variable holding the API key.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_max_tokens")]
    pub max_output_tokens: u32,
}

fn default_base_url() -> String {
    "https://api.openai.com/v1".to_string()
}

fn default_key_env() -> String {
    "OPENAI_API_KEY".to_string()
}

fn default_max_tokens() -> u32 {
    2048
}

impl ModelEndpoint {
    pub fn new(id: impl Into<String>) -> Self {
        ModelEndpoint {
            id: id.into(),
            model: None,
            base_url: default_base_url(),
            api_key_env: default_key_env(),
            max_output_tokens: default_max_tokens(),
        }
    }

    pub fn model_name(&self) -> &str {
        self.model.as_deref().unwrap_or(&self.id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub raw_text: String,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<TokenUsage>,
    pub endpoint_id: String,
    pub fingerprint: String,
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("credential variable {0} is not set")]
    MissingCredential(String),
    #[error("endpoint {endpoint} rejected the credential (HTTP {status})")]
    Auth { endpoint: String, status: u16 },
    #[error("endpoint {endpoint}: gave up after {attempts} attempts: {last}")]
    RetriesExhausted {
        endpoint: String,
        attempts: u32,
        last: String,
    },
    #[error("request of {bytes} bytes exceeds the {limit}-byte payload limit")]
    PayloadTooLarge { bytes: usize, limit: usize },
    #[error("endpoint {endpoint}: HTTP {status}: {body}")]
    Http {
        endpoint: String,
        status: u16,
        body: String,
    },
    #[error("endpoint {endpoint}: malformed response: {message}")]
    Decode { endpoint: String, message: String },
    #[error("no fixture for request {fingerprint} (endpoint {endpoint})")]
    MissingFixture { endpoint: String, fingerprint: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("fixture {path}: {message}")]
    BadFixture { path: PathBuf, message: String },
    #[error("simulated model {model}: {message}")]
    Simulation { model: String, message: String },
}

impl GatewayError {
    /// Errors that end a batch run: later requests would fail the same way.
    pub fn is_fatal(&self) -> bool {
        matches!(
            self,
            GatewayError::MissingCredential(_) | GatewayError::Auth { .. } | GatewayError::RetriesExhausted { .. }
        )
    }
}

/// A chat model that answers prompt bundles. Shareable across threads.
pub trait ChatClient: Send + Sync {
    fn complete(&self, endpoint: &ModelEndpoint, bundle: &PromptBundle) -> Result<ModelResponse, GatewayError>;
}

impl<T: ChatClient + ?Sized> ChatClient for std::sync::Arc<T> {
    fn complete(&self, endpoint: &ModelEndpoint, bundle: &PromptBundle) -> Result<ModelResponse, GatewayError> {
        (**self).complete(endpoint, bundle)
    }
}

impl<T: ChatClient + ?Sized> ChatClient for &T {
    fn complete(&self, endpoint: &ModelEndpoint, bundle: &PromptBundle) -> Result<ModelResponse, GatewayError> {
        (**self).complete(endpoint, bundle)
    }
}

/// Canonical request document: everything that determines a model's
/// answer. Images are represented by path and content hash so that the
/// document stays small while still changing when pixels change.
pub fn canonical_request(
    endpoint: &ModelEndpoint,
    bundle: &PromptBundle,
    assets: &AssetStore,
) -> Result<Value, GatewayError> {
    let mut parts = Vec::with_capacity(bundle.messages.len());
    for seg in &bundle.messages {
        match seg {
            Segment::Text { text, .. } => parts.push(json!({"type": "text", "text": text})),
            Segment::ImageSlot { image, .. } => {
                let sha = assets.sha256(&image.path)?;
                parts.push(json!({
                    "type": "image_url",
                    "image_url": {"url": image.path, "sha256": sha},
                }));
            }
        }
    }
    Ok(json!({
        "model": endpoint.model_name(),
        "temperature": TEMPERATURE,
        "max_tokens": endpoint.max_output_tokens,
        "messages": [
            {"role": "system", "content": bundle.system},
            {"role": "user", "content": parts},
        ],
    }))
}

/// Serializes with object keys sorted at every level.
pub fn canonical_bytes(value: &Value) -> Vec<u8> {
    fn sort(v: &Value) -> Value {
        match v {
            Value::Object(map) => {
                let mut keys: Vec<&String> = map.keys().collect();
                keys.sort();
                let mut out = serde_json::Map::new();
                for k in keys {
                    out.insert(k.clone(), sort(&map[k]));
                }
                Value::Object(out)
            }
            Value::Array(items) => Value::Array(items.iter().map(sort).collect()),
            other => other.clone(),
        }
    }
    serde_json::to_vec(&sort(value)).expect("value serializes")
}

/// SHA-256 of the canonical request bytes, hex encoded.
pub fn fingerprint_value(request: &Value) -> String {
    sha256_hex(&canonical_bytes(request))
}

pub fn fingerprint(
    endpoint: &ModelEndpoint,
    bundle: &PromptBundle,
    assets: &AssetStore,
) -> Result<String, GatewayError> {
    Ok(fingerprint_value(&canonical_request(endpoint, bundle, assets)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_ignores_key_order() {
        let a: Value = serde_json::from_str(r#"{"b": 1, "a": {"y": [1, {"q": 2, "p": 3}], "x": null}}"#).unwrap();
        let b: Value = serde_json::from_str(r#"{"a": {"x": null, "y": [1, {"p": 3, "q": 2}]}, "b": 1}"#).unwrap();
        assert_eq!(fingerprint_value(&a), fingerprint_value(&b));
        let c: Value = serde_json::from_str(r#"{"a": {"x": null, "y": [{"p": 3, "q": 2}, 1]}, "b": 1}"#).unwrap();
        assert_ne!(fingerprint_value(&a), fingerprint_value(&c));
    }

    #[test]
    fn endpoint_defaults() {
        let e: ModelEndpoint = toml::from_str("id = \"gpt-5-chat\"").unwrap();
        assert_eq!(e.model_name(), "gpt-5-chat");
        assert_eq!(e.api_key_env, "OPENAI_API_KEY");
        assert_eq!(e, ModelEndpoint::new("gpt-5-chat"));
    }
}
