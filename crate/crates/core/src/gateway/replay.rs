use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{
    canonical_request, fingerprint_value, AssetStore, ChatClient, GatewayError, ModelEndpoint, ModelResponse,
    TokenUsage,
};
use crate::fsutil::atomic_create_new;
use crate::promptkit::PromptBundle;

/// Stored response half of a fixture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredResponse {
    pub raw_text: String,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<TokenUsage>,
}

/// One recorded exchange, stored as `<fingerprint>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fixture {
    pub fingerprint: String,
    pub endpoint_id: String,
    /// Canonical request document the fingerprint was computed from.
    pub request: Value,
    pub response: StoredResponse,
}

/// Directory of fixtures keyed by request fingerprint.
#[derive(Debug, Clone)]
pub struct FixtureStore {
    dir: PathBuf,
}

impl FixtureStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        FixtureStore { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, fingerprint: &str) -> PathBuf {
        self.dir.join(format!("{fingerprint}.json"))
    }

    pub fn get(&self, fingerprint: &str) -> Result<Option<Fixture>, GatewayError> {
        let path = self.path_for(fingerprint);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(source) => return Err(GatewayError::Io { path, source }),
        };
        let fixture: Fixture = serde_json::from_slice(&bytes).map_err(|e| GatewayError::BadFixture {
            path: path.clone(),
            message: e.to_string(),
        })?;
        if fixture.fingerprint != fingerprint {
            return Err(GatewayError::BadFixture {
                path,
                message: format!("records fingerprint {}", fixture.fingerprint),
            });
        }
        Ok(Some(fixture))
    }

    /// Stores `fixture` unless one with the same fingerprint exists.
    /// Returns whether a new file was written.
    pub fn put(&self, fixture: &Fixture) -> Result<bool, GatewayError> {
        let path = self.path_for(&fixture.fingerprint);
        let mut bytes = serde_json::to_vec_pretty(fixture).expect("fixture serializes");
        bytes.push(b'\n');
        match atomic_create_new(&path, &bytes) {
            Ok(()) => Ok(true),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Ok(false),
            Err(source) => Err(GatewayError::Io { path, source }),
        }
    }

    /// Fingerprints of every stored fixture, sorted.
    pub fn fingerprints(&self) -> Result<Vec<String>, GatewayError> {
        let entries = match fs::read_dir(&self.dir) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(source) => {
                return Err(GatewayError::Io {
                    path: self.dir.clone(),
                    source,
                })
            }
        };
        let mut out = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|source| GatewayError::Io {
                path: self.dir.clone(),
                source,
            })?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(fp) = name.strip_suffix(".json") {
                if !fp.starts_with('.') {
                    out.push(fp.to_string());
                }
            }
        }
        out.sort();
        Ok(out)
    }
}

/// Looks up the fixture for `bundle`; a missing fixture is an error.
pub fn replay_complete(
    store: &FixtureStore,
    assets: &AssetStore,
    endpoint: &ModelEndpoint,
    bundle: &PromptBundle,
) -> Result<ModelResponse, GatewayError> {
    let fingerprint = fingerprint_value(&canonical_request(endpoint, bundle, assets)?);
    let fixture = store.get(&fingerprint)?.ok_or_else(|| GatewayError::MissingFixture {
        endpoint: endpoint.id.clone(),
        fingerprint: fingerprint.clone(),
    })?;
    Ok(response_from(fixture, endpoint))
}

fn response_from(fixture: Fixture, endpoint: &ModelEndpoint) -> ModelResponse {
    ModelResponse {
        raw_text: fixture.response.raw_text,
        latency_ms: fixture.response.latency_ms,
        usage: fixture.response.usage,
        endpoint_id: endpoint.id.clone(),
        fingerprint: fixture.fingerprint,
    }
}

#[derive(Clone)]
pub enum ReplayMode {
    /// Fixtures only; a miss is an error.
    Strict,
    /// Serve existing fixtures; forward misses to the live client and store
    /// the result.
    Record(Arc<dyn ChatClient>),
}

/// Fixture-backed client.
#[derive(Clone)]
pub struct ReplayClient {
    store: FixtureStore,
    assets: AssetStore,
    mode: ReplayMode,
}

impl ReplayClient {
    pub fn strict(store: FixtureStore, assets: AssetStore) -> Self {
        ReplayClient {
            store,
            assets,
            mode: ReplayMode::Strict,
        }
    }

    pub fn recording(store: FixtureStore, assets: AssetStore, live: Arc<dyn ChatClient>) -> Self {
        ReplayClient {
            store,
            assets,
            mode: ReplayMode::Record(live),
        }
    }

    pub fn store(&self) -> &FixtureStore {
        &self.store
    }
}

impl ChatClient for ReplayClient {
    fn complete(&self, endpoint: &ModelEndpoint, bundle: &PromptBundle) -> Result<ModelResponse, GatewayError> {
        let request = canonical_request(endpoint, bundle, &self.assets)?;
        let fingerprint = fingerprint_value(&request);
        if let Some(f) = self.store.get(&fingerprint)? {
            return Ok(response_from(f, endpoint));
        }
        match &self.mode {
            ReplayMode::Strict => Err(GatewayError::MissingFixture {
                endpoint: endpoint.id.clone(),
                fingerprint,
            }),
            ReplayMode::Record(live) => {
                let resp = live.complete(endpoint, bundle)?;
                let fixture = Fixture {
                    fingerprint: fingerprint.clone(),
                    endpoint_id: endpoint.id.clone(),
                    request,
                    response: StoredResponse {
                        raw_text: resp.raw_text.clone(),
                        latency_ms: resp.latency_ms,
                        usage: resp.usage,
                    },
                };
                self.store.put(&fixture)?;
                Ok(ModelResponse { fingerprint, ..resp })
            }
        }
    }
}
