use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use base64::Engine;
use parking_lot::Mutex;

use super::GatewayError;
use crate::fsutil::sha256_hex;

/// Resolves project-relative image paths and caches their content hashes.
#[derive(Debug, Clone)]
pub struct AssetStore {
    root: PathBuf,
    hashes: Arc<Mutex<HashMap<String, String>>>,
}

impl AssetStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        AssetStore {
            root: root.into(),
            hashes: Arc::default(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn read(&self, rel: &str) -> Result<Vec<u8>, GatewayError> {
        let path = self.root.join(rel);
        fs::read(&path).map_err(|source| GatewayError::Io { path, source })
    }

    pub fn sha256(&self, rel: &str) -> Result<String, GatewayError> {
        if let Some(h) = self.hashes.lock().get(rel) {
            return Ok(h.clone());
        }
        let h = sha256_hex(&self.read(rel)?);
        self.hashes.lock().insert(rel.to_string(), h.clone());
        Ok(h)
    }

    /// `data:` URL with the image inlined as base64.
    pub fn data_url(&self, rel: &str) -> Result<String, GatewayError> {
        let bytes = self.read(rel)?;
        let mime = match Path::new(rel)
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .as_deref()
        {
            Some("jpg" | "jpeg") => "image/jpeg",
            Some("webp") => "image/webp",
            Some("gif") => "image/gif",
            _ => "image/png",
        };
        let b64 = base64::engine::general_purpose::STANDARD.encode(bytes);
        Ok(format!("data:{mime};base64,{b64}"))
    }
}
