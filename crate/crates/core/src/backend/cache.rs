use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::UsageRecord;
use crate::scheme::Stage;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CachedResponse {
    pub text: String,
    pub usage: UsageRecord,
    pub usage_estimated: bool,
}

/// Content address for one (stage, utterance, backend, prompt) request.
pub fn cache_key(stage: Stage, utterance_id: &str, backend_id: &str, prompt_hash: &str) -> String {
    let mut h = Sha256::new();
    for part in [stage.as_str(), utterance_id, backend_id, prompt_hash] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    hex::encode(h.finalize())
}

pub trait ResponseCache: Send + Sync {
    fn get(&self, key: &str) -> Option<CachedResponse>;
    fn put(&self, key: &str, response: &CachedResponse);
}

#[derive(Debug, Default)]
pub struct MemoryCache {
    entries: Mutex<HashMap<String, CachedResponse>>,
}

impl ResponseCache for MemoryCache {
    fn get(&self, key: &str) -> Option<CachedResponse> {
        self.entries.lock().unwrap().get(key).cloned()
    }

    fn put(&self, key: &str, response: &CachedResponse) {
        self.entries
            .lock()
            .unwrap()
            .insert(key.to_string(), response.clone());
    }
}

/// On-disk cache laid out as `<root>/<key[0..2]>/<key>.json`.
#[derive(Debug, Clone)]
pub struct DirCache {
    root: PathBuf,
}

impl DirCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn path(&self, key: &str) -> PathBuf {
        self.root
            .join(&key[..2.min(key.len())])
            .join(format!("{key}.json"))
    }
}

impl ResponseCache for DirCache {
    fn get(&self, key: &str) -> Option<CachedResponse> {
        let bytes = std::fs::read(self.path(key)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    fn put(&self, key: &str, response: &CachedResponse) {
        let path = self.path(key);
        let write = || -> std::io::Result<()> {
            std::fs::create_dir_all(path.parent().expect("cache path has a parent"))?;
            let tmp = path.with_extension("json.tmp");
            std::fs::write(&tmp, serde_json::to_vec(response)?)?;
            std::fs::rename(&tmp, &path)
        };
        if let Err(e) = write() {
            log::warn!("cache write to {} failed: {e}", path.display());
        }
    }
}
