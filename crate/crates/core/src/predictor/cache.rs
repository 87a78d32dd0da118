use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One cached exchange, stored as `<sha256>.json` in the cache directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub prompt: String,
    pub response: String,
    pub timestamp: u64,
    pub model: String,
}

/// Response cache addressed by the hash of (prompt bytes, model name).
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn key(prompt: &[u8], model: &str) -> String {
        let mut h = Sha256::new();
        h.update(prompt);
        h.update([0u8]);
        h.update(model.as_bytes());
        hex::encode(h.finalize())
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, prompt: &[u8], model: &str) -> Option<CacheEntry> {
        let path = self.path(&Self::key(prompt, model));
        let bytes = fs::read(&path).ok()?;
        match serde_json::from_slice::<CacheEntry>(&bytes) {
            Ok(entry) if entry.model == model && entry.prompt.as_bytes() == prompt => Some(entry),
            Ok(_) => None,
            Err(e) => {
                log::warn!("ignoring unreadable cache entry {}: {e}", path.display());
                None
            }
        }
    }

    /// Writes through a temporary file so concurrent readers never see a
    /// partial entry.
    pub fn put(&self, prompt: &[u8], model: &str, response: &str) -> Result<()> {
        let key = Self::key(prompt, model);
        let entry = CacheEntry {
            prompt: String::from_utf8_lossy(prompt).into_owned(),
            response: response.to_string(),
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            model: model.to_string(),
        };
        let text = serde_json::to_string_pretty(&entry)
            .map_err(|e| Error::Backend(format!("cache entry: {e}")))?;
        let tmp = self.dir.join(format!("{key}.{}.tmp", std::process::id()));
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        let path = self.path(&key);
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn put_then_get() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path()).unwrap();
        assert!(cache.get(b"p", "m").is_none());
        cache.put(b"p", "m", "resp").unwrap();
        let hit = cache.get(b"p", "m").unwrap();
        assert_eq!(hit.response, "resp");
        assert!(cache.get(b"p", "other").is_none());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn key_depends_on_model_and_prompt() {
        let k = ResponseCache::key(b"abc", "m1");
        assert_eq!(k.len(), 64);
        assert_ne!(k, ResponseCache::key(b"abc", "m2"));
        assert_ne!(k, ResponseCache::key(b"abd", "m1"));
    }
}
