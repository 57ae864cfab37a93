use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::ChatResponse;

/// Content-addressed response store: `{dir}/{sha256}.json`.
#[derive(Debug, Clone)]
pub struct DiskCache {
    dir: PathBuf,
}

impl DiskCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(DiskCache { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    /// Unreadable or corrupt entries count as misses.
    pub fn get(&self, key: &str) -> Option<ChatResponse> {
        let bytes = std::fs::read(self.path_for(key)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    /// Write-temp-then-rename so readers never see partial entries.
    pub fn put(&self, key: &str, response: &ChatResponse) -> Result<()> {
        let stored = ChatResponse {
            text: response.text.clone(),
            usage: response.usage.clone(),
            attempts: 0,
            cached: true,
            backoff_ms: Vec::new(),
        };
        let final_path = self.path_for(key);
        let tmp = self.dir.join(format!(
            ".{key}.{}.{:?}.tmp",
            std::process::id(),
            std::thread::current().id()
        ));
        let body = serde_json::to_vec_pretty(&stored).expect("response serializes");
        std::fs::write(&tmp, body).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &final_path).map_err(|e| Error::io(&final_path, e))
    }
}
