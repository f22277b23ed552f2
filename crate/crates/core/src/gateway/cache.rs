use std::fs;
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

/// Content-addressed key over everything that determines a response.
pub fn cache_key(model_id: &str, temperature: f64, prompt_hash: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(model_id.as_bytes());
    hasher.update([0]);
    hasher.update(format!("{temperature:?}").as_bytes());
    hasher.update([0]);
    hasher.update(prompt_hash.as_bytes());
    hex::encode(hasher.finalize())
}

/// One file per key holding the raw response text.
#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    counter: AtomicU64,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            counter: AtomicU64::new(0),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn get(&self, key: &str) -> std::io::Result<Option<String>> {
        match fs::read_to_string(self.dir.join(key)) {
            Ok(text) => Ok(Some(text)),
            Err(e) if e.kind() == ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn put(&self, key: &str, text: &str) -> std::io::Result<()> {
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        let tmp = self.dir.join(format!(".{key}.{}.{n}.tmp", std::process::id()));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(text.as_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, self.dir.join(key))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path().join("c")).unwrap();
        let key = cache_key("m", 0.0, "abc");
        assert_eq!(cache.get(&key).unwrap(), None);
        cache.put(&key, "{\"prediction\": 1}\n").unwrap();
        assert_eq!(cache.get(&key).unwrap().as_deref(), Some("{\"prediction\": 1}\n"));
        let leftovers = fs::read_dir(cache.dir()).unwrap().count();
        assert_eq!(leftovers, 1);
    }

    #[test]
    fn key_depends_on_every_input() {
        let base = cache_key("m", 0.0, "abc");
        assert_eq!(base, cache_key("m", 0.0, "abc"));
        assert_ne!(base, cache_key("m2", 0.0, "abc"));
        assert_ne!(base, cache_key("m", 0.5, "abc"));
        assert_ne!(base, cache_key("m", 0.0, "abd"));
    }
}
