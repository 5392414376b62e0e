//! Content-addressed stage cache backed by one JSONL file per stage.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clients::{ChatRequest, ClientError, EmbedClient, TextGenClient};

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache I/O on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: corrupt cache entry: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("cannot serialize cache value: {0}")]
    Serialize(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    /// Unix seconds.
    pub created_at: u64,
    pub value: Json,
}

/// Hex SHA-256 over the canonical JSON of `(stage, input, config)`.
pub fn cache_key(stage: &str, input: &impl Serialize, config: &impl Serialize) -> String {
    let doc = serde_json::json!({ "stage": stage, "input": input, "config": config });
    hex::encode(Sha256::digest(doc.to_string().as_bytes()))
}

pub struct Cache {
    dir: Option<PathBuf>,
    entries: RwLock<HashMap<(String, String), Json>>,
    writer: Mutex<()>,
    touched: Mutex<BTreeMap<String, BTreeSet<String>>>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl Cache {
    /// Opens (creating if needed) a cache directory and loads every stage file.
    pub fn open(dir: &Path) -> Result<Self, CacheError> {
        fs::create_dir_all(dir).map_err(|source| CacheError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let mut entries = HashMap::new();
        let listing = fs::read_dir(dir).map_err(|source| CacheError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let mut files: Vec<PathBuf> = listing
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        files.sort();
        for path in files {
            let stage = path.file_stem().unwrap().to_string_lossy().into_owned();
            let text = fs::read_to_string(&path).map_err(|source| CacheError::Io {
                path: path.clone(),
                source,
            })?;
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let entry: CacheEntry =
                    serde_json::from_str(line).map_err(|e| CacheError::Corrupt {
                        path: path.clone(),
                        line: i + 1,
                        message: e.to_string(),
                    })?;
                entries.insert((stage.clone(), entry.key), entry.value);
            }
        }
        Ok(Self::with(Some(dir.to_path_buf()), entries))
    }

    /// A cache that lives only in memory.
    pub fn in_memory() -> Self {
        Self::with(None, HashMap::new())
    }

    fn with(dir: Option<PathBuf>, entries: HashMap<(String, String), Json>) -> Self {
        Self {
            dir,
            entries: RwLock::new(entries),
            writer: Mutex::new(()),
            touched: Mutex::new(BTreeMap::new()),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        }
    }

    fn touch(&self, stage: &str, key: &str) {
        self.touched
            .lock()
            .unwrap()
            .entry(stage.to_string())
            .or_default()
            .insert(key.to_string());
    }

    pub fn get<T: DeserializeOwned>(&self, stage: &str, key: &str) -> Option<T> {
        let value = self
            .entries
            .read()
            .unwrap()
            .get(&(stage.to_string(), key.to_string()))
            .cloned()?;
        match serde_json::from_value(value) {
            Ok(v) => {
                self.touch(stage, key);
                Some(v)
            }
            Err(e) => {
                log::warn!("cache entry {stage}/{key} does not decode ({e}); recomputing");
                None
            }
        }
    }

    pub fn put<T: Serialize>(&self, stage: &str, key: &str, value: &T) -> Result<(), CacheError> {
        let value = serde_json::to_value(value)?;
        let _guard = self.writer.lock().unwrap();
        if let Some(dir) = &self.dir {
            let entry = CacheEntry {
                key: key.to_string(),
                created_at: SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map_or(0, |d| d.as_secs()),
                value: value.clone(),
            };
            let path = dir.join(format!("{stage}.jsonl"));
            let mut line = serde_json::to_string(&entry)?;
            line.push('\n');
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .and_then(|mut f| f.write_all(line.as_bytes()))
                .map_err(|source| CacheError::Io { path, source })?;
        }
        self.entries
            .write()
            .unwrap()
            .insert((stage.to_string(), key.to_string()), value);
        self.touch(stage, key);
        Ok(())
    }

    /// Returns the cached value or computes, stores and returns it. Errors
    /// from `compute` are not cached.
    pub fn get_or_compute<T, E>(
        &self,
        stage: &str,
        key: &str,
        compute: impl FnOnce() -> Result<T, E>,
    ) -> Result<T, E>
    where
        T: Serialize + DeserializeOwned,
        E: From<CacheError>,
    {
        if let Some(v) = self.get(stage, key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(v);
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let v = compute()?;
        self.put(stage, key, &v)?;
        Ok(v)
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    /// Keys read or written since the cache was opened, per stage.
    pub fn touched_keys(&self) -> BTreeMap<String, BTreeSet<String>> {
        self.touched.lock().unwrap().clone()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum CachedReply {
    Text(String),
    Failed { error: String },
}

/// Text-generation client whose replies are cached per request. Service
/// failures are cached too and replayed as [`ClientError::Cached`] unless
/// `retry_failures` is set.
pub struct CachedTextGen {
    inner: Arc<dyn TextGenClient>,
    cache: Arc<Cache>,
    stage: String,
    retry_failures: bool,
}

impl CachedTextGen {
    pub fn new(inner: Arc<dyn TextGenClient>, cache: Arc<Cache>, stage: impl Into<String>) -> Self {
        Self {
            inner,
            cache,
            stage: stage.into(),
            retry_failures: false,
        }
    }

    pub fn retry_failures(mut self, retry: bool) -> Self {
        self.retry_failures = retry;
        self
    }
}

impl TextGenClient for CachedTextGen {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        let key = cache_key(&self.stage, request, &self.inner.model_id());
        match self.cache.get::<CachedReply>(&self.stage, &key) {
            Some(CachedReply::Text(reply)) => {
                self.cache.hits.fetch_add(1, Ordering::Relaxed);
                return Ok(reply);
            }
            Some(CachedReply::Failed { error }) if !self.retry_failures => {
                self.cache.hits.fetch_add(1, Ordering::Relaxed);
                return Err(ClientError::Cached(error));
            }
            _ => {}
        }
        self.cache.misses.fetch_add(1, Ordering::Relaxed);
        let (entry, result) = match self.inner.complete(request) {
            Ok(reply) => (CachedReply::Text(reply.clone()), Ok(reply)),
            Err(e) if e.is_service_failure() => (
                CachedReply::Failed {
                    error: e.to_string(),
                },
                Err(e),
            ),
            Err(e) => return Err(e),
        };
        if let Err(e) = self.cache.put(&self.stage, &key, &entry) {
            log::warn!("could not cache reply: {e}");
        }
        result
    }
}

/// Embedding client caching one vector per text; only misses reach the
/// wrapped client, in a single batch.
pub struct CachedEmbed {
    inner: Arc<dyn EmbedClient>,
    cache: Arc<Cache>,
    stage: String,
}

impl CachedEmbed {
    pub fn new(inner: Arc<dyn EmbedClient>, cache: Arc<Cache>, stage: impl Into<String>) -> Self {
        Self {
            inner,
            cache,
            stage: stage.into(),
        }
    }
}

impl EmbedClient for CachedEmbed {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ClientError> {
        let keys: Vec<String> = texts
            .iter()
            .map(|t| cache_key(&self.stage, t, &self.inner.model_id()))
            .collect();
        let mut out: Vec<Option<Vec<f64>>> = keys
            .iter()
            .map(|k| self.cache.get(&self.stage, k))
            .collect();
        let missing: Vec<usize> = (0..texts.len()).filter(|&i| out[i].is_none()).collect();
        self.cache
            .hits
            .fetch_add(texts.len() - missing.len(), Ordering::Relaxed);
        if !missing.is_empty() {
            self.cache
                .misses
                .fetch_add(missing.len(), Ordering::Relaxed);
            let batch: Vec<String> = missing.iter().map(|&i| texts[i].clone()).collect();
            let vectors = self.inner.embed(&batch)?;
            if vectors.len() != batch.len() {
                return Err(ClientError::Decode(format!(
                    "expected {} vectors, got {}",
                    batch.len(),
                    vectors.len()
                )));
            }
            for (&i, v) in missing.iter().zip(vectors) {
                if let Err(e) = self.cache.put(&self.stage, &keys[i], &v) {
                    log::warn!("could not cache embedding: {e}");
                }
                out[i] = Some(v);
            }
        }
        Ok(out.into_iter().map(|v| v.expect("filled above")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::{CountingTextGen, ScriptedTextGen};

    #[test]
    fn key_is_canonical() {
        let a = cache_key("s", &serde_json::json!({"x": 1, "y": 2}), &"c");
        let b = cache_key("s", &serde_json::json!({"y": 2, "x": 1}), &"c");
        assert_eq!(a, b);
        assert_ne!(
            a,
            cache_key("t", &serde_json::json!({"x": 1, "y": 2}), &"c")
        );
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn persists_across_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Cache::open(dir.path()).unwrap();
        let v: Result<Vec<u32>, CacheError> = cache.get_or_compute("stage", "k", || Ok(vec![1, 2]));
        assert_eq!(v.unwrap(), vec![1, 2]);
        drop(cache);
        let cache = Cache::open(dir.path()).unwrap();
        let v: Result<Vec<u32>, CacheError> =
            cache.get_or_compute("stage", "k", || panic!("recomputed"));
        assert_eq!(v.unwrap(), vec![1, 2]);
        assert_eq!((cache.hits(), cache.misses()), (1, 0));
    }

    #[test]
    fn cached_client_calls_once() {
        let counting = Arc::new(CountingTextGen::new(Arc::new(ScriptedTextGen::constant(
            "m", "SELECT 1",
        ))));
        let cache = Arc::new(Cache::in_memory());
        let client = CachedTextGen::new(counting.clone(), cache, "nl2sql");
        let req = ChatRequest::user("q", 0.0);
        assert_eq!(client.complete(&req).unwrap(), "SELECT 1");
        assert_eq!(client.complete(&req).unwrap(), "SELECT 1");
        assert_eq!(counting.calls(), 1);
    }

    #[test]
    fn floats_reload_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let values: Vec<f64> = vec![3.0 / 13.0, 0.1 + 0.2, 1e-300, -2.0 / 3.0];
        Cache::open(dir.path())
            .unwrap()
            .put("s", "k", &values)
            .unwrap();
        let back: Vec<f64> = Cache::open(dir.path()).unwrap().get("s", "k").unwrap();
        assert_eq!(
            values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            back.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
