use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use log::warn;
use serde::{Deserialize, Serialize};

use super::{
    cache_key, BackendError, BackendErrorKind, CacheKey, CompletionRequest, CompletionResult,
    ModelBackend, Source,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub request: CompletionRequest,
    pub text: String,
    pub recorded_at: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordOutcome {
    Created,
    Overwrote,
}

/// Content-addressed completion store: `{dir}/{digest}.json`, one file per key.
#[derive(Debug)]
pub struct CacheStore {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> BackendError {
    BackendError::new(BackendErrorKind::Io, format!("{}: {e}", path.display()))
}

impl CacheStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        Ok(CacheStore {
            dir,
            write_lock: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn lookup(&self, req: &CompletionRequest) -> Result<Option<CacheEntry>, BackendError> {
        let path = self.path_for(&cache_key(req));
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(io_err(&path, e)),
        };
        let entry: CacheEntry = serde_json::from_str(&text).map_err(|e| io_err(&path, e))?;
        Ok(Some(entry))
    }

    /// Stores `text` under the request's key. A second record of the same key
    /// replaces the first and logs a warning.
    pub fn record(&self, req: &CompletionRequest, text: &str) -> Result<RecordOutcome, BackendError> {
        let key = cache_key(req);
        let path = self.path_for(&key);
        let entry = CacheEntry {
            request: req.clone(),
            text: text.to_string(),
            recorded_at: chrono::Utc::now().to_rfc3339(),
        };
        let body = serde_json::to_string_pretty(&entry).map_err(|e| io_err(&path, e))?;
        let _guard = self.write_lock.lock().expect("cache write lock");
        let outcome = if path.exists() {
            warn!("replay cache: overwriting existing entry {key}");
            RecordOutcome::Overwrote
        } else {
            RecordOutcome::Created
        };
        let tmp = self.dir.join(format!(".{key}.tmp"));
        let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        f.write_all(body.as_bytes())
            .and_then(|_| f.write_all(b"\n"))
            .and_then(|_| f.sync_all())
            .map_err(|e| io_err(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))?;
        Ok(outcome)
    }

    pub fn len(&self) -> Result<usize, BackendError> {
        let rd = fs::read_dir(&self.dir).map_err(|e| io_err(&self.dir, e))?;
        Ok(rd
            .filter_map(Result::ok)
            .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
            .count())
    }

    pub fn is_empty(&self) -> Result<bool, BackendError> {
        Ok(self.len()? == 0)
    }
}

/// Serves completions from a [`CacheStore`]; on a miss it either records
/// through an inner backend or fails with a terminal cache-miss error.
pub struct ReplayBackend {
    store: CacheStore,
    inner: Option<Box<dyn ModelBackend>>,
    record: bool,
}

impl ReplayBackend {
    /// Replay only; a miss is an error and no other backend is ever consulted.
    pub fn replay_only(store: CacheStore) -> Self {
        ReplayBackend {
            store,
            inner: None,
            record: false,
        }
    }

    pub fn recording(store: CacheStore, inner: Box<dyn ModelBackend>) -> Self {
        ReplayBackend {
            store,
            inner: Some(inner),
            record: true,
        }
    }

    /// Serves hits from the store and forwards misses to `inner` without writing them.
    pub fn read_through(store: CacheStore, inner: Box<dyn ModelBackend>) -> Self {
        ReplayBackend {
            store,
            inner: Some(inner),
            record: false,
        }
    }

    pub fn store(&self) -> &CacheStore {
        &self.store
    }
}

impl ModelBackend for ReplayBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        req.validate()?;
        if let Some(entry) = self.store.lookup(req)? {
            return Ok(CompletionResult {
                text: entry.text,
                usage: None,
                source: Source::Cache,
            });
        }
        match &self.inner {
            Some(inner) => {
                let result = inner.complete(req)?;
                if self.record {
                    self.store.record(req, &result.text)?;
                }
                Ok(result)
            }
            None => Err(BackendError::new(
                BackendErrorKind::CacheMiss,
                format!("cache miss for key {}", cache_key(req)),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{Message, RequestParams, Role, Script, ScriptedBackend, Route};
    use crate::prompting::Phase;

    fn req(content: &str) -> CompletionRequest {
        CompletionRequest {
            messages: vec![
                Message { role: Role::System, content: "s".into() },
                Message { role: Role::User, content: content.into() },
            ],
            params: RequestParams { model: "m".into(), temperature: 0.7, seed: 3, max_tokens: 5 },
            route: Some(Route::new("a".into(), Phase::Turn)),
        }
    }

    #[test]
    fn record_then_lookup() {
        let dir = tempfile::tempdir().unwrap();
        let store = CacheStore::open(dir.path()).unwrap();
        assert!(store.lookup(&req("q")).unwrap().is_none());
        assert_eq!(store.record(&req("q"), "answer \u{2014} bytes").unwrap(), RecordOutcome::Created);
        let e = store.lookup(&req("q")).unwrap().unwrap();
        assert_eq!(e.text, "answer \u{2014} bytes");
        assert_eq!(e.request, req("q"));
        // persists for a fresh handle
        let again = CacheStore::open(dir.path()).unwrap();
        assert_eq!(again.lookup(&req("q")).unwrap().unwrap().text, e.text);
        assert!(store.path_for(&cache_key(&req("q"))).exists());
    }

    #[test]
    fn second_record_wins() {
        let dir = tempfile::tempdir().unwrap();
        let store = CacheStore::open(dir.path()).unwrap();
        store.record(&req("q"), "first").unwrap();
        assert_eq!(store.record(&req("q"), "second").unwrap(), RecordOutcome::Overwrote);
        assert_eq!(store.lookup(&req("q")).unwrap().unwrap().text, "second");
        assert_eq!(store.len().unwrap(), 1);
    }

    #[test]
    fn miss_without_recording_is_terminal() {
        let dir = tempfile::tempdir().unwrap();
        let b = ReplayBackend::replay_only(CacheStore::open(dir.path()).unwrap());
        let err = b.complete(&req("q")).unwrap_err();
        assert_eq!(err.kind, BackendErrorKind::CacheMiss);
        assert!(!err.retriable());
        assert!(err.message.contains("cache miss"));
    }

    #[test]
    fn recording_then_replay() {
        let dir = tempfile::tempdir().unwrap();
        let mut script = Script::default();
        script.push(&"a".into(), Phase::Turn, "scripted reply");
        let rec = ReplayBackend::recording(
            CacheStore::open(dir.path()).unwrap(),
            Box::new(ScriptedBackend::new(script)),
        );
        let first = rec.complete(&req("q")).unwrap();
        assert_eq!(first.source, Source::Scripted);
        // script is now empty, so this must come from the cache
        let second = rec.complete(&req("q")).unwrap();
        assert_eq!(second.source, Source::Cache);
        assert_eq!(second.text, first.text);
        let replay = ReplayBackend::replay_only(CacheStore::open(dir.path()).unwrap());
        assert_eq!(replay.complete(&req("q")).unwrap().text, "scripted reply");
    }
}
