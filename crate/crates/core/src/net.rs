//! HTTP plumbing shared by the geocoder and chat clients: request pacing,
//! retry with exponential backoff, an append-only JSONL response cache and a
//! bound on in-flight requests.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Spaces requests at least `1 / rate` seconds apart across all callers.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    next_slot: Mutex<Option<Instant>>,
}

impl RateLimiter {
    /// `rate` is requests per second; non-positive or non-finite disables pacing.
    pub fn new(rate: f64) -> Self {
        let interval = if rate.is_finite() && rate > 0.0 {
            Duration::from_secs_f64(1.0 / rate)
        } else {
            Duration::ZERO
        };
        Self { interval, next_slot: Mutex::new(None) }
    }

    /// Blocks until the caller may issue a request.
    pub fn acquire(&self) {
        if self.interval.is_zero() {
            return;
        }
        let wait = {
            let mut slot = self.next_slot.lock().unwrap();
            let now = Instant::now();
            let start = match *slot {
                Some(next) if next > now => next,
                _ => now,
            };
            *slot = Some(start + self.interval);
            start - now
        };
        if !wait.is_zero() {
            thread::sleep(wait);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 4, base_delay: Duration::from_millis(500), max_delay: Duration::from_secs(30) }
    }
}

impl RetryPolicy {
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 2u32.saturating_pow(retry.min(16));
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

/// Counting semaphore bounding concurrent in-flight requests.
#[derive(Debug)]
pub struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

pub struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Self { permits: Mutex::new(permits.max(1)), cv: Condvar::new() }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().unwrap();
        while *n == 0 {
            n = self.cv.wait(n).unwrap();
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

/// Per-key mutexes so that concurrent identical requests hit the network once.
#[derive(Debug, Default)]
pub struct KeyedLocks {
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl KeyedLocks {
    pub fn lock_for(&self, key: &str) -> Arc<Mutex<()>> {
        self.locks.lock().unwrap().entry(key.to_string()).or_default().clone()
    }
}

/// Request counters exposed for tests and logs.
#[derive(Debug, Default)]
pub struct ClientStats {
    pub network_requests: AtomicU64,
    pub retries: AtomicU64,
    pub cache_hits: AtomicU64,
}

impl ClientStats {
    pub fn network_requests(&self) -> u64 {
        self.network_requests.load(Ordering::SeqCst)
    }
    pub fn retries(&self) -> u64 {
        self.retries.load(Ordering::SeqCst)
    }
    pub fn cache_hits(&self) -> u64 {
        self.cache_hits.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HttpFailure {
    /// Retryable failures persisted past the retry budget.
    Exhausted { attempts: u32, last: String },
    /// Non-retryable HTTP status.
    Status { code: u16, body: String },
}

impl std::fmt::Display for HttpFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HttpFailure::Exhausted { attempts, last } => write!(f, "gave up after {attempts} attempts: {last}"),
            HttpFailure::Status { code, body } => write!(f, "HTTP {code}: {body}"),
        }
    }
}

pub fn is_retryable_status(code: u16) -> bool {
    code == 429 || code >= 500
}

/// Outcome of one attempt as judged by the caller.
pub enum Attempt<T> {
    Done(T),
    Retry(String),
    Fail(HttpFailure),
}

/// Runs `attempt` until it succeeds, fails permanently, or the retry budget is spent.
pub fn with_retry<T>(
    policy: &RetryPolicy,
    limiter: &RateLimiter,
    stats: &ClientStats,
    mut attempt: impl FnMut() -> Attempt<T>,
) -> Result<T, HttpFailure> {
    let mut retry = 0;
    loop {
        limiter.acquire();
        stats.network_requests.fetch_add(1, Ordering::SeqCst);
        match attempt() {
            Attempt::Done(v) => return Ok(v),
            Attempt::Fail(f) => return Err(f),
            Attempt::Retry(reason) => {
                if retry >= policy.max_retries {
                    return Err(HttpFailure::Exhausted { attempts: retry + 1, last: reason });
                }
                log::debug!("retrying after: {reason}");
                thread::sleep(policy.delay(retry));
                retry += 1;
                stats.retries.fetch_add(1, Ordering::SeqCst);
            }
        }
    }
}

/// Classifies a `ureq` call into an [`Attempt`] with the response body as text.
pub fn classify(result: Result<ureq::Response, ureq::Error>) -> Attempt<String> {
    match result {
        Ok(resp) => match resp.into_string() {
            Ok(body) => Attempt::Done(body),
            Err(e) => Attempt::Retry(format!("reading body: {e}")),
        },
        Err(ureq::Error::Status(code, resp)) => {
            let body = resp.into_string().unwrap_or_default();
            if is_retryable_status(code) {
                Attempt::Retry(format!("HTTP {code}"))
            } else {
                Attempt::Fail(HttpFailure::Status { code, body })
            }
        }
        Err(ureq::Error::Transport(t)) => Attempt::Retry(t.to_string()),
    }
}

#[derive(Serialize, Deserialize)]
struct CacheLine<V> {
    key: String,
    value: V,
}

/// Append-only JSONL map from string keys to values.
///
/// Writes are serialized; a value is on disk before it becomes visible to
/// readers. Lines that fail to parse are skipped on load.
#[derive(Debug)]
pub struct JsonlCache<V> {
    path: Option<PathBuf>,
    inner: Mutex<CacheInner<V>>,
}

#[derive(Debug)]
struct CacheInner<V> {
    map: HashMap<String, V>,
    file: Option<File>,
}

impl<V: Clone + Serialize + DeserializeOwned> JsonlCache<V> {
    pub fn in_memory() -> Self {
        Self { path: None, inner: Mutex::new(CacheInner { map: HashMap::new(), file: None }) }
    }

    pub fn open(path: impl AsRef<Path>) -> io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let mut file = OpenOptions::new().create(true).read(true).append(true).open(&path)?;
        let mut map = HashMap::new();
        for (lineno, line) in BufReader::new(&file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<CacheLine<V>>(&line) {
                Ok(entry) => {
                    map.insert(entry.key, entry.value);
                }
                Err(e) => log::warn!("{}:{}: skipping corrupt cache line: {e}", path.display(), lineno + 1),
            }
        }
        // a torn final line must not swallow the next append
        let len = file.metadata()?.len();
        if len > 0 {
            let mut last = [0u8; 1];
            file.seek(SeekFrom::Start(len - 1))?;
            file.read_exact(&mut last)?;
            if last[0] != b'\n' {
                file.write_all(b"\n")?;
            }
        }
        Ok(Self { path: Some(path), inner: Mutex::new(CacheInner { map, file: Some(file) }) })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, key: &str) -> Option<V> {
        self.inner.lock().unwrap().map.get(key).cloned()
    }

    pub fn insert(&self, key: &str, value: V) -> io::Result<()> {
        let mut inner = self.inner.lock().unwrap();
        if let Some(file) = inner.file.as_mut() {
            let line = serde_json::to_string(&CacheLine { key: key.to_string(), value: &value })
                .map_err(io::Error::other)?;
            file.write_all(line.as_bytes())?;
            file.write_all(b"\n")?;
            file.flush()?;
        }
        inner.map.insert(key.to_string(), value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
