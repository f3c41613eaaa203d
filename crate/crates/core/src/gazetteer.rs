//! Recallers that map a mentioned place name to geographic information:
//! an in-memory gazetteer snapshot acting as an oracle, and an HTTP client
//! for a remote geocoding service.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::atomic::Ordering;
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

use crate::geo::{BoundingBox, GeoInfo, GeoPoint};
use crate::net::{classify, with_retry, Attempt, ClientStats, HttpFailure, JsonlCache, KeyedLocks, RateLimiter, RetryPolicy};

/// Trim, collapse internal whitespace, lowercase.
pub fn normalize_name(name: &str) -> String {
    name.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

#[derive(Debug, Error)]
pub enum GazetteerError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("gazetteer {0} has no valid entries")]
    Empty(PathBuf),
}

/// One line of a gazetteer snapshot.
#[derive(Debug, Deserialize)]
struct StoreLine {
    name: String,
    #[serde(default)]
    country: Option<String>,
    lat: f64,
    lon: f64,
    #[serde(default)]
    bbox: Option<[f64; 4]>,
    #[serde(default)]
    source_id: Option<String>,
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct StoreLoadReport {
    pub loaded: usize,
    /// `(line number, reason)` for rejected lines.
    pub rejected: Vec<(usize, String)>,
}

type StoreKey = (String, Option<String>);

/// Read-only name lookup over a local snapshot.
#[derive(Debug, Default, Clone)]
pub struct GazetteerStore {
    entries: HashMap<StoreKey, GeoInfo>,
    by_name: HashMap<String, Vec<Option<String>>>,
}

impl GazetteerStore {
    /// Builds a store; for repeated `(name, country)` keys the first entry wins.
    pub fn from_entries(entries: impl IntoIterator<Item = GeoInfo>) -> Self {
        let mut store = Self::default();
        for info in entries {
            store.insert(info);
        }
        store
    }

    fn insert(&mut self, info: GeoInfo) -> bool {
        let name = normalize_name(&info.name);
        let country = info.country.as_deref().map(normalize_name);
        let key = (name.clone(), country.clone());
        if self.entries.contains_key(&key) {
            return false;
        }
        self.entries.insert(key, info);
        self.by_name.entry(name).or_default().push(country);
        true
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, StoreLoadReport), GazetteerError> {
        let path = path.as_ref();
        let io_err = |source| GazetteerError::Io { path: path.to_path_buf(), source };
        let file = File::open(path).map_err(io_err)?;
        let mut store = Self::default();
        let mut report = StoreLoadReport::default();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(io_err)?;
            if line.trim().is_empty() {
                continue;
            }
            match parse_store_line(&line) {
                Ok(info) => {
                    if store.insert(info) {
                        report.loaded += 1;
                    } else {
                        report.rejected.push((lineno, "duplicate name/country key".into()));
                    }
                }
                Err(reason) => report.rejected.push((lineno, reason)),
            }
        }
        for (lineno, reason) in &report.rejected {
            log::warn!("{}:{lineno}: {reason}", path.display());
        }
        if store.is_empty() {
            return Err(GazetteerError::Empty(path.to_path_buf()));
        }
        Ok((store, report))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Oracle lookup. With a country, the qualified key is tried first, then
    /// the unqualified one. Without a country, the unqualified key is tried,
    /// then the single qualified entry if the name is unambiguous.
    pub fn lookup(&self, name: &str, country: Option<&str>) -> Option<&GeoInfo> {
        let name = normalize_name(name);
        if let Some(c) = country {
            if let Some(info) = self.entries.get(&(name.clone(), Some(normalize_name(c)))) {
                return Some(info);
            }
        }
        if let Some(info) = self.entries.get(&(name.clone(), None)) {
            return Some(info);
        }
        match self.by_name.get(&name).map(Vec::as_slice) {
            Some([only]) if country.is_none() => self.entries.get(&(name, only.clone())),
            _ => None,
        }
    }
}

fn parse_store_line(line: &str) -> Result<GeoInfo, String> {
    let raw: StoreLine = serde_json::from_str(line).map_err(|e| format!("malformed entry: {e}"))?;
    let center = GeoPoint::new(raw.lat, raw.lon).map_err(|e| format!("center: {e}"))?;
    let bbox = raw
        .bbox
        .map(BoundingBox::try_from)
        .transpose()
        .map_err(|e| format!("bbox: {e}"))?;
    Ok(GeoInfo { name: raw.name, country: raw.country, center, bbox, source_id: raw.source_id })
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeocodeError {
    #[error("no geocoding result for {0:?}")]
    NotFound(String),
    #[error("geocoder transport failure: {0}")]
    Transport(String),
    #[error("geocoder protocol error: {0}")]
    Protocol(String),
}

/// Anything that can act as a name-to-coordinates recaller.
pub trait Geocoder: Send + Sync {
    fn geocode(&self, name: &str) -> Result<GeoInfo, GeocodeError>;
}

pub const DEFAULT_GEOCODER_ENDPOINT: &str = "https://maps.googleapis.com/maps/api/geocode/json";

#[derive(Debug, Clone)]
pub struct GeocoderConfig {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    /// Requests per second.
    pub rate_limit: f64,
    pub cache_path: Option<PathBuf>,
}

impl Default for GeocoderConfig {
    fn default() -> Self {
        Self {
            endpoint: DEFAULT_GEOCODER_ENDPOINT.to_string(),
            api_key: std::env::var("GEOCODER_API_KEY").ok(),
            timeout: Duration::from_secs(30),
            retry: RetryPolicy::default(),
            rate_limit: 10.0,
            cache_path: None,
        }
    }
}

#[derive(Debug, Deserialize)]
struct LatLng {
    lat: f64,
    lng: f64,
}

#[derive(Debug, Deserialize)]
struct Bounds {
    northeast: LatLng,
    southwest: LatLng,
}

#[derive(Debug, Deserialize)]
struct Geometry {
    location: LatLng,
    #[serde(default)]
    bounds: Option<Bounds>,
    #[serde(default)]
    viewport: Option<Bounds>,
}

#[derive(Debug, Deserialize)]
struct GeocodeResult {
    geometry: Geometry,
    #[serde(default)]
    place_id: Option<String>,
}

#[derive(Debug, Deserialize)]
struct GeocodeResponse {
    #[serde(default)]
    status: Option<String>,
    #[serde(default)]
    results: Vec<GeocodeResult>,
    #[serde(default)]
    error_message: Option<String>,
}

/// Maps a response body to `Some(info)`, `None` for zero results, or a
/// retry/protocol outcome.
fn interpret_body(name: &str, body: &str) -> Attempt<Option<GeoInfo>> {
    let resp: GeocodeResponse = match serde_json::from_str(body) {
        Ok(r) => r,
        Err(e) => return Attempt::Fail(HttpFailure::Status { code: 200, body: format!("malformed body: {e}") }),
    };
    match resp.status.as_deref() {
        None | Some("OK") => {}
        Some("ZERO_RESULTS") => return Attempt::Done(None),
        Some("OVER_QUERY_LIMIT") => return Attempt::Retry("OVER_QUERY_LIMIT".into()),
        Some(other) => {
            let msg = resp.error_message.map(|m| format!("{other}: {m}")).unwrap_or_else(|| other.to_string());
            return Attempt::Fail(HttpFailure::Status { code: 200, body: msg });
        }
    }
    let Some(first) = resp.results.into_iter().next() else {
        return Attempt::Done(None);
    };
    let loc = &first.geometry.location;
    let center = match GeoPoint::new(loc.lat, loc.lng) {
        Ok(c) => c,
        Err(e) => return Attempt::Fail(HttpFailure::Status { code: 200, body: format!("bad location: {e}") }),
    };
    // wrapping viewports are dropped; only the center is required
    let bbox = first
        .geometry
        .bounds
        .or(first.geometry.viewport)
        .and_then(|b| BoundingBox::new(b.southwest.lng, b.southwest.lat, b.northeast.lng, b.northeast.lat).ok());
    Attempt::Done(Some(GeoInfo { name: name.to_string(), country: None, center, bbox, source_id: first.place_id }))
}

/// Client for a Google-style geocoding JSON API.
#[derive(Debug)]
pub struct GeocoderClient {
    config: GeocoderConfig,
    agent: ureq::Agent,
    limiter: RateLimiter,
    cache: JsonlCache<Option<GeoInfo>>,
    locks: KeyedLocks,
    stats: ClientStats,
}

impl GeocoderClient {
    pub fn new(config: GeocoderConfig) -> std::io::Result<Self> {
        let cache = match &config.cache_path {
            Some(p) => JsonlCache::open(p)?,
            None => JsonlCache::in_memory(),
        };
        Ok(Self {
            agent: ureq::AgentBuilder::new().timeout(config.timeout).build(),
            limiter: RateLimiter::new(config.rate_limit),
            cache,
            locks: KeyedLocks::default(),
            stats: ClientStats::default(),
            config,
        })
    }

    pub fn stats(&self) -> &ClientStats {
        &self.stats
    }

    fn cache_key(&self, name: &str) -> String {
        format!("{}\u{1f}{}", self.config.endpoint, normalize_name(name))
    }

    /// Geocodes `name`, consulting the cache first. Zero results are cached too.
    pub fn remote_geocode(&self, name: &str) -> Result<GeoInfo, GeocodeError> {
        let key = self.cache_key(name);
        let lock = self.locks.lock_for(&key);
        let _guard = lock.lock().unwrap();
        if let Some(hit) = self.cache.get(&key) {
            self.stats.cache_hits.fetch_add(1, Ordering::SeqCst);
            return hit.ok_or_else(|| GeocodeError::NotFound(name.to_string()));
        }
        let outcome = with_retry(&self.config.retry, &self.limiter, &self.stats, || {
            let mut req = self.agent.get(&self.config.endpoint).query("address", name);
            if let Some(k) = &self.config.api_key {
                req = req.query("key", k);
            }
            match classify(req.call()) {
                Attempt::Done(body) => interpret_body(name, &body),
                Attempt::Retry(r) => Attempt::Retry(r),
                Attempt::Fail(f) => Attempt::Fail(f),
            }
        });
        let found = match outcome {
            Ok(found) => found,
            Err(HttpFailure::Exhausted { attempts, last }) => {
                return Err(GeocodeError::Transport(format!("{attempts} attempts, last: {last}")))
            }
            Err(HttpFailure::Status { code, body }) => {
                return Err(GeocodeError::Protocol(format!("HTTP {code}: {body}")))
            }
        };
        if let Err(e) = self.cache.insert(&key, found.clone()) {
            log::warn!("geocoder cache write failed: {e}");
        }
        found.ok_or_else(|| GeocodeError::NotFound(name.to_string()))
    }
}

impl Geocoder for GeocoderClient {
    fn geocode(&self, name: &str) -> Result<GeoInfo, GeocodeError> {
        self.remote_geocode(name)
    }
}

impl Geocoder for GazetteerStore {
    fn geocode(&self, name: &str) -> Result<GeoInfo, GeocodeError> {
        self.lookup(name, None).cloned().ok_or_else(|| GeocodeError::NotFound(name.to_string()))
    }
}
