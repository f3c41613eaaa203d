//! Prompt construction, the chat-completions client and extraction of
//! structured predictions from model responses.

use std::path::PathBuf;
use std::sync::atomic::Ordering;
use std::sync::LazyLock;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geo::{format_coord, parse_bbox, parse_point, BoundingBox, GeoInfo, GeoPoint, Parsed, NUM};
use crate::metrics::UncoveredReason;
use crate::net::{classify, with_retry, Attempt, ClientStats, HttpFailure, JsonlCache, KeyedLocks, RateLimiter, RetryPolicy, Semaphore};
use crate::pipeline::LocationRecord;

pub const DEFAULT_TEMPERATURE: f64 = 0.0;
pub const DEFAULT_MAX_TOKENS: u32 = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    KnowledgePoint,
    KnowledgeBox,
    GeoAugmentedBox,
    DirectBox,
    EndToEndRecaller,
}

impl PromptKind {
    pub const ALL: [PromptKind; 5] = [
        PromptKind::KnowledgePoint,
        PromptKind::KnowledgeBox,
        PromptKind::GeoAugmentedBox,
        PromptKind::DirectBox,
        PromptKind::EndToEndRecaller,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PromptKind::KnowledgePoint => "knowledge_point",
            PromptKind::KnowledgeBox => "knowledge_box",
            PromptKind::GeoAugmentedBox => "geo_augmented_box",
            PromptKind::DirectBox => "direct_box",
            PromptKind::EndToEndRecaller => "end_to_end_recaller",
        }
    }

    fn template(&self) -> (&'static str, &'static str) {
        match self {
            PromptKind::KnowledgePoint => (KNOWLEDGE_POINT_TASK, KNOWLEDGE_POINT_EXAMPLES),
            PromptKind::KnowledgeBox => (KNOWLEDGE_BOX_TASK, KNOWLEDGE_BOX_EXAMPLES),
            PromptKind::GeoAugmentedBox => (GEO_AUGMENTED_TASK, GEO_AUGMENTED_EXAMPLES),
            PromptKind::DirectBox => (DIRECT_TASK, DIRECT_EXAMPLES),
            PromptKind::EndToEndRecaller => (RECALLER_TASK, RECALLER_EXAMPLES),
        }
    }

    /// System prompt, with the two worked examples when `few_shot`.
    pub fn system_text(&self, few_shot: bool) -> String {
        let (task, examples) = self.template();
        if few_shot {
            format!("{task}{EXAMPLES_INTRO}{examples}")
        } else {
            task.to_string()
        }
    }
}

const EXAMPLES_INTRO: &str = " Here are some examples with the expected output format:\n";

const KNOWLEDGE_POINT_TASK: &str = "You are a system that returns the *center coordinates* of a given location or landmark. The coordinates are a pair of numbers defining the location's latitude and longitude, where latitude is a decimal number between -90.0 and 90.0 and longitude is a decimal number between -180.0 and 180.0. Follow the standard format of (latitude, longitude).";
const KNOWLEDGE_POINT_EXAMPLES: &str = "Input: The Eiffel Tower, in France.\n\
Output: (48.858, 2.2959)\n\
Input: Brazil, in South America.\n\
Output: (-14.243, -53.189)";

const KNOWLEDGE_BOX_TASK: &str = "You are a system that returns the *bounding box* of a given location or landmark. A bounding box is an area defined by two longitudes and two latitudes, where latitude is a decimal number between -90.0 and 90.0 and longitude is a decimal number between -180.0 and 180.0. Follow the standard format of (min longitude, min latitude, max longitude, max latitude).";
const KNOWLEDGE_BOX_EXAMPLES: &str = "Input: The Eiffel Tower, in France.\n\
Output: (2.293, 48.857, 2.297, 48.859)\n\
Input: Brazil, in South America.\n\
Output: (-73.983, -33.750, -34.793, 5.270)";

const GEO_AUGMENTED_TASK: &str = "You are a system that returns the *bounding box* of a described location or landmark, by using a description and the center longitude and latitude of related locations. A bounding box is an area defined by two longitudes and two latitudes, where latitude is a decimal number between -90.0 and 90.0 and longitude is a decimal number between -180.0 and 180.0. Follow the standard format of (min longitude, min latitude, max longitude, max latitude).";
// exemplar coordinates are reproduced as published, label order included
const GEO_AUGMENTED_EXAMPLES: &str = "Input: The location is a wrought-iron lattice tower on the Champ de Mars in Paris, France. It is named after the engineer Gustave Eiffel, whose company designed and built the tower from 1887 to 1889. Champ de Mars has a longitude of 48.855 and latitude of 2.296. Paris has a longitude of 48.859 and latitude of 2.264.\n\
Output: (2.293, 48.857, 2.297, 48.859)\n\
Input: The location is the largest and easternmost country in South America. South America has a longitude of -13.591 and latitude of -109.712.\n\
Output: (-73.983, -33.750, -34.793, 5.270)";

const DIRECT_TASK: &str = "You are a system that returns the *bounding box* of a described location or landmark. A bounding box is an area defined by two longitudes and two latitudes, where latitude is a decimal number between -90.0 and 90.0 and longitude is a decimal number between -180.0 and 180.0. Follow the standard format of (min longitude, min latitude, max longitude, max latitude).";
// the trailing space after each example description is part of the template
const DIRECT_EXAMPLES: &str = "Input: The location is a wrought-iron lattice tower on the Champ de Mars in Paris, France. It is named after the engineer Gustave Eiffel, whose company designed and built the tower from 1887 to 1889. \n\
Output: (2.293, 48.857, 2.297, 48.859)\n\
Input: The location is the largest and easternmost country in South America. \n\
Output: (-73.983, -33.750, -34.793, 5.270)";

const RECALLER_TASK: &str = "You are a system that returns the *center coordinates* for each location mentioned in a given paragraph. The coordinates are a pair of numbers defining each location's latitude and longitude, where latitude is a decimal number between -90.0 and 90.0 and longitude is a decimal number between -180.0 and 180.0.";
const RECALLER_EXAMPLES: &str = "Input: The location is a wrought-iron lattice tower on the Champ de Mars in Paris, France. It is named after the engineer Gustave Eiffel, whose company designed and built the tower from 1887 to 1889. \n\
Output: Champ de Mars has a longitude of 48.855 and latitude of 2.296. Paris has a longitude of 48.859 and latitude of 2.264. \n\
Input: The location is the largest and easternmost country in South America.\n\
Output: South America has a longitude of -13.591 and latitude of 109.712.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub system: String,
    pub user: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, system: String, user: String) -> Self {
        Self { model: model.into(), system, user, temperature: DEFAULT_TEMPERATURE, max_tokens: DEFAULT_MAX_TOKENS }
    }

    /// SHA-256 over the JSON encoding of `(model, system, user)`.
    pub fn cache_key(&self) -> String {
        cache_key(&self.model, &self.system, &self.user)
    }
}

pub fn cache_key(model: &str, system: &str, user: &str) -> String {
    let encoded = serde_json::to_vec(&(model, system, user)).expect("strings serialize");
    format!("{:x}", Sha256::digest(encoded))
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("record {0} has no gold name for a knowledge prompt")]
    MissingGoldName(String),
    #[error("record {0} has no recalled mentions for a geo-augmented prompt")]
    NoRecalledMentions(String),
}

/// `<Name> has a longitude of <lon> and latitude of <lat>.`
pub fn mention_sentence(info: &GeoInfo) -> String {
    format!(
        "{} has a longitude of {} and latitude of {}.",
        info.name,
        format_coord(info.center.lon()),
        format_coord(info.center.lat())
    )
}

fn user_text(payload: &str) -> String {
    format!("Input: {payload}\nOutput:")
}

fn geo_augmented_payload(record: &LocationRecord, recalled: &[GeoInfo]) -> String {
    let mut payload = record.description.trim_end().to_string();
    for info in recalled {
        payload.push(' ');
        payload.push_str(&mention_sentence(info));
    }
    payload
}

/// Builds the chat request for one record.
///
/// `recalled` is only read for [`PromptKind::GeoAugmentedBox`], where it must
/// be non-empty; see [`build_degraded_prompt`] for the zero-mention case.
pub fn build_prompt(
    kind: PromptKind,
    record: &LocationRecord,
    recalled: &[GeoInfo],
    few_shot: bool,
    model: &str,
) -> Result<ChatRequest, PromptError> {
    let payload = match kind {
        PromptKind::KnowledgePoint | PromptKind::KnowledgeBox => {
            let name = record
                .gold_name
                .as_deref()
                .ok_or_else(|| PromptError::MissingGoldName(record.id.clone()))?;
            match &record.gold_country {
                Some(country) => format!("{name}, in {country}."),
                None => format!("{name}."),
            }
        }
        PromptKind::GeoAugmentedBox => {
            if recalled.is_empty() {
                return Err(PromptError::NoRecalledMentions(record.id.clone()));
            }
            geo_augmented_payload(record, recalled)
        }
        PromptKind::DirectBox | PromptKind::EndToEndRecaller => record.description.trim_end().to_string(),
    };
    Ok(ChatRequest::new(model, kind.system_text(few_shot), user_text(&payload)))
}

/// Geo-augmented prompt with no mention sentences, used when recall failed for every mention.
pub fn build_degraded_prompt(record: &LocationRecord, few_shot: bool, model: &str) -> ChatRequest {
    ChatRequest::new(
        model,
        PromptKind::GeoAugmentedBox.system_text(few_shot),
        user_text(&geo_augmented_payload(record, &[])),
    )
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("chat transport failure: {0}")]
    Transport(String),
    #[error("chat endpoint returned empty content")]
    EmptyResponse,
    #[error("chat protocol error: {0}")]
    Protocol(String),
}

/// A chat-completions backend.
pub trait ChatModel: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError>;
}

#[derive(Debug, Clone)]
pub struct ChatConfig {
    /// Base URL; `/chat/completions` is appended.
    pub base_url: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    pub rate_limit: f64,
    pub max_in_flight: usize,
    pub cache_path: Option<PathBuf>,
}

impl ChatConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: None,
            timeout: Duration::from_secs(120),
            retry: RetryPolicy::default(),
            rate_limit: 0.0,
            max_in_flight: 8,
            cache_path: None,
        }
    }

    /// Reads `LLM_API_BASE` and `LLM_API_KEY`.
    pub fn from_env() -> Option<Self> {
        let base = std::env::var("LLM_API_BASE").ok()?;
        let mut cfg = Self::new(base);
        cfg.api_key = std::env::var("LLM_API_KEY").ok();
        Some(cfg)
    }
}

#[derive(Deserialize)]
struct CompletionMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    message: CompletionMessage,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

enum Reply {
    Content(String),
    Empty,
}

/// OpenAI-compatible chat-completions client with a persistent response cache.
#[derive(Debug)]
pub struct HttpChatClient {
    config: ChatConfig,
    url: String,
    agent: ureq::Agent,
    limiter: RateLimiter,
    in_flight: Semaphore,
    cache: JsonlCache<String>,
    locks: KeyedLocks,
    stats: ClientStats,
}

impl HttpChatClient {
    pub fn new(config: ChatConfig) -> std::io::Result<Self> {
        let cache = match &config.cache_path {
            Some(p) => JsonlCache::open(p)?,
            None => JsonlCache::in_memory(),
        };
        Ok(Self {
            url: format!("{}/chat/completions", config.base_url.trim_end_matches('/')),
            agent: ureq::AgentBuilder::new().timeout(config.timeout).build(),
            limiter: RateLimiter::new(config.rate_limit),
            in_flight: Semaphore::new(config.max_in_flight),
            cache,
            locks: KeyedLocks::default(),
            stats: ClientStats::default(),
            config,
        })
    }

    pub fn stats(&self) -> &ClientStats {
        &self.stats
    }

    fn post(&self, request: &ChatRequest) -> Result<Reply, HttpFailure> {
        let body = json!({
            "model": request.model,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": request.user},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        with_retry(&self.config.retry, &self.limiter, &self.stats, || {
            let mut req = self.agent.post(&self.url);
            if let Some(key) = &self.config.api_key {
                req = req.set("Authorization", &format!("Bearer {key}"));
            }
            match classify(req.send_json(&body)) {
                Attempt::Done(text) => match serde_json::from_str::<CompletionResponse>(&text) {
                    Ok(resp) => match resp.choices.into_iter().next().and_then(|c| c.message.content) {
                        Some(c) if !c.trim().is_empty() => Attempt::Done(Reply::Content(c)),
                        _ => Attempt::Done(Reply::Empty),
                    },
                    Err(e) => Attempt::Fail(HttpFailure::Status { code: 200, body: format!("malformed body: {e}") }),
                },
                Attempt::Retry(r) => Attempt::Retry(r),
                Attempt::Fail(f) => Attempt::Fail(f),
            }
        })
    }
}

impl ChatModel for HttpChatClient {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let key = request.cache_key();
        let lock = self.locks.lock_for(&key);
        let _guard = lock.lock().unwrap();
        if let Some(hit) = self.cache.get(&key) {
            self.stats.cache_hits.fetch_add(1, Ordering::SeqCst);
            return Ok(hit);
        }
        let reply = {
            let _permit = self.in_flight.acquire();
            self.post(request)
        };
        match reply {
            Ok(Reply::Content(text)) => {
                if let Err(e) = self.cache.insert(&key, text.clone()) {
                    log::warn!("chat cache write failed: {e}");
                }
                Ok(text)
            }
            Ok(Reply::Empty) => Err(LlmError::EmptyResponse),
            Err(HttpFailure::Exhausted { attempts, last }) => {
                Err(LlmError::Transport(format!("{attempts} attempts, last: {last}")))
            }
            Err(HttpFailure::Status { code, body }) => Err(LlmError::Protocol(format!("HTTP {code}: {body}"))),
        }
    }
}

/// A mention with coordinates as emitted by an LLM recaller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecalledMention {
    pub name: String,
    pub lat: f64,
    pub lon: f64,
    /// False when either coordinate is out of range.
    pub valid: bool,
}

impl RecalledMention {
    pub fn center(&self) -> Option<GeoPoint> {
        GeoPoint::new(self.lat, self.lon).ok()
    }

    pub fn to_geo_info(&self) -> Option<GeoInfo> {
        self.center().map(|c| GeoInfo::from_center(self.name.clone(), c))
    }
}

static MENTION: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(&format!(
        r"(?:^|[.!?;]\s+|\n)(?P<name>[^.!?;\n]*?)\s*(?i:has a longitude of)\s+(?P<lon>{NUM})\s+(?i:and latitude of)\s+(?P<lat>{NUM})"
    ))
    .unwrap()
});

fn clean_mention_name(raw: &str) -> String {
    let mut name = raw.trim();
    for prefix in ["Output:", "output:"] {
        if let Some(rest) = name.strip_prefix(prefix) {
            name = rest.trim_start();
        }
    }
    name.trim_matches(|c: char| c == '*' || c == '-' || c == '•' || c == '_' || c.is_whitespace())
        .to_string()
}

/// Finds every `<Name> has a longitude of <lon> and latitude of <lat>` sentence.
pub fn extract_mentions(text: &str) -> Vec<RecalledMention> {
    MENTION
        .captures_iter(text)
        .filter_map(|caps| {
            let name = clean_mention_name(&caps["name"]);
            let lon: f64 = caps["lon"].parse().ok()?;
            let lat: f64 = caps["lat"].parse().ok()?;
            if name.is_empty() {
                return None;
            }
            let valid = GeoPoint::new(lat, lon).is_ok();
            Some(RecalledMention { name, lat, lon, valid })
        })
        .collect()
}

/// Structured content pulled from a response.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Extraction {
    pub bbox: Option<BoundingBox>,
    pub point: Option<GeoPoint>,
    pub mentions: Vec<RecalledMention>,
    pub uncovered: Option<UncoveredReason>,
    pub invalid_values: Vec<f64>,
}

fn from_parsed<T>(parsed: Parsed<T>, place: impl FnOnce(&mut Extraction, T)) -> Extraction {
    let mut out = Extraction::default();
    match parsed {
        Parsed::Valid(v) => place(&mut out, v),
        Parsed::Missing => out.uncovered = Some(UncoveredReason::NoParse),
        Parsed::Invalid { values, error } => {
            out.uncovered = Some(if error.is_range() { UncoveredReason::OutOfRange } else { UncoveredReason::InvalidOrder });
            out.invalid_values = values;
        }
    }
    out
}

pub fn extract_prediction(kind: PromptKind, text: &str) -> Extraction {
    match kind {
        PromptKind::KnowledgePoint => from_parsed(parse_point(text), |e, p| e.point = Some(p)),
        PromptKind::KnowledgeBox | PromptKind::GeoAugmentedBox | PromptKind::DirectBox => {
            from_parsed(parse_bbox(text), |e, b| e.bbox = Some(b))
        }
        PromptKind::EndToEndRecaller => {
            let mentions = extract_mentions(text);
            let uncovered = mentions.is_empty().then_some(UncoveredReason::NoParse);
            Extraction { mentions, uncovered, ..Default::default() }
        }
    }
}
