//! Recaller + reasoner composition: each [`Approach`] turns one
//! [`LocationRecord`] into a [`Prediction`].

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gazetteer::{normalize_name, GazetteerStore, GeocodeError, Geocoder};
use crate::geo::{BoundingBox, GeoInfo};
use crate::llm::{
    build_degraded_prompt, build_prompt, extract_prediction, ChatModel, ChatRequest, LlmError, PromptError, PromptKind,
};
use crate::metrics::{aggregate, MetricsError, MetricsReport, Prediction, UncoveredReason};

/// A place named inside a description.
#[derive(Debug, Clone, PartialEq)]
pub struct Mention {
    pub name: String,
    /// Byte offsets into the description.
    pub surface_span: Option<(usize, usize)>,
    pub gold: Option<GeoInfo>,
}

impl Mention {
    pub fn named(name: impl Into<String>) -> Self {
        Self { name: name.into(), surface_span: None, gold: None }
    }

    pub fn with_gold(gold: GeoInfo) -> Self {
        Self { name: gold.name.clone(), surface_span: None, gold: Some(gold) }
    }
}

/// One dataset example.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationRecord {
    pub id: String,
    /// Never contains the target's own name.
    pub description: String,
    pub mentions: Vec<Mention>,
    pub gold_bbox: BoundingBox,
    pub gold_name: Option<String>,
    pub gold_country: Option<String>,
}

impl LocationRecord {
    /// Mentions in order of first appearance in the description, one per name.
    pub fn ordered_mentions(&self) -> Vec<&Mention> {
        let mut seen = HashSet::new();
        let mut out: Vec<(usize, usize, &Mention)> = self
            .mentions
            .iter()
            .enumerate()
            .filter(|(_, m)| seen.insert(normalize_name(&m.name)))
            .map(|(i, m)| {
                let pos = m
                    .surface_span
                    .map(|(s, _)| s)
                    .or_else(|| self.description.find(&m.name))
                    .unwrap_or(usize::MAX);
                (pos, i, m)
            })
            .collect();
        out.sort_by_key(|&(pos, i, _)| (pos, i));
        out.into_iter().map(|(_, _, m)| m).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Approach {
    /// Name + country in, center point out.
    KnowledgePoint,
    /// Name + country in, box out.
    KnowledgeBox,
    /// Description + gold mention centers in, box out.
    ReasoningOracle,
    /// Description only.
    Direct,
    /// Gazetteer snapshot as recaller.
    GeoAugOracle,
    /// Remote geocoding service as recaller.
    GeoAugRemote,
    /// LLM recaller followed by the geo-augmented reasoner.
    EndToEnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputKind {
    Point,
    Box,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Requirements {
    pub store: bool,
    pub geocoder: bool,
    pub recaller_model: bool,
}

impl Approach {
    pub const ALL: [Approach; 7] = [
        Approach::KnowledgePoint,
        Approach::KnowledgeBox,
        Approach::ReasoningOracle,
        Approach::Direct,
        Approach::GeoAugOracle,
        Approach::GeoAugRemote,
        Approach::EndToEnd,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Approach::KnowledgePoint => "knowledge_point",
            Approach::KnowledgeBox => "knowledge_box",
            Approach::ReasoningOracle => "reasoning_oracle",
            Approach::Direct => "direct",
            Approach::GeoAugOracle => "geo_aug_oracle",
            Approach::GeoAugRemote => "geo_aug_remote",
            Approach::EndToEnd => "end_to_end",
        }
    }

    pub fn output_kind(&self) -> OutputKind {
        match self {
            Approach::KnowledgePoint => OutputKind::Point,
            _ => OutputKind::Box,
        }
    }

    /// Every approach needs a reasoner model; these are the extras.
    pub fn requirements(&self) -> Requirements {
        match self {
            Approach::GeoAugOracle => Requirements { store: true, ..Default::default() },
            Approach::GeoAugRemote => Requirements { geocoder: true, ..Default::default() },
            Approach::EndToEnd => Requirements { recaller_model: true, ..Default::default() },
            _ => Requirements::default(),
        }
    }

    /// Whether the reasoner sees recalled mention coordinates.
    pub fn uses_recalled_mentions(&self) -> bool {
        matches!(
            self,
            Approach::ReasoningOracle | Approach::GeoAugOracle | Approach::GeoAugRemote | Approach::EndToEnd
        )
    }
}

impl fmt::Display for Approach {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Approach {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let wanted = s.trim().to_ascii_lowercase().replace('-', "_");
        Approach::ALL
            .into_iter()
            .find(|a| a.as_str() == wanted)
            .ok_or_else(|| {
                let names: Vec<_> = Approach::ALL.iter().map(|a| a.as_str()).collect();
                format!("unknown approach {s:?}; expected one of {}", names.join(", "))
            })
    }
}

/// Everything a run may draw on. Unused fields may be left empty.
#[derive(Clone, Copy)]
pub struct Deps<'a> {
    pub reasoner: &'a dyn ChatModel,
    pub reasoner_model: &'a str,
    pub few_shot: bool,
    pub store: Option<&'a GazetteerStore>,
    pub geocoder: Option<&'a dyn Geocoder>,
    /// LLM used as recaller for [`Approach::EndToEnd`]; defaults to `reasoner`.
    pub recaller: Option<&'a dyn ChatModel>,
    pub recaller_model: Option<&'a str>,
    pub recaller_few_shot: bool,
}

impl<'a> Deps<'a> {
    pub fn new(reasoner: &'a dyn ChatModel, reasoner_model: &'a str) -> Self {
        Self {
            reasoner,
            reasoner_model,
            few_shot: true,
            store: None,
            geocoder: None,
            recaller: None,
            recaller_model: None,
            recaller_few_shot: true,
        }
    }

    pub fn check(&self, approach: Approach) -> Result<(), PipelineError> {
        let req = approach.requirements();
        if req.store && self.store.is_none() {
            return Err(PipelineError::MissingDependency { approach, what: "gazetteer store" });
        }
        if req.geocoder && self.geocoder.is_none() {
            return Err(PipelineError::MissingDependency { approach, what: "geocoder" });
        }
        if req.recaller_model && self.recaller_model.is_none() {
            return Err(PipelineError::MissingDependency { approach, what: "recaller model" });
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PipelineError {
    #[error("approach {approach} needs a {what}")]
    MissingDependency { approach: Approach, what: &'static str },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

fn llm_failure(pred: Prediction, err: LlmError) -> Prediction {
    let reason = match &err {
        LlmError::Transport(_) => UncoveredReason::Transport,
        LlmError::EmptyResponse => UncoveredReason::EmptyResponse,
        LlmError::Protocol(_) => UncoveredReason::Protocol,
    };
    pred.uncovered(reason, Some(err.to_string()))
}

/// Sends `request` and fills the prediction from the extracted output.
fn reason(mut pred: Prediction, kind: PromptKind, request: &ChatRequest, model: &dyn ChatModel) -> Prediction {
    let text = match model.complete(request) {
        Ok(t) => t,
        Err(e) => return llm_failure(pred, e),
    };
    let extraction = extract_prediction(kind, &text);
    pred.raw_text = text;
    pred.bbox = extraction.bbox;
    pred.point = extraction.point;
    pred.flags.uncovered = extraction.uncovered;
    pred.flags.invalid_values = extraction.invalid_values;
    pred
}

enum RecallSource {
    /// Record's embedded gold info, then the store.
    GoldFirst,
    /// Store, then the record's embedded gold info.
    StoreFirst,
    Remote,
}

/// Resolves each mention; returns the infos (named as in the description)
/// and the names that could not be resolved.
fn recall(record: &LocationRecord, source: RecallSource, deps: &Deps<'_>) -> (Vec<GeoInfo>, Vec<String>) {
    let mut found = Vec::new();
    let mut failed = Vec::new();
    for mention in record.ordered_mentions() {
        let from_store = || deps.store.and_then(|s| s.lookup(&mention.name, None)).cloned();
        let info = match source {
            RecallSource::GoldFirst => mention.gold.clone().or_else(from_store),
            RecallSource::StoreFirst => from_store().or_else(|| mention.gold.clone()),
            RecallSource::Remote => match deps.geocoder.map(|g| g.geocode(&mention.name)) {
                Some(Ok(info)) => Some(info),
                Some(Err(GeocodeError::NotFound(_))) | None => None,
                Some(Err(e)) => {
                    log::warn!("record {}: geocoding {:?} failed: {e}", record.id, mention.name);
                    None
                }
            },
        };
        match info {
            Some(mut info) => {
                info.name = mention.name.clone();
                found.push(info);
            }
            None => failed.push(mention.name.clone()),
        }
    }
    (found, failed)
}

fn reason_over_recalled(mut pred: Prediction, record: &LocationRecord, recalled: Vec<GeoInfo>, deps: &Deps<'_>) -> Prediction {
    let request = match build_prompt(PromptKind::GeoAugmentedBox, record, &recalled, deps.few_shot, deps.reasoner_model) {
        Ok(r) => r,
        Err(PromptError::NoRecalledMentions(_)) => {
            pred.flags.degraded = true;
            build_degraded_prompt(record, deps.few_shot, deps.reasoner_model)
        }
        Err(e) => unreachable!("geo-augmented prompt: {e}"),
    };
    pred.recalled = recalled;
    reason(pred, PromptKind::GeoAugmentedBox, &request, deps.reasoner)
}

/// Runs one approach on one record. Model and recall failures are recorded
/// on the returned prediction rather than propagated.
pub fn run_record(approach: Approach, record: &LocationRecord, deps: &Deps<'_>) -> Result<Prediction, PipelineError> {
    deps.check(approach)?;
    let model_label = match approach {
        Approach::EndToEnd => format!("{}+{}", deps.recaller_model.unwrap_or_default(), deps.reasoner_model),
        _ => deps.reasoner_model.to_string(),
    };
    let pred = Prediction::empty(&record.id, approach, model_label);
    Ok(match approach {
        Approach::KnowledgePoint | Approach::KnowledgeBox | Approach::Direct => {
            let kind = match approach {
                Approach::KnowledgePoint => PromptKind::KnowledgePoint,
                Approach::KnowledgeBox => PromptKind::KnowledgeBox,
                _ => PromptKind::DirectBox,
            };
            match build_prompt(kind, record, &[], deps.few_shot, deps.reasoner_model) {
                Ok(request) => reason(pred, kind, &request, deps.reasoner),
                Err(e) => pred.uncovered(UncoveredReason::MissingGoldName, Some(e.to_string())),
            }
        }
        Approach::ReasoningOracle | Approach::GeoAugOracle | Approach::GeoAugRemote => {
            let source = match approach {
                Approach::ReasoningOracle => RecallSource::GoldFirst,
                Approach::GeoAugOracle => RecallSource::StoreFirst,
                _ => RecallSource::Remote,
            };
            let (recalled, failed) = recall(record, source, deps);
            let mut pred = pred;
            pred.flags.recall_failures = failed;
            reason_over_recalled(pred, record, recalled, deps)
        }
        Approach::EndToEnd => {
            let recaller = deps.recaller.unwrap_or(deps.reasoner);
            let recaller_model = deps.recaller_model.unwrap_or_default();
            let request = build_prompt(PromptKind::EndToEndRecaller, record, &[], deps.recaller_few_shot, recaller_model)
                .expect("recaller prompt needs only the description");
            let text = match recaller.complete(&request) {
                Ok(t) => t,
                Err(e) => return Ok(llm_failure(pred, e)),
            };
            let mentions = extract_prediction(PromptKind::EndToEndRecaller, &text).mentions;
            let mut pred = pred;
            pred.flags.invalid_mentions = mentions.iter().filter(|m| !m.valid).count();
            let recalled: Vec<GeoInfo> = mentions.iter().filter(|m| m.valid).filter_map(|m| m.to_geo_info()).collect();
            reason_over_recalled(pred, record, recalled, deps)
        }
    })
}

/// Runs an approach over all records with at most `parallelism` records in
/// flight. Output order matches input order.
pub fn run_experiment(
    approach: Approach,
    records: &[LocationRecord],
    deps: &Deps<'_>,
    parallelism: usize,
) -> Result<(Vec<Prediction>, MetricsReport), PipelineError> {
    deps.check(approach)?;
    let workers = parallelism.max(1).min(records.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Prediction>>> = Mutex::new(vec![None; records.len()]);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(record) = records.get(i) else { break };
                let pred = run_record(approach, record, deps).expect("dependencies checked up front");
                slots.lock().unwrap()[i] = Some(pred);
            });
        }
    });
    let predictions: Vec<Prediction> =
        slots.into_inner().unwrap().into_iter().map(|p| p.expect("every slot filled")).collect();
    let golds: HashMap<String, BoundingBox> = records.iter().map(|r| (r.id.clone(), r.gold_bbox)).collect();
    let report = aggregate(&predictions, &golds)?;
    Ok((predictions, report))
}
