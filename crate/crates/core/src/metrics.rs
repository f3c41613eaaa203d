//! Coverage, distance error and areal precision/recall/F1.
//!
//! Set-level precision and recall are macro averages over covered examples;
//! F1 is the harmonic mean of those two averages.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{bbox_area_km2, bbox_intersection, haversine_km, BoundingBox, GeoInfo, GeoPoint};
use crate::pipeline::Approach;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncoveredReason {
    /// No coordinate tuple in the response.
    NoParse,
    /// Tuple found with min > max on some axis.
    InvalidOrder,
    /// Tuple found with a value outside coordinate ranges.
    OutOfRange,
    MissingGoldName,
    EmptyResponse,
    Transport,
    Protocol,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionFlags {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uncovered: Option<UncoveredReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Reasoner prompt carried no mention coordinates.
    #[serde(default)]
    pub degraded: bool,
    /// Mentions the recaller could not resolve.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub recall_failures: Vec<String>,
    /// Mentions emitted by an LLM recaller with out-of-range coordinates.
    #[serde(default)]
    pub invalid_mentions: usize,
    /// Raw values of a tuple that failed validation.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub invalid_values: Vec<f64>,
}

/// One model output for one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub record_id: String,
    pub approach: Approach,
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BoundingBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point: Option<GeoPoint>,
    pub raw_text: String,
    #[serde(default)]
    pub recalled: Vec<GeoInfo>,
    #[serde(default)]
    pub flags: PredictionFlags,
}

impl Prediction {
    pub fn empty(record_id: impl Into<String>, approach: Approach, model: impl Into<String>) -> Self {
        Self {
            record_id: record_id.into(),
            approach,
            model: model.into(),
            bbox: None,
            point: None,
            raw_text: String::new(),
            recalled: Vec::new(),
            flags: PredictionFlags::default(),
        }
    }

    pub fn uncovered(mut self, reason: UncoveredReason, error: Option<String>) -> Self {
        self.bbox = None;
        self.point = None;
        self.flags.uncovered = Some(reason);
        self.flags.error = error;
        self
    }

    pub fn is_covered(&self) -> bool {
        self.bbox.is_some() || self.point.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GoldTarget {
    Box(BoundingBox),
    Point(GeoPoint),
}

impl GoldTarget {
    fn center(&self) -> GeoPoint {
        match self {
            GoldTarget::Box(b) => b.centroid(),
            GoldTarget::Point(p) => *p,
        }
    }
}

/// Fraction of the predicted area that overlaps gold. Zero-area predictions score 0.
pub fn area_precision(pred: &BoundingBox, gold: &BoundingBox) -> f64 {
    let pred_area = bbox_area_km2(pred);
    if pred_area <= 0.0 {
        return 0.0;
    }
    let overlap = bbox_intersection(pred, gold).map_or(0.0, |i| bbox_area_km2(&i));
    (overlap / pred_area).clamp(0.0, 1.0)
}

/// Fraction of the gold area covered by the prediction. A zero-area gold is
/// treated as a point: recall is 1 if the prediction contains its centroid.
pub fn area_recall(pred: &BoundingBox, gold: &BoundingBox) -> f64 {
    let gold_area = bbox_area_km2(gold);
    if gold_area <= 0.0 {
        return if pred.contains(&gold.centroid()) { 1.0 } else { 0.0 };
    }
    let overlap = bbox_intersection(pred, gold).map_or(0.0, |i| bbox_area_km2(&i));
    (overlap / gold_area).clamp(0.0, 1.0)
}

/// Haversine distance between predicted and gold centers; `None` when uncovered.
pub fn distance_error_km(pred: &Prediction, gold: &GoldTarget) -> Option<f64> {
    let center = match (pred.bbox, pred.point) {
        (Some(b), _) => b.centroid(),
        (None, Some(p)) => p,
        (None, None) => return None,
    };
    Some(haversine_km(&center, &gold.center()))
}

pub fn harmonic_f1(precision: f64, recall: f64) -> f64 {
    if precision + recall <= 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Per-example scores for a covered prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExampleScore {
    pub distance_km: f64,
    /// Area scores exist only for box predictions.
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

pub fn score_example(pred: &Prediction, gold: &BoundingBox) -> Option<ExampleScore> {
    let distance_km = distance_error_km(pred, &GoldTarget::Box(*gold))?;
    let (precision, recall) = match pred.bbox {
        Some(b) => (Some(area_precision(&b, gold)), Some(area_recall(&b, gold))),
        None => (None, None),
    };
    Some(ExampleScore { distance_km, precision, recall })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_total: usize,
    pub n_covered: usize,
    /// Percent.
    pub coverage: f64,
    pub mean_distance_km: Option<f64>,
    pub area_precision: Option<f64>,
    pub area_recall: Option<f64>,
    pub area_f1: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl MetricsReport {
    /// Folds per-example scores into set-level metrics. `scores` holds one
    /// entry per covered example; `n_total` counts all examples.
    pub fn from_scores(n_total: usize, scores: &[ExampleScore]) -> Self {
        let n_covered = scores.len();
        let coverage = if n_total == 0 { 0.0 } else { 100.0 * n_covered as f64 / n_total as f64 };
        let area_precision = mean(scores.iter().filter_map(|s| s.precision));
        let area_recall = mean(scores.iter().filter_map(|s| s.recall));
        let area_f1 = match (area_precision, area_recall) {
            (Some(p), Some(r)) => Some(harmonic_f1(p, r)),
            _ => None,
        };
        Self {
            n_total,
            n_covered,
            coverage,
            mean_distance_km: mean(scores.iter().map(|s| s.distance_km)),
            area_precision,
            area_recall,
            area_f1,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction for unknown record {0}")]
    UnknownRecord(String),
    #[error("more than one prediction for record {0}")]
    DuplicatePrediction(String),
}

/// Scores a prediction set against gold boxes keyed by record id.
///
/// Records without a prediction count as uncovered. Scores are folded in
/// record-id order so the result does not depend on input order.
pub fn aggregate(
    predictions: &[Prediction],
    golds: &HashMap<String, BoundingBox>,
) -> Result<MetricsReport, MetricsError> {
    let mut seen = HashSet::new();
    let mut scored: Vec<(&str, ExampleScore)> = Vec::new();
    for pred in predictions {
        let gold = golds
            .get(&pred.record_id)
            .ok_or_else(|| MetricsError::UnknownRecord(pred.record_id.clone()))?;
        if !seen.insert(pred.record_id.as_str()) {
            return Err(MetricsError::DuplicatePrediction(pred.record_id.clone()));
        }
        if let Some(score) = score_example(pred, gold) {
            scored.push((&pred.record_id, score));
        }
    }
    scored.sort_by(|a, b| a.0.cmp(b.0));
    let scores: Vec<ExampleScore> = scored.into_iter().map(|(_, s)| s).collect();
    Ok(MetricsReport::from_scores(golds.len(), &scores))
}
