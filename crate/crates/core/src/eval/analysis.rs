//! Automated error probes over scored predictions.
//!
//! The probes flag *suspects*: a sign-flip suspect is a prediction with no
//! gold overlap that would overlap after negating its longitudes, latitudes
//! or both; a coordinate-copy suspect is a box whose edges sit on the
//! extremes of the recalled mention centers.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::geo::BoundingBox;
use crate::metrics::{area_precision, area_recall, Prediction, UncoveredReason};

/// Edge tolerance for the coordinate-copy probe, degrees.
pub const COPY_EPS_DEG: f64 = 0.01;
/// Looser tolerance, reported separately, catching rounded copies such as 51.2 for 51.197.
pub const COPY_EPS_LOOSE_DEG: f64 = 0.1;
/// Edges (of four) that must match for a coordinate-copy suspect.
pub const COPY_MIN_EDGES: usize = 3;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorReport {
    /// Predictions examined (those with a gold box).
    pub n_scored: usize,
    /// Predictions carrying a valid box or point.
    pub n_covered: usize,
    pub sign_flip_suspects: usize,
    pub coord_copy_suspects: usize,
    pub coord_copy_loose_suspects: usize,
    /// Final tuple present but min/max order violated.
    pub invalid_parse: usize,
    pub out_of_range_parse: usize,
    pub precision_gt_recall: usize,
    pub recall_gt_precision: usize,
    /// Geo-augmented predictions made without any mention coordinates.
    pub degraded: usize,
    /// Out-of-range mentions emitted by an LLM recaller.
    pub invalid_mentions: usize,
}

impl ErrorReport {
    /// `(label, value)` pairs in display order.
    pub fn entries(&self) -> [(&'static str, usize); 11] {
        [
            ("n_scored", self.n_scored),
            ("n_covered", self.n_covered),
            ("sign_flip_suspects", self.sign_flip_suspects),
            ("coord_copy_suspects", self.coord_copy_suspects),
            ("coord_copy_loose_suspects", self.coord_copy_loose_suspects),
            ("invalid_parse", self.invalid_parse),
            ("out_of_range_parse", self.out_of_range_parse),
            ("precision_gt_recall", self.precision_gt_recall),
            ("recall_gt_precision", self.recall_gt_precision),
            ("degraded", self.degraded),
            ("invalid_mentions", self.invalid_mentions),
        ]
    }
}

/// The three non-identity sign negations, re-ordered so min <= max.
pub fn sign_flip_variants(b: &BoundingBox) -> [BoundingBox; 3] {
    let [lon0, lat0, lon1, lat1] = b.to_array();
    let mk = |a, b, c, d| BoundingBox::new(a, b, c, d).expect("negation preserves validity");
    [
        mk(-lon1, lat0, -lon0, lat1),
        mk(lon0, -lat1, lon1, -lat0),
        mk(-lon1, -lat1, -lon0, -lat0),
    ]
}

pub fn is_sign_flip_suspect(pred: &BoundingBox, gold: &BoundingBox) -> bool {
    pred.intersection(gold).is_none() && sign_flip_variants(pred).iter().any(|v| v.intersection(gold).is_some())
}

/// Number of box edges within `eps` of the matching extreme over the recalled centers.
pub fn copied_edges(pred: &BoundingBox, centers: &[(f64, f64)], eps: f64) -> usize {
    if centers.is_empty() {
        return 0;
    }
    let fold = |f: fn(f64, f64) -> f64, init: f64, pick: fn(&(f64, f64)) -> f64| centers.iter().map(pick).fold(init, f);
    let lon_min = fold(f64::min, f64::INFINITY, |c| c.0);
    let lon_max = fold(f64::max, f64::NEG_INFINITY, |c| c.0);
    let lat_min = fold(f64::min, f64::INFINITY, |c| c.1);
    let lat_max = fold(f64::max, f64::NEG_INFINITY, |c| c.1);
    [
        (pred.lon_min(), lon_min),
        (pred.lat_min(), lat_min),
        (pred.lon_max(), lon_max),
        (pred.lat_max(), lat_max),
    ]
    .iter()
    .filter(|(p, e)| (p - e).abs() <= eps)
    .count()
}

pub fn analyze_errors(predictions: &[Prediction], golds: &HashMap<String, BoundingBox>) -> ErrorReport {
    let mut report = ErrorReport::default();
    for pred in predictions {
        let Some(gold) = golds.get(&pred.record_id) else { continue };
        report.n_scored += 1;
        if pred.flags.degraded {
            report.degraded += 1;
        }
        report.invalid_mentions += pred.flags.invalid_mentions;
        match pred.flags.uncovered {
            Some(UncoveredReason::InvalidOrder) => report.invalid_parse += 1,
            Some(UncoveredReason::OutOfRange) => report.out_of_range_parse += 1,
            _ => {}
        }
        if pred.is_covered() {
            report.n_covered += 1;
        }
        let Some(bbox) = pred.bbox else { continue };

        if is_sign_flip_suspect(&bbox, gold) {
            report.sign_flip_suspects += 1;
        }
        let centers: Vec<(f64, f64)> = pred.recalled.iter().map(|g| (g.center.lon(), g.center.lat())).collect();
        if copied_edges(&bbox, &centers, COPY_EPS_DEG) >= COPY_MIN_EDGES {
            report.coord_copy_suspects += 1;
        }
        if copied_edges(&bbox, &centers, COPY_EPS_LOOSE_DEG) >= COPY_MIN_EDGES {
            report.coord_copy_loose_suspects += 1;
        }
        let (p, r) = (area_precision(&bbox, gold), area_recall(&bbox, gold));
        if p > r {
            report.precision_gt_recall += 1;
        } else if r > p {
            report.recall_gt_precision += 1;
        }
    }
    report
}
