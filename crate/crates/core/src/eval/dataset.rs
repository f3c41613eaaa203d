//! JSONL dataset ingestion.
//!
//! One record per line:
//! `{id, description, gold_name?, gold_country?, gold_bbox: [lon_min, lat_min, lon_max, lat_max],
//!   mentions: [{name, lat?, lon?, bbox?}]}`

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{BoundingBox, GeoInfo, GeoPoint};
use crate::pipeline::{LocationRecord, Mention};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawMention {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawRecord {
    pub id: String,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_country: Option<String>,
    pub gold_bbox: [f64; 4],
    #[serde(default)]
    pub mentions: Vec<RawMention>,
}

impl From<&LocationRecord> for RawRecord {
    fn from(r: &LocationRecord) -> Self {
        RawRecord {
            id: r.id.clone(),
            description: r.description.clone(),
            gold_name: r.gold_name.clone(),
            gold_country: r.gold_country.clone(),
            gold_bbox: r.gold_bbox.to_array(),
            mentions: r
                .mentions
                .iter()
                .map(|m| RawMention {
                    name: m.name.clone(),
                    lat: m.gold.as_ref().map(|g| g.center.lat()),
                    lon: m.gold.as_ref().map(|g| g.center.lon()),
                    bbox: m.gold.as_ref().and_then(|g| g.bbox).map(|b| b.to_array()),
                })
                .collect(),
        }
    }
}

impl TryFrom<RawRecord> for LocationRecord {
    type Error = String;

    fn try_from(raw: RawRecord) -> Result<Self, String> {
        if raw.id.trim().is_empty() {
            return Err("empty id".into());
        }
        let gold_bbox = BoundingBox::try_from(raw.gold_bbox).map_err(|e| format!("gold_bbox: {e}"))?;
        let mut mentions = Vec::with_capacity(raw.mentions.len());
        for m in raw.mentions {
            let start = raw
                .description
                .find(&m.name)
                .ok_or_else(|| format!("mention {:?} does not occur in the description", m.name))?;
            let gold = match (m.lat, m.lon) {
                (Some(lat), Some(lon)) => {
                    let center = GeoPoint::new(lat, lon).map_err(|e| format!("mention {:?}: {e}", m.name))?;
                    let bbox = m
                        .bbox
                        .map(BoundingBox::try_from)
                        .transpose()
                        .map_err(|e| format!("mention {:?} bbox: {e}", m.name))?;
                    Some(GeoInfo { name: m.name.clone(), country: None, center, bbox, source_id: None })
                }
                (None, None) => None,
                _ => return Err(format!("mention {:?} has only one of lat/lon", m.name)),
            };
            mentions.push(Mention { surface_span: Some((start, start + m.name.len())), name: m.name, gold });
        }
        Ok(LocationRecord {
            id: raw.id,
            description: raw.description,
            mentions,
            gold_bbox,
            gold_name: raw.gold_name,
            gold_country: raw.gold_country,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RejectedLine {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub accepted: usize,
    pub rejected: Vec<RejectedLine>,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: no valid records ({rejected} lines rejected)")]
    NoRecords { path: PathBuf, rejected: usize },
}

/// Reads and validates a dataset. Bad lines are reported, not fatal; the
/// first occurrence of a duplicated id is kept.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<(Vec<LocationRecord>, LoadReport), DatasetError> {
    let path = path.as_ref();
    let io_err = |source| DatasetError::Io { path: path.to_path_buf(), source };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut records = Vec::new();
    let mut report = LoadReport::default();
    let mut ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<RawRecord>(&line)
            .map_err(|e| format!("malformed record: {e}"))
            .and_then(LocationRecord::try_from);
        match parsed {
            Ok(rec) if !ids.insert(rec.id.clone()) => {
                report.rejected.push(RejectedLine { line: i + 1, reason: format!("duplicate id {:?}", rec.id) })
            }
            Ok(rec) => records.push(rec),
            Err(reason) => report.rejected.push(RejectedLine { line: i + 1, reason }),
        }
    }
    report.accepted = records.len();
    if records.is_empty() {
        return Err(DatasetError::NoRecords { path: path.to_path_buf(), rejected: report.rejected.len() });
    }
    Ok((records, report))
}
