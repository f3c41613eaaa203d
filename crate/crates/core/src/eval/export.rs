//! Supervised fine-tuning data export: one `{system, user, assistant}`
//! object per record, prompts built without in-context examples.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::GeoInfo;
use crate::llm::{build_prompt, PromptKind};
use crate::pipeline::{Approach, LocationRecord};

use super::write_atomic;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftExample {
    pub system: String,
    pub user: String,
    pub assistant: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExportSummary {
    pub written: usize,
    /// Records without complete gold mention coordinates (geo-augmented export only).
    pub skipped: usize,
}

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("fine-tune export supports direct and geo_aug_oracle, not {0}")]
    UnsupportedApproach(Approach),
    #[error("writing {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Gold mention infos in prompt order, or `None` if any mention lacks them.
fn gold_recalled(record: &LocationRecord) -> Option<Vec<GeoInfo>> {
    let mentions = record.ordered_mentions();
    if mentions.is_empty() {
        return None;
    }
    mentions
        .into_iter()
        .map(|m| {
            m.gold.clone().map(|mut g| {
                g.name = m.name.clone();
                g
            })
        })
        .collect()
}

pub fn sft_example(record: &LocationRecord, approach: Approach) -> Result<Option<SftExample>, ExportError> {
    let (kind, recalled) = match approach {
        Approach::Direct => (PromptKind::DirectBox, Vec::new()),
        Approach::GeoAugOracle => match gold_recalled(record) {
            Some(r) => (PromptKind::GeoAugmentedBox, r),
            None => return Ok(None),
        },
        other => return Err(ExportError::UnsupportedApproach(other)),
    };
    // model id is not part of the exported text
    let req = build_prompt(kind, record, &recalled, false, "").expect("inputs checked above");
    Ok(Some(SftExample { system: req.system, user: req.user, assistant: record.gold_bbox.to_string() }))
}

pub fn export_finetune_jsonl(
    records: &[LocationRecord],
    approach: Approach,
    out_path: impl AsRef<Path>,
) -> Result<ExportSummary, ExportError> {
    let out_path = out_path.as_ref();
    let mut summary = ExportSummary::default();
    let mut buf = String::new();
    for record in records {
        match sft_example(record, approach)? {
            Some(ex) => {
                buf.push_str(&serde_json::to_string(&ex).expect("strings serialize"));
                buf.push('\n');
                summary.written += 1;
            }
            None => summary.skipped += 1,
        }
    }
    write_atomic(out_path, buf.as_bytes())
        .map_err(|source| ExportError::Io { path: out_path.display().to_string(), source })?;
    Ok(summary)
}
