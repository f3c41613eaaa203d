//! Dataset handling, fine-tune export, error probes and report rendering.

use std::io::Write;
use std::path::Path;

pub mod analysis;
pub mod dataset;
pub mod export;
pub mod report;
pub mod sample;

pub use analysis::{analyze_errors, ErrorReport};
pub use dataset::{load_dataset, DatasetError, LoadReport, RawRecord};
pub use export::{export_finetune_jsonl, ExportError, ExportSummary, SftExample};
pub use report::{render_report, ReportFormat, ReportRow};
pub use sample::{sample_train_subset, SampleError, SplitMix64};

/// Writes `bytes` to a temporary file beside `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
