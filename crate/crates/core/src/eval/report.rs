//! Result tables in aligned text, Markdown or CSV.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::metrics::MetricsReport;

use super::analysis::ErrorReport;

pub const COLUMNS: [&str; 7] =
    ["Approach", "Reasoner", "Coverage (%)", "Distance (km)", "AreaPrec", "AreaRec", "AreaF1"];

/// One line of a results table; also the record appended by `run --metrics-out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub approach: String,
    pub reasoner: String,
    #[serde(flatten)]
    pub report: MetricsReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Text,
    Markdown,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "text" | "txt" => Ok(Self::Text),
            "markdown" | "md" => Ok(Self::Markdown),
            "csv" => Ok(Self::Csv),
            _ => Err(format!("unknown report format {s:?}; expected text, markdown or csv")),
        }
    }
}

const ABSENT: &str = "--";

/// Three decimals with the leading zero dropped, as in ".266".
pub fn format_ratio(v: Option<f64>) -> String {
    match v {
        None => ABSENT.into(),
        Some(v) => {
            let s = format!("{v:.3}");
            if let Some(rest) = s.strip_prefix("0.") {
                format!(".{rest}")
            } else if let Some(rest) = s.strip_prefix("-0.") {
                format!("-.{rest}")
            } else {
                s
            }
        }
    }
}

fn format_one_decimal(v: Option<f64>) -> String {
    v.map_or_else(|| ABSENT.into(), |v| format!("{v:.1}"))
}

fn cells(row: &ReportRow) -> [String; 7] {
    let r = &row.report;
    [
        row.approach.clone(),
        row.reasoner.clone(),
        format!("{:.1}", r.coverage),
        format_one_decimal(r.mean_distance_km),
        format_ratio(r.area_precision),
        format_ratio(r.area_recall),
        format_ratio(r.area_f1),
    ]
}

fn render_aligned(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        padded.join("  ").trim_end().to_string()
    };
    let mut out = line(header);
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    out.push('\n');
    for row in rows {
        out.push_str(&line(row));
        out.push('\n');
    }
    out
}

fn render_markdown(header: &[String], rows: &[Vec<String>]) -> String {
    let line = |cells: &[String]| format!("| {} |\n", cells.join(" | "));
    let mut out = line(header);
    let rule: Vec<String> = (0..header.len()).map(|i| if i < 2 { "---".into() } else { "---:".into() }).collect();
    out.push_str(&line(&rule));
    for row in rows {
        out.push_str(&line(row));
    }
    out
}

fn render_csv(header: &[String], rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
}

fn render(header: &[String], rows: &[Vec<String>], format: ReportFormat) -> String {
    match format {
        ReportFormat::Text => render_aligned(header, rows),
        ReportFormat::Markdown => render_markdown(header, rows),
        ReportFormat::Csv => render_csv(header, rows),
    }
}

/// Renders the metrics table, followed by the error-probe tallies when given.
pub fn render_report(rows: &[ReportRow], errors: Option<&ErrorReport>, format: ReportFormat) -> String {
    let header: Vec<String> = COLUMNS.iter().map(|s| s.to_string()).collect();
    let body: Vec<Vec<String>> = rows.iter().map(|r| cells(r).to_vec()).collect();
    let mut out = render(&header, &body, format);
    if let Some(errors) = errors {
        let header = vec!["Probe".to_string(), "Count".to_string()];
        let body: Vec<Vec<String>> =
            errors.entries().iter().map(|(k, v)| vec![k.to_string(), v.to_string()]).collect();
        if format == ReportFormat::Markdown {
            out.push('\n');
        } else if format == ReportFormat::Text {
            let _ = writeln!(out);
        }
        out.push_str(&render(&header, &body, format));
    }
    out
}
