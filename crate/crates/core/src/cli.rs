//! Command-line harness.

use std::collections::{BTreeMap, HashMap};
use std::ffi::OsString;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::eval::{
    analyze_errors, export_finetune_jsonl, load_dataset, render_report, sample_train_subset, write_atomic, ErrorReport,
    ReportFormat, ReportRow,
};
use crate::gazetteer::{GazetteerStore, GeocoderClient, GeocoderConfig, DEFAULT_GEOCODER_ENDPOINT};
use crate::geo::BoundingBox;
use crate::llm::{ChatConfig, HttpChatClient};
use crate::metrics::{aggregate, Prediction, UncoveredReason};
use crate::net::RetryPolicy;
use crate::pipeline::{run_experiment, Approach, Deps, LocationRecord};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_TRANSPORT: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "compgeo", version, about = "Geocode compositional location descriptions into bounding boxes")]
pub struct Cli {
    /// TOML file whose keys mirror the long flags (underscores for dashes). Flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one approach over a dataset.
    Run(RunArgs),
    /// Rescore a predictions file.
    Eval(EvalArgs),
    /// Write supervised fine-tuning data.
    ExportSft(ExportArgs),
    /// Error probes over a predictions file.
    Analyze(AnalyzeArgs),
    /// Render saved metrics rows as a table.
    Report(ReportArgs),
}

#[derive(Debug, Args, Default)]
pub struct RunArgs {
    #[arg(long)]
    pub approach: Option<Approach>,
    /// Reasoner model id.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Gazetteer snapshot (JSONL) for the oracle recaller.
    #[arg(long)]
    pub gazetteer: Option<PathBuf>,
    /// Directory for llm.jsonl and geocoder.jsonl response caches.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    #[arg(long, overrides_with = "no_few_shot")]
    pub few_shot: bool,
    #[arg(long)]
    pub no_few_shot: bool,
    /// Only the first N records.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Recaller model id for end_to_end; defaults to --model.
    #[arg(long)]
    pub recaller_model: Option<String>,
    /// Chat-completions base URL; falls back to LLM_API_BASE.
    #[arg(long)]
    pub llm_base: Option<String>,
    /// Geocoding endpoint; falls back to GEOCODER_ENDPOINT, then the public default.
    #[arg(long)]
    pub geocoder_endpoint: Option<String>,
    #[arg(long)]
    pub max_retries: Option<u32>,
    /// Requests per second per client; 0 disables limiting.
    #[arg(long)]
    pub rate_limit: Option<f64>,
    #[arg(long)]
    pub timeout_secs: Option<u64>,
    /// Predictions JSONL.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Appends one metrics row (JSONL).
    #[arg(long)]
    pub metrics_out: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<ReportFormat>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub metrics_out: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<ReportFormat>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub approach: Option<Approach>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Export a seeded random subset of this size.
    #[arg(long)]
    pub sample: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub predictions: PathBuf,
    /// Also write the error report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<ReportFormat>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Metrics JSONL files as written by --metrics-out.
    #[arg(long, required = true, num_args = 1..)]
    pub metrics: Vec<PathBuf>,
    /// Error report JSON as written by `analyze --out`.
    #[arg(long)]
    pub errors: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<ReportFormat>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub approach: Option<String>,
    pub model: Option<String>,
    pub dataset: Option<PathBuf>,
    pub gazetteer: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub parallelism: Option<usize>,
    pub few_shot: Option<bool>,
    pub limit: Option<usize>,
    pub recaller_model: Option<String>,
    pub llm_base: Option<String>,
    pub geocoder_endpoint: Option<String>,
    pub max_retries: Option<u32>,
    pub rate_limit: Option<f64>,
    pub timeout_secs: Option<u64>,
    pub out: Option<PathBuf>,
    pub metrics_out: Option<PathBuf>,
    pub format: Option<String>,
    pub sample: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }
    fn data(message: impl Into<String>) -> Self {
        Self { code: EXIT_DATA, message: message.into() }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn load_config(path: Option<&Path>) -> CliResult<ConfigFile> {
    let Some(path) = path else { return Ok(ConfigFile::default()) };
    let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("reading {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))
}

fn pick<T>(flag: Option<T>, config: Option<T>) -> Option<T> {
    flag.or(config)
}

fn require<T>(value: Option<T>, name: &str) -> CliResult<T> {
    value.ok_or_else(|| Failure::usage(format!("missing --{name} (flag or config key)")))
}

fn config_parse<T: std::str::FromStr<Err = String>>(v: Option<&String>) -> CliResult<Option<T>> {
    v.map(|s| s.parse::<T>().map_err(Failure::usage)).transpose()
}

fn resolve_format(flag: Option<ReportFormat>, cfg: &ConfigFile) -> CliResult<ReportFormat> {
    Ok(pick(flag, config_parse(cfg.format.as_ref())?).unwrap_or_default())
}

fn dataset(flag: Option<PathBuf>, cfg: &ConfigFile) -> CliResult<Vec<LocationRecord>> {
    let path = require(pick(flag, cfg.dataset.clone()), "dataset")?;
    let (records, report) = load_dataset(&path).map_err(|e| Failure::data(e.to_string()))?;
    for r in &report.rejected {
        log::warn!("{}:{}: {}", path.display(), r.line, r.reason);
    }
    Ok(records)
}

fn read_predictions(path: &Path) -> CliResult<Vec<Prediction>> {
    let file = fs::File::open(path).map_err(|e| Failure::data(format!("reading {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Failure::data(format!("reading {}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let pred = serde_json::from_str(&line)
            .map_err(|e| Failure::data(format!("{}:{}: malformed prediction: {e}", path.display(), i + 1)))?;
        out.push(pred);
    }
    Ok(out)
}

fn to_jsonl<T: serde::Serialize>(items: &[T]) -> String {
    items.iter().map(|i| serde_json::to_string(i).expect("serializable") + "\n").collect()
}

fn write_file(path: &Path, text: &str) -> CliResult {
    write_atomic(path, text.as_bytes()).map_err(|e| Failure::data(format!("writing {}: {e}", path.display())))
}

/// Appends rows by rewriting the whole file atomically.
fn append_rows(path: &Path, rows: &[ReportRow]) -> CliResult {
    let mut text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(Failure::data(format!("reading {}: {e}", path.display()))),
    };
    if !text.is_empty() && !text.ends_with('\n') {
        text.push('\n');
    }
    text.push_str(&to_jsonl(rows));
    write_file(path, &text)
}

fn golds(records: &[LocationRecord]) -> HashMap<String, BoundingBox> {
    records.iter().map(|r| (r.id.clone(), r.gold_bbox)).collect()
}

/// One metrics row per (approach, model) group, in sorted order.
fn score_groups(preds: &[Prediction], records: &[LocationRecord]) -> CliResult<Vec<ReportRow>> {
    let golds = golds(records);
    let mut groups: BTreeMap<(String, String), Vec<Prediction>> = BTreeMap::new();
    for p in preds {
        groups.entry((p.approach.to_string(), p.model.clone())).or_default().push(p.clone());
    }
    groups
        .into_iter()
        .map(|((approach, reasoner), preds)| {
            let report = aggregate(&preds, &golds).map_err(|e| Failure::data(e.to_string()))?;
            Ok(ReportRow { approach, reasoner, report })
        })
        .collect()
}

fn cmd_run(args: RunArgs, cfg: &ConfigFile) -> CliResult {
    let approach = require(pick(args.approach, config_parse(cfg.approach.as_ref())?), "approach")?;
    let model = require(pick(args.model, cfg.model.clone()), "model")?;
    let format = resolve_format(args.format, cfg)?;
    let few_shot = if args.no_few_shot {
        false
    } else if args.few_shot {
        true
    } else {
        cfg.few_shot.unwrap_or(true)
    };
    let parallelism = pick(args.parallelism, cfg.parallelism).unwrap_or(4);
    let cache_dir = pick(args.cache_dir, cfg.cache_dir.clone());
    let mut retry = RetryPolicy::default();
    if let Some(n) = pick(args.max_retries, cfg.max_retries) {
        retry.max_retries = n;
    }
    let rate_limit = pick(args.rate_limit, cfg.rate_limit);
    let timeout = pick(args.timeout_secs, cfg.timeout_secs).map(Duration::from_secs);

    let mut records = dataset(args.dataset, cfg)?;
    if let Some(n) = pick(args.limit, cfg.limit) {
        records.truncate(n);
    }

    if let Some(dir) = &cache_dir {
        fs::create_dir_all(dir).map_err(|e| Failure::data(format!("creating {}: {e}", dir.display())))?;
    }

    let base = pick(args.llm_base, cfg.llm_base.clone())
        .or_else(|| std::env::var("LLM_API_BASE").ok())
        .ok_or_else(|| Failure::usage("no LLM endpoint: pass --llm-base or set LLM_API_BASE"))?;
    let mut chat = ChatConfig::new(base);
    chat.api_key = std::env::var("LLM_API_KEY").ok();
    chat.retry = retry;
    chat.max_in_flight = parallelism.max(1);
    if let Some(r) = rate_limit {
        chat.rate_limit = r;
    }
    if let Some(t) = timeout {
        chat.timeout = t;
    }
    chat.cache_path = cache_dir.as_ref().map(|d| d.join("llm.jsonl"));
    let llm = HttpChatClient::new(chat).map_err(|e| Failure::data(format!("opening LLM cache: {e}")))?;

    let store = match pick(args.gazetteer, cfg.gazetteer.clone()) {
        Some(path) => {
            let (store, report) = GazetteerStore::load(&path).map_err(|e| Failure::data(e.to_string()))?;
            for (line, reason) in &report.rejected {
                log::warn!("{}:{line}: {reason}", path.display());
            }
            Some(store)
        }
        None if approach == Approach::GeoAugOracle => Some(GazetteerStore::from_entries(
            records.iter().flat_map(|r| r.mentions.iter().filter_map(|m| m.gold.clone())),
        )),
        None => None,
    };

    let geocoder = if approach.requirements().geocoder {
        let mut gc = GeocoderConfig {
            endpoint: pick(args.geocoder_endpoint, cfg.geocoder_endpoint.clone())
                .or_else(|| std::env::var("GEOCODER_ENDPOINT").ok())
                .unwrap_or_else(|| DEFAULT_GEOCODER_ENDPOINT.to_string()),
            retry,
            cache_path: cache_dir.as_ref().map(|d| d.join("geocoder.jsonl")),
            ..GeocoderConfig::default()
        };
        if let Some(r) = rate_limit {
            gc.rate_limit = r;
        }
        if let Some(t) = timeout {
            gc.timeout = t;
        }
        Some(GeocoderClient::new(gc).map_err(|e| Failure::data(format!("opening geocoder cache: {e}")))?)
    } else {
        None
    };

    let recaller_model = pick(args.recaller_model, cfg.recaller_model.clone()).unwrap_or_else(|| model.clone());
    let mut deps = Deps::new(&llm, &model);
    deps.few_shot = few_shot;
    deps.recaller_few_shot = few_shot;
    deps.store = store.as_ref();
    deps.geocoder = geocoder.as_ref().map(|g| g as _);
    deps.recaller_model = Some(&recaller_model);

    let (predictions, report) =
        run_experiment(approach, &records, &deps, parallelism).map_err(|e| Failure::usage(e.to_string()))?;
    log::info!(
        "LLM: {} network requests, {} retries, {} cache hits",
        llm.stats().network_requests(),
        llm.stats().retries(),
        llm.stats().cache_hits()
    );
    if let Some(g) = &geocoder {
        log::info!("geocoder: {} network requests, {} cache hits", g.stats().network_requests(), g.stats().cache_hits());
    }

    let reasoner = predictions.first().map_or_else(|| model.clone(), |p| p.model.clone());
    let row = ReportRow { approach: approach.to_string(), reasoner, report };
    if let Some(out) = pick(args.out, cfg.out.clone()) {
        write_file(&out, &to_jsonl(&predictions))?;
    }
    if let Some(path) = pick(args.metrics_out, cfg.metrics_out.clone()) {
        append_rows(&path, std::slice::from_ref(&row))?;
    }
    print!("{}", render_report(std::slice::from_ref(&row), None, format));

    let transport = predictions.iter().filter(|p| p.flags.uncovered == Some(UncoveredReason::Transport)).count();
    if transport > 0 {
        return Err(Failure {
            code: EXIT_TRANSPORT,
            message: format!("{transport} record(s) failed after exhausting retries"),
        });
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs, cfg: &ConfigFile) -> CliResult {
    let format = resolve_format(args.format, cfg)?;
    let records = dataset(args.dataset, cfg)?;
    let preds = read_predictions(&args.predictions)?;
    let rows = score_groups(&preds, &records)?;
    if let Some(path) = pick(args.metrics_out, cfg.metrics_out.clone()) {
        append_rows(&path, &rows)?;
    }
    print!("{}", render_report(&rows, None, format));
    Ok(())
}

fn cmd_export(args: ExportArgs, cfg: &ConfigFile) -> CliResult {
    let approach = require(pick(args.approach, config_parse(cfg.approach.as_ref())?), "approach")?;
    let out = require(pick(args.out, cfg.out.clone()), "out")?;
    let mut records = dataset(args.dataset, cfg)?;
    if let Some(n) = pick(args.sample, cfg.sample) {
        let seed = pick(args.seed, cfg.seed).unwrap_or(0);
        records = sample_train_subset(&records, n, seed).map_err(|e| Failure::data(e.to_string()))?;
    }
    let summary = export_finetune_jsonl(&records, approach, &out).map_err(|e| match e {
        crate::eval::ExportError::UnsupportedApproach(_) => Failure::usage(e.to_string()),
        other => Failure::data(other.to_string()),
    })?;
    println!("wrote {} examples to {} ({} skipped)", summary.written, out.display(), summary.skipped);
    Ok(())
}

fn cmd_analyze(args: AnalyzeArgs, cfg: &ConfigFile) -> CliResult {
    let format = resolve_format(args.format, cfg)?;
    let records = dataset(args.dataset, cfg)?;
    let preds = read_predictions(&args.predictions)?;
    let rows = score_groups(&preds, &records)?;
    let errors = analyze_errors(&preds, &golds(&records));
    if let Some(out) = args.out {
        write_file(&out, &(serde_json::to_string_pretty(&errors).expect("serializable") + "\n"))?;
    }
    print!("{}", render_report(&rows, Some(&errors), format));
    Ok(())
}

fn cmd_report(args: ReportArgs, cfg: &ConfigFile) -> CliResult {
    let format = resolve_format(args.format, cfg)?;
    let mut rows: Vec<ReportRow> = Vec::new();
    for path in &args.metrics {
        let text =
            fs::read_to_string(path).map_err(|e| Failure::data(format!("reading {}: {e}", path.display())))?;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            rows.push(
                serde_json::from_str(line)
                    .map_err(|e| Failure::data(format!("{}:{}: malformed metrics row: {e}", path.display(), i + 1)))?,
            );
        }
    }
    let errors: Option<ErrorReport> = match &args.errors {
        Some(path) => {
            let text =
                fs::read_to_string(path).map_err(|e| Failure::data(format!("reading {}: {e}", path.display())))?;
            Some(serde_json::from_str(&text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?)
        }
        None => None,
    };
    print!("{}", render_report(&rows, errors.as_ref(), format));
    Ok(())
}

pub fn execute(cli: Cli) -> CliResult {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Run(a) => cmd_run(a, &cfg),
        Command::Eval(a) => cmd_eval(a, &cfg),
        Command::ExportSft(a) => cmd_export(a, &cfg),
        Command::Analyze(a) => cmd_analyze(a, &cfg),
        Command::Report(a) => cmd_report(a, &cfg),
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}
