//! Drives the `compgeo` binary against a stub chat endpoint.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use compgeo::eval::dataset::RawRecord;
use compgeo::eval::{ErrorReport, ReportRow};
use compgeo::pipeline::LocationRecord;

use super::checks::Check;
use super::*;

pub fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_compgeo"));
    cmd.env_remove("LLM_API_BASE").env_remove("LLM_API_KEY").env_remove("GEOCODER_API_KEY");
    cmd
}

pub fn write_dataset(path: &Path, records: &[LocationRecord]) {
    let mut f = std::fs::File::create(path).unwrap();
    for r in records {
        writeln!(f, "{}", serde_json::to_string(&RawRecord::from(r)).unwrap()).unwrap();
    }
}

/// Stub answering each prompt with the scripted reply for the record whose description it contains.
pub fn scripted_llm(replies: Vec<(String, String)>) -> Stub {
    let replies = Arc::new(replies);
    Stub::start(move |_, _, body| {
        let user = user_text(body);
        match replies.iter().find(|(desc, _)| user.contains(desc.as_str())) {
            Some((_, reply)) => (200, completion(reply)),
            None => (400, "unknown prompt".into()),
        }
    })
}

pub struct RunOutput {
    pub status: i32,
    pub stdout: String,
    pub stderr: String,
    pub predictions: String,
    pub metrics: Vec<ReportRow>,
}

pub fn run_cli(dir: &Path, approach: &str, stub: &Stub, cache: &Path, tag: &str) -> RunOutput {
    let preds = dir.join(format!("preds-{tag}.jsonl"));
    let metrics = dir.join(format!("metrics-{tag}.jsonl"));
    let out: Output = bin()
        .args(["run", "--approach", approach, "--model", "stub-model", "--parallelism", "4", "--format", "csv"])
        .arg("--dataset")
        .arg(dir.join("data.jsonl"))
        .arg("--cache-dir")
        .arg(cache)
        .arg("--out")
        .arg(&preds)
        .arg("--metrics-out")
        .arg(&metrics)
        .arg("--llm-base")
        .arg(&stub.base)
        .output()
        .expect("spawn compgeo");
    RunOutput {
        status: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
        predictions: std::fs::read_to_string(&preds).unwrap_or_default(),
        metrics: std::fs::read_to_string(&metrics)
            .unwrap_or_default()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect(),
    }
}

fn close(a: Option<f64>, b: f64, tol: f64) -> bool {
    a.is_some_and(|a| (a - b).abs() <= tol)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn three_decimals(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

/// Twenty records with three-decimal gold boxes; the stub echoes each gold box.
pub fn echo_records() -> Vec<LocationRecord> {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(99);
    (0..20)
        .map(|i| {
            use rand::Rng;
            let lon0 = three_decimals(rng.gen_range(-170.0..160.0));
            let lat0 = three_decimals(rng.gen_range(-80.0..70.0));
            let b = bx(lon0, lat0, three_decimals(lon0 + rng.gen_range(0.01..5.0)), three_decimals(lat0 + rng.gen_range(0.01..5.0)));
            LocationRecord {
                id: format!("echo-{i:02}"),
                description: format!("The location is site number {i} near the river."),
                mentions: Vec::new(),
                gold_bbox: b,
                gold_name: None,
                gold_country: None,
            }
        })
        .collect()
}

pub fn echo_run() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let records = echo_records();
    write_dataset(&dir.path().join("data.jsonl"), &records);
    let stub = scripted_llm(records.iter().map(|r| (r.description.clone(), format!("Output: {}", r.gold_bbox))).collect());
    let out = run_cli(dir.path(), "direct", &stub, &dir.path().join("cache"), "echo");
    ensure(out.status == 0, || format!("exit {}: {}", out.status, out.stderr))?;
    let m = &out.metrics.first().ok_or("no metrics row")?.report;
    ensure(m.coverage == 100.0 && m.n_covered == 20, || format!("coverage {}", m.coverage))?;
    ensure(
        m.area_precision == Some(1.0) && m.area_recall == Some(1.0) && m.area_f1 == Some(1.0),
        || format!("P/R/F1 {:?} {:?} {:?}", m.area_precision, m.area_recall, m.area_f1),
    )?;
    ensure(m.mean_distance_km == Some(0.0), || format!("distance {:?}", m.mean_distance_km))?;
    ensure(out.stdout.contains("100.0,0.0,1.000,1.000,1.000"), || format!("rendered: {}", out.stdout))?;
    ensure(stub.hits() == 20, || format!("{} requests", stub.hits()))?;
    Ok("coverage 100.0%, P = R = F1 = 1.000, distance 0.0".into())
}

/// Worked outputs for the gulf example plus a sign flip and an ordering violation.
pub fn mixed_replies() -> Vec<(&'static str, String)> {
    let [lon0, lat0, lon1, lat1] = GULF_GOLD;
    vec![
        ("r1", DIRECT_LLAMA_70B.to_string()),
        ("r2", GEO_LLAMA_70B.to_string()),
        ("r3", DIRECT_LLAMA_405B.to_string()),
        ("r4", GEO_LLAMA_405B.to_string()),
        ("r5", DIRECT_QWEN_FT.to_string()),
        ("r6", GEO_QWEN_FT.to_string()),
        ("r7", format!("({}, {lat0}, {}, {lat1})", -lon1, -lon0)),
        ("r8", "The bounding box is (63.0, 21.0, 51.2, 32.7).".to_string()),
    ]
}

/// Values computed independently from the closed-form spherical formulas.
pub struct MixedExpectation {
    pub coverage: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub distance_km: f64,
    pub errors: ErrorReport,
}

pub fn mixed_expectation() -> MixedExpectation {
    MixedExpectation {
        coverage: 87.5,
        precision: 0.2612581284227687,
        recall: 0.6931975270531827,
        f1: 0.3794906290432038,
        distance_km: 1854.112095544475,
        errors: ErrorReport {
            n_scored: 8,
            n_covered: 7,
            sign_flip_suspects: 1,
            coord_copy_suspects: 2,
            coord_copy_loose_suspects: 3,
            invalid_parse: 1,
            out_of_range_parse: 0,
            precision_gt_recall: 1,
            recall_gt_precision: 5,
            degraded: 0,
            invalid_mentions: 0,
        },
    }
}

pub fn mixed_setup(dir: &Path) -> (Vec<LocationRecord>, Stub) {
    let replies = mixed_replies();
    let records: Vec<LocationRecord> =
        replies.iter().map(|(id, _)| gulf_record(id, &format!(" Case {id}."))).collect();
    write_dataset(&dir.join("data.jsonl"), &records);
    let stub = scripted_llm(records.iter().zip(&replies).map(|(r, (_, reply))| (r.description.clone(), reply.clone())).collect());
    (records, stub)
}

pub fn analyze_cli(dir: &Path, preds: &Path) -> Result<ErrorReport, String> {
    let json = dir.join("errors.json");
    let out = bin()
        .arg("analyze")
        .arg("--dataset")
        .arg(dir.join("data.jsonl"))
        .arg("--predictions")
        .arg(preds)
        .arg("--out")
        .arg(&json)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;
    serde_json::from_str(&std::fs::read_to_string(&json).map_err(|e| e.to_string())?).map_err(|e| e.to_string())
}

pub fn mixed_run() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (_, stub) = mixed_setup(dir.path());
    let out = run_cli(dir.path(), "geo_aug_oracle", &stub, &dir.path().join("cache"), "mixed");
    ensure(out.status == 0, || format!("exit {}: {}", out.status, out.stderr))?;
    let m = &out.metrics.first().ok_or("no metrics row")?.report;
    let want = mixed_expectation();
    ensure(m.coverage == want.coverage, || format!("coverage {}", m.coverage))?;
    ensure(close(m.area_precision, want.precision, 1e-9), || format!("precision {:?}", m.area_precision))?;
    ensure(close(m.area_recall, want.recall, 1e-9), || format!("recall {:?}", m.area_recall))?;
    ensure(close(m.area_f1, want.f1, 1e-9), || format!("F1 {:?}", m.area_f1))?;
    ensure(close(m.mean_distance_km, want.distance_km, 1e-6), || format!("distance {:?}", m.mean_distance_km))?;
    let errors = analyze_cli(dir.path(), &dir.path().join("preds-mixed.jsonl"))?;
    ensure(errors == want.errors, || format!("error report {errors:?}"))?;
    Ok(format!(
        "coverage 87.5%, skew P>R 1 / R>P 5, sign flips 1, coordinate copies 2 (loose 3), invalid parses 1"
    ))
}

pub fn warm_cache_rerun() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cache: PathBuf = dir.path().join("cache");
    let (_, stub) = mixed_setup(dir.path());
    let cold = run_cli(dir.path(), "geo_aug_oracle", &stub, &cache, "cold");
    ensure(cold.status == 0, || cold.stderr.clone())?;
    let cold_hits = stub.hits();
    drop(stub);
    // a fresh stub that would answer anything; it must not be called
    let idle = Stub::start(|_, _, _| (200, completion("(0.0, 0.0, 1.0, 1.0)")));
    let warm = run_cli(dir.path(), "geo_aug_oracle", &idle, &cache, "warm");
    ensure(warm.status == 0, || warm.stderr.clone())?;
    ensure(idle.hits() == 0, || format!("{} network calls on warm cache", idle.hits()))?;
    ensure(cold.predictions == warm.predictions && !cold.predictions.is_empty(), || "predictions differ".into())?;
    ensure(cold.stdout == warm.stdout, || format!("reports differ:\n{}\n{}", cold.stdout, warm.stdout))?;
    let metrics: HashMap<_, _> = [("cold", &cold.metrics), ("warm", &warm.metrics)].into();
    ensure(metrics["cold"] == metrics["warm"], || "metrics rows differ".into())?;
    Ok(format!("{cold_hits} cold requests, 0 warm, byte-identical outputs"))
}
