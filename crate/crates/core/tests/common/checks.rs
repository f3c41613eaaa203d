//! Checks shared by the acceptance suite and the focused test targets.
//! Each returns a short summary on success and a reason on failure.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use compgeo::eval::analysis::{analyze_errors, COPY_EPS_DEG};
use compgeo::gazetteer::{GeocodeError, GeocoderClient, GeocoderConfig};
use compgeo::geo::{haversine_km, BoundingBox, GeoPoint};
use compgeo::llm::{ChatConfig, ChatModel, ChatRequest, HttpChatClient, LlmError};
use compgeo::metrics::{area_precision, area_recall, ExampleScore, MetricsReport, Prediction};
use compgeo::net::RetryPolicy;
use compgeo::pipeline::Approach;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;

pub type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Published (precision, recall, F1) triples that reproduce at three decimals.
pub const PUBLISHED_TRIPLES: [(&str, f64, f64, f64); 19] = [
    ("knowledge box, Llama 70B", 0.199, 0.105, 0.137),
    ("knowledge box, Llama 405B", 0.361, 0.134, 0.195),
    ("reasoning box, Qwen 72B", 0.191, 0.368, 0.251),
    ("reasoning box, Llama 70B", 0.166, 0.428, 0.239),
    ("reasoning box, Llama 405B", 0.164, 0.413, 0.235),
    ("direct, Llama 8B", 0.000, 0.000, 0.000),
    ("geo-aug oracle, Llama 8B", 0.006, 0.037, 0.010),
    ("direct, Llama 70B", 0.200, 0.171, 0.184),
    ("direct, Llama 405B", 0.305, 0.205, 0.245),
    ("direct, FT Llama 8B", 0.132, 0.094, 0.110),
    ("geo-aug oracle, FT Llama 8B", 0.237, 0.186, 0.208),
    ("geo-aug remote, FT Llama 8B", 0.231, 0.170, 0.196),
    ("direct, Qwen 14B", 0.058, 0.050, 0.054),
    ("geo-aug oracle, Qwen 14B", 0.134, 0.498, 0.211),
    ("direct, Qwen 72B", 0.113, 0.162, 0.133),
    ("direct, FT Qwen 14B", 0.037, 0.122, 0.057),
    ("geo-aug oracle, FT Qwen 14B", 0.165, 0.499, 0.248),
    ("geo-aug remote, FT Qwen 14B", 0.203, 0.384, 0.266),
    ("semantic parser", 0.213, 0.276, 0.240),
];

pub fn table_back_calculation() -> Check {
    for (label, p, r, f1) in PUBLISHED_TRIPLES {
        // two examples whose means are exactly (p, r)
        let scores = [
            ExampleScore { distance_km: 0.0, precision: Some(p * 0.5), recall: Some(r * 1.5) },
            ExampleScore { distance_km: 0.0, precision: Some(p * 1.5), recall: Some(r * 0.5) },
        ];
        let got = MetricsReport::from_scores(2, &scores).area_f1.ok_or(format!("{label}: F1 absent"))?;
        ensure(format!("{got:.3}") == format!("{f1:.3}"), || format!("{label}: F1 {got:.6} vs published {f1:.3}"))?;
    }
    Ok(format!("{} triples", PUBLISHED_TRIPLES.len()))
}

pub fn analytic_precision_case() -> Check {
    let p = area_precision(&bx(0.0, 0.0, 10.0, 10.0), &bx(0.0, 0.0, 10.0, 5.0));
    ensure((p - 0.50191).abs() <= 1e-4, || format!("precision {p:.6}"))?;
    Ok(format!("precision {p:.5}"))
}

/// Uniform point on the sphere from a normalized Gaussian vector, returned as (lat, lon) degrees.
fn sphere_sample(rng: &mut ChaCha8Rng) -> (f64, f64) {
    loop {
        let x: f64 = rng.sample(StandardNormal);
        let y: f64 = rng.sample(StandardNormal);
        let z: f64 = rng.sample(StandardNormal);
        let r = (x * x + y * y + z * z).sqrt();
        if r > 1e-12 {
            return ((z / r).asin().to_degrees(), y.atan2(x).to_degrees());
        }
    }
}

/// Fraction of uniform samples inside `within` that also fall in `target`,
/// with its standard error. Longitudes are rescaled into the band of
/// `within` (longitude is uniform and independent of latitude on the
/// sphere); latitude is rejection-sampled.
fn mc_fraction(within: &BoundingBox, target: &BoundingBox, draws: usize, rng: &mut ChaCha8Rng) -> (f64, f64, usize) {
    let (mut inside, mut hits) = (0usize, 0usize);
    let width = within.lon_max() - within.lon_min();
    for _ in 0..draws {
        let (lat, lon) = sphere_sample(rng);
        if lat < within.lat_min() || lat > within.lat_max() {
            continue;
        }
        let lon = within.lon_min() + (lon + 180.0) / 360.0 * width;
        inside += 1;
        if lon >= target.lon_min() && lon <= target.lon_max() && lat >= target.lat_min() && lat <= target.lat_max() {
            hits += 1;
        }
    }
    let f = hits as f64 / inside.max(1) as f64;
    (f, (f * (1.0 - f) / inside.max(1) as f64).sqrt(), inside)
}

fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    loop {
        let w = rng.gen_range(2.0..40.0);
        let h = rng.gen_range(2.0..40.0);
        let lon0 = rng.gen_range(-180.0..180.0 - w);
        let lat0 = rng.gen_range(-85.0..85.0 - h);
        let b = bx(lon0, lat0, lon0 + w, lat0 + h);
        if b.area_km2() > 1e4 {
            return b;
        }
    }
}

/// Gold plus a prediction that overlaps it most of the time.
fn random_pair(rng: &mut ChaCha8Rng) -> (BoundingBox, BoundingBox) {
    let gold = random_box(rng);
    if rng.gen_bool(0.15) {
        return (random_box(rng), gold);
    }
    loop {
        let w = rng.gen_range(2.0..40.0);
        let h = rng.gen_range(2.0..40.0);
        let lon0 = gold.lon_min() + rng.gen_range(-w..(gold.lon_max() - gold.lon_min()));
        let lat0 = gold.lat_min() + rng.gen_range(-h..(gold.lat_max() - gold.lat_min()));
        if let Ok(p) = BoundingBox::new(lon0, lat0, lon0 + w, lat0 + h) {
            if p.area_km2() > 1e4 {
                return (p, gold);
            }
        }
    }
}

pub const MC_SIGMAS: f64 = 3.0;

/// Spherical precision and recall against a Monte Carlo estimate.
pub fn monte_carlo_area_metrics(pairs: usize, draws: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..pairs {
        let (pred, gold) = random_pair(&mut rng);
        for (name, analytic, within, target) in [
            ("precision", area_precision(&pred, &gold), &pred, &gold),
            ("recall", area_recall(&pred, &gold), &gold, &pred),
        ] {
            let (est, se, n) = mc_fraction(within, target, draws, &mut rng);
            let se = se.max(1.0 / n as f64);
            let z = (analytic - est).abs() / se;
            worst = worst.max(z);
            ensure(z <= MC_SIGMAS, || {
                format!("pair {i} {name}: analytic {analytic:.5} vs MC {est:.5} ± {se:.5} ({z:.2} SE, pred {pred}, gold {gold})")
            })?;
        }
    }
    Ok(format!("{pairs} pairs, {draws} draws each, worst {worst:.2} SE"))
}

pub fn distance_checks() -> Check {
    let origin = GeoPoint::new(0.0, 0.0).unwrap();
    let quarter = haversine_km(&origin, &GeoPoint::new(0.0, 90.0).unwrap());
    ensure((quarter - 10007.557).abs() <= 0.01, || format!("(0,0)-(0,90) = {quarter:.4}"))?;
    let mut pred = Prediction::empty("r", Approach::Direct, "m");
    pred.bbox = Some(bx(-1.0, 0.0, 1.0, 2.0));
    let gold = bx(-1.0, -1.0, 1.0, 1.0);
    let one_degree = compgeo::metrics::distance_error_km(&pred, &compgeo::metrics::GoldTarget::Box(gold))
        .ok_or("no distance")?;
    ensure((one_degree - 111.195).abs() <= 0.01, || format!("1 degree centroid offset = {one_degree:.4}"))?;
    let same = haversine_km(&origin, &origin);
    ensure(same == 0.0, || format!("identity = {same}"))?;
    Ok(format!("{quarter:.3} / {one_degree:.3} / {same}"))
}

pub fn fast_retry() -> RetryPolicy {
    RetryPolicy { max_retries: 4, base_delay: Duration::from_millis(5), max_delay: Duration::from_millis(50) }
}

pub fn geocode_body(lat: f64, lng: f64) -> String {
    serde_json::json!({
        "status": "OK",
        "results": [{
            "geometry": {
                "location": {"lat": lat, "lng": lng},
                "viewport": {"northeast": {"lat": lat + 0.5, "lng": lng + 0.5}, "southwest": {"lat": lat - 0.5, "lng": lng - 0.5}}
            },
            "place_id": "stub"
        }]
    })
    .to_string()
}

fn geocoder(stub: &Stub, rate: f64, cache: Option<std::path::PathBuf>) -> GeocoderClient {
    GeocoderClient::new(GeocoderConfig {
        endpoint: format!("{}/geocode/json", stub.base),
        api_key: Some("test".into()),
        timeout: Duration::from_secs(5),
        retry: fast_retry(),
        rate_limit: rate,
        cache_path: cache,
    })
    .unwrap()
}

pub fn geocoder_echo() -> Check {
    let stub = Stub::start(|_, url, _| {
        assert!(url.contains("address=Strait") && url.contains("key=test"), "{url}");
        (200, geocode_body(26.449, 56.203))
    });
    let client = geocoder(&stub, 0.0, None);
    let info = client.remote_geocode("Strait of Hormuz").map_err(|e| e.to_string())?;
    ensure((info.center.lat(), info.center.lon()) == (26.449, 56.203), || format!("center {}", info.center))?;
    ensure(info.bbox.is_some(), || "viewport not mapped".into())?;
    Ok("Strait of Hormuz -> (26.449, 56.203)".into())
}

pub fn geocoder_zero_results() -> Check {
    let stub = Stub::start(|_, _, _| (200, r#"{"status":"ZERO_RESULTS","results":[]}"#.into()));
    let client = geocoder(&stub, 0.0, None);
    match client.remote_geocode("Atlantis") {
        Err(GeocodeError::NotFound(_)) => {}
        other => return Err(format!("expected not-found, got {other:?}")),
    }
    // not-found answers are cached too
    let _ = client.remote_geocode("Atlantis");
    ensure(stub.hits() == 1, || format!("{} requests", stub.hits()))?;
    Ok("not-found".into())
}

pub fn geocoder_retries() -> Check {
    let stub = Stub::start(|n, _, _| if n < 2 { (429, "slow down".into()) } else { (200, geocode_body(26.449, 56.203)) });
    let client = geocoder(&stub, 0.0, None);
    client.remote_geocode("Strait of Hormuz").map_err(|e| e.to_string())?;
    let retries = client.stats().retries();
    ensure(retries == 2, || format!("retry counter {retries}"))?;
    ensure(stub.hits() == 3, || format!("{} requests", stub.hits()))?;
    Ok("429 x2 then OK, retries = 2".into())
}

pub fn geocoder_exhaustion_and_protocol() -> Check {
    let stub = Stub::start(|_, _, _| (503, "down".into()));
    let client = geocoder(&stub, 0.0, None);
    let budget = fast_retry().max_retries as usize + 1;
    match client.remote_geocode("Oman") {
        Err(GeocodeError::Transport(_)) => {}
        other => return Err(format!("expected transport error, got {other:?}")),
    }
    ensure(stub.hits() == budget, || format!("{} requests for budget {budget}", stub.hits()))?;
    let stub = Stub::start(|_, _, _| (200, "<html>".into()));
    match geocoder(&stub, 0.0, None).remote_geocode("Oman") {
        Err(GeocodeError::Protocol(_)) => {}
        other => return Err(format!("expected protocol error, got {other:?}")),
    }
    Ok(format!("transport after {budget} attempts; protocol on malformed body"))
}

pub fn geocoder_cache_idempotence() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("geocoder.jsonl");
    let stub = Stub::start(|_, _, _| (200, geocode_body(26.449, 56.203)));
    let first = geocoder(&stub, 0.0, Some(path.clone())).remote_geocode("Strait of Hormuz").map_err(|e| e.to_string())?;
    let client = geocoder(&stub, 0.0, Some(path));
    let again = client.remote_geocode("  strait of  HORMUZ ").map_err(|e| e.to_string())?;
    ensure(first == again, || "cached value differs".into())?;
    ensure(stub.hits() == 1, || format!("{} requests", stub.hits()))?;
    Ok("one request across two clients sharing a cache file".into())
}

/// `n` distinct requests from 4 threads at `rate`/s must span at least (n-1)/rate.
pub fn geocoder_rate_limit(n: usize, rate: f64) -> Check {
    let stamps = Arc::new(Mutex::new(Vec::new()));
    let s = stamps.clone();
    let stub = Stub::start(move |_, _, _| {
        s.lock().unwrap().push(Instant::now());
        (200, geocode_body(1.0, 1.0))
    });
    let client = geocoder(&stub, rate, None);
    std::thread::scope(|scope| {
        for t in 0..4 {
            let client = &client;
            scope.spawn(move || {
                for i in (t..n).step_by(4) {
                    client.remote_geocode(&format!("place {i}")).unwrap();
                }
            });
        }
    });
    let mut stamps = stamps.lock().unwrap().clone();
    stamps.sort();
    ensure(stamps.len() == n, || format!("{} requests", stamps.len()))?;
    let span = stamps[n - 1] - stamps[0];
    let min = Duration::from_secs_f64((n - 1) as f64 / rate);
    // allow for the gap between the limiter slot and the stub's clock read
    ensure(span + Duration::from_millis(5) >= min, || format!("{n} requests in {span:?}, expected >= {min:?}"))?;
    Ok(format!("{n} requests over {span:?} at {rate}/s"))
}

fn chat(stub: &Stub, cache: Option<std::path::PathBuf>) -> HttpChatClient {
    let mut cfg = ChatConfig::new(stub.base.clone());
    cfg.retry = fast_retry();
    cfg.api_key = Some("k".into());
    cfg.cache_path = cache;
    HttpChatClient::new(cfg).unwrap()
}

fn request() -> ChatRequest {
    ChatRequest::new("m", "system".into(), "Input: x\nOutput:".into())
}

pub fn llm_contracts() -> Check {
    let stub = Stub::start(|_, url, body| {
        assert_eq!(url, "/chat/completions");
        let v: serde_json::Value = serde_json::from_str(body).unwrap();
        assert_eq!(v["temperature"], 0.0);
        assert_eq!(v["messages"][0]["role"], "system");
        (200, completion("(1.0, 2.0, 3.0, 4.0)"))
    });
    let client = chat(&stub, None);
    let text = client.complete(&request()).map_err(|e| e.to_string())?;
    ensure(text == "(1.0, 2.0, 3.0, 4.0)", || format!("echo {text:?}"))?;
    client.complete(&request()).map_err(|e| e.to_string())?;
    ensure(stub.hits() == 1, || format!("{} requests for identical calls", stub.hits()))?;

    let stub = Stub::start(|n, _, _| if n < 2 { (429, String::new()) } else { (200, completion("ok")) });
    let client = chat(&stub, None);
    client.complete(&request()).map_err(|e| e.to_string())?;
    ensure(client.stats().retries() == 2, || format!("retries {}", client.stats().retries()))?;

    let stub = Stub::start(|_, _, _| (500, "boom".into()));
    let client = chat(&stub, None);
    let budget = fast_retry().max_retries as usize + 1;
    match client.complete(&request()) {
        Err(LlmError::Transport(_)) => {}
        other => return Err(format!("expected transport error, got {other:?}")),
    }
    ensure(stub.hits() == budget, || format!("{} requests for budget {budget}", stub.hits()))?;

    let stub = Stub::start(|_, _, _| (200, completion("")));
    let client = chat(&stub, None);
    match client.complete(&request()) {
        Err(LlmError::EmptyResponse) => {}
        other => return Err(format!("expected empty-response error, got {other:?}")),
    }
    let _ = client.complete(&request());
    ensure(stub.hits() == 2, || "empty responses must not be cached".into())?;
    Ok(format!("echo, cache, retries = 2, transport after {budget}, empty response"))
}

pub fn llm_persistent_cache() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("llm.jsonl");
    let stub = Stub::start(|_, _, _| (200, completion("(1.0, 2.0, 3.0, 4.0)")));
    let first = chat(&stub, Some(path.clone())).complete(&request()).map_err(|e| e.to_string())?;
    let second = chat(&stub, Some(path)).complete(&request()).map_err(|e| e.to_string())?;
    ensure(first == second && stub.hits() == 1, || format!("{} requests", stub.hits()))?;
    Ok("warm cache served from disk".into())
}

/// Negated-longitude prediction and the fine-tuned Qwen geo-augmented output.
pub fn error_probe_fixture() -> Check {
    let gold = BoundingBox::try_from(GULF_GOLD).unwrap();
    let golds: HashMap<String, BoundingBox> = [("flip".to_string(), gold), ("qwen".to_string(), gold)].into();

    let mut flip = Prediction::empty("flip", Approach::Direct, "m");
    flip.bbox = Some(bx(-gold.lon_max(), gold.lat_min(), -gold.lon_min(), gold.lat_max()));
    let report = analyze_errors(std::slice::from_ref(&flip), &golds);
    ensure(report.sign_flip_suspects == 1, || format!("sign flips {}", report.sign_flip_suspects))?;

    let mut qwen = Prediction::empty("qwen", Approach::GeoAugOracle, "m");
    qwen.bbox = compgeo::geo::parse_bbox(GEO_QWEN_FT).valid();
    qwen.recalled = gulf_centers();
    let report = analyze_errors(std::slice::from_ref(&qwen), &golds);
    ensure(report.coord_copy_suspects == 1, || format!("coord copies {}", report.coord_copy_suspects))?;
    ensure(report.sign_flip_suspects == 0, || "spurious sign flip".into())?;

    let both = analyze_errors(&[flip, qwen], &golds);
    ensure(
        both.sign_flip_suspects == 1 && both.coord_copy_suspects == 1,
        || format!("combined {both:?}"),
    )?;
    Ok(format!("1 sign flip, 1 coordinate copy (eps {COPY_EPS_DEG})"))
}
