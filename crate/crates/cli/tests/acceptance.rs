//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! with status 1 when any criterion fails.
//!
//! Run with `cargo test -p resroute-cli --test acceptance`; pass criterion
//! numbers after `--` to run a subset.

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use async_trait::async_trait;
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use clap::Parser;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use resroute_cli::commands::eval::EvalSummary;
use resroute_cli::{execute, Cli};
use resroute_core::anls::nls;
use resroute_core::cost::estimate_text_tokens;
use resroute_core::imageops::{self, EncodeSettings, ImageDims, RenderCache};
use resroute_core::labeler::{decided_index, label_dataset, label_from_utilities, rollout_and_label, LabelRun, LabelTask};
use resroute_core::routing::RoutingMode;
use resroute_core::selector::{expected_resolution, round_to_supported, smoothed_ce_loss, train_head};
use resroute_core::store::{self, DatasetWriter, SampleRecord, SampleStatus};
use resroute_core::synth::{self, SynthConfig};
use resroute_core::vlm::{DecodeParams, SimulatedVlm, SimulatedVlmSpec, VlmClient, VlmError, VlmRequest, VlmResponse};
use resroute_core::{anls, FeatureVector, Head, LabelingConfig, MetricKind, Probabilities, ResolutionMenu, SufficiencyLabel, TrainConfig};
use resroute_gateway::service::serve;
use resroute_gateway::stub::{self, VlmBehavior};
use resroute_gateway::{FeatureEndpoint, Gateway, GatewayConfig, RouteResponse, VlmEndpoint, VlmTarget};

type Verdict = (bool, String);
type Check<'a> = (&'static str, Box<dyn FnOnce() -> Verdict + 'a>);

fn main() {
    let started = Instant::now();
    let pipeline = OnceLock::new();
    let pipeline = || pipeline.get_or_init(|| catch_unwind(run_pipeline).map_err(panic_text).and_then(|r| r));

    let checks: Vec<Check> = vec![
        ("1 ANLS worked examples", Box::new(anls_examples)),
        ("2 sufficiency labels for the worked table", Box::new(table_labels)),
        ("3 labels match the oracle; early exit matches full scan", Box::new(oracle_equivalence)),
        ("4 continuous selection examples and bounds", Box::new(continuous_selection)),
        ("5 smoothed cross-entropy gradient", Box::new(gradient_check)),
        ("6 end-to-end synthetic pipeline", Box::new(|| end_to_end(pipeline()))),
        ("7 continuous vs discrete compute", Box::new(|| continuous_vs_discrete(pipeline()))),
        ("8 gateway contract against stubs", Box::new(gateway_contract)),
        ("9 resume after a truncated store", Box::new(crash_resume)),
    ];

    // `cargo test --test acceptance -- 3 6` runs only criteria 3 and 6
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in checks {
        if !only.is_empty() && !only.iter().any(|o| name.split(' ').next() == Some(o.as_str())) {
            continue;
        }
        let t = Instant::now();
        let (pass, detail) = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| (false, panic_text(p)));
        if !pass {
            failed += 1;
        }
        println!("{} | {name} | {detail} | {:.2}s", if pass { "PASS" } else { "FAIL" }, t.elapsed().as_secs_f64());
    }
    println!("acceptance: {failed} failed, {:.1}s", started.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn panic_text(p: Box<dyn std::any::Any + Send>) -> String {
    let msg = p
        .downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panic".into());
    format!("panicked: {msg}")
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn anls_examples() -> Verdict {
    let t = Instant::now();
    let a = nls("T.F. Rosel", "T.F. Riehl").value();
    let b = nls("P. Carter", "P. Carter").value();
    let elapsed = t.elapsed();
    let pass = close(a, 0.7, 1e-9) && close(b, 1.0, 1e-9) && elapsed < Duration::from_millis(1);
    (pass, format!("nls = {a}, {b} in {}us", elapsed.as_micros()))
}

fn table_labels() -> Verdict {
    let cfg = LabelingConfig::default();
    let menu = ResolutionMenu::default_menu();
    let k = menu.len();
    let at = |i: Option<usize>| i.map(|i| menu.entries()[i]);
    let full = |u: &[f64]| label_from_utilities(u, &menu, &cfg).unwrap().resolution;
    let got = [
        at(decided_index(&[1.0], k, &cfg)),
        at(decided_index(&[0.7], k, &cfg)),
        at(decided_index(&[0.7, 1.0], k, &cfg)),
        Some(full(&[0.0, 0.65, 0.93])),
        Some(full(&[0.86, 1.0, 1.0])),
    ];
    let want = [Some(384), None, Some(768), Some(1024), Some(768)];
    (got == want, format!("{got:?}"))
}

fn menu_of(k: usize) -> ResolutionMenu {
    match k {
        2 => ResolutionMenu::binary_menu(),
        3 => ResolutionMenu::default_menu(),
        _ => ResolutionMenu::new(vec![384, 544, 704, 864, 1024], None, None, None).unwrap(),
    }
}

/// First index reaching tau with no later gain above delta, else the last.
fn oracle(u: &[f64], tau: f64, delta: f64) -> usize {
    (0..u.len()).find(|&k| u[k] >= tau && u[k + 1..].iter().all(|&x| x - u[k] <= delta)).unwrap_or(u.len() - 1)
}

const TRUTH: &str = "abcdefghijklmnopqrst";

/// Utilities on a 1/20 grid so that a corrupted answer reproduces them.
fn grid_vector(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    (0..k).map(|_| 1.0 - rng.gen_range(0..=20) as f64 / 20.0).collect()
}

fn draw(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    const EDGES: [f64; 9] = [0.0, 0.5, 0.75, 0.8, 0.85, 0.9, 0.95, 0.96, 1.0];
    (0..k)
        .map(|_| match rng.gen_range(0..3) {
            0 => rng.gen::<f64>(),
            1 => rng.gen_range(0.8..=1.0),
            _ => EDGES[rng.gen_range(0..EDGES.len())],
        })
        .collect()
}

fn answer_with_utility(u: f64) -> String {
    let d = ((1.0 - u) * 20.0).round() as usize;
    "#".repeat(d) + &TRUTH[d..]
}

/// Answers from a per-sample utility vector indexed by the menu entry seen.
/// Sample ids are `v<index>` into `vectors`.
struct LookupVlm {
    menu: ResolutionMenu,
    vectors: Vec<Vec<f64>>,
    calls: AtomicUsize,
}

#[async_trait]
impl VlmClient for LookupVlm {
    async fn chat(&self, req: &VlmRequest) -> Result<VlmResponse, VlmError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let r = imageops::probe_dims(&req.image_bytes).map_err(|e| VlmError::BadImage(e.to_string()))?.longest_side();
        let k = self.menu.index_of(r).ok_or_else(|| VlmError::Protocol(format!("side {r}")))?;
        let id = req.sample_id.as_deref().unwrap_or_default();
        let u = id[1..].parse::<usize>().ok().and_then(|i| self.vectors.get(i)).ok_or_else(|| VlmError::UnknownSample(id.into()))?;
        Ok(VlmResponse { answer: answer_with_utility(u[k]), usage: None, latency_ms: 0.0 })
    }
}

const VECTORS: usize = 100_000;

fn oracle_equivalence() -> Verdict {
    let t = Instant::now();
    let cfg = LabelingConfig::default();
    let mut notes = Vec::new();
    let mut pass = true;

    // decision rule on arbitrary real-valued vectors
    for k in [2usize, 3, 5] {
        let menu = menu_of(k);
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        let mut mismatches = 0;
        for _ in 0..VECTORS {
            let u = draw(&mut rng, k);
            let want = oracle(&u, cfg.tau, cfg.delta);
            let full = label_from_utilities(&u, &menu, &cfg).unwrap().class_index;
            let early = (1..=k).find_map(|n| decided_index(&u[..n], k, &cfg)).unwrap();
            if full != want || early != want {
                mismatches += 1;
            }
        }
        pass &= mismatches == 0;
        notes.push(format!("K={k}: {mismatches} rule mismatches"));
    }

    let rule_time = t.elapsed();

    // real rollouts through the renderer and a lookup model
    let dir = tempfile::tempdir().unwrap();
    let image = dir.path().join("wide.png");
    let img = image::DynamicImage::new_rgb8(1024, 16);
    std::fs::write(&image, imageops::encode_png(&img).unwrap()).unwrap();
    let image = image.to_string_lossy().into_owned();
    let renderer = Arc::new(RenderCache::new(EncodeSettings::default(), 16));
    // the score each grid utility's answer earns, so the oracle sees what the labeler sees
    let truth = [TRUTH.to_string()];
    let scores: Vec<f64> = (0..=20).map(|d| anls(&answer_with_utility(1.0 - d as f64 / 20.0), &truth).unwrap().value()).collect();
    let rt = tokio::runtime::Builder::new_current_thread().build().unwrap();
    for k in [2usize, 3, 5] {
        let menu = menu_of(k);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + k as u64);
        let vectors: Vec<Vec<f64>> = (0..VECTORS).map(|_| grid_vector(&mut rng, k)).collect();
        let vlm = LookupVlm { menu: menu.clone(), vectors, calls: AtomicUsize::new(0) };
        let (mismatches, early_calls) = rt.block_on(async {
            let mut mismatches = 0;
            let mut task = LabelTask {
                sample_id: String::new(),
                image_ref: image.clone(),
                query: "q".into(),
                ground_truths: truth.to_vec(),
                metric: MetricKind::Anls,
            };
            for (i, u) in vlm.vectors.iter().enumerate() {
                let scored: Vec<f64> = u.iter().map(|&x| scores[((1.0 - x) * 20.0).round() as usize]).collect();
                let want = oracle(&scored, cfg.tau, cfg.delta);
                task.sample_id = format!("v{i}");
                let out = rollout_and_label(&task, &menu, &cfg, &vlm, &renderer, DecodeParams::default()).await.unwrap();
                if out.label.class_index != want {
                    mismatches += 1;
                }
            }
            (mismatches, vlm.calls.load(Ordering::Relaxed))
        });
        pass &= mismatches == 0;
        notes.push(format!("K={k}: {mismatches} rollout mismatches, {early_calls}/{} calls", k * VECTORS));
    }
    notes.push(format!("rule scan {:.1}s", rule_time.as_secs_f64()));
    let elapsed = t.elapsed();
    pass &= elapsed < Duration::from_secs(10);
    (pass, format!("{}; {:.1}s", notes.join(", "), elapsed.as_secs_f64()))
}

fn continuous_selection() -> Verdict {
    let menu = ResolutionMenu::default_menu();
    let entries = menu.entries().to_vec();
    let probs = |p: Vec<f64>| Probabilities::new(p).unwrap();
    let uniform = expected_resolution(&probs(vec![1.0 / 3.0; 3]), &menu).unwrap();
    let skewed = expected_resolution(&probs(vec![0.2, 0.5, 0.3]), &menu).unwrap();
    let mut pass = close(uniform, 2176.0 / 3.0, 1e-9)
        && round_to_supported(uniform, &entries).unwrap() == 768
        && skewed == 768.0
        && round_to_supported(skewed, &entries).unwrap() == 768;

    let grid: Vec<u32> = (384..=1024).step_by(32).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut violations = 0;
    for _ in 0..VECTORS {
        let e: Vec<f64> = (0..3).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
        let s: f64 = e.iter().sum();
        let r = expected_resolution(&probs(e.iter().map(|x| x / s).collect()), &menu).unwrap();
        let in_range = (384.0 - 1e-9..=1024.0 + 1e-9).contains(&r);
        let ok = [&entries, &grid].iter().all(|sup| {
            let q = round_to_supported(r, sup).unwrap();
            let smallest_above = sup.iter().copied().find(|&x| x as f64 >= r).unwrap_or(*sup.last().unwrap());
            q == smallest_above
        });
        if !(in_range && ok) {
            violations += 1;
        }
    }
    pass &= violations == 0;
    (pass, format!("uniform {uniform:.4}, skewed {skewed}, {violations} bound violations"))
}

fn gradient_check() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let k = [2usize, 3, 5][i % 3];
        let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let label = rng.gen_range(0..k);
        let eps = rng.gen_range(0.0..0.2);
        let (_, grad) = smoothed_ce_loss(&logits, label, eps);
        let h = 1e-5;
        let numeric: Vec<f64> = (0..k)
            .map(|j| {
                let mut up = logits.clone();
                let mut down = logits.clone();
                up[j] += h;
                down[j] -= h;
                (smoothed_ce_loss(&up, label, eps).0 - smoothed_ce_loss(&down, label, eps).0) / (2.0 * h)
            })
            .collect();
        let diff = grad.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = grad.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
        worst = worst.max(diff / scale.max(1e-12));
    }
    (worst <= 1e-6, format!("worst relative error {worst:.2e}"))
}

// ---------------------------------------------------------------------------
// end-to-end pipeline through the command layer

struct Pipeline {
    _dir: tempfile::TempDir,
    seconds: f64,
    labeled: usize,
    recovered: usize,
    heldout_accuracy: f64,
    closed_form_savings: f64,
    runs: BTreeMap<String, EvalSummary>,
}

fn cli(args: &[&str]) -> Result<Value, String> {
    let argv: Vec<String> = std::iter::once("resroute").chain(args.iter().copied()).map(String::from).collect();
    let parsed = Cli::try_parse_from(&argv).map_err(|e| e.to_string())?;
    execute(parsed, argv).map_err(|e| format!("{}: {e}", args.iter().find(|a| !a.starts_with('-')).unwrap_or(&"")))
}

fn ceil_div(a: u32, b: u32) -> u64 {
    a.div_ceil(b) as u64
}

fn run_pipeline() -> Result<Pipeline, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    // step budget of the reference recipe: 15k optimizer steps over 800 training samples
    std::fs::write(p("config.toml"), "[train]\nepochs = 600\n").map_err(|e| e.to_string())?;
    let (config, data) = (p("config.toml"), p("data"));
    let base = ["--config", config.as_str(), "--seed", "7", "--log-level", "warn"];
    let with = |rest: &[&str]| -> Vec<String> { base.iter().chain(rest).map(|s| s.to_string()).collect() };
    let run = |args: Vec<String>| cli(&args.iter().map(String::as_str).collect::<Vec<_>>());

    let t = Instant::now();
    run(with(&["simulate", "--n", "1000", "--mix", "384:0.7,768:0.2,1024:0.1", "--out", &data]))?;
    let spec_path = format!("{data}/spec.json");
    run(with(&["label", "--input", &format!("{data}/samples.jsonl"), "--output", &p("labeled.jsonl"), "--spec", &spec_path]))?;
    let trained = run(with(&["train", "--data", &p("labeled.jsonl"), "--out", &p("head.json")]))?;
    let mut runs = BTreeMap::new();
    for mode in ["continuous", "passthrough", "discrete"] {
        let out = p(&format!("eval-{mode}.jsonl"));
        let args = ["eval", "--data", &p("heldout.jsonl"), "--head", &p("head.json"), "--out", &out, "--mode", mode, "--spec", &spec_path];
        let v = run(with(&args))?;
        let summary: EvalSummary = serde_json::from_value(v["summary"].clone()).map_err(|e| e.to_string())?;
        runs.insert(mode.to_string(), summary);
    }
    let seconds = t.elapsed().as_secs_f64();

    let spec = SimulatedVlmSpec::load(Path::new(&spec_path)).map_err(|e| e.to_string())?;
    let labeled = store::load_all(Path::new(&p("labeled.jsonl"))).map_err(|e| e.to_string())?;
    let recovered = labeled
        .iter()
        .filter(|r| r.status == SampleStatus::Labeled)
        .filter(|r| r.label.as_ref().map(|l| l.resolution) == Some(spec.samples[&r.id].sufficient_resolution))
        .count();
    let heldout_accuracy = trained["summary"]["heldout_accuracy"].as_f64().ok_or("no held-out accuracy")?;

    // prefill tokens with every evaluated sample at exactly its planted size
    let heldout = store::load_all(Path::new(&p("heldout.jsonl"))).map_err(|e| e.to_string())?;
    let tokens = |r: u32| ceil_div(r, 28) * ceil_div(r, 28);
    let (mut planted, mut native) = (0u64, 0u64);
    for s in &heldout {
        let text = estimate_text_tokens(&s.query);
        planted += tokens(spec.samples[&s.id].sufficient_resolution) + text;
        native += tokens(1024) + text;
    }
    let closed_form_savings = 100.0 * (planted as f64 / native as f64 - 1.0);

    Ok(Pipeline { _dir: dir, seconds, labeled: labeled.len(), recovered, heldout_accuracy, closed_form_savings, runs })
}

fn end_to_end(pipeline: &Result<Pipeline, String>) -> Verdict {
    let p = match pipeline {
        Ok(p) => p,
        Err(e) => return (false, format!("pipeline failed: {e}")),
    };
    let cont = &p.runs["continuous"];
    let pass_u = p.runs["passthrough"].macro_utility;
    let checks = [
        ("recovery", p.labeled == 1000 && p.recovered == 1000),
        ("accuracy", p.heldout_accuracy >= 0.95),
        ("utility", cont.macro_utility >= 0.99 * pass_u),
        ("savings", close(cont.savings_pct, p.closed_form_savings, 2.0)),
        ("runtime", p.seconds < 60.0),
    ];
    let missed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let detail = format!(
        "recovered {}/{}, held-out accuracy {:.3}, utility {:.3} vs passthrough {:.3}, savings {:.2}% vs closed form {:.2}%, {:.1}s{}",
        p.recovered,
        p.labeled,
        p.heldout_accuracy,
        cont.macro_utility,
        pass_u,
        cont.savings_pct,
        p.closed_form_savings,
        p.seconds,
        if missed.is_empty() { String::new() } else { format!("; missed: {}", missed.join(", ")) }
    );
    (missed.is_empty(), detail)
}

fn continuous_vs_discrete(pipeline: &Result<Pipeline, String>) -> Verdict {
    let p = match pipeline {
        Ok(p) => p,
        Err(e) => return (false, format!("pipeline failed: {e}")),
    };
    let (c, d) = (&p.runs["continuous"], &p.runs["discrete"]);
    let pass = c.total_flops <= d.total_flops && close(c.macro_utility, d.macro_utility, 0.01);
    let detail = format!(
        "FLOPs {:.4e} vs {:.4e}, utility {:.3} vs {:.3}",
        c.total_flops, d.total_flops, c.macro_utility, d.macro_utility
    );
    (pass, detail)
}

// ---------------------------------------------------------------------------
// gateway

const DIM: usize = 64;

fn gateway_contract() -> Verdict {
    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(4).enable_all().build().unwrap();
    rt.block_on(gateway_contract_async())
}

async fn gateway_contract_async() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let native = ImageDims { width: 1024, height: 768 };
    let cfg = SynthConfig { native, images: 2, ..SynthConfig::new(60, synth::default_mix(), 8) };
    let menu = ResolutionMenu::default_menu();
    let out = synth::simulate(&cfg, &menu, dir.path()).unwrap();
    let samples = store::load_all(&out.samples).unwrap();
    let spec = SimulatedVlmSpec::load(&out.spec).unwrap();
    let lines = std::fs::read_to_string(&out.features).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();

    let data: Vec<_> = samples
        .iter()
        .map(|s| {
            let z = FeatureVector::new(s.features.as_ref().unwrap().decode::<f64>().unwrap()).unwrap();
            let k = menu.index_of(spec.samples[&s.id].sufficient_resolution).unwrap();
            (z, SufficiencyLabel::from_index(&menu, k))
        })
        .collect();
    let head: Head = train_head(&data, &menu, &TrainConfig { learning_rate: 0.05, epochs: 200, ..TrainConfig::default() }).unwrap().0;
    let head_path = dir.path().join("head.json");
    head.save(&head_path).unwrap();

    let features = stub::spawn_features(DIM, lines).await.unwrap();
    let vlm = stub::spawn_vlm(Some(SimulatedVlm::new(spec.clone())), VlmBehavior::default()).await.unwrap();
    let endpoint = VlmEndpoint { backoff_base_s: 0.01, ..VlmEndpoint::new(format!("{}/v1", vlm.url()), "sim") };
    let mut gcfg = GatewayConfig::new(FeatureEndpoint::new(features.url()), VlmTarget::Http(endpoint), head_path);
    gcfg.concurrency_limit = 4;
    let gateway = Arc::new(Gateway::from_config(&gcfg).await.unwrap());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let url = format!("http://{}/v1/route", listener.local_addr().unwrap());
    tokio::spawn(serve(gateway.clone(), listener, std::future::pending()));
    let http = reqwest::Client::new();
    let images: HashMap<String, String> =
        samples.iter().map(|s| (s.image.clone(), STANDARD.encode(std::fs::read(&s.image).unwrap()))).collect();
    let route = |s: &SampleRecord, mode: Option<&str>| {
        let mut body = json!({"image_b64": images[&s.image], "query": s.query});
        if let Some(m) = mode {
            body["mode"] = json!(m);
        }
        let req = http.post(&url).json(&body);
        async move {
            let resp = req.send().await.map_err(|e| e.to_string())?;
            if !resp.status().is_success() {
                return Err(format!("status {}", resp.status()));
            }
            resp.json::<RouteResponse>().await.map_err(|e| e.to_string())
        }
    };

    let mut problems = Vec::new();
    let mut below_native = 0;
    for s in &samples {
        let pass = route(s, Some("passthrough")).await.unwrap();
        if pass.telemetry.savings_pct != 0.0 || pass.telemetry.dims_sent != native {
            problems.push(format!("{}: passthrough sent {:?}", s.id, pass.telemetry.dims_sent));
        }
        let cont = route(s, Some("continuous")).await.unwrap();
        let t = &cont.telemetry;
        if t.mode != RoutingMode::Continuous || t.dims_sent.width > native.width || t.dims_sent.height > native.height {
            problems.push(format!("{}: continuous sent {:?}", s.id, t.dims_sent));
        }
        if t.dims_sent != native {
            below_native += 1;
        }
    }

    // 100 concurrent requests under a limit of 4
    let served_before = gateway.stats().served;
    let results = futures::future::join_all((0..100).map(|i| route(&samples[i % samples.len()], None))).await;
    let errors = results.iter().filter(|r| r.is_err()).count();
    let stats = gateway.stats();
    if errors > 0 || stats.served - served_before != 100 || stats.max_in_flight > 4 || vlm.state.concurrency.peak() > 4 {
        problems.push(format!("concurrency: {errors} errors, {stats:?}"));
    }

    // feature endpoint outage degrades to the largest menu size
    features.state.set_down(true);
    let s = samples.iter().find(|s| spec.samples[&s.id].sufficient_resolution == 1024).unwrap();
    match route(s, None).await {
        Ok(r) if r.telemetry.degraded && r.telemetry.mode == RoutingMode::Fixed(1024) && r.answer == spec.samples[&s.id].correct_answer => {}
        other => problems.push(format!("outage: {:?}", other.map(|r| r.telemetry))),
    }

    let detail = format!(
        "{} samples, {below_native} continuous below native, peak in flight {}, {} problems{}",
        samples.len(),
        stats.max_in_flight,
        problems.len(),
        problems.first().map(|p| format!(", first: {p}")).unwrap_or_default()
    );
    (problems.is_empty() && below_native > 0, detail)
}

// ---------------------------------------------------------------------------
// crash safety

struct CountingVlm {
    inner: SimulatedVlm,
    calls: AtomicUsize,
}

#[async_trait]
impl VlmClient for CountingVlm {
    async fn chat(&self, req: &VlmRequest) -> Result<VlmResponse, VlmError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.chat(req).await
    }
}

fn label_into(path: &Path, samples: &[SampleRecord], vlm: &CountingVlm) -> usize {
    let menu = ResolutionMenu::default_menu();
    let cfg = LabelingConfig::default();
    let rt = tokio::runtime::Builder::new_current_thread().build().unwrap();
    let mut writer = DatasetWriter::open(path).unwrap();
    let run = LabelRun {
        menu: &menu,
        cfg: &cfg,
        vlm,
        renderer: Arc::new(RenderCache::new(EncodeSettings::default(), 8)),
        decode: DecodeParams::default(),
        parallelism: 4,
    };
    rt.block_on(label_dataset(samples.iter().cloned(), run, &mut writer)).unwrap().skipped
}

fn crash_resume() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { native: ImageDims { width: 1024, height: 96 }, images: 2, ..SynthConfig::new(30, synth::default_mix(), 9) };
    let out = synth::simulate(&cfg, &ResolutionMenu::default_menu(), &dir.path().join("data")).unwrap();
    let samples = store::load_all(&out.samples).unwrap();
    let vlm = CountingVlm { inner: SimulatedVlm::new(SimulatedVlmSpec::load(&out.spec).unwrap()), calls: AtomicUsize::new(0) };

    let reference: PathBuf = dir.path().join("reference.jsonl");
    label_into(&reference, &samples, &vlm);
    let full = store::load_all(&reference).unwrap();
    let text = std::fs::read_to_string(&reference).unwrap();
    let lines: Vec<&str> = text.lines().collect();

    // twelve complete records, then a write cut off mid-line
    let kept = 12;
    let crashed = dir.path().join("crashed.jsonl");
    let mut partial = lines[..kept].join("\n") + "\n";
    partial.push_str(&lines[kept][..lines[kept].len() / 2]);
    std::fs::write(&crashed, partial).unwrap();

    let mut reader = store::load(&crashed).unwrap();
    let recovered = reader.by_ref().filter(|r| r.is_ok()).count();
    let truncated = reader.truncated_tail();
    let expected_calls: usize = full[kept..].iter().map(|r| r.rollout.as_ref().unwrap().steps.len()).sum();

    vlm.calls.store(0, Ordering::Relaxed);
    let skipped = label_into(&crashed, &samples, &vlm);
    let calls = vlm.calls.load(Ordering::Relaxed);
    let resumed = store::load_all(&crashed).unwrap();
    let labels = |rs: &[SampleRecord]| rs.iter().map(|r| (r.id.clone(), r.label)).collect::<BTreeMap<_, _>>();
    let whole_lines = std::fs::read_to_string(&crashed).unwrap().ends_with('\n');

    let pass = recovered == kept
        && truncated
        && skipped == kept
        && calls == expected_calls
        && resumed.len() == samples.len()
        && labels(&resumed) == labels(&full)
        && whole_lines;
    let detail = format!(
        "recovered {recovered}, truncated tail {truncated}, skipped {skipped}, {calls}/{expected_calls} model calls, {} records after resume",
        resumed.len()
    );
    (pass, detail)
}
