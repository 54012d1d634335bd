use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use gdr_core::denoiser::{init_model, load_model, Arch, Dims, Prediction};
use gdr_core::diffusion::TrainConfig;
use gdr_core::latentdata::load_corpus;
use gdr_core::numerics::cosine;
use serde_json::{json, Value};
use tempfile::TempDir;

fn gdr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gdr"))
        .args(args)
        .env_remove("GDR_SEED")
        .output()
        .expect("gdr runs")
}

fn ok(args: &[&str]) -> Value {
    let out = gdr(args);
    assert!(
        out.status.success(),
        "gdr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn code(args: &[&str]) -> i32 {
    gdr(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A shared default corpus plus a few-step model, built once per test binary.
struct Fixture {
    _dir: TempDir,
    corpus: PathBuf,
    quick_model: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let corpus = dir.path().join("corpus.gdrl");
        ok(&[
            "gen-corpus",
            "--grid",
            "4x4",
            "--items",
            "16",
            "--seed",
            "7",
            "-o",
            s(&corpus),
        ]);
        let quick_model = dir.path().join("quick.gdrm");
        ok(&[
            "train",
            "--corpus",
            s(&corpus),
            "--hidden",
            "8",
            "--steps",
            "60",
            "--warmup",
            "10",
            "--eval-every",
            "0",
            "-o",
            s(&quick_model),
        ]);
        Fixture {
            _dir: dir,
            corpus,
            quick_model,
        }
    })
}

/// Desk-preset model trained through the CLI, cached by config digest
/// (training is deterministic, so the cache only saves time).
fn desk_model() -> &'static PathBuf {
    static M: OnceLock<PathBuf> = OnceLock::new();
    M.get_or_init(|| {
        let path =
            PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("cli-desk-{}.gdrm", TrainConfig::desk().digest()));
        if load_model(&path).is_err() {
            ok(&[
                "train",
                "--corpus",
                s(&fixture().corpus),
                "--preset",
                "desk",
                "-o",
                s(&path),
            ]);
        }
        path
    })
}

fn instrument_fraction(ranked: &Value, inst: &str) -> f64 {
    let results = ranked["results"].as_array().unwrap();
    results.iter().filter(|h| h["labels"]["instrument"] == inst).count() as f64 / results.len() as f64
}

#[test]
fn gen_corpus_counts_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a.gdrl"), dir.path().join("b.gdrl"));
    let summary = ok(&[
        "gen-corpus",
        "--grid",
        "4x4",
        "--items",
        "16",
        "--seed",
        "7",
        "-o",
        s(&a),
    ]);
    ok(&[
        "gen-corpus",
        "--grid",
        "4x4",
        "--items",
        "16",
        "--seed",
        "7",
        "-o",
        s(&b),
    ]);
    assert_eq!(summary["items"], 256);
    assert_eq!(load_corpus(&a).unwrap().len(), 256);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let labels: Value = serde_json::from_slice(&std::fs::read(dir.path().join("a.gdrl.labels.json")).unwrap()).unwrap();
    assert_eq!(labels.as_array().unwrap().len(), 256);
    assert!(labels[0]["labels"]["genre"].is_string());
    assert!(dir.path().join("a.gdrl.run.json").exists());
}

#[test]
fn gen_corpus_rejects_bad_flags() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&["gen-corpus", "--grid", "4x4"]), 2);
    assert_eq!(
        code(&["gen-corpus", "--grid", "4by4", "-o", s(&dir.path().join("x"))]),
        2
    );
    assert_eq!(
        code(&["gen-corpus", "--noise-scale", "2", "-o", s(&dir.path().join("x"))]),
        2
    );
    assert_eq!(
        code(&["gen-corpus", "--shift-scale", "2", "-o", s(&dir.path().join("x"))]),
        2
    );
    assert!(!dir.path().join("x.run.json").exists());
}

#[test]
fn gdr_seed_env_sets_the_default_seed() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a.gdrl"), dir.path().join("b.gdrl"));
    let run = |out: &Path, env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_gdr"));
        c.args(["gen-corpus", "--items", "2", "-o", s(out)])
            .env_remove("GDR_SEED");
        if let Some(v) = env {
            c.env("GDR_SEED", v);
        }
        assert!(c.output().unwrap().status.success());
    };
    run(&a, Some("11"));
    run(&b, None);
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let snap: Value = serde_json::from_slice(&std::fs::read(dir.path().join("a.gdrl.run.json")).unwrap()).unwrap();
    assert_eq!(snap["run"]["seed"], 11);
}

#[test]
fn train_reports_file_errors_and_writes_its_outputs() {
    let dir = TempDir::new().unwrap();
    assert_eq!(
        code(&["train", "--corpus", s(&dir.path().join("missing.gdrl")), "-o", "m.gdrm"]),
        3
    );

    let f = fixture();
    let log = std::fs::read_to_string(sidecar(&f.quick_model, ".log.jsonl")).unwrap();
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["step", "loss", "lr", "split"] {
        assert!(!first[key].is_null(), "log line lacks {key}");
    }
    let report: Value =
        serde_json::from_slice(&std::fs::read(sidecar(&f.quick_model, ".report.json")).unwrap()).unwrap();
    assert_eq!(report["steps_run"], 60);
}

fn sidecar(p: &Path, suffix: &str) -> PathBuf {
    PathBuf::from(format!("{}{suffix}", p.display()))
}

#[test]
fn train_dispatches_objective_and_masking() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let reg = dir.path().join("reg.gdrm");
    let common = [
        "--corpus",
        s(&f.corpus),
        "--hidden",
        "8",
        "--steps",
        "40",
        "--warmup",
        "5",
        "--eval-every",
        "0",
    ];
    let mut args = vec!["train", "--objective", "regression", "-o", s(&reg)];
    args.extend(common);
    ok(&args);
    let m = load_model(&reg).unwrap();
    assert_eq!(m.meta().prediction, Prediction::Regression);
    assert_eq!(m.dims().mask_len, 16);

    // with every conditioning masked the key projection only sees the
    // (zero) null token, so it is merely shrunk by weight decay
    let unc = dir.path().join("unc.gdrm");
    let mut args = vec!["train", "--cond-mask-prob", "1.0", "-o", s(&unc)];
    args.extend(common);
    ok(&args);
    let trained = load_model(&unc).unwrap();
    let init = init_model(Arch::SeqAttn, Dims::new(32, 16, 8), 0).unwrap();
    let cos = |seg: &str| cosine(trained.segment(seg).unwrap(), init.segment(seg).unwrap()).unwrap();
    assert!(1.0 - cos("attn.k") < 1e-9, "attn.k cosine {}", cos("attn.k"));
    assert!(1.0 - cos("out.w") > 1e-6, "out.w cosine {}", cos("out.w"));
}

#[test]
fn query_shape_and_seed_determinism() {
    let f = fixture();
    let args = [
        "query",
        "--model",
        s(&f.quick_model),
        "--corpus",
        s(&f.corpus),
        "--cond",
        "g2,i1",
        "--nq",
        "5",
        "--w",
        "2.0",
        "--k",
        "10",
        "--seed",
        "3",
    ];
    let a = ok(&args);
    let results = a["results"].as_array().unwrap();
    assert_eq!(results.len(), 10);
    assert_eq!(results[0]["rank"], 1);
    assert_eq!(a["query"]["w"], 2.0);
    assert_eq!(
        gdr(&args).stdout,
        gdr(&args).stdout,
        "fixed seed must give identical output"
    );
}

#[test]
fn query_flag_conflicts_are_usage_errors() {
    let f = fixture();
    let base = ["query", "--model", s(&f.quick_model), "--corpus", s(&f.corpus)];
    let with = |extra: &[&str]| {
        let mut v = base.to_vec();
        v.extend_from_slice(extra);
        code(&v)
    };
    assert_eq!(with(&["--cond", "g1", "--invert-steps", "10"]), 2);
    assert_eq!(with(&[]), 2);
    assert_eq!(with(&["--cond", "g1", "--cond-item", "g0-i0-000"]), 2);
    assert_eq!(with(&["--cond", "g9"]), 2);
    assert_eq!(with(&["--cond", "g1", "--k", "0"]), 2);
    assert_eq!(with(&["--cond", "g1", "--invert-from", "nope"]), 2);
    assert_eq!(
        with(&["--cond", "g1", "--invert-from", "g0-i0-000", "--invert-steps", "51"]),
        2
    );
    assert_eq!(with(&["--cond", "g1", "--diffusion-steps", "40"]), 2);
    assert_eq!(with(&["--cond", "g1", "--align", "/nonexistent/t.json"]), 3);
}

#[test]
fn query_inversion_reports_retention() {
    let f = fixture();
    let v = ok(&[
        "query",
        "--model",
        s(&f.quick_model),
        "--corpus",
        s(&f.corpus),
        "--cond",
        "g0,i1",
        "--invert-from",
        "g0-i0-000",
        "--invert-steps",
        "5",
        "--k",
        "4",
    ]);
    assert_eq!(v["results"].as_array().unwrap().len(), 4);
    let r = v["retention"].as_f64().unwrap();
    assert!((-1.0..=1.0).contains(&r));
    // cond-item uses the stored conditioning
    let v = ok(&[
        "query",
        "--model",
        s(&f.quick_model),
        "--corpus",
        s(&f.corpus),
        "--cond-item",
        "g3-i2-001",
        "--k",
        "2",
    ]);
    assert!(v["retention"].is_null());
}

#[test]
fn negative_prompt_lowers_the_negated_instrument_on_a_trained_model() {
    let f = fixture();
    let model = desk_model();
    let (mut plain, mut neg) = (0.0, 0.0);
    let mut pairs = 0;
    for g in 0..4 {
        for i in 0..4 {
            for seed in [0, 1] {
                let seed = (seed + 10 * pairs).to_string();
                let cond = format!("g{g}");
                let inst = format!("i{i}");
                let base = [
                    "query",
                    "--model",
                    s(model),
                    "--corpus",
                    s(&f.corpus),
                    "--cond",
                    &cond,
                    "--seed",
                    &seed,
                ];
                let p = ok(&base);
                let mut with_neg = base.to_vec();
                with_neg.extend(["--negative", &inst]);
                let n = ok(&with_neg);
                plain += instrument_fraction(&p, &inst);
                neg += instrument_fraction(&n, &inst);
                pairs += 1;
            }
        }
    }
    assert!(pairs >= 30);
    assert!(
        neg < plain,
        "negated fraction {neg} vs plain {plain} over {pairs} pairs"
    );
}

#[test]
fn eval_on_own_keys_is_perfect() {
    let f = fixture();
    let v = ok(&["eval", "--corpus", s(&f.corpus), "--queries", "keys", "--perm", "50"]);
    assert_eq!(v["metrics"]["paired"]["recall_at"]["1"], 1.0);
    assert_eq!(v["metrics"]["cell_recall"], 1.0);
    assert!(v["diversity"].is_null());
    assert_eq!(
        code(&["eval", "--corpus", s(&f.corpus)]),
        2,
        "ghost queries need a model"
    );
}

/// Checks the documented eval output schema.
fn assert_eval_schema(v: &Value) {
    let obj = v.as_object().unwrap();
    assert_eq!(obj.keys().collect::<Vec<_>>(), ["diversity", "metrics", "settings"]);
    let settings = &v["settings"];
    for key in ["queries", "split"] {
        assert!(settings[key].is_string(), "settings.{key}");
    }
    for key in ["n_q", "k", "seed", "perm"] {
        assert!(settings[key].is_u64(), "settings.{key}");
    }
    assert!(settings["w"].is_f64() && settings["aligned"].is_boolean());
    let m = &v["metrics"];
    assert!(m["n_queries"].is_u64());
    for k in ["1", "5", "10"] {
        assert!(m["paired"]["recall_at"][k].is_f64(), "recall_at.{k}");
    }
    assert!(m["paired"]["median_rank_pct"].is_f64());
    for key in ["cell_recall", "chance", "p_value", "oracle_accuracy", "fd_to_corpus"] {
        assert!(m[key].is_f64() || m[key].is_null(), "metrics.{key}");
    }
    let d = &v["diversity"];
    if !d.is_null() {
        for key in ["mics", "vendi", "nvendi", "minvs", "minvs_normalized"] {
            assert!(d[key].is_f64(), "diversity.{key}");
        }
        assert!(d["cluster_count"].is_u64() && d["cluster_size"].is_u64());
    }
    let text = serde_json::to_string(v).unwrap();
    assert!(!text.contains('/'), "eval output must not embed paths");
}

#[test]
fn eval_output_follows_the_schema() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("eval.json");
    let v = ok(&[
        "eval",
        "--model",
        s(&f.quick_model),
        "--corpus",
        s(&f.corpus),
        "--perm",
        "20",
        "--nq",
        "2",
        "-o",
        s(&out),
    ]);
    assert_eval_schema(&v);
    assert!(!v["diversity"].is_null());
    let file: Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(file, v);
    assert_eval_schema(&ok(&[
        "eval",
        "--corpus",
        s(&f.corpus),
        "--queries",
        "keys",
        "--perm",
        "5",
    ]));
}

#[test]
fn alignment_helps_on_a_shifted_corpus() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let shifted = dir.path().join("shifted.gdrl");
    ok(&["gen-corpus", "--shift", "-o", s(&shifted)]);
    let t = dir.path().join("t.json");
    let summary = ok(&[
        "align",
        "--model",
        s(desk_model()),
        "--corpus",
        s(&shifted),
        "-o",
        s(&t),
    ]);
    assert!(summary["fd_aligned"].as_f64().unwrap() < summary["fd_raw"].as_f64().unwrap());

    let base = [
        "eval",
        "--model",
        s(desk_model()),
        "--corpus",
        s(&shifted),
        "--perm",
        "20",
    ];
    let raw = ok(&base);
    let mut with = base.to_vec();
    with.extend(["--align", s(&t)]);
    let aligned = ok(&with);
    let cell = |v: &Value| v["metrics"]["cell_recall"].as_f64().unwrap();
    let fd = |v: &Value| v["metrics"]["fd_to_corpus"].as_f64().unwrap();
    assert!(
        cell(&aligned) >= cell(&raw),
        "R@5 aligned {} raw {}",
        cell(&aligned),
        cell(&raw)
    );
    assert!(fd(&aligned) < fd(&raw), "FD aligned {} raw {}", fd(&aligned), fd(&raw));
    assert!(
        aligned["metrics"]["oracle_accuracy"].is_null(),
        "shifted corpora have no oracle"
    );
}

#[test]
fn gradcheck_passes_by_default_and_names_the_worst_segment() {
    let out = gdr(&["gradcheck"]);
    assert_eq!(out.status.code(), Some(0));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["passed"], true);
    let reports = v["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 2);
    for r in reports {
        let worst = r["worst_segment"].as_str().unwrap();
        assert!(r["per_segment"]
            .as_array()
            .unwrap()
            .iter()
            .any(|s| s["segment"] == worst));
    }

    let out = gdr(&["gradcheck", "--tolerance", "0"]);
    assert_eq!(out.status.code(), Some(4));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["passed"], false);
    let stderr = String::from_utf8_lossy(&out.stderr);
    let worst = v["reports"][0]["worst_segment"].as_str().unwrap();
    assert!(stderr.contains(worst), "stderr names the segment: {stderr}");

    let pretty = gdr(&["gradcheck", "--pretty"]);
    assert!(String::from_utf8_lossy(&pretty.stdout).starts_with("PASS"));
}

fn files_in(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| !p.to_string_lossy().ends_with(".run.json"))
        .collect();
    v.sort();
    v
}

#[test]
fn every_command_replays_byte_identically() {
    let f = fixture();
    let first = TempDir::new().unwrap();
    let p = |n: &str| first.path().join(n);
    let runs: Vec<Vec<String>> = vec![
        vec!["gen-corpus", "--items", "4", "--shift", "-o", s(&p("c.gdrl"))],
        vec![
            "train",
            "--corpus",
            s(&f.corpus),
            "--hidden",
            "6",
            "--steps",
            "30",
            "--warmup",
            "3",
            "--eval-every",
            "10",
            "-o",
            s(&p("m.gdrm")),
        ],
        vec![
            "query",
            "--model",
            s(&f.quick_model),
            "--corpus",
            s(&f.corpus),
            "--cond",
            "g1",
            "--negative",
            "i2",
            "-o",
            s(&p("q.json")),
        ],
        vec![
            "query",
            "--model",
            s(&f.quick_model),
            "--corpus",
            s(&f.corpus),
            "--cond",
            "g1",
            "--invert-from",
            "g2-i2-003",
            "-o",
            s(&p("inv.json")),
        ],
        vec![
            "eval",
            "--model",
            s(&f.quick_model),
            "--corpus",
            s(&f.corpus),
            "--perm",
            "10",
            "--nq",
            "2",
            "-o",
            s(&p("e.json")),
        ],
        vec![
            "align",
            "--model",
            s(&f.quick_model),
            "--corpus",
            s(&f.corpus),
            "--nq",
            "1",
            "-o",
            s(&p("t.json")),
        ],
        vec!["gradcheck", "--hidden", "3", "-o", s(&p("g.json"))],
    ]
    .into_iter()
    .map(|r| r.into_iter().map(String::from).collect())
    .collect();
    for r in &runs {
        let args: Vec<&str> = r.iter().map(String::as_str).collect();
        ok(&args);
    }
    let second = TempDir::new().unwrap();
    for snap in std::fs::read_dir(first.path()).unwrap() {
        let snap = snap.unwrap().path();
        if snap.to_string_lossy().ends_with(".run.json") {
            let out = gdr(&["replay", s(&snap), "--out-dir", s(second.path())]);
            assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        }
    }
    let a = files_in(first.path());
    let b = files_in(second.path());
    assert_eq!(a.len(), 10);
    assert_eq!(
        a.iter().map(|p| p.file_name().unwrap()).collect::<Vec<_>>(),
        b.iter().map(|p| p.file_name().unwrap()).collect::<Vec<_>>()
    );
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(
            std::fs::read(x).unwrap(),
            std::fs::read(y).unwrap(),
            "{} differs on replay",
            x.display()
        );
    }
    assert_eq!(code(&["replay", s(&first.path().join("nope.run.json"))]), 3);
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn http(port: u16, method: &str, path: &str, body: Option<&Value>) -> (u16, Value) {
    let mut stream = TcpStream::connect(("127.0.0.1", port)).unwrap();
    let payload = body.map(|b| b.to_string()).unwrap_or_default();
    write!(
        stream,
        "{method} {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{payload}",
        payload.len()
    )
    .unwrap();
    let mut raw = String::new();
    stream.read_to_string(&mut raw).unwrap();
    let (head, body) = raw.split_once("\r\n\r\n").unwrap();
    let status = head.split_whitespace().nth(1).unwrap().parse().unwrap();
    // bodies may be chunked; the JSON object spans the first '{' to the last '}'
    let json = match (body.find('{'), body.rfind('}')) {
        (Some(a), Some(b)) => serde_json::from_str(&body[a..=b]).unwrap(),
        _ => Value::Null,
    };
    (status, json)
}

#[test]
fn served_session_replays_through_the_cli() {
    let f = fixture();
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let child = Command::new(env!("CARGO_BIN_EXE_gdr"))
        .args(["serve", "--port", &port.to_string()])
        .args(["--model", &format!("quick={}", s(&f.quick_model))])
        .args(["--corpus", &format!("synth={}", s(&f.corpus))])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let _server = Server(child);
    let started = Instant::now();
    while TcpStream::connect(("127.0.0.1", port)).is_err() {
        assert!(started.elapsed() < Duration::from_secs(30), "server did not start");
        std::thread::sleep(Duration::from_millis(50));
    }
    let (st, health) = http(port, "GET", "/health", None);
    assert_eq!((st, &health["models"]), (200, &json!(["quick"])));

    let (st, created) = http(
        port,
        "POST",
        "/sessions",
        Some(&json!({"corpus": "synth", "model": "quick", "seed": 4})),
    );
    assert_eq!(st, 201);
    let id = created["session_id"].as_str().unwrap();
    let steps = [
        ("query", json!({"cond": "g1,i2", "k": 6})),
        ("refine/negative", json!({"neg_cond": "i2"})),
        ("refine/invert", json!({"new_cond": "g1,i0", "k_steps": 12})),
    ];
    for (route, body) in steps {
        assert_eq!(
            http(port, "POST", &format!("/sessions/{id}/{route}"), Some(&body)).0,
            200
        );
    }
    let (_, snapshot) = http(port, "GET", &format!("/sessions/{id}"), None);
    assert_eq!(snapshot["history"].as_array().unwrap().len(), 3);

    let dir = TempDir::new().unwrap();
    let snap_path = dir.path().join("session.json");
    std::fs::write(&snap_path, snapshot.to_string()).unwrap();
    let replayed = ok(&[
        "query",
        "--model",
        s(&f.quick_model),
        "--corpus",
        s(&f.corpus),
        "--replay-session",
        s(&snap_path),
    ]);
    assert_eq!(replayed, snapshot["last_results"]);
}
