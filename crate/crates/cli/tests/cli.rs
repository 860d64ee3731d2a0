use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn ctxlens(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctxlens"))
        .args(args)
        .current_dir(dir)
        .env_remove("CTXLENS_BACKEND_URL")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = ctxlens(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap()
}

/// 100 marker sequences, 80 of them with the marker inside the last 32 tokens.
fn planted(dir: &Path) {
    ok(dir, &["--seed", "11", "--out", ".", "synth", "planted", "--count", "100", "--seq-len", "400"]);
}

#[test]
fn mcl_share_matches_planted_split() {
    let tmp = TempDir::new().unwrap();
    planted(tmp.path());
    ok(tmp.path(), &["--backend", "mock:marker", "--out", "run", "mcl", "--samples", "samples.jsonl"]);
    let s = json(tmp.path().join("run/summary.json"));
    assert_eq!(s["schema"], "ctxlens/1");
    assert_eq!(s["counts"]["resolved"], 100);
    assert_eq!(s["share_le_32"], 0.8);
    assert_eq!(fs::read_to_string(tmp.path().join("run/probes.jsonl")).unwrap().lines().count(), 100);
    let csv = fs::read_to_string(tmp.path().join("run/histogram.csv")).unwrap();
    assert!(csv.starts_with("ell,count\n32,80\n"), "{csv}");
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    planted(dir);
    fs::write(
        dir.join("prompts.jsonl"),
        "{\"id\":\"a\",\"prompt\":\"the cat sat on the mat\",\"gold\":\"the mat\"}\n{\"id\":\"b\",\"tokens\":[5,6,7,8]}\n",
    )
    .unwrap();
    for out in ["r1", "r2"] {
        ok(dir, &["--backend", "mock:marker", "--out", out, "--parallel", "3", "mcl", "--samples", "samples.jsonl"]);
        ok(
            dir,
            &["--backend", "mock:marker", "--out", out, "--oracle", "planted", "detect", "--samples", "samples.jsonl"],
        );
        ok(
            dir,
            &[
                "--backend", "mock:marker", "--out", out, "--seed", "5", "--method", "vanilla,cad,taboo", "--lambda",
                "3", "--n-samples", "3", "--max-new", "6", "generate", "--prompts", "prompts.jsonl",
            ],
        );
    }
    for f in ["probes.jsonl", "histogram.csv", "summary.json", "detect.jsonl", "generations.jsonl", "scores.json"] {
        let a = fs::read(dir.join("r1").join(f)).unwrap();
        let b = fs::read(dir.join("r2").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between runs");
    }
}

#[test]
fn parallelism_does_not_change_results() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    planted(dir);
    for (out, p) in [("p1", "1"), ("p8", "8")] {
        ok(dir, &["--backend", "mock:marker", "--out", out, "--parallel", p, "mcl", "--samples", "samples.jsonl"]);
    }
    assert_eq!(
        fs::read(dir.join("p1/probes.jsonl")).unwrap(),
        fs::read(dir.join("p8/probes.jsonl")).unwrap()
    );
}

#[test]
fn damcl_sweep_writes_one_histogram_per_combination() {
    let tmp = TempDir::new().unwrap();
    planted(tmp.path());
    ok(
        tmp.path(),
        &[
            "--backend", "mock:marker", "--out", "run", "--strategy", "greedy,nucleus:0.9", "--epsilon", "0.1,0.2",
            "damcl", "--samples", "samples.jsonl",
        ],
    );
    let hists: Vec<_> = fs::read_dir(tmp.path().join("run"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("histogram-"))
        .collect();
    assert_eq!(hists.len(), 4, "{hists:?}");
    let s = json(tmp.path().join("run/summary.json"));
    assert_eq!(s["runs"].as_array().unwrap().len(), 4);
}

#[test]
fn damcl_rejects_unknown_metric() {
    let tmp = TempDir::new().unwrap();
    planted(tmp.path());
    let out = ctxlens(
        tmp.path(),
        &["--backend", "mock:marker", "--metric", "cosine", "damcl", "--samples", "samples.jsonl"],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn detect_separates_planted_classes() {
    let tmp = TempDir::new().unwrap();
    planted(tmp.path());
    ok(
        tmp.path(),
        &[
            "--backend", "mock:marker", "--out", "run", "--oracle", "planted", "--sweep", "0.3,0.6", "detect",
            "--samples", "samples.jsonl",
        ],
    );
    let s = json(tmp.path().join("run/summary.json"));
    assert_eq!(s["auc"], 1.0);
    assert_eq!(s["accuracy"], 1.0);
    assert_eq!(s["confusion"]["tp"], 20);
    assert_eq!(s["confusion"]["tn"], 80);
    let sweep = fs::read_to_string(tmp.path().join("run/tau_sweep.csv")).unwrap();
    assert_eq!(sweep.lines().next(), Some("tau,tpr,fpr,accuracy"));
    assert_eq!(sweep.lines().count(), 3);
}

#[test]
fn detect_with_mcl_oracle_agrees_on_marker_data() {
    let tmp = TempDir::new().unwrap();
    planted(tmp.path());
    ok(tmp.path(), &["--backend", "mock:marker", "--out", "run", "--oracle", "mcl", "detect", "--samples", "samples.jsonl"]);
    let s = json(tmp.path().join("run/summary.json"));
    assert_eq!(s["auc"], 1.0);
}

#[test]
fn planted_oracle_needs_labels() {
    let tmp = TempDir::new().unwrap();
    fs::write(
        tmp.path().join("s.jsonl"),
        "{\"seq_id\":\"x\",\"doc_id\":\"d\",\"tokens\":[5,6,7],\"next_token\":5,\"bucket\":[1,4]}\n",
    )
    .unwrap();
    let out = ctxlens(tmp.path(), &["--backend", "mock:marker", "--oracle", "planted", "detect", "--samples", "s.jsonl"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn single_class_detection_reports_null_auc() {
    let tmp = TempDir::new().unwrap();
    ok(
        tmp.path(),
        &["--out", ".", "synth", "planted", "--count", "10", "--seq-len", "200", "--short-share", "1.0"],
    );
    ok(
        tmp.path(),
        &["--backend", "mock:marker", "--out", "run", "--oracle", "planted", "detect", "--samples", "samples.jsonl"],
    );
    let s = json(tmp.path().join("run/summary.json"));
    assert!(s["auc"].is_null());
    assert_eq!(s["warnings"].as_array().unwrap().len(), 1);
}

#[test]
fn infinite_gamma_taboo_matches_vanilla() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    // prompt long enough that the short suffix differs from the full context
    let words = vec!["cat"; 40].join(" ");
    fs::write(dir.join("p.jsonl"), format!("{{\"id\":\"a\",\"prompt\":\"{words}\"}}\n")).unwrap();
    let common = ["--backend", "mock:marker", "--seed", "9", "--n-samples", "4", "--max-new", "8"];
    let mut vanilla = common.to_vec();
    vanilla.extend(["--out", "v", "--method", "vanilla", "generate", "--prompts", "p.jsonl"]);
    ok(dir, &vanilla);
    let mut taboo = common.to_vec();
    taboo.extend(["--out", "t", "--method", "taboo", "--lambda", "5", "--gamma", "inf", "generate", "--prompts", "p.jsonl"]);
    ok(dir, &taboo);
    let tokens = |p: &str| -> Vec<Value> {
        fs::read_to_string(dir.join(p))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str::<Value>(l).unwrap()["tokens"].clone())
            .collect()
    };
    assert_eq!(tokens("v/generations.jsonl"), tokens("t/generations.jsonl"));
}

#[test]
fn taboo_without_lambda_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("p.jsonl"), "{\"id\":\"a\",\"tokens\":[5,6]}\n").unwrap();
    let out = ctxlens(tmp.path(), &["--backend", "mock:marker", "--method", "taboo", "generate", "--prompts", "p.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("empty.jsonl"), "").unwrap();
    let code = |args: &[&str]| ctxlens(dir, args).status.code();
    assert_eq!(code(&["--backend", "mock:marker", "mcl", "--samples", "empty.jsonl"]), Some(3));
    assert_eq!(code(&["--backend", "mock:marker", "sample", "--corpus", "empty.jsonl"]), Some(3));
    assert_eq!(code(&["mcl", "--samples", "empty.jsonl"]), Some(1));
    assert_eq!(code(&["--no-such-flag"]), Some(1));
    assert_eq!(code(&["--version"]), Some(0));
    planted(dir);
    assert_eq!(
        code(&["--backend", "http:http://127.0.0.1:9", "--timeout-ms", "100", "mcl", "--samples", "samples.jsonl"]),
        Some(2)
    );
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    planted(dir);
    fs::write(dir.join("c.toml"), "backend = \"mock:marker\"\nout = \"from-config\"\ndelta = 0.5\n").unwrap();
    ok(dir, &["--config", "c.toml", "--delta", "0.3", "mcl", "--samples", "samples.jsonl"]);
    let s = json(dir.join("from-config/summary.json"));
    assert_eq!(s["delta"], 0.3);
    fs::write(dir.join("bad.toml"), "no_such_knob = 1\n").unwrap();
    assert_eq!(ctxlens(dir, &["--config", "bad.toml", "bench"]).status.code(), Some(1));
}

#[test]
fn bench_overhead_shrinks_with_length() {
    let tmp = TempDir::new().unwrap();
    ok(
        tmp.path(),
        &[
            "--backend", "mock:marker", "--latency-ms", "1", "--latency-per-token-ms", "0.02", "--lengths", "64,2048",
            "--repeats", "3", "--out", "run", "bench",
        ],
    );
    let s = json(tmp.path().join("run/summary.json"));
    let rows = s["rows"].as_array().unwrap();
    let ratio = |i: usize| rows[i]["ratio"].as_f64().unwrap();
    assert!(ratio(1) < ratio(0), "{rows:?}");
    assert!(ratio(1) < 0.5, "{rows:?}");
    let csv = fs::read_to_string(tmp.path().join("run/bench.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("len,full_ms,extra_ms,ratio"));
}

/// With a fixed per-call latency the short call costs as much as the full
/// one, so the overhead ratio sits near one.
#[test]
fn bench_fixed_latency_overhead_is_one_short_call() {
    let tmp = TempDir::new().unwrap();
    ok(
        tmp.path(),
        &["--backend", "mock:marker", "--latency-ms", "20", "--lengths", "256", "--repeats", "3", "--out", "run", "bench"],
    );
    let s = json(tmp.path().join("run/summary.json"));
    let ratio = s["rows"][0]["ratio"].as_f64().unwrap();
    assert!((ratio - 1.0).abs() <= 0.1, "ratio {ratio}");
}

#[test]
fn bench_rejects_empty_schedule() {
    let tmp = TempDir::new().unwrap();
    let out = ctxlens(tmp.path(), &["--backend", "mock:marker", "--lengths", ",", "bench"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn generate_writes_one_record_per_sample_with_reports() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("p.jsonl"), "{\"id\":\"a\",\"prompt\":\"the cat\",\"gold\":\"the cat\"}\n").unwrap();
    ok(
        tmp.path(),
        &["--backend", "mock:marker", "--out", "run", "--max-new", "3", "generate", "--prompts", "p.jsonl"],
    );
    let count = |f: &str| fs::read_to_string(tmp.path().join("run").join(f)).unwrap().lines().count();
    assert_eq!(count("generations.jsonl"), 5);
    assert_eq!(count("boost_reports.jsonl"), 5);
    let scores = json(tmp.path().join("run/scores.json"));
    assert!(scores["methods"]["vanilla"]["average"]["f1"].is_number());
}

#[test]
fn score_takes_best_reference() {
    let tmp = TempDir::new().unwrap();
    fs::write(
        tmp.path().join("in.jsonl"),
        "{\"id\":\"q\",\"pred\":\"Lyon\",\"gold\":[\"paris\",\"lyon\"]}\n{\"id\":\"q\",\"pred\":\"nice\",\"gold\":\"paris\"}\n",
    )
    .unwrap();
    ok(tmp.path(), &["--out", "run", "score", "--input", "in.jsonl"]);
    let s = json(tmp.path().join("run/summary.json"));
    assert_eq!(s["average"]["f1"], 50.0);
    assert_eq!(s["best_per_example"]["f1"], 100.0);
    assert_eq!(s["examples"], 1);
}

#[test]
fn sample_draws_buckets_and_caches_tokens() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let long = vec!["the cat sat on the mat"; 200].join(" ");
    fs::write(
        dir.join("corpus.jsonl"),
        format!("{{\"id\":\"d1\",\"text\":\"{long}\"}}\nnot json\n{{\"id\":\"d2\",\"text\":\"tiny\"}}\n"),
    )
    .unwrap();
    let args = [
        "--backend", "mock:marker", "--out", "run", "sample", "--corpus", "corpus.jsonl", "--n-per-bucket", "3",
        "--token-cache", "cache",
    ];
    ok(dir, &args);
    let first = fs::read(dir.join("run/samples.jsonl")).unwrap();
    assert_eq!(String::from_utf8_lossy(&first).lines().count(), 30);
    assert_eq!(fs::read_dir(dir.join("cache")).unwrap().count(), 2);
    ok(dir, &args);
    assert_eq!(fs::read(dir.join("run/samples.jsonl")).unwrap(), first);
    let s = json(dir.join("run/sample_summary.json"));
    assert_eq!(s["line_errors"].as_array().unwrap().len(), 1);
}

#[test]
fn synthetic_generators_emit_answers() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    ok(dir, &["--backend", "mock:marker", "--out", "n", "synth", "niah", "--count", "4", "--total-len", "300"]);
    ok(dir, &["--backend", "mock:marker", "--out", "l", "synth", "longeval", "--count", "4", "--lines", "12"]);
    for f in ["n/samples.jsonl", "l/samples.jsonl"] {
        let text = fs::read_to_string(dir.join(f)).unwrap();
        assert_eq!(text.lines().count(), 4);
        for line in text.lines() {
            let v: Value = serde_json::from_str(line).unwrap();
            assert!(v["answer"].as_str().unwrap().chars().all(|c| c.is_ascii_digit()));
            assert!(v["label"] == "short" || v["label"] == "long");
        }
    }
}
