use std::path::Path;
use std::process::{Command, Output};

use aif::bench::LatencyReport;
use aif::config::AifConfig;
use aif::features::{load_store, random_update_events};
use aif::model::ModelParams;
use aif::nearline::N2OIndexTable;
use aif::pipeline::TraceEntry;

fn aif(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aif")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = aif(args);
    assert!(
        out.status.success(),
        "aif {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn end_to_end_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = AifConfig::small();
    std::fs::write(d.join("aif.toml"), cfg.to_text()).unwrap();
    let config = d.join("aif.toml");

    ok(&["gen-store", "--config", p(&config), "--out", p(&d.join("store.bin"))]);
    ok(&["gen-trace", "--users", "8", "--requests", "15", "--seed", "3", "--out", p(&d.join("trace.jsonl"))]);
    let trace = std::fs::read_to_string(d.join("trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 15);

    for pipeline in ["sequential", "aif"] {
        let out = d.join(format!("{pipeline}.csv"));
        let stdout = ok(&[
            "bench", "--pipeline", pipeline, "--trace", p(&d.join("trace.jsonl")), "--mode", "virtual",
            "--config", p(&config), "--store", p(&d.join("store.bin")), "--out", p(&out),
        ]);
        assert!(stdout.contains("avgRT"));
        let report = LatencyReport::parse(&std::fs::read_to_string(&out).unwrap()).unwrap();
        assert_eq!(report.requests, 15);
        assert!(report.max_qps > 0.0);
    }
    let seq = LatencyReport::parse(&std::fs::read_to_string(d.join("sequential.csv")).unwrap()).unwrap();
    let aif_r = LatencyReport::parse(&std::fs::read_to_string(d.join("aif.csv")).unwrap()).unwrap();
    assert!(aif_r.avg_rt_ms < seq.avg_rt_ms);

    let verify = ok(&[
        "verify", "--trace", p(&d.join("trace.jsonl")), "--config", p(&config), "--out", p(&d.join("verify.csv")),
    ]);
    assert!(verify.starts_with("PASS"));
    let csv = std::fs::read_to_string(d.join("verify.csv")).unwrap();
    assert!(csv.starts_with("request_id,max_abs_diff,rank_agreement\n"));
    assert_eq!(csv.lines().count(), 16);
}

#[test]
fn failed_verification_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("aif.toml"), AifConfig::small().to_text()).unwrap();
    ok(&["gen-trace", "--users", "8", "--requests", "2", "--out", p(&d.join("t.jsonl"))]);
    let out = aif(&[
        "verify", "--trace", p(&d.join("t.jsonl")), "--config", p(&d.join("aif.toml")), "--tolerance=-1",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("FAIL"));
}

#[test]
fn gen_trace_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for name in ["a", "b"] {
        ok(&["gen-trace", "--users", "5", "--requests", "40", "--seed", "11", "--out", p(&d.join(name))]);
    }
    ok(&["gen-trace", "--users", "5", "--requests", "1", "--seed", "11", "--out", p(&d.join("one"))]);
    assert_eq!(std::fs::read(d.join("a")).unwrap(), std::fs::read(d.join("b")).unwrap());
    assert_eq!(std::fs::read_to_string(d.join("one")).unwrap().lines().count(), 1);
}

#[test]
fn lsh_calibrate_writes_the_curve() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("curve.csv");
    ok(&["lsh-calibrate", "--dim", "64", "--pairs", "2000", "--out", p(&out)]);
    let text = std::fs::read_to_string(out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("theta_lo,theta_hi,pairs,mean_theta,mean_similarity,theory,abs_error"));
    assert_eq!(lines.count(), 20);
}

#[test]
fn n2o_apply_matches_rebuild() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = AifConfig::small();
    let config = d.join("aif.toml");
    std::fs::write(&config, cfg.to_text()).unwrap();
    ok(&["gen-store", "--config", p(&config), "--out", p(&d.join("store.bin"))]);
    ok(&["n2o", "rebuild", "--store", p(&d.join("store.bin")), "--config", p(&config), "--out", p(&d.join("t0.n2o"))]);

    let store = load_store(d.join("store.bin"), &cfg).unwrap();
    let events: Vec<TraceEntry> = random_update_events(&store, 20, 4).into_iter().map(TraceEntry::Update).collect();
    TraceEntry::write_jsonl(&events, std::fs::File::create(d.join("events.jsonl")).unwrap()).unwrap();

    ok(&[
        "n2o", "apply", "--store", p(&d.join("store.bin")), "--table", p(&d.join("t0.n2o")),
        "--events", p(&d.join("events.jsonl")), "--config", p(&config), "--out", p(&d.join("t1.n2o")),
        "--store-out", p(&d.join("store1.bin")),
    ]);
    ok(&["n2o", "rebuild", "--store", p(&d.join("store1.bin")), "--config", p(&config), "--out", p(&d.join("full.n2o"))]);

    let v = ModelParams::init(&cfg, 1).version;
    let applied = N2OIndexTable::load(d.join("t1.n2o"), 0, v).unwrap();
    let full = N2OIndexTable::load(d.join("full.n2o"), 0, v).unwrap();
    assert!(applied.same_entries(&full));
    assert_eq!(std::fs::read(d.join("t1.n2o")).unwrap(), std::fs::read(d.join("full.n2o")).unwrap());
}

#[test]
fn bad_input_is_reported() {
    let out = aif(&["bench", "--trace", "/nonexistent/trace", "--out", "/tmp/x"]);
    assert!(!out.status.success());
    let out = aif(&["bench", "--pipeline", "turbo", "--trace", "t", "--out", "o"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("turbo"));
}
