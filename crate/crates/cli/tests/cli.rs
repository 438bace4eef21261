use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const MODEL_CFG: &str = r#"{"dense_dim":8,"table_rows":[40,120,300],"embedding_dim":8,"bottom":[16,8],"top":[32,16,1]}"#;
const SEARCH_CFG: &str = r#"{"small_eval_size":1500,"calib_size":800,"small_full_gap_max":1.0,"max_skip_flops_ratio":0.5}"#;

fn lpq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lpq"))
        .args(args)
        .env("LPQ_LOG_LEVEL", "error")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn ok(args: &[&str]) -> Output {
    let o = lpq(args);
    assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.to_string_lossy().ends_with("manifest.json") {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Fixture {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        std::fs::write(root.join("model.json"), MODEL_CFG).unwrap();
        std::fs::write(root.join("search.json"), SEARCH_CFG).unwrap();
        Fixture { _tmp: tmp, root }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn model(&self, name: &str, fault: Option<&str>) -> PathBuf {
        let out = self.p(name);
        let cfg = self.p("model.json");
        let mut args = vec!["gen-model", "--config", s(&cfg), "--seed", "3", "--out", s(&out)];
        if let Some(f) = fault {
            args.extend(["--fault", f]);
        }
        ok(&args);
        out
    }

    fn data(&self, model: &Path, name: &str, n: &str, seed: &str) -> PathBuf {
        let out = self.p(name);
        ok(&["gen-data", "--model", s(model), "--n", n, "--seed", seed, "--out", s(&out)]);
        out
    }
}

#[test]
fn full_pipeline() {
    let f = Fixture::new();
    let m = f.model("fp32", None);
    let train = f.data(&m, "train.jsonl", "2000", "1");
    let eval = f.data(&m, "eval.jsonl", "2000", "2");
    let before = (dir_bytes(&m), std::fs::read(&train).unwrap(), std::fs::read(&eval).unwrap());

    let cal = f.p("calib.json");
    ok(&["calibrate", "--model", s(&m), "--data", s(&train), "--out", s(&cal)]);

    let scheme = f.p("scheme.json");
    let qm = f.p("q-search");
    let cfg = f.p("search.json");
    ok(&[
        "search", "--model", s(&m), "--calib", s(&train), "--eval", s(&eval), "--config", s(&cfg),
        "--out-scheme", s(&scheme), "--out-model", s(&qm),
    ]);
    assert!(qm.join("manifest.json").exists());
    assert!(f.p("scheme.json.log.jsonl").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(f.p("scheme.json.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "search");
    assert_eq!(manifest["exit_code"], 0);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);

    let q = f.p("q");
    ok(&["quantize", "--model", s(&m), "--scheme", s(&scheme), "--calib", s(&cal), "--out", s(&q)]);

    let self_eval = ok(&["eval", "--model-a", s(&m), "--model-b", s(&m), "--data", s(&eval), "--max-ne-diff", "0"]);
    assert!(String::from_utf8_lossy(&self_eval.stdout).contains("ne_diff"));
    let rep = f.p("eval.json");
    ok(&["eval", "--model-a", s(&q), "--model-b", s(&m), "--data", s(&eval), "--out", s(&rep)]);
    assert!(rep.exists());

    let dbg = f.p("debug");
    let be = f.p("backend.json");
    std::fs::write(&be, r#"{"sls_fp16_accumulate":true}"#).unwrap();
    ok(&[
        "debug", "--model-lowp", s(&q), "--model-fp32", s(&m), "--data", s(&eval), "--n", "64", "--format", "json",
        "--compare-backend", s(&be), "--out", s(&dbg),
    ]);
    for name in ["report.json", "report.txt", "backend-diff.json"] {
        assert!(dbg.join(name).exists(), "{name}");
    }

    let roof = f.p("roofline.json");
    ok(&["roofline", "--model", s(&q), "--json", "--out", s(&roof)]);
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&roof).unwrap()).unwrap();
    assert!(r["expected_latency"].as_f64().unwrap() > 0.0);

    // No command rewrites its inputs.
    let after = (dir_bytes(&m), std::fs::read(&train).unwrap(), std::fs::read(&eval).unwrap());
    assert!(before == after);
}

#[test]
fn gate_failures_exit_with_4() {
    let f = Fixture::new();
    let m = f.model("faulty", Some("outlier:bot1:50:4"));
    let train = f.data(&m, "train.jsonl", "2000", "1");
    let eval = f.data(&m, "eval.jsonl", "2000", "2");
    let scheme = f.p("scheme.json");
    let qm = f.p("q");
    let cfg = f.p("search.json");
    let o = lpq(&[
        "search", "--model", s(&m), "--calib", s(&train), "--eval", s(&eval), "--config", s(&cfg),
        "--max-skip", "0", "--out-scheme", s(&scheme), "--out-model", s(&qm),
    ]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(scheme.exists());
    assert!(!qm.exists());
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&scheme).unwrap()).unwrap();
    assert_eq!(r["status"], "fail");
}

#[test]
fn error_classes_map_to_exit_codes() {
    let f = Fixture::new();
    let out = f.p("m");
    assert_eq!(code(&lpq(&["gen-model", "--fault", "bogus", "--out", s(&out)])), 2);
    let bad_cfg = f.p("bad.json");
    std::fs::write(&bad_cfg, "{ not json").unwrap();
    assert_eq!(code(&lpq(&["gen-model", "--config", s(&bad_cfg), "--out", s(&out)])), 2);
    assert_eq!(code(&lpq(&["--jobs", "0", "gen-model", "--out", s(&out)])), 2);
    let missing = f.p("missing");
    let data = f.p("d.jsonl");
    assert_eq!(code(&lpq(&["gen-data", "--model", s(&missing), "--out", s(&data)])), 3);

    let m = f.model("fp32", None);
    let corrupt = f.p("corrupt.jsonl");
    std::fs::write(&corrupt, "{\"dense\": [1.0]}\n").unwrap();
    let cal = f.p("c.json");
    assert_eq!(code(&lpq(&["calibrate", "--model", s(&m), "--data", s(&corrupt), "--out", s(&cal)])), 3);
}

#[test]
fn replay_from_manifest_is_bitwise_identical() {
    let f = Fixture::new();
    let m = f.model("fp32", Some("wide:top1:20"));
    let data = f.data(&m, "d.jsonl", "500", "8");
    let manifests = [
        m.join("run-manifest.json"),
        f.p("d.jsonl.manifest.json"),
    ];
    let originals = (dir_bytes(&m), std::fs::read(&data).unwrap());
    for mp in &manifests {
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(mp).unwrap()).unwrap();
        let args: Vec<String> = v["args"].as_array().unwrap().iter().map(|a| a.as_str().unwrap().to_string()).collect();
        assert!(!v["seeds"].as_object().unwrap().is_empty());
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(&refs);
    }
    assert!(originals == (dir_bytes(&m), std::fs::read(&data).unwrap()));

    // Sequential and parallel runs agree too.
    let seq = f.p("seq.jsonl");
    ok(&["--jobs", "1", "gen-data", "--model", s(&m), "--n", "500", "--seed", "8", "--out", s(&seq)]);
    assert_eq!(std::fs::read(&seq).unwrap(), originals.1);
}

#[test]
fn monitor_alerts_on_drift() {
    let f = Fixture::new();
    let snaps = f.p("snaps");
    let cfg = f.p("snap.json");
    std::fs::write(
        &cfg,
        format!(r#"{{"model":{MODEL_CFG},"count":3,"calib_samples":300,"eval_samples":800}}"#),
    )
    .unwrap();
    ok(&["gen-snapshots", "--config", s(&cfg), "--seed", "2", "--drift", "shift:1.5", "--out", s(&snaps)]);
    let scheme = f.p("scheme.json");
    std::fs::write(&scheme, lpq::autoquant::QuantScheme::new(Default::default()).to_json()).unwrap();
    let log = f.p("monitor.jsonl");
    let o = lpq(&["monitor", "--snapshots", s(&snaps), "--scheme", s(&scheme), "--no-recalibrate", "--log", s(&log)]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    let lines = std::fs::read_to_string(&log).unwrap();
    assert_eq!(lines.lines().count(), 3);
    let quiet_log = f.p("quiet.jsonl");
    let quiet = lpq(&[
        "monitor", "--snapshots", s(&snaps), "--scheme", s(&scheme), "--threshold", "10", "--log", s(&quiet_log),
    ]);
    assert_eq!(code(&quiet), 0, "{}", String::from_utf8_lossy(&quiet.stderr));
}
