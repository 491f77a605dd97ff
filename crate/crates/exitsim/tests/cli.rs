use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use exitsim::traceio;
use exitsim_core::trace::{cost_preset, ExitTopology, SampleTrace, TraceSet};

fn exitsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_exitsim"))
        .args(args)
        .env_remove("EXITSIM_CONFIG")
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn golden_trace(dir: &Path) -> PathBuf {
    let preset = cost_preset("vgg16bn-cifar10").unwrap();
    let topo = ExitTopology::from_preset(preset, 0.40, 1 << 20, 64.0).unwrap();
    let mut samples = Vec::new();
    for (count, exit) in [(6662, 1usize), (1981, 2), (1357, 3)] {
        for _ in 0..count {
            let confidences = (1..=3).map(|n| if n == exit { 0.95 } else { 0.5 }).collect();
            samples.push(SampleTrace {
                id: samples.len() as u64,
                label: 3,
                confidences,
                predicted: vec![3; 3],
                features: None,
            });
        }
    }
    let path = dir.join("golden.jsonl");
    traceio::save(&path, &TraceSet::new(topo, samples).unwrap()).unwrap();
    path
}

fn column(csv_text: &str, row: usize, name: &str) -> String {
    let mut rdr = csv::Reader::from_reader(csv_text.as_bytes());
    let idx = rdr.headers().unwrap().iter().position(|h| h == name).unwrap();
    rdr.records().nth(row).unwrap().unwrap()[idx].to_string()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = exitsim(&["evaluate", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!stderr(&o).is_empty());
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[data]\nno_such_key = 1\n").unwrap();
    let o = exitsim(&["--config", p(&cfg), "demo", "--out-dir", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn evaluate_reproduces_the_golden_costs() {
    let dir = tempfile::tempdir().unwrap();
    let trace = golden_trace(dir.path());
    let o = exitsim(&["evaluate", "--trace", p(&trace), "--lambda", "0.95,0.85", "--method", "plain"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let on_device: f64 = column(&text, 0, "mean_on_device_mflops").parse().unwrap();
    let total: f64 = column(&text, 0, "mean_total_mflops").parse().unwrap();
    assert!((on_device - 42.44).abs() < 0.01, "{on_device}");
    assert!((total - 79.64).abs() < 0.01, "{total}");
    assert_eq!(column(&text, 0, "exit_1_share"), "0.6662");
}

#[test]
fn corrupt_trace_is_rejected_with_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let trace = golden_trace(dir.path());
    let mut text = fs::read_to_string(&trace).unwrap();
    text.push_str("{\"id\": 99999, \"label\": 0, \"confidences\": [0.5, 1.5, 0.5], \"predicted\": [0, 0, 0]}\n");
    fs::write(&trace, text).unwrap();
    let o = exitsim(&["validate", p(&trace)]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("10002"), "{err}");
}

const SMALL: &str = r#"
seed = 3

[data]
train_samples = 300
test_samples = 150

[backbone_training]
epochs = 30
end_epoch = 30

[predictor_training]
epochs = 30
end_epoch = 30

[environment]
sweep_mbps = [0.1, 0.5, 1.0, 5.0, 10.0, 50.0, 100.0]
"#;

#[test]
fn stage_commands_chain_and_validate() {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name);
    let cfg = d("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let run = |args: &[&str]| {
        let mut full = vec!["--config", p(&cfg)];
        full.extend_from_slice(args);
        let o = exitsim(&full);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        o
    };
    run(&["gen-data", "--train", p(&d("train.json")), "--test", p(&d("test.json"))]);
    run(&["train-ee", "--data", p(&d("train.json")), "--out", p(&d("net.json"))]);
    run(&["emit-traces", "--net", p(&d("net.json")), "--data", p(&d("train.json")), "--out", p(&d("train.jsonl"))]);
    run(&[
        "emit-traces",
        "--net",
        p(&d("net.json")),
        "--data",
        p(&d("test.json")),
        "--out",
        p(&d("test.jsonl")),
        "--id-offset",
        "300",
    ]);
    run(&["train-ep", "--trace", p(&d("train.jsonl")), "--out", p(&d("ep.json"))]);
    run(&["select-gamma", "--trace", p(&d("train.jsonl")), "--predictor", p(&d("ep.json"))]);
    run(&[
        "evaluate",
        "--trace",
        p(&d("test.jsonl")),
        "--predictor",
        p(&d("ep.json")),
        "--gamma",
        "0.2,0.2",
        "--method",
        "all",
        "--bandwidth",
        "10",
        "--records",
        p(&d("records.csv")),
    ]);
    run(&[
        "optimize",
        "--trace",
        p(&d("test.jsonl")),
        "--predictor",
        p(&d("ep.json")),
        "--frontier",
        p(&d("grid.csv")),
    ]);
    run(&["sweep", "--trace", p(&d("test.jsonl")), "--predictor", p(&d("ep.json")), "--out", p(&d("sweep.csv"))]);
    run(&["fit-adapt", "--points", p(&d("sweep.csv")), "--out", p(&d("regs.json")), "--at", "0.3,3,30"]);

    let files = ["small.toml", "train.json", "test.json", "net.json", "train.jsonl", "test.jsonl", "ep.json", "sweep.csv", "regs.json"];
    let paths: Vec<PathBuf> = files.iter().map(|f| d(f)).collect();
    let mut args = vec!["validate"];
    args.extend(paths.iter().map(|x| p(x)));
    run(&args);

    // a link this slow cannot meet the budget with any thresholds
    let o = exitsim(&[
        "--config",
        p(&cfg),
        "optimize",
        "--trace",
        p(&d("test.jsonl")),
        "--predictor",
        p(&d("ep.json")),
        "--bandwidth",
        "0.0001",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    let v: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(v["error"], "infeasible");
    assert!(v["fastest"].is_object(), "{v}");
}
