use std::path::Path;
use std::process::{Command, Output};

fn nest(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nest"))
        .args(args)
        .env("NEST_THREADS", "1")
        .output()
        .expect("spawn nest")
}

fn ok(args: &[&str]) -> String {
    let out = nest(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SUBCOMMANDS: [(&str, &[&str]); 8] = [
    ("gen-data", &["--regions", "--nodes-per-region", "--days", "--steps-per-day", "--channels", "--noise", "--regime-shift-rate", "--seed", "--out"]),
    ("cluster", &["--data", "--m-ratio", "--regions", "--chunks", "--sigma", "--chunk-mode", "--n-init", "--max-iter", "--fraction", "--seed", "--out"]),
    ("train", &["--data", "--regions", "--config", "--epochs", "--lr", "--patience", "--windows-per-epoch", "--guidance", "--no-cross-attention", "--seed", "--out", "--history"]),
    ("infer", &["--checkpoint", "--data", "--regions", "--horizon", "--out"]),
    ("eval", &["--checkpoint", "--data", "--regions", "--forecast", "--truth", "--horizon", "--stride", "--split", "--out", "--csv"]),
    ("snr-check", &["--clusters", "--seed", "--out"]),
    ("bench", &["--nodes", "--regions", "--dim", "--layers", "--runs", "--warmup", "--seed", "--out"]),
    ("demo", &["--seed", "--config", "--out-dir"]),
];

#[test]
fn every_subcommand_documents_its_flags() {
    let top = ok(&["--help"]);
    for (cmd, flags) in SUBCOMMANDS {
        assert!(top.contains(cmd), "top-level help misses {cmd}");
        let help = ok(&[cmd, "--help"]);
        for f in flags {
            assert!(help.contains(f), "{cmd} --help misses {f}");
        }
    }
}

#[test]
fn cluster_defaults_to_one_fifth_of_nodes() {
    let help = ok(&["cluster", "--help"]);
    assert!(help.contains("[default: 0.2]"));
}

#[test]
fn errors_carry_a_kind_prefix() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("bogus.nest");
    std::fs::write(&bogus, b"not a dataset at all, definitely").unwrap();
    let out = nest(&["cluster", "--data", arg(&bogus), "--out", arg(&dir.path().join("r.bin"))]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error: bad-magic: "), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);

    let missing = nest(&["infer", "--checkpoint", "nope.ckpt", "--data", "x", "--regions", "y", "--out", "z"]);
    assert!(String::from_utf8(missing.stderr).unwrap().starts_with("error: io: "));
}

#[test]
fn bad_thread_cap_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.nest");
    ok(&["gen-data", "--regions", "2", "--nodes-per-region", "3", "--days", "2", "--steps-per-day", "12", "--out", arg(&data)]);
    let out = Command::new(env!("CARGO_BIN_EXE_nest"))
        .args(["cluster", "--data", arg(&data), "--regions", "2", "--chunks", "2", "--out", arg(&dir.path().join("r.bin"))])
        .env("NEST_THREADS", "zero")
        .output()
        .unwrap();
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error: config: "));
}

#[test]
fn eval_of_truth_against_itself_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.nest");
    ok(&["gen-data", "--regions", "2", "--nodes-per-region", "3", "--days", "2", "--steps-per-day", "12", "--noise", "0.5", "--out", arg(&data)]);
    let json = ok(&["eval", "--forecast", arg(&data), "--truth", arg(&data)]);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["average"]["mae"], 0.0);
    assert_eq!(v["average"]["rmse"], 0.0);
    assert_eq!(v["average"]["mape"], 0.0);
}

#[test]
fn pipeline_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    ok(&["gen-data", "--regions", "2", "--nodes-per-region", "4", "--days", "6", "--steps-per-day", "24", "--regime-shift-rate", "0.01", "--seed", "3", "--out", arg(&p("d.nest"))]);
    ok(&["cluster", "--data", arg(&p("d.nest")), "--regions", "2", "--chunks", "3", "--seed", "3", "--out", arg(&p("r.bin"))]);
    ok(&[
        "train", "--data", arg(&p("d.nest")), "--regions", arg(&p("r.bin")), "--epochs", "2", "--windows-per-epoch", "16", "--seed", "3",
        "--out", arg(&p("m.ckpt")), "--history", arg(&p("h.jsonl")),
    ]);
    ok(&["infer", "--checkpoint", arg(&p("m.ckpt")), "--data", arg(&p("d.nest")), "--regions", arg(&p("r.bin")), "--horizon", "7", "--out", arg(&p("f.nest"))]);
    let fc = nest_core::datakit::load_dataset(p("f.nest")).unwrap();
    assert_eq!((fc.nodes(), fc.steps(), fc.start_offset), (8, 7, 6 * 24));
    assert!(fc.values().iter().all(|v| v.is_finite()));
    ok(&[
        "eval", "--checkpoint", arg(&p("m.ckpt")), "--data", arg(&p("d.nest")), "--regions", arg(&p("r.bin")), "--horizon", "6",
        "--out", arg(&p("report.json")), "--csv", arg(&p("steps.csv")),
    ]);
    let csv = std::fs::read_to_string(p("steps.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert_eq!(std::fs::read_to_string(p("h.jsonl")).unwrap().lines().count(), 2);
    for out in ["d.nest", "r.bin", "m.ckpt", "h.jsonl", "f.nest", "report.json", "steps.csv"] {
        let side = dir.path().join(format!("{out}.manifest.json"));
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&side).unwrap()).unwrap();
        assert!(v["config_hash"].as_str().is_some_and(|h| h.len() == 16), "{out}");
        assert!(v["seed"].is_u64() && v["version"].is_string(), "{out}");
    }
}

#[test]
fn snr_check_reports_required_fields() {
    let json = ok(&["snr-check", "--clusters", "30", "--seed", "1"]);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["clusters_tested"], 30);
    assert!(v["violations"].is_array() && v["min_slack"].is_number());
}

#[test]
fn bench_emits_csv() {
    let csv = ok(&["bench", "--nodes", "8,16", "--regions", "2", "--dim", "4", "--runs", "2"]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("n,m,d,layers"));
}

#[test]
fn demo_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = ok(&["demo", "--seed", "7", "--out-dir", arg(dir.path())]);
    let b = ok(&["demo", "--seed", "7"]);
    assert_eq!(a, b);
    assert!(a.contains("past guidance") && a.contains("persistence MAE"));
    let saved = nest_core::pipeline::RunConfig::load(dir.path().join("config.toml")).unwrap();
    assert_eq!(saved, nest_core::pipeline::RunConfig::demo(7));
    for f in ["data.nest", "regions.bin", "model.ckpt", "forecast.nest", "summary.json"] {
        assert!(dir.path().join(format!("{f}.manifest.json")).exists(), "{f}");
    }
}
