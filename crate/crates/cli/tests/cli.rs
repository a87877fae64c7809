use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use nodelearn::config;
use nodelearn::datagen::{self, CsvSchema};
use serde_json::Value;

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn nodelearn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nodelearn"))
        .args(args)
        .env_remove("NODELEARN_OUT")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// example-10 cut down to `ticks`, written into `dir`.
fn small_config(dir: &Path, ticks: u64) -> PathBuf {
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(configs().join("example-10.json")).unwrap()).unwrap();
    v["ticks"] = ticks.into();
    let p = dir.join("small.json");
    std::fs::write(&p, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn validate_accepts_shipped_configs() {
    for name in ["example-10.json", "flagship.json"] {
        let o = nodelearn(&["validate", s(&configs().join(name))]);
        assert_eq!(code(&o), 0, "{name}: {}", stderr(&o));
        assert!(stdout(&o).starts_with("ok:"));
    }
}

#[test]
fn unknown_key_fails_strict_and_warns_lax() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(small_config(tmp.path(), 5)).unwrap()).unwrap();
    v["exchange"]["evrey"] = 3.into();
    let p = tmp.path().join("typo.json");
    std::fs::write(&p, v.to_string()).unwrap();

    let o = nodelearn(&["validate", s(&p)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("exchange.evrey"), "{}", stderr(&o));

    let o = nodelearn(&["validate", "--lax", s(&p)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("warning"));
}

/// validate and run agree on what is invalid, and both exit 1.
#[test]
fn invalid_config_exits_one_everywhere() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(small_config(tmp.path(), 5)).unwrap()).unwrap();
    v["regime"] = "federated".into();
    v["policy"]["kind"] = "distill".into();
    let p = tmp.path().join("bad.json");
    std::fs::write(&p, v.to_string()).unwrap();
    let out = tmp.path().join("out");
    for args in [vec!["validate", s(&p)], vec!["run", s(&p), "-o", s(&out)]] {
        let o = nodelearn(&args);
        assert_eq!(code(&o), 1, "{args:?}");
        let err = stderr(&o);
        assert!(err.contains("regime") && err.contains("policy.kind"), "{err}");
    }
    assert!(!out.join("manifest.json").exists());
    assert_eq!(code(&nodelearn(&["validate", "/nonexistent/config.json"])), 1);
    assert_eq!(code(&nodelearn(&["frobnicate"])), 1);
    assert_eq!(code(&nodelearn(&["--help"])), 0);
}

#[test]
fn run_writes_artifacts_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 30);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = nodelearn(&["run", s(&cfg), "-o", s(d)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["metrics.csv", "events.jsonl", "packets.jsonl", "trust.csv", "config-echo.json"] {
        let x = std::fs::read(a.join(f)).unwrap();
        assert_eq!(x, std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let m = manifest(&a);
    assert_eq!(m["completed"], true);
    assert_eq!(m["ticks_run"], 30);
    assert_eq!(m["seed_overridden"], false);
}

#[test]
fn seed_override_is_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 5);
    let out = tmp.path().join("s");
    let o = nodelearn(&["run", s(&cfg), "-o", s(&out), "--seed", "99"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = manifest(&out);
    assert_eq!(m["seed"], 99);
    assert_eq!(m["seed_overridden"], true);
}

#[test]
fn completed_run_needs_force() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 5);
    let out = tmp.path().join("r");
    assert_eq!(code(&nodelearn(&["run", s(&cfg), "-o", s(&out)])), 0);
    std::fs::write(out.join("stray.txt"), "x").unwrap();

    let o = nodelearn(&["run", s(&cfg), "-o", s(&out)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--force"));
    assert!(out.join("stray.txt").exists());

    assert_eq!(code(&nodelearn(&["run", s(&cfg), "-o", s(&out), "--force"])), 0);
    assert!(!out.join("stray.txt").exists());
    assert_eq!(manifest(&out)["completed"], true);
}

#[test]
fn output_root_comes_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 3);
    let root = tmp.path().join("root");
    let o = Command::new(env!("CARGO_BIN_EXE_nodelearn"))
        .args(["run", s(&cfg)])
        .env("NODELEARN_OUT", &root)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let name = manifest_name(&cfg);
    assert!(root.join(name).join("manifest.json").is_file());
}

fn manifest_name(cfg: &Path) -> String {
    let v: Value = serde_json::from_str(&std::fs::read_to_string(cfg).unwrap()).unwrap();
    v["name"].as_str().unwrap().to_string()
}

#[test]
fn sweep_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 10);
    let grid = tmp.path().join("grid.json");
    std::fs::write(&grid, r#"{"grid": {"data.partition.alpha": [0.1, 5.0]}, "seeds": [1, 2]}"#).unwrap();
    let root = tmp.path().join("sweep");
    let o = nodelearn(&["sweep", s(&cfg), "--grid", s(&grid), "-o", s(&root), "--jobs", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for alpha in ["0.1", "5.0"] {
        for seed in [1, 2] {
            let d = root.join(format!("data.partition.alpha={alpha}")).join(format!("seed={seed}"));
            let m = manifest(&d);
            assert_eq!(m["seed"], seed);
            assert_eq!(m["seed_overridden"], true);
        }
    }
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(root.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(summary["cells"].as_array().unwrap().len(), 4);

    let o = nodelearn(&["report", s(&root), "--csv"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = stdout(&o);
    assert!(csv.lines().count() > 1, "{csv}");
    assert!(csv.lines().next().unwrap().contains(','));

    let o = nodelearn(&["report", s(&root)]);
    assert_eq!(code(&o), 0);
    assert!(!stdout(&o).is_empty());

    // an existing grid is protected as a whole
    let o = nodelearn(&["sweep", s(&cfg), "--grid", s(&grid), "-o", s(&root)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn empty_grid_is_a_single_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 3);
    let grid = tmp.path().join("grid.json");
    std::fs::write(&grid, "{}").unwrap();
    let root = tmp.path().join("sweep");
    let o = nodelearn(&["sweep", s(&cfg), "--grid", s(&grid), "-o", s(&root)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let seed = serde_json::from_str::<Value>(&std::fs::read_to_string(&cfg).unwrap()).unwrap()["seed"].clone();
    let m = manifest(&root.join(format!("seed={seed}")));
    assert_eq!(m["seed_overridden"], false);

    std::fs::write(&grid, r#"{"grid": {"no.such.field": [1]}}"#).unwrap();
    let o = nodelearn(&["sweep", s(&cfg), "--grid", s(&grid), "-o", s(&tmp.path().join("x"))]);
    assert_eq!(code(&o), 1);
}

#[test]
fn gen_data_writes_readable_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 4);
    let out = tmp.path().join("data");
    let o = nodelearn(&["gen-data", s(&cfg), "-o", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["test.csv", "probe.csv", "node-0.csv", "node-9.csv"] {
        let text = std::fs::read_to_string(out.join(f)).unwrap();
        assert!(text.lines().count() > 1, "{f} is empty");
    }
    let again = tmp.path().join("again");
    assert_eq!(code(&nodelearn(&["gen-data", s(&cfg), "-o", s(&again)])), 0);
    assert_eq!(std::fs::read(out.join("node-3.csv")).unwrap(), std::fs::read(again.join("node-3.csv")).unwrap());

    let loaded = config::load_config(&cfg, true).unwrap().config;
    let spec = config::resolve(&loaded).unwrap().spec;
    let expected = datagen::test_set(&spec, loaded.data.test_size, 0);
    let schema = CsvSchema {
        features: (0..spec.feature_dim).map(|i| format!("f{i}")).collect(),
        label: "label".into(),
    };
    let back = datagen::load_csv_dataset(&out.join("test.csv"), &schema).unwrap();
    assert_eq!(back.samples.len(), expected.len());
    for (got, want) in back.samples.iter().zip(&expected) {
        assert_eq!(got.x, want.x);
        assert_eq!(back.label_names[got.y], want.y.to_string());
    }
}

#[test]
fn example_ten_runs_within_a_minute() {
    let tmp = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let o = nodelearn(&["run", s(&configs().join("example-10.json")), "-o", s(&tmp.path().join("e"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(start.elapsed() < Duration::from_secs(60));
}
