use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pace(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pace")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn toy_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("cfg.json");
    fs::write(
        &path,
        format!(
            r#"{{"schema_version": 1,
                "market": {{"source": "synthetic", "n": 3, "m": 4, "rank": 2, "seed": 3}},
                "models": [{{"label": "iid", "kind": "iid"}}, {{"label": "markov", "kind": "markov", "seed": 2}}],
                "t": 300, "paths": 3, "base_seed": 5{extra}}}"#
        ),
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_is_reproducible_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), "");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(pace(&["run", "--config", &cfg, "--out", a.to_str().unwrap(), "--threads", "1"]).status.success());
    assert!(pace(&["run", "--config", &cfg, "--out", b.to_str().unwrap(), "--threads", "4"]).status.success());
    for f in ["metrics.csv", "aggregate.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["provenance"]["path_seeds"].as_array().unwrap().len(), 3);
    assert!(summary["terminal"]["markov"]["rel_u_hs"]["mean"].is_number());

    // re-aggregating the metrics file reproduces the aggregate file
    let again = dir.path().join("again.csv");
    let input = a.join("metrics.csv");
    assert!(pace(&["summarize", "--input", input.to_str().unwrap(), "--out", again.to_str().unwrap()]).status.success());
    assert_eq!(fs::read(again).unwrap(), fs::read(a.join("aggregate.csv")).unwrap());
}

#[test]
fn overrides_change_seeds_and_paths() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), "");
    let out = dir.path().join("o");
    let o = out.to_str().unwrap();
    assert!(pace(&["run", "--config", &cfg, "--out", o, "--seed", "99", "--paths", "2"]).status.success());
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["provenance"]["base_seed"], 99);
    assert_eq!(summary["config"]["paths"], 2);
}

#[test]
fn gen_market_sample_and_solve() {
    let dir = tempfile::tempdir().unwrap();
    let market = dir.path().join("market.json");
    let st = pace(&["gen-market", "--n", "3", "--m", "5", "--rank", "2", "--seed", "4", "--out", market.to_str().unwrap()]);
    assert!(st.status.success());
    let inst: serde_json::Value = serde_json::from_slice(&fs::read(&market).unwrap()).unwrap();
    assert_eq!(inst["n"], 3);
    assert_eq!(inst["valuations"].as_array().unwrap().len(), 3);

    let model = dir.path().join("model.json");
    fs::write(&model, r#"{"kind": "iid", "base": [0.1, 0.2, 0.3, 0.2, 0.2]}"#).unwrap();
    let seq = dir.path().join("seq.json");
    let st = pace(&["sample", "--model", model.to_str().unwrap(), "--t", "200", "--seed", "1", "--out", seq.to_str().unwrap()]);
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let items: Vec<usize> = serde_json::from_slice(&fs::read(&seq).unwrap()).unwrap();
    assert_eq!(items.len(), 200);
    assert!(items.iter().all(|&j| j < 5));

    let st = pace(&["solve", "--instance", market.to_str().unwrap(), "--sequence", seq.to_str().unwrap()]);
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let sol: serde_json::Value = serde_json::from_slice(&st.stdout).unwrap();
    let beta: Vec<f64> = serde_json::from_value(sol["beta"].clone()).unwrap();
    let u: Vec<f64> = serde_json::from_value(sol["utilities"].clone()).unwrap();
    for (b, u) in beta.iter().zip(&u) {
        assert!((b * u * 3.0 - 1.0).abs() < 1e-12);
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"schema_version": 7}"#).unwrap();
    assert_eq!(pace(&["run", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(pace(&["run", "--config", "/nonexistent.json"]).status.code(), Some(2));
    assert_eq!(pace(&["run", "--bogus-flag"]).status.code(), Some(2));

    // an unreachable solver tolerance is a numerical failure
    let cfg = toy_config(dir.path(), r#", "solver_tol": 1e-300"#);
    let out = dir.path().join("o");
    assert_eq!(pace(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]).status.code(), Some(3));
}
