use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dit(args: &[&str], cwd: &Path) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_dit"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn dit");
    out
}

fn ok(args: &[&str], cwd: &Path) {
    let out = dit(args, cwd);
    assert!(out.status.success(), "dit {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn pipeline_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&["synth", "--out", "data/a", "--tokens", "30", "--trades", "600", "--seed", "1"], d);
    ok(&["synth", "--out", "data/b", "--tokens", "30", "--trades", "600", "--seed", "2"], d);
    ok(&["dissim", "--in", "data/a/trades.csv", "--collection", "data/a/collection.json", "--out", "m.bin", "--csv", "m.csv"], d);
    assert!(d.join("m.json").is_file(), "matrix sidecar missing");

    ok(&["meters", "--collection", "data/a/collection.json", "--matrix", "m.bin", "--out", "scores.csv"], d);
    let scores = fs::read_to_string(d.join("scores.csv")).unwrap();
    assert!(scores.starts_with("token_id,meter_name,score"));
    assert_eq!(scores.lines().count(), 1 + 5 * 30);

    ok(&["solve", "--matrix", "m.bin", "--out", "x.csv", "--trace", "trace.json"], d);
    let x = fs::read_to_string(d.join("x.csv")).unwrap();
    assert!(x.lines().count() > 1);
    let trace: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("trace.json")).unwrap()).unwrap();
    assert!(trace.get("final_stress").is_some());

    ok(
        &[
            "fit", "--collection", "data/a/collection.json", "--trades", "data/a/trades.csv", "--k", "1..4", "--split",
            "0.7", "--out", "model.json", "--scores", "dit.csv",
        ],
        d,
    );
    let model: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("model.json")).unwrap()).unwrap();
    assert!(model["model"]["chosen_k"].as_u64().unwrap() >= 1);
    assert!(model["test_f"].as_f64().is_some());

    ok(&["bench", "--dataset", "data", "--k", "1..3", "--out", "report"], d);
    let table = fs::read_to_string(d.join("report/f_table.csv")).unwrap();
    assert!(table.starts_with("meter,a,b"), "{table}");
    assert_eq!(table.lines().count(), 1 + 6);
    for f in ["profiles.json", "k_hist.json", "failures.json"] {
        assert!(d.join("report").join(f).is_file(), "{f} missing");
    }
}

#[test]
fn bench_reports_broken_collections() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&["synth", "--out", "data/good", "--tokens", "20", "--trades", "300"], d);
    fs::create_dir_all(d.join("data/bad")).unwrap();
    fs::write(d.join("data/bad/collection.json"), "{ not json").unwrap();
    fs::write(d.join("data/bad/trades.csv"), "token_id,timestamp,price\n").unwrap();
    let out = dit(&["bench", "--dataset", "data", "--meters", "rt,go", "--out", "report"], d);
    assert!(!out.status.success());
    let failures = fs::read_to_string(d.join("report/failures.json")).unwrap();
    assert!(failures.contains("bad"), "{failures}");
}

#[test]
fn adapt_accepts_attribute_dumps() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let raw = d.join("raw/punks");
    fs::create_dir_all(&raw).unwrap();
    fs::write(
        raw.join("tokens.json"),
        r#"[
            {"token_id": "1", "attributes": [{"trait_type": "Hat", "value": "Cap"}, {"trait_type": "Eyes", "value": "Blue"}]},
            {"token_id": "2", "attributes": [{"trait_type": "Hat", "value": "Cap"}]},
            {"token_id": "3", "attributes": [{"trait_type": "Eyes", "value": "Red"}]}
        ]"#,
    )
    .unwrap();
    fs::write(
        raw.join("sales.csv"),
        "tokenId,block_timestamp,price_eth\n1,2023-11-14T22:13:20Z,1.5\n2,1700003600,0.9\n3,1700007200000,2.0\n9,1700007200,1.0\n1,1700010800,0\n",
    )
    .unwrap();
    ok(&["adapt", "--in", "raw", "--out", "data"], d);

    let c: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("data/punks/collection.json")).unwrap()).unwrap();
    assert_eq!(c["trait_names"], serde_json::json!(["Eyes", "Hat"]));
    let trades = fs::read_to_string(d.join("data/punks/trades.csv")).unwrap();
    // unknown token and zero price are dropped
    assert_eq!(trades.lines().count(), 1 + 3, "{trades}");
    assert!(trades.contains("1700000000"));

    ok(&["meters", "--which", "rt,or", "--collection", "data/punks/collection.json", "--out", "s.csv"], d);
}

#[test]
fn rejects_bad_arguments() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dit(&["meters", "--which", "xx", "--collection", "missing.json", "--out", "s.csv"], tmp.path());
    assert!(!out.status.success());
    let out = dit(&["dissim", "--in", "t.csv", "--collection", "c.json", "--out", "m.bin", "--half-life", "soon"], tmp.path());
    assert!(!out.status.success());
}
