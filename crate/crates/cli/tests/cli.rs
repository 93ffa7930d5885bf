use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cml(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cml"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = cml(args, cwd);
    assert!(
        out.status.success(),
        "cml {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: [&str; 12] = [
    "--epochs",
    "2",
    "--dim",
    "8",
    "--layers",
    "2",
    "--negative-samples",
    "16",
    "--train-batch",
    "64",
    "--meta-batch",
    "32",
];

fn prepared(dir: &Path) {
    ok(&["synth", "--users", "40", "--items", "60", "--seed", "2", "--output", "raw.tsv"], dir);
    ok(&["prepare", "--input", "raw.tsv", "--target", "buy", "--output", "prep"], dir);
}

fn train(dir: &Path, out: &str, extra: &[&str]) -> String {
    let mut args = vec!["train", "--data", "prep", "--output", out];
    args.extend(SMALL);
    args.extend(extra);
    ok(&args, dir)
}

#[test]
fn end_to_end_runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepared(d);
    train(d, "a", &[]);
    train(d, "b", &[]);
    assert_eq!(
        fs::read(d.join("a/metrics.jsonl")).unwrap(),
        fs::read(d.join("b/metrics.jsonl")).unwrap()
    );
    assert_eq!(
        fs::read(d.join("a/checkpoint.json")).unwrap(),
        fs::read(d.join("b/checkpoint.json")).unwrap()
    );
    let eval = |run: &str| ok(&["evaluate", "--data", "prep", "--checkpoint", &format!("{run}/checkpoint.json")], d);
    let report = eval("a");
    assert_eq!(report, eval("b"));
    let json: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(json["k"], 10);
    assert_eq!(json["protocol"], "sampled-99");

    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("a/run.json")).unwrap()).unwrap();
    let manifest_hash = json["manifest_hash"].as_str().unwrap();
    assert_eq!(run["manifest_hash"], manifest_hash);
    assert_eq!(run["seed"], 0);
}

#[test]
fn prepare_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepared(d);
    ok(&["prepare", "--input", "raw.tsv", "--target", "buy", "--output", "again"], d);
    for f in ["train.tsv", "meta.tsv", "test.tsv", "manifest.json", "users.txt", "items.txt"] {
        assert_eq!(fs::read(d.join("prep").join(f)).unwrap(), fs::read(d.join("again").join(f)).unwrap());
    }
}

#[test]
fn exports_have_expected_layout() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepared(d);
    train(d, "run", &[]);
    let weights = ok(&["export-weights", "--data", "prep", "--checkpoint", "run/checkpoint.json"], d);
    let mut lines = weights.lines();
    assert_eq!(lines.next(), Some("user,pair,weight"));
    let pairs: std::collections::BTreeSet<&str> = lines.map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(pairs.into_iter().collect::<Vec<_>>(), ["buy/cart", "buy/view"]);

    ok(
        &["export-embeddings", "--data", "prep", "--checkpoint", "run/checkpoint.json", "--output", "emb.csv"],
        d,
    );
    let emb = fs::read_to_string(d.join("emb.csv")).unwrap();
    assert!(emb.starts_with("entity_type,id,behavior,dim0,"));
    let header_cols = emb.lines().next().unwrap().split(',').count();
    assert_eq!(header_cols, 3 + 8);
    assert!(emb.lines().skip(1).all(|l| l.split(',').count() == header_cols));

    ok(
        &["evaluate", "--data", "prep", "--checkpoint", "run/checkpoint.json", "--per-user", "pu.csv", "--full-rank"],
        d,
    );
    assert!(fs::read_to_string(d.join("pu.csv")).unwrap().starts_with("user,item,rank,candidates,hit,ndcg\n"));
}

#[test]
fn equal_weight_ablation_keeps_unit_weights() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepared(d);
    train(d, "mcn", &["--ablate", "mcn"]);
    let metrics = fs::read_to_string(d.join("mcn/metrics.jsonl")).unwrap();
    for line in metrics.lines() {
        let r: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(r["omega_bpr"], 1.0);
        assert!(r["omega"].as_object().unwrap().values().all(|w| *w == 1.0));
    }
    train(d, "clf", &["--ablate", "clf"]);
    let first: serde_json::Value =
        serde_json::from_str(fs::read_to_string(d.join("clf/metrics.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    assert!(first["l_cl"].as_object().unwrap().is_empty());
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(cml(&["train", "--no-such-flag"], d).status.code(), Some(1));
    prepared(d);
    let bad = cml(&["train", "--data", "prep", "--output", "x", "--dropout", "1.5"], d);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("dropout"));

    fs::write(d.join("cfg.json"), r#"{"dimm": 4}"#).unwrap();
    let unknown = cml(&["train", "--data", "prep", "--output", "x", "--config", "cfg.json"], d);
    assert_eq!(unknown.status.code(), Some(1));

    assert_eq!(cml(&["evaluate", "--data", "missing", "--checkpoint", "c.json"], d).status.code(), Some(2));
    fs::write(d.join("broken.tsv"), "u1\ti1\n").unwrap();
    let data = cml(&["prepare", "--input", "broken.tsv", "--target", "buy", "--output", "p2"], d);
    assert_eq!(data.status.code(), Some(2));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepared(d);
    fs::write(d.join("cfg.json"), r#"{"dim": 4, "layers": 1, "seed": 9}"#).unwrap();
    let mut args = vec!["train", "--data", "prep", "--output", "run", "--config", "cfg.json"];
    args.extend(SMALL);
    ok(&args, d);
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("run/run.json")).unwrap()).unwrap();
    assert_eq!(run["config"]["dim"], 8);
    assert_eq!(run["config"]["layers"], 2);
    assert_eq!(run["config"]["seed"], 9);
}

#[test]
fn gradcheck_reports_and_detects_faults() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = ok(&["gradcheck", "--seeds", "5"], d);
    assert!(out.contains("0 failed"), "{out}");
    let faulty = cml(&["gradcheck", "--seeds", "1", "--inject-fault"], d);
    assert_eq!(faulty.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&faulty.stdout).contains("FAIL injected_fault"));
}
