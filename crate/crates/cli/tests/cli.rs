use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn re3qa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_re3qa"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = re3qa(args);
    assert!(
        out.status.success(),
        "re3qa {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &[&str] = &[
    "--num-instances", "40", "--dev-instances", "10", "--vocab-size", "200",
];

#[test]
fn gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let mut args = vec!["gen", "--out", p(d)];
        args.extend_from_slice(SMALL);
        ok(&args);
    }
    let read = |d: &Path| fs::read(d.join("dataset.jsonl")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_eq!(fs::read_to_string(a.join("dataset.jsonl")).unwrap().lines().count(), 40);
    assert!(a.join("gen.config.toml").exists());
}

#[test]
fn train_then_eval_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let mut gen = vec!["gen", "--out", p(out)];
    gen.extend_from_slice(SMALL);
    ok(&gen);
    let data = out.join("dataset.jsonl");
    let model = out.join("model");
    let common = [
        "--dataset", p(&data), "--hidden", "16", "--heads", "2", "--layers", "2", "--J", "1",
        "--epochs", "2",
    ];
    let mut train = vec!["train", "--out", p(&model)];
    train.extend_from_slice(&common);
    ok(&train);
    for f in ["vocab.txt", "model.bin", "checkpoint-epoch1.bin", "checkpoint-epoch2.bin", "train_log.tsv"] {
        assert!(model.join(f).exists(), "{f} missing");
    }
    let log = fs::read_to_string(model.join("train_log.tsv")).unwrap();
    assert!(log.starts_with("epoch\tstep\t"));

    let report = out.join("report");
    let mut eval = vec!["eval", "--model-dir", p(&model), "--out", p(&report)];
    eval.extend_from_slice(&common);
    let table = ok(&eval);
    for label in ["full", "w/o reranker", "w/o retriever", "w/o both"] {
        assert!(table.contains(label), "{label} row missing");
    }
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(report.join("eval_report.json")).unwrap()).unwrap();
    let rows = json.as_array().unwrap();
    assert_eq!(rows.len(), 4);
    for r in rows {
        for key in ["em", "f1", "map"] {
            let v = r[key].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&v), "{key} = {v}");
        }
    }
    let preds = fs::read_to_string(report.join("predictions.tsv")).unwrap();
    assert_eq!(preds.lines().count(), 11);

    let predicted = out.join("predicted");
    let mut predict = vec![
        "predict", "--model-dir", p(&model), "--out", p(&predicted), "--ablation", "no-both",
    ];
    predict.extend_from_slice(&common);
    ok(&predict);
    assert!(predicted.join("candidates.tsv").exists());
    let cfg = fs::read_to_string(predicted.join("predict.config.toml")).unwrap();
    assert!(cfg.contains("ablation = \"no-both\""));
}

#[test]
fn bench_reports_block_pass_counts() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&["bench", "--n", "17", "--N", "8", "--I", "12", "--J", "3", "--out", p(dir.path())]);
    assert!(stdout.contains("123") && stdout.contains("243"), "{stdout}");
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("bench.json")).unwrap()).unwrap();
    assert_eq!(json["unified"], 123);
    assert_eq!(json["pipeline"], 243);
    assert!((json["ratio"].as_f64().unwrap() - 243.0 / 123.0).abs() < 1e-12);
}

#[test]
fn config_file_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.toml");
    fs::write(&file, "segments = 10\ntop_n = 4\nlayers = 6\nretrieve_depth = 2\n").unwrap();
    let out = dir.path().join("o");
    let stdout = ok(&["bench", "--config", p(&file), "--N", "5", "--out", p(&out)]);
    // 10 * 2 + 5 * (6 - 2)
    assert!(stdout.contains(" 40 "), "{stdout}");
    let resolved = fs::read_to_string(out.join("bench.config.toml")).unwrap();
    assert!(resolved.contains("top_n = 5"));
}

#[test]
fn bad_input_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!re3qa(&["bench", "--no-such-flag"]).status.success());
    let missing = dir.path().join("missing.jsonl");
    let out = re3qa(&["train", "--dataset", p(&missing), "--out", p(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.jsonl"));
    let file = dir.path().join("bad.toml");
    fs::write(&file, "no_such_key = 1\n").unwrap();
    assert!(!re3qa(&["bench", "--config", p(&file)]).status.success());
    assert!(!re3qa(&["bench", "--n", "2", "--N", "3", "--out", p(dir.path())]).status.success());
}
