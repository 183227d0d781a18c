use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn hybridseq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hybridseq"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = hybridseq(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

/// A small copy of the shipped diagnosis task, synthesized into `dir/data`.
fn synth_small(dir: &Path, sequences: usize) -> PathBuf {
    let mut task = read_json(&workspace().join("configs/tasks/diagnosis_like.json"));
    task["corpus"]["num_sequences"] = json!(sequences);
    let task_path = dir.join("task.json");
    fs::write(&task_path, task.to_string()).unwrap();
    let data = dir.join("data");
    ok(&["synth", s(&task_path), "--out", s(&data)]);
    data
}

fn write_run_config(dir: &Path, name: &str, body: Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(&body).unwrap()).unwrap();
    p
}

fn hb_config(dir: &Path, data: &Path) -> PathBuf {
    write_run_config(
        dir,
        "hb.json",
        json!({
            "inherit": "HB-CRF",
            "seed": 0,
            "data": {"train": data.join("dataset.jsonl")},
            "featurizer": data.join("featurizer.json"),
            "training": {"epochs": 4, "tune_epochs": 1},
            "search": {"range_c1": [0.0, 1e-4], "range_c2": [0.0, 1e-3], "n_settings": 3},
            "protocol": {"folds": 2},
        }),
    )
}

#[test]
fn synth_train_predict_evaluate() {
    let tmp = TempDir::new().unwrap();
    let data = synth_small(tmp.path(), 60);
    let cfg = hb_config(tmp.path(), &data);
    let model = tmp.path().join("model");
    ok(&["train", s(&cfg), "--out", s(&model)]);
    for f in [
        "model.ckpt",
        "vocab.tsv",
        "loss_trace.csv",
        "metrics.json",
        "manifest.json",
    ] {
        assert!(model.join(f).is_file(), "{f} missing");
    }
    let metrics = read_json(&model.join("metrics.json"));
    assert!(metrics["test_macro_f1"].as_f64().unwrap() > 0.0);

    let pred = tmp.path().join("pred");
    let dataset = data.join("dataset.jsonl");
    ok(&[
        "predict",
        s(&model.join("model.ckpt")),
        s(&dataset),
        "--out",
        s(&pred),
    ]);
    let preds = pred.join("predictions.jsonl");
    let lines = fs::read_to_string(&preds).unwrap().lines().count();
    assert_eq!(lines, 61);

    // gold against itself is perfect
    let eval = tmp.path().join("self");
    ok(&[
        "evaluate",
        "--gold",
        s(&dataset),
        "--pred",
        s(&dataset),
        "--chunks",
        "--out",
        s(&eval),
    ]);
    let report = read_json(&eval.join("report.json"));
    assert_eq!(report["token"]["macro_f1"], json!(1.0));
    assert_eq!(report["chunk"]["f1"], json!(1.0));

    let eval = tmp.path().join("eval");
    ok(&[
        "evaluate",
        "--gold",
        s(&dataset),
        "--pred",
        s(&preds),
        "--part",
        "test",
        "--bins",
        "10",
        "--svg",
        "--out",
        s(&eval),
    ]);
    let report = read_json(&eval.join("report.json"));
    let f1 = report["token"]["macro_f1"].as_f64().unwrap();
    assert!((f1 - metrics["test_macro_f1"].as_f64().unwrap()).abs() < 1e-12);
    let edges = report["buckets"]["edges"].as_array().unwrap();
    assert!(edges
        .windows(2)
        .all(|w| w[1].as_u64().unwrap() - w[0].as_u64().unwrap() == 10));
    assert!(eval.join("buckets.svg").is_file());

    let pot = tmp.path().join("pot");
    ok(&[
        "analyze-potentials",
        s(&model.join("model.ckpt")),
        s(&dataset),
        "--svg",
        "--out",
        s(&pot),
    ]);
    let summary = read_json(&pot.join("summary.json"));
    assert!(summary["max_reconstruction_error"].as_f64().unwrap() <= 1e-12);
    assert!(pot.join("heatmap.svg").is_file());
}

#[test]
fn missing_lexicon_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let data = synth_small(tmp.path(), 10);
    let lexicons: Vec<_> = fs::read_dir(data.join("lexicons")).unwrap().collect();
    fs::remove_file(lexicons[0].as_ref().unwrap().path()).unwrap();
    let cfg = hb_config(tmp.path(), &data);
    let out = hybridseq(&["train", s(&cfg), "--out", s(&tmp.path().join("m"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("featurizer.span_lexicons[0]"), "{err}");
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_run_config(
        tmp.path(),
        "bad.json",
        json!({"inherit": "HB-CRF", "data": {"train": "x"}, "trainig": {}}),
    );
    let out = hybridseq(&["train", s(&cfg), "--out", s(&tmp.path().join("m"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("trainig"));
}

#[test]
fn vocabulary_mismatch_exits_5() {
    let tmp = TempDir::new().unwrap();
    let data = synth_small(tmp.path(), 20);
    let cfg = hb_config(tmp.path(), &data);
    let model = tmp.path().join("model");
    ok(&["train", s(&cfg), "--out", s(&model)]);

    let mut feat = read_json(&data.join("featurizer.json"));
    feat["word_window"] = json!(2);
    let other_feat = data.join("featurizer2.json");
    fs::write(&other_feat, feat.to_string()).unwrap();
    let other = tmp.path().join("other");
    let dataset = data.join("dataset.jsonl");
    ok(&[
        "featurize",
        s(&dataset),
        "--featurizer",
        s(&other_feat),
        "--out",
        s(&other),
    ]);

    let out = hybridseq(&[
        "predict",
        s(&model.join("model.ckpt")),
        s(&dataset),
        "--vocab",
        s(&other.join("vocab.tsv")),
        "--out",
        s(&tmp.path().join("p")),
    ]);
    assert_eq!(out.status.code(), Some(5));
    let err = String::from_utf8_lossy(&out.stderr);
    let hashes = err
        .split(|c: char| !c.is_ascii_hexdigit())
        .filter(|w| w.len() >= 16)
        .count();
    assert!(hashes >= 2, "{err}");
}

#[test]
fn empty_dataset_predicts_nothing() {
    let tmp = TempDir::new().unwrap();
    let data = synth_small(tmp.path(), 20);
    let cfg = hb_config(tmp.path(), &data);
    let model = tmp.path().join("model");
    ok(&["train", s(&cfg), "--out", s(&model)]);
    let header = fs::read_to_string(data.join("dataset.jsonl")).unwrap();
    let header = header.lines().next().unwrap();
    let mut h: Value = serde_json::from_str(header).unwrap();
    h.as_object_mut().unwrap().remove("split");
    let empty = tmp.path().join("empty.jsonl");
    fs::write(&empty, format!("{h}\n")).unwrap();
    let pred = tmp.path().join("p");
    ok(&[
        "predict",
        s(&model.join("model.ckpt")),
        s(&empty),
        "--out",
        s(&pred),
    ]);
    let text = fs::read_to_string(pred.join("predictions.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 1, "header only: {text}");
}

#[test]
fn misaligned_predictions_name_the_document() {
    let tmp = TempDir::new().unwrap();
    let data = synth_small(tmp.path(), 10);
    let dataset = data.join("dataset.jsonl");
    let text = fs::read_to_string(&dataset).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut doc: Value = serde_json::from_str(&lines[3]).unwrap();
    let id = doc["doc_id"].as_str().unwrap().to_string();
    doc["tokens"].as_array_mut().unwrap().pop();
    doc["labels"].as_array_mut().unwrap().pop();
    lines[3] = doc.to_string();
    let bad = tmp.path().join("bad.jsonl");
    fs::write(&bad, lines.join("\n") + "\n").unwrap();
    let out = hybridseq(&[
        "evaluate",
        "--gold",
        s(&dataset),
        "--pred",
        s(&bad),
        "--out",
        s(&tmp.path().join("e")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(&id), "{err}");
}

#[test]
fn comparison_marks_zero_base_labels() {
    let tmp = TempDir::new().unwrap();
    let data = synth_small(tmp.path(), 10);
    let dataset = data.join("dataset.jsonl");
    let text = fs::read_to_string(&dataset).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let header: Value = serde_json::from_str(&lines[0]).unwrap();
    let other = header["other"].as_str().unwrap().to_string();
    // a baseline that never predicts anything but the background label
    for line in lines.iter_mut().skip(1) {
        let mut doc: Value = serde_json::from_str(line).unwrap();
        for l in doc["labels"].as_array_mut().unwrap() {
            *l = json!(other);
        }
        *line = doc.to_string();
    }
    let base = tmp.path().join("base.jsonl");
    fs::write(&base, lines.join("\n") + "\n").unwrap();
    let eval = tmp.path().join("e");
    ok(&[
        "evaluate",
        "--gold",
        s(&dataset),
        "--pred",
        s(&dataset),
        "--compare",
        s(&base),
        "--out",
        s(&eval),
    ]);
    let csv = fs::read_to_string(eval.join("improvements.csv")).unwrap();
    assert!(
        csv.contains("Diagnosis") && csv.contains('\u{2014}'),
        "{csv}"
    );
}

#[test]
fn aggregate_reports_agreement_with_gold() {
    let tmp = TempDir::new().unwrap();
    let mut ann = String::from("item_id,annotator_id,label\n");
    let mut gold = String::from("item_id,label\n");
    for i in 0..30 {
        let truth = ["a", "b", "c"][i % 3];
        gold.push_str(&format!("i{i},{truth}\n"));
        for a in 0..4 {
            let given = if (i + a) % 7 == 0 {
                ["a", "b", "c"][(i + 1) % 3]
            } else {
                truth
            };
            ann.push_str(&format!("i{i},w{a},{given}\n"));
        }
    }
    let ann_path = tmp.path().join("ann.csv");
    let gold_path = tmp.path().join("gold.csv");
    fs::write(&ann_path, ann).unwrap();
    fs::write(&gold_path, gold).unwrap();
    let out = tmp.path().join("agg");
    ok(&[
        "aggregate",
        s(&ann_path),
        "--gold",
        s(&gold_path),
        "--out",
        s(&out),
    ]);
    let diag = read_json(&out.join("diagnostics.json"));
    assert_eq!(diag["agreement"]["raw"], json!(1.0));
    assert!(diag["agreement"]["kappa"].is_number());
    let hard = fs::read_to_string(out.join("hard_labels.csv")).unwrap();
    assert_eq!(hard.lines().count(), 31);
}

#[test]
fn aggregate_rejects_an_unknown_label() {
    let tmp = TempDir::new().unwrap();
    let p = tmp.path().join("ann.csv");
    fs::write(&p, "item_id,annotator_id,label\ni1,w1,a\ni1,w2,z\n").unwrap();
    let out = hybridseq(&[
        "aggregate",
        s(&p),
        "--labels",
        "a,b",
        "--out",
        s(&tmp.path().join("o")),
    ]);
    assert!(!out.status.success());
}

#[test]
fn search_table_has_one_row_per_setting() {
    let tmp = TempDir::new().unwrap();
    let data = synth_small(tmp.path(), 30);
    let mut cfg = read_json(&hb_config(tmp.path(), &data));
    cfg["search"] = json!({
        "range_c1": [0.0, 1e-6, 1e-5, 1e-4],
        "range_c2": [0.0, 1e-4, 1e-3],
        "n_settings": 10,
    });
    let cfg = write_run_config(tmp.path(), "search.json", cfg);
    let out = tmp.path().join("s");
    ok(&["search", s(&cfg), "--out", s(&out)]);
    let table = fs::read_to_string(out.join("search.csv")).unwrap();
    assert_eq!(table.lines().count(), 11);
    assert!(table
        .lines()
        .next()
        .unwrap()
        .starts_with("c1,c2,fold0_f1,fold1_f1,mean_f1"));
    assert!(out.join("train_config.json").is_file());
}

#[test]
fn singleton_search_space_is_chosen() {
    let tmp = TempDir::new().unwrap();
    let data = synth_small(tmp.path(), 20);
    let mut cfg = read_json(&hb_config(tmp.path(), &data));
    cfg["search"] = json!({"range_c1": [1e-5], "range_c2": [1e-3], "n_settings": 1});
    let cfg = write_run_config(tmp.path(), "single.json", cfg);
    let out = tmp.path().join("s");
    let o = ok(&["search", s(&cfg), "--out", s(&out)]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("c1=0.00001 c2=0.001"));
    let derived = out.join("train_config.json");
    let d = read_json(&derived);
    assert_eq!(d["training"]["l1"], json!(1e-5));
    assert_eq!(d["training"]["l2"], json!(1e-3));
    // the derived config is itself trainable
    ok(&["train", s(&derived), "--out", s(&tmp.path().join("m"))]);
}

fn primary_outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file() && p.file_name().unwrap() != "manifest.json")
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let data = synth_small(tmp.path(), 30);
    let cfg = hb_config(tmp.path(), &data);
    for cmd in ["train", "search"] {
        let a = tmp.path().join(format!("{cmd}-a"));
        let b = tmp.path().join(format!("{cmd}-b"));
        ok(&[cmd, s(&cfg), "--out", s(&a)]);
        ok(&[cmd, s(&cfg), "--threads", "2", "--out", s(&b)]);
        assert_eq!(primary_outputs(&a), primary_outputs(&b), "{cmd}");
    }
    let seeded = tmp.path().join("seeded");
    ok(&["train", s(&cfg), "--seed", "1", "--out", s(&seeded)]);
    assert_ne!(
        fs::read(seeded.join("model.ckpt")).unwrap(),
        fs::read(tmp.path().join("train-a/model.ckpt")).unwrap()
    );
}
