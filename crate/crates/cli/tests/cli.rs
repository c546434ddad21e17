use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lungtex::data::load_patches;
use lungtex::eval::{write_predictions, PredictionRecord};
use lungtex::kv::KvDoc;
use lungtex::ClassLabel;

fn lungtex(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lungtex"))
        .args(args)
        .env("SOURCE_DATE_EPOCH", "0")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = lungtex(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(path: &Path, text: &str) -> PathBuf {
    std::fs::write(path, text).unwrap();
    path.to_path_buf()
}

const SMALL_SYNTH: &str = "slices = 4\nheight = 100\nwidth = 100\ndisease_fraction = 0.06\nseed = 5\n";
const TINY_NET: &str = "conv_channels = 2\ndense_sizes = 4\nepochs = 1\nbatch_size = 32\n";

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    files
}

/// Synthetic dataset plus train/test patch stores.
fn prepared(root: &Path) -> (PathBuf, PathBuf) {
    let conf = write(&root.join("synth.conf"), SMALL_SYNTH);
    let ds = root.join("ds");
    let patches = root.join("patches");
    ok(&["synth", "--config", s(&conf), "--out", s(&ds)]);
    ok(&["extract", "--dataset", s(&ds), "--out", s(&patches), "--test-fraction", "0.5"]);
    (ds, patches)
}

#[test]
fn synth_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let conf = write(&t.path().join("synth.conf"), SMALL_SYNTH);
    for name in ["a", "b"] {
        ok(&["synth", "--config", s(&conf), "--out", s(&t.path().join(name))]);
    }
    let (a, b) = (tree(&t.path().join("a")), tree(&t.path().join("b")));
    assert!(a.contains_key(Path::new("manifest.csv")) && a.contains_key(Path::new("run.manifest")));
    assert_eq!(a, b);

    ok(&["synth", "--config", s(&conf), "--seed", "6", "--out", s(&t.path().join("c"))]);
    assert_ne!(a, tree(&t.path().join("c")));
}

#[test]
fn extract_splits_by_slice() {
    let t = tempfile::tempdir().unwrap();
    let (_, patches) = prepared(t.path());
    let train = load_patches(&patches.join("train")).unwrap();
    let test = load_patches(&patches.join("test")).unwrap();
    // 100x100 at grid 20: 25 cells per slice, two slices each side.
    assert_eq!((train.len(), test.len()), (50, 50));
    let ids = |v: &[lungtex::data::PatchSample]| {
        v.iter().map(|p| p.origin.slice_id.clone()).collect::<std::collections::BTreeSet<_>>()
    };
    assert!(ids(&train).is_disjoint(&ids(&test)));
}

#[test]
fn evaluating_the_truth_scores_perfectly() {
    let t = tempfile::tempdir().unwrap();
    let (_, patches) = prepared(t.path());
    let test = patches.join("test");
    let records: Vec<PredictionRecord> = load_patches(&test)
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(index, p)| {
            let mut scores = [0.0; 5];
            scores[ClassLabel::ALL.iter().position(|&c| c == p.label).unwrap()] = 1.0;
            PredictionRecord {
                index,
                origin: p.origin,
                predicted: p.label,
                scores,
            }
        })
        .collect();
    let preds = t.path().join("truth.csv");
    write_predictions(&preds, &records).unwrap();
    let out = t.path().join("eval");
    ok(&["evaluate", "--predictions", s(&preds), "--dataset", s(&test), "--out", s(&out)]);
    let report = KvDoc::load(out.join("report.kv")).unwrap();
    assert_eq!(report.parse_required::<f64>("accuracy").unwrap(), 1.0);
    assert_eq!(report.parse_required::<f64>("class_accuracy").unwrap(), 1.0);
    assert_eq!(report.parse_required::<u64>("total").unwrap(), records.len() as u64);
    assert!(out.join("roc.csv").is_file() && out.join("report.txt").is_file());

    // Predictions against the wrong store are rejected as a data error.
    let wrong = lungtex(&["evaluate", "--predictions", s(&preds), "--dataset", s(&patches.join("train")), "--out", s(&out)]);
    assert_eq!(wrong.status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(lungtex(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(lungtex(&["synth"]).status.code(), Some(1));
    assert_eq!(lungtex(&["--version"]).status.code(), Some(0));

    let missing = lungtex(&["extract", "--dataset", s(&t.path().join("absent")), "--out", s(&t.path().join("o"))]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("manifest.csv"));

    let bad_fraction = lungtex(&["extract", "--dataset", "x", "--out", "y", "--test-fraction", "1.5"]);
    assert_eq!(bad_fraction.status.code(), Some(1));

    let conf = write(&t.path().join("bad.conf"), "slices = 4\nslices = 5\n");
    assert_eq!(lungtex(&["synth", "--config", s(&conf), "--out", s(&t.path().join("d"))]).status.code(), Some(2));
}

#[test]
fn train_predict_and_model_checks() {
    let t = tempfile::tempdir().unwrap();
    let (ds, patches) = prepared(t.path());
    let (train, test) = (patches.join("train"), patches.join("test"));
    let net = write(&t.path().join("net.conf"), TINY_NET);
    let (det, sc) = (t.path().join("det"), t.path().join("sc"));
    ok(&["train-detector", "--dataset", s(&train), "--config", s(&net), "--out", s(&det)]);
    ok(&["train-scorer", "--dataset", s(&train), "--config", s(&net), "--out", s(&sc)]);
    let history = std::fs::read_to_string(det.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,loss\n1,"));
    let manifest = KvDoc::load(det.join("run.manifest")).unwrap();
    assert_eq!(manifest.raw("command"), Some("train-detector"));
    assert_eq!(manifest.raw("timestamp"), Some("0"));

    // Cascade, models in either order.
    let (p1, p2) = (t.path().join("p1.csv"), t.path().join("p2.csv"));
    ok(&["predict", "--model", s(&det), "--model", s(&sc), "--dataset", s(&test), "--out", s(&p1)]);
    ok(&["predict", "--model", s(&sc), "--model", s(&det), "--dataset", s(&test), "--out", s(&p2)]);
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert!(t.path().join("p1.csv.manifest").is_file());

    // A detector alone cannot name classes.
    let alone = lungtex(&["predict", "--model", s(&det), "--dataset", s(&test), "--out", s(&p1)]);
    assert_eq!(alone.status.code(), Some(1));
    let two_detectors = lungtex(&["predict", "--model", s(&det), "--model", s(&det), "--dataset", s(&test), "--out", s(&p1)]);
    assert_eq!(two_detectors.status.code(), Some(1));

    // A scorer config cannot train the detector head.
    let wrong_head = write(&t.path().join("wrong.conf"), "head = multiclass:4\n");
    let r = lungtex(&["train-detector", "--dataset", s(&train), "--config", s(&wrong_head), "--out", s(&t.path().join("x"))]);
    assert_eq!(r.status.code(), Some(2));

    // Future format versions are refused.
    let manifest_path = det.join("model.manifest");
    let text = std::fs::read_to_string(&manifest_path).unwrap();
    std::fs::write(&manifest_path, text.replace("format_version = 1", "format_version = 99")).unwrap();
    let r = lungtex(&["predict", "--model", s(&det), "--model", s(&sc), "--dataset", s(&test), "--out", s(&p1)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("unsupported format version 99"));

    // Heatmap network end to end.
    let hm = t.path().join("hm");
    let hm_conf = write(&t.path().join("hm.conf"), "encoder_channels = 2, 4\nepochs = 1\n");
    ok(&["train-heatmap", "--dataset", s(&train), "--config", s(&hm_conf), "--out", s(&hm)]);
    let out = t.path().join("heat");
    ok(&["heatmap", "--model", s(&hm), "--dataset", s(&ds), "--slice", "synth_0001", "--out", s(&out)]);
    let pgm = std::fs::read(out.join("heatmap.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n100 100\n255\n"));
    assert_eq!(pgm.len(), b"P5\n100 100\n255\n".len() + 100 * 100);
    assert!(out.join("mask.pgm").is_file());
    let r = lungtex(&["heatmap", "--model", s(&hm), "--dataset", s(&ds), "--slice", "nope", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(1));
    let r = lungtex(&["heatmap", "--model", s(&sc), "--dataset", s(&ds), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn forest_round_trip_through_the_cli() {
    let t = tempfile::tempdir().unwrap();
    let (_, patches) = prepared(t.path());
    let conf = write(&t.path().join("rf.conf"), "tree_count = 10\nseed = 3\n");
    let rf = t.path().join("rf");
    ok(&["train-rf", "--dataset", s(&patches.join("train")), "--config", s(&conf), "--out", s(&rf)]);
    assert!(std::fs::read_to_string(rf.join("history.csv")).unwrap().starts_with("trees,oob_error\n10,"));
    let preds = t.path().join("rf.csv");
    ok(&["predict", "--model", s(&rf), "--dataset", s(&patches.join("test")), "--out", s(&preds)]);
    let lines: Vec<String> = std::fs::read_to_string(&preds).unwrap().lines().map(String::from).collect();
    assert_eq!(lines.len(), 51);
    for line in &lines[1..] {
        let sum: f64 = line.split(',').skip(5).map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-9, "{line}");
    }
    let r = lungtex(&["train-rf", "--dataset", s(&patches.join("train")), "--epochs", "3", "--out", s(&rf)]);
    assert_eq!(r.status.code(), Some(1));
}
