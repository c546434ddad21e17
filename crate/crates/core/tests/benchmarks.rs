//! Fixed-seed synthetic benchmarks on the published reference configs.

use std::path::PathBuf;

use lungtex::data::{blob_patches, blobs_vs_stripes, extract_all, split_slices, synth_generate, PatchSample, SynthConfig};
use lungtex::kv::KvDoc;
use lungtex::model::{predict_samples, Head};
use lungtex::recipe::{forest_config_from_kv, localization_hits, train_forest, BlobTask, HeatmapRecipe, Role, TextureRecipe};

const TEST_FRACTION: f64 = 0.3;

fn config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference").join(name)
}

fn reference_split() -> (Vec<PatchSample>, Vec<PatchSample>) {
    let cfg = SynthConfig::from_kv(&KvDoc::load(config("synth.conf")).unwrap()).unwrap();
    let (train, test) = split_slices(synth_generate(&cfg).unwrap(), TEST_FRACTION).unwrap();
    (extract_all(&train).unwrap(), extract_all(&test).unwrap())
}

#[test]
fn detector_separates_blobs_from_stripes() {
    let data = blobs_vs_stripes(200, 0.5, 3);
    let mut recipe = TextureRecipe::load(Role::Detector, &config("detector.conf")).unwrap();
    recipe.run.epochs = 10;
    recipe.replication = 1;
    let (net, history) = recipe.train(&data).unwrap();
    assert!(history.last().unwrap() < history.first().unwrap(), "loss did not fall: {history:?}");
    let scores = predict_samples(&net, &data).unwrap();
    let correct = scores
        .iter()
        .zip(&data)
        .filter(|(s, p)| (s[0] > 0.5) == p.label.is_disease())
        .count();
    let accuracy = correct as f64 / data.len() as f64;
    assert!(accuracy >= 0.95, "training accuracy {accuracy}");
}

#[test]
fn reference_detector_flags_held_out_disease() {
    let (train, test) = reference_split();
    let recipe = TextureRecipe::load(Role::Detector, &config("detector.conf")).unwrap();
    assert_eq!(recipe.net.head, Head::Binary);
    let (net, history) = recipe.train(&train).unwrap();
    assert!(history.last().unwrap() < history.first().unwrap());
    let diseased: Vec<PatchSample> = test.into_iter().filter(|p| p.label.is_disease()).collect();
    assert!(!diseased.is_empty());
    let scores = predict_samples(&net, &diseased).unwrap();
    let flagged = scores.iter().filter(|s| s[0] > 0.5).count();
    let rate = flagged as f64 / diseased.len() as f64;
    assert!(rate >= 0.9, "{flagged}/{} held-out diseased patches scored above 0.5", diseased.len());
}

#[test]
fn heatmap_localizes_blobs_from_patch_labels() {
    let task = BlobTask::load(&config("blobs.conf")).unwrap();
    let recipe = HeatmapRecipe::load(&config("heatmap.conf")).unwrap();
    let train: Vec<PatchSample> = blob_patches(task.train_patches, task.noise, task.train_seed)
        .into_iter()
        .map(|b| b.sample)
        .collect();
    let (net, _) = recipe.train(&train).unwrap();
    let test = blob_patches(task.test_patches, task.noise, task.test_seed);
    let (hits, positives) = localization_hits(&net, &test).unwrap();
    assert!(positives > 0);
    assert!(hits as f64 >= 0.9 * positives as f64, "{hits}/{positives} blobs localized");
}

#[test]
fn forest_out_of_bag_beats_majority() {
    let (train, _) = reference_split();
    let cfg = forest_config_from_kv(&KvDoc::load(config("forest.conf")).unwrap()).unwrap();
    let forest = train_forest(&train, &cfg).unwrap();
    let healthy = train.iter().filter(|p| !p.label.is_disease()).count();
    let majority = healthy.max(train.len() - healthy) as f64 / train.len() as f64;
    let oob = forest.oob_accuracy.unwrap();
    assert!(oob > majority, "out-of-bag accuracy {oob} vs majority {majority}");
}
