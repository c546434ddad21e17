use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lungtex::data::{
    extract_slice_patches, grid_partition, load_dataset, load_patches, save_dataset, save_patches, split_slices,
    synth_generate, PatchSample, SynthConfig,
};
use lungtex::eval::{
    aggregate_heatmap, cascade_predict_batch, evaluate_predictions, mask_to_tensor, network_prediction,
    read_predictions, threshold_heatmap, write_pgm, write_predictions, write_report, CascadeModel, PredictionRecord,
};
use lungtex::features::forest::FOREST_MANIFEST;
use lungtex::features::{features_for_samples, load_forest, rf_predict, save_forest, FeatureConfig};
use lungtex::kv::KvDoc;
use lungtex::model::{load_model, predict_batch, predict_heatmaps, save_model, Head, LayerStack, MODEL_MANIFEST};
use lungtex::recipe::{forest_config_from_kv, train_forest, HeatmapRecipe, Role, TextureRecipe};
use lungtex::ClassLabel;

use crate::manifest::{RunManifest, RUN_MANIFEST};
use crate::{EvaluateArgs, ExtractArgs, HeatmapArgs, PredictArgs, SynthArgs, TrainArgs, UsageError};

const SYNTH_CONFIG: &str = "synth.conf";
const HISTORY: &str = "history.csv";

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<KvDoc> {
    match path {
        Some(p) => Ok(KvDoc::load(p)?),
        None => Ok(KvDoc::new()),
    }
}

/// Patch stores have no manifest of their own; name the index file in errors.
fn read_patches(dir: &Path) -> Result<Vec<PatchSample>> {
    load_patches(dir).with_context(|| format!("reading patch store {}", dir.display()))
}

fn history_csv(losses: &[f64]) -> String {
    let mut out = "epoch,loss\n".to_string();
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(out, "{},{l}", i + 1);
    }
    out
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = SynthConfig::from_kv(&load_config(a.config.as_deref())?)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let slices = synth_generate(&cfg)?;
    save_dataset(&a.out, &slices)?;
    cfg.to_kv().save(a.out.join(SYNTH_CONFIG))?;

    let mut m = RunManifest::new("synth");
    m.seed = Some(cfg.seed);
    m.config = a.config;
    m.outputs = vec!["manifest.csv".into(), "images/".into(), "masks/".into(), SYNTH_CONFIG.into()];
    m.save(&a.out.join(RUN_MANIFEST))?;
    eprintln!("wrote {} slices to {}", slices.len(), a.out.display());
    Ok(())
}

pub fn extract(a: ExtractArgs) -> Result<()> {
    if !(0.0..1.0).contains(&a.test_fraction) {
        return Err(usage(format!("--test-fraction {} is outside [0, 1)", a.test_fraction)));
    }
    let slices = load_dataset(&a.dataset)?;
    let (train, test) = split_slices(slices, a.test_fraction)?;
    let mut outputs = Vec::new();
    for (name, part) in [("train", &train), ("test", &test)] {
        if part.is_empty() {
            continue;
        }
        let patches: Vec<PatchSample> = lungtex::data::extract_all(part)?;
        let mut counts = [0usize; 5];
        for p in &patches {
            counts[ClassLabel::ALL.iter().position(|&c| c == p.label).expect("known label")] += 1;
        }
        save_patches(&a.out.join(name), &patches)?;
        let summary: Vec<String> = ClassLabel::ALL.iter().zip(counts).map(|(c, n)| format!("{} {n}", c.short())).collect();
        eprintln!("{name}: {} slices, {} patches ({})", part.len(), patches.len(), summary.join(", "));
        outputs.push(format!("{name}/"));
    }

    let mut m = RunManifest::new("extract");
    m.inputs = vec![a.dataset];
    m.outputs = outputs;
    std::fs::create_dir_all(&a.out)?;
    m.save(&a.out.join(RUN_MANIFEST))?;
    Ok(())
}

fn apply_overrides(run: &mut lungtex::model::TrainRunConfig, a: &TrainArgs) -> Result<()> {
    if let Some(s) = a.seed {
        run.seed = s;
    }
    if let Some(e) = a.epochs {
        if e == 0 {
            return Err(usage("--epochs must be at least 1"));
        }
        run.epochs = e;
    }
    if let Some(b) = a.batch_size {
        if b == 0 {
            return Err(usage("--batch-size must be at least 1"));
        }
        run.sgd.batch_size = b;
    }
    Ok(())
}

fn save_trained(
    command: &str,
    a: &TrainArgs,
    net: &LayerStack<f32>,
    mut meta: KvDoc,
    history: &[f64],
    seed: u64,
) -> Result<()> {
    meta.set("role", command.trim_start_matches("train-"));
    save_model(net, &a.out, &meta)?;
    write_file(&a.out.join(HISTORY), &history_csv(history))?;
    let mut m = RunManifest::new(command);
    m.seed = Some(seed);
    m.config = a.config.clone();
    m.inputs = vec![a.dataset.clone()];
    m.outputs = vec![MODEL_MANIFEST.into(), HISTORY.into()];
    m.save(&a.out.join(RUN_MANIFEST))?;
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        eprintln!("{command}: {} epochs, loss {first:.4} -> {last:.4}", history.len());
    }
    Ok(())
}

pub fn train_texture(role: Role, a: TrainArgs) -> Result<()> {
    let doc = load_config(a.config.as_deref())?;
    let mut recipe = TextureRecipe::from_kv(role, &doc)?;
    apply_overrides(&mut recipe.run, &a)?;
    let patches = read_patches(&a.dataset)?;
    let (net, history) = recipe.train(&patches)?;
    let mut meta = KvDoc::new();
    recipe.write_kv(&mut meta);
    save_trained(&format!("train-{}", role.name()), &a, &net, meta, &history, recipe.run.seed)
}

pub fn train_heatmap(a: TrainArgs) -> Result<()> {
    let doc = load_config(a.config.as_deref())?;
    let mut recipe = HeatmapRecipe::from_kv(&doc)?;
    apply_overrides(&mut recipe.run, &a)?;
    let patches = read_patches(&a.dataset)?;
    let (net, history) = recipe.train(&patches)?;
    let mut meta = KvDoc::new();
    recipe.write_kv(&mut meta);
    save_trained("train-heatmap", &a, &net, meta, &history, recipe.run.seed)
}

pub fn train_rf(a: TrainArgs) -> Result<()> {
    if a.epochs.is_some() || a.batch_size.is_some() {
        return Err(usage("--epochs and --batch-size do not apply to the random forest"));
    }
    let doc = load_config(a.config.as_deref())?;
    let mut cfg = forest_config_from_kv(&doc)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let patches = read_patches(&a.dataset)?;
    let forest = train_forest(&patches, &cfg)?;
    save_forest(&forest, &a.out)?;
    let oob_error = forest.oob_accuracy.map_or("nan".to_string(), |acc| (1.0 - acc).to_string());
    write_file(&a.out.join(HISTORY), &format!("trees,oob_error\n{},{oob_error}\n", forest.trees.len()))?;

    let mut m = RunManifest::new("train-rf");
    m.seed = Some(cfg.seed);
    m.config = a.config;
    m.inputs = vec![a.dataset];
    m.outputs = vec![FOREST_MANIFEST.into(), HISTORY.into()];
    m.save(&a.out.join(RUN_MANIFEST))?;
    eprintln!("train-rf: {} trees, out-of-bag error {oob_error}", forest.trees.len());
    Ok(())
}

enum Predictor {
    Cascade(CascadeModel),
    Net(LayerStack<f32>),
    Forest(lungtex::features::Forest),
}

fn is_forest(dir: &Path) -> bool {
    dir.join(FOREST_MANIFEST).is_file() && !dir.join(MODEL_MANIFEST).is_file()
}

fn load_predictor(models: &[PathBuf], threshold: f64) -> Result<Predictor> {
    match models {
        [one] if is_forest(one) => Ok(Predictor::Forest(load_forest(one)?)),
        [one] => {
            let (net, _) = load_model(one)?;
            match net.head {
                Head::Multiclass(5) => Ok(Predictor::Net(net)),
                h => Err(usage(format!(
                    "{} has a {h} head; predict with a 5-class model alone or with a detector and a scorer",
                    one.display()
                ))),
            }
        }
        [x, y] => {
            let (a, _) = load_model(x)?;
            let (b, _) = load_model(y)?;
            let (det, sc) = if a.head == Head::Binary { (a, b) } else { (b, a) };
            if det.head != Head::Binary || sc.head != Head::Multiclass(4) {
                return Err(usage("a cascade needs one binary detector and one 4-class scorer"));
            }
            if !(threshold > 0.0 && threshold < 1.0) {
                return Err(usage(format!("--threshold {threshold} is outside (0, 1)")));
            }
            Ok(Predictor::Cascade(CascadeModel::new(det, sc, threshold)?))
        }
        _ => Err(usage("give one --model, or two for the cascade")),
    }
}

fn predict_all(p: &Predictor, patches: &[PatchSample]) -> Result<Vec<(ClassLabel, [f64; 5])>> {
    let pixels: Vec<_> = patches.iter().map(|s| &s.pixels).collect();
    match p {
        Predictor::Cascade(m) => Ok(cascade_predict_batch(m, &pixels)?
            .into_iter()
            .map(|o| (o.label, o.class_scores()))
            .collect()),
        Predictor::Net(net) => predict_batch(net, &pixels)?
            .iter()
            .map(|row| Ok(network_prediction(net.head, row)?))
            .collect(),
        Predictor::Forest(f) => {
            let features = features_for_samples(patches, &FeatureConfig::default())?;
            features
                .iter()
                .map(|x| {
                    let probs = rf_predict(f, &x.values)?;
                    let mut s = [0.0; 5];
                    s.copy_from_slice(&probs);
                    let mut best = 0;
                    for k in 1..5 {
                        if s[k] > s[best] {
                            best = k;
                        }
                    }
                    Ok((ClassLabel::ALL[best], s))
                })
                .collect()
        }
    }
}

pub fn predict(a: PredictArgs) -> Result<()> {
    let predictor = load_predictor(&a.model, a.threshold)?;
    let patches = read_patches(&a.dataset)?;
    let records: Vec<PredictionRecord> = predict_all(&predictor, &patches)?
        .into_iter()
        .zip(&patches)
        .enumerate()
        .map(|(index, ((predicted, scores), p))| PredictionRecord {
            index,
            origin: p.origin.clone(),
            predicted,
            scores,
        })
        .collect();
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_predictions(&a.out, &records)?;

    let mut m = RunManifest::new("predict");
    m.inputs = a.model.iter().cloned().chain([a.dataset.clone()]).collect();
    m.outputs = vec![a.out.file_name().map_or(String::new(), |n| n.to_string_lossy().into_owned())];
    let mut name = a.out.clone().into_os_string();
    name.push(".manifest");
    m.save(Path::new(&name))?;
    eprintln!("predicted {} patches", records.len());
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let records = read_predictions(&a.predictions)?;
    let patches = read_patches(&a.dataset)?;
    if records.len() != patches.len() {
        bail!(
            "{} predictions for {} patches in {}",
            records.len(),
            patches.len(),
            a.dataset.display()
        );
    }
    let mut truth = Vec::with_capacity(patches.len());
    for (k, r) in records.iter().enumerate() {
        let p = patches
            .get(r.index)
            .with_context(|| format!("prediction row {k} refers to patch {}", r.index))?;
        if p.origin != r.origin {
            bail!(
                "prediction row {k} is for {}:{},{} but patch {} is {}:{},{}",
                r.origin.slice_id,
                r.origin.cell_row,
                r.origin.cell_col,
                r.index,
                p.origin.slice_id,
                p.origin.cell_row,
                p.origin.cell_col
            );
        }
        truth.push(p.label);
    }
    let predicted: Vec<ClassLabel> = records.iter().map(|r| r.predicted).collect();
    let scores: Vec<[f64; 5]> = records.iter().map(|r| r.scores).collect();
    let report = evaluate_predictions(&predicted, &truth)?.with_roc(&scores, &truth)?;
    write_report(&a.out, &report)?;

    let mut m = RunManifest::new("evaluate");
    m.inputs = vec![a.predictions, a.dataset];
    m.outputs = vec!["report.txt".into(), "report.kv".into(), "roc.csv".into()];
    m.save(&a.out.join(RUN_MANIFEST))?;
    eprintln!(
        "accuracy {:.4}, TPR {:.4}, TNR {:.4}, class-averaged F1 {:.4}",
        report.accuracy, report.tpr, report.tnr, report.f1_class_avg
    );
    Ok(())
}

pub fn heatmap(a: HeatmapArgs) -> Result<()> {
    if !(a.percentile > 0.0 && a.percentile < 100.0) {
        return Err(usage(format!("--percentile {} is outside (0, 100)", a.percentile)));
    }
    let (net, _) = load_model(&a.model)?;
    if net.heatmap_tap.is_none() {
        return Err(usage(format!("{} is not a heatmap network", a.model.display())));
    }
    let slices = load_dataset(&a.dataset)?;
    let slice = match &a.slice {
        Some(id) => slices
            .iter()
            .find(|s| &s.id == id)
            .ok_or_else(|| usage(format!("no slice {id:?} in {}", a.dataset.display())))?,
        None => slices.first().context("dataset has no slices")?,
    };
    let cells = grid_partition(slice)?;
    let patches = extract_slice_patches(slice)?;
    let maps = predict_heatmaps(&net, &patches.iter().map(|p| &p.pixels).collect::<Vec<_>>())?;
    let placed: Vec<_> = maps.into_iter().zip(cells).collect();
    let (h, w) = (slice.height(), slice.width());
    let map = aggregate_heatmap(&placed, h, w)?;
    let mask = mask_to_tensor(&threshold_heatmap(&map, a.percentile)?, h, w)?;

    std::fs::create_dir_all(&a.out)?;
    write_pgm(&a.out.join("heatmap.pgm"), &map)?;
    map.save(a.out.join("heatmap.ctxt"))?;
    write_pgm(&a.out.join("mask.pgm"), &mask)?;
    mask.save(a.out.join("mask.ctxt"))?;

    let mut m = RunManifest::new("heatmap");
    m.inputs = vec![a.model, a.dataset];
    m.outputs = ["heatmap.pgm", "heatmap.ctxt", "mask.pgm", "mask.ctxt"].map(String::from).to_vec();
    m.save(&a.out.join(RUN_MANIFEST))?;
    eprintln!("heatmap of slice {} ({h}x{w}) written to {}", slice.id, a.out.display());
    Ok(())
}
